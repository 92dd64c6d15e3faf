"""Desk-scale segmentation network with prompt cross-attention and Domino decoder.

Pipeline: strided conv encoder -> class prompts (trainable table + linear text
adapter, optionally combined with the domain embedding) -> single-head
cross-attention between bottleneck tokens and prompts -> upsampling decoder
with an optional Domino layer per stage -> 1x1 classifier.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .adaptive_norm import DominoLayer, combine_prompt
from .errors import ConfigurationError, ContractViolation


class DecoderStage(nn.Module):
    def __init__(self, in_ch, out_ch, d_emb=None, hidden=64, epsilon=1e-5, scope="instance"):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1)
        self.domino = DominoLayer(d_emb, out_ch, hidden, epsilon, scope) if d_emb is not None else None

    def forward(self, x, w=None):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = self.conv(x)
        if self.domino is not None:
            x = self.domino(x, w)
        return F.silu(x)


class SegmentationModel(nn.Module):
    def __init__(self, model_cfg, d_emb: int):
        super().__init__()
        model_cfg.validate()
        self.num_classes = model_cfg.num_classes
        self.combination = model_cfg.combination
        self.d_emb = d_emb
        self.d_prompt = model_cfg.d_prompt if model_cfg.d_prompt is not None else d_emb
        self.d_attn = model_cfg.d_attn
        self.domino_stages = model_cfg.stages_with_domino()

        enc_layers = []
        c_in = 3
        for width in model_cfg.encoder_widths:
            enc_layers += [nn.Conv2d(c_in, width, kernel_size=3, stride=2, padding=1), nn.SiLU()]
            c_in = width
        self.encoder = nn.Sequential(*enc_layers)
        c_b = c_in

        self.prompt_table = nn.Parameter(torch.randn(self.num_classes, self.d_prompt))
        self.text_adapter = nn.Linear(self.d_prompt, self.d_prompt)
        self.projector = None if self.d_prompt == d_emb else nn.Linear(d_emb, self.d_prompt, bias=False)

        self.q_proj = nn.Linear(c_b, self.d_attn)
        self.k_proj = nn.Linear(self.d_prompt, self.d_attn)
        self.v_proj = nn.Linear(self.d_prompt, self.d_attn)
        self.out_proj = nn.Linear(self.d_attn, c_b)

        stages = []
        c_in = c_b + self.num_classes
        for i, width in enumerate(model_cfg.decoder_widths):
            use = i in self.domino_stages
            stages.append(
                DecoderStage(c_in, width, d_emb if use else None, model_cfg.domino_hidden,
                             model_cfg.norm_epsilon, model_cfg.norm_scope)
            )
            c_in = width
        self.decoder = nn.ModuleList(stages)
        self.head = nn.Conv2d(c_in, self.num_classes, kernel_size=1)

        if model_cfg.freeze_encoder:
            self.encoder.requires_grad_(False)

    @property
    def requires_domain_embedding(self):
        return self.combination != "none" or bool(self.domino_stages)

    def prompts(self, w: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Class prompts after the text adapter and (if enabled) domain combination.

        Returns (K, D) without combination, (N, K, D) with a batched ``w``.
        """
        e = self.text_adapter(self.prompt_table)
        if self.combination == "none":
            return e
        return combine_prompt(e, w, self.combination, self.projector)

    def cross_attention(self, features: torch.Tensor, prompts: torch.Tensor, class_ids=None):
        """Attend from bottleneck tokens to class prompts.

        ``features``: (N, C, H, W); ``prompts``: (K, D) or (N, K, D) listed in
        ``class_ids`` order (default 0..K-1). Returns the features with the
        attention readout added and the K attention maps (class-id order)
        appended as channels, plus the maps themselves, (N, K, H, W).
        """
        n, c, h, w = features.shape
        if prompts.dim() == 2:
            prompts = prompts.unsqueeze(0).expand(n, -1, -1)
        k_cls = prompts.shape[1]
        if class_ids is not None:
            order = torch.as_tensor(np.argsort(np.asarray(class_ids), kind="stable"))
            prompts = prompts[:, order]
        tokens = features.flatten(2).transpose(1, 2)  # (N, HW, C)
        q = self.q_proj(tokens)
        k = self.k_proj(prompts)
        v = self.v_proj(prompts)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(self.d_attn), dim=-1)  # (N, HW, K)
        out = tokens + self.out_proj(attn @ v)
        out = out.transpose(1, 2).reshape(n, c, h, w)
        maps = attn.transpose(1, 2).reshape(n, k_cls, h, w)
        return torch.cat([out, maps], dim=1), maps

    def forward(self, image: torch.Tensor, w: Optional[torch.Tensor] = None, return_attention: bool = False):
        if image.dim() == 3:
            image = image.unsqueeze(0)
        if self.requires_domain_embedding:
            if w is None:
                raise ContractViolation("this model uses the domain embedding; W must be provided")
            if w.dim() == 1:
                w = w.unsqueeze(0).expand(image.shape[0], -1)
        h, wd = image.shape[-2:]
        feats = self.encoder(image - 0.5)
        fused, maps = self.cross_attention(feats, self.prompts(w))
        x = fused
        for stage in self.decoder:
            x = stage(x, w)
        logits = self.head(x)
        if logits.shape[-2:] != (h, wd):
            raise ContractViolation(f"input size {(h, wd)} is not divisible by the encoder stride")
        return (logits, maps) if return_attention else logits

    def encoder_parameters(self):
        return list(self.encoder.parameters())


def build_model(config, seed: int) -> SegmentationModel:
    """Construct a model deterministically from ``seed`` without touching the global torch RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        try:
            return SegmentationModel(config.model, config.domain.d_emb)
        except ConfigurationError:
            raise
        except (ValueError, RuntimeError) as exc:
            raise ConfigurationError(f"invalid model configuration: {exc}") from exc


def images_to_tensor(images) -> torch.Tensor:
    """Stack HWC float images into an (N, 3, H, W) float32 tensor."""
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))
