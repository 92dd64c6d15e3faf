"""Domain-adaptive normalization (Domino) and prompt/domain combination.

Features are standardised per channel, then re-scaled and shifted by
per-channel parameters that an MLP predicts from the domain embedding:

    f_adp = (f - mean_f) / (std_f + eps) * scale(W) + shift(W)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .errors import ConfigurationError, ContractViolation


@dataclass
class FeatureStats:
    mean: torch.Tensor
    std: torch.Tensor


@dataclass
class ModulationParams:
    scale: torch.Tensor
    shift: torch.Tensor


def standardize(f: torch.Tensor, epsilon: float = 1e-5, scope: str = "instance"):
    """Zero-mean, unit-std per channel.

    ``f`` is (C, H, W) or (N, C, H, W). ``scope="instance"`` pools over spatial
    positions of each sample; ``"batch"`` also pools over the batch. The std
    is the population std and ``epsilon`` is added to it, so constant channels
    map to zeros.
    """
    squeeze = f.dim() == 3
    if squeeze:
        f = f.unsqueeze(0)
    if f.dim() != 4:
        raise ContractViolation(f"feature map must be 3-D or 4-D, got shape {tuple(f.shape)}")
    if scope == "instance":
        dims = (2, 3)
    elif scope == "batch":
        dims = (0, 2, 3)
    else:
        raise ConfigurationError(f"unknown norm scope {scope!r}")
    mean = f.mean(dim=dims, keepdim=True)
    std = (f - mean).pow(2).mean(dim=dims, keepdim=True).sqrt()
    out = (f - mean) / (std + epsilon)
    stats = FeatureStats(mean=mean[..., 0, 0], std=std[..., 0, 0])
    if squeeze:
        out, stats = out[0], FeatureStats(stats.mean[0], stats.std[0])
    return out, stats


class DominoLayer(nn.Module):
    """Two-layer MLP from the domain embedding to per-channel (scale, shift).

    The output layer starts at zero weights with bias (1, ..., 1 | 0, ..., 0),
    so a fresh layer is plain standardisation.
    """

    def __init__(self, d_emb: int, channels: int, hidden: int = 64, epsilon: float = 1e-5,
                 scope: str = "instance"):
        super().__init__()
        if d_emb < 1 or channels < 1 or hidden < 1:
            raise ConfigurationError("DominoLayer dimensions must be positive")
        self.d_emb = d_emb
        self.channels = channels
        self.epsilon = epsilon
        self.scope = scope
        self.mlp = nn.Sequential(nn.Linear(d_emb, hidden), nn.SiLU(), nn.Linear(hidden, 2 * channels))
        self.reset_modulation()

    def reset_modulation(self):
        out = self.mlp[-1]
        with torch.no_grad():
            out.weight.zero_()
            out.bias.zero_()
            out.bias[: self.channels] = 1.0

    def modulation(self, w: torch.Tensor) -> ModulationParams:
        if w.shape[-1] != self.d_emb:
            raise ConfigurationError(f"domain embedding has dimension {w.shape[-1]}, layer expects {self.d_emb}")
        params = self.mlp(w)
        return ModulationParams(scale=params[..., : self.channels], shift=params[..., self.channels:])

    def forward(self, f: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        if f.shape[-3] != self.channels:
            raise ConfigurationError(f"feature map has {f.shape[-3]} channels, layer expects {self.channels}")
        normed, _ = standardize(f, self.epsilon, self.scope)
        mod = self.modulation(w)
        return normed * mod.scale[..., :, None, None] + mod.shift[..., :, None, None]


def modulation_params(layer: DominoLayer, w: torch.Tensor) -> ModulationParams:
    return layer.modulation(w)


def apply_domino(layer: DominoLayer, f: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    return layer(f, w)


def combine_prompt(prompt_embeddings: torch.Tensor, w: torch.Tensor, mode: str,
                   projector: Optional[nn.Module] = None) -> torch.Tensor:
    """Add (mode "add") or subtract ("sub") the projected domain embedding from every prompt.

    ``prompt_embeddings`` is (K, D) or (N, K, D); ``w`` is (D_emb,) or (N, D_emb).
    A batched ``w`` yields a (N, K, D) result. ``projector=None`` means identity.
    """
    if mode not in ("add", "sub"):
        raise ConfigurationError(f"unknown combination mode {mode!r}; expected 'add' or 'sub'")
    p = w if projector is None else projector(w)
    if p.shape[-1] != prompt_embeddings.shape[-1]:
        raise ConfigurationError(
            f"projected domain embedding has dimension {p.shape[-1]}, prompts have {prompt_embeddings.shape[-1]}"
        )
    p = p.unsqueeze(-2)  # broadcast over the prompt axis
    return prompt_embeddings + p if mode == "add" else prompt_embeddings - p
