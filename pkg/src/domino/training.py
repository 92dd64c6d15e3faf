"""Optimisation protocol: weighted cross-entropy, AdamW, poly learning-rate decay."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import serialize
from .data import MixSpec, PhotometricJitter, build_dataset, mixing_indices, photometric_jitter
from .domain_embedding import DEFAULT_CATALOG, DomainEmbedder, StatisticalEncoder, load_catalog
from .errors import ConfigurationError, ContractViolation, NonFiniteLossError
from .evaluation import confusion_for_dataset, cross_domain_report
from .model import build_model, images_to_tensor

log = logging.getLogger(__name__)

WEIGHT_CLAMP = (0.1, 10.0)


def poly_lr(schedule, t: int) -> float:
    """``base_lr * (1 - t / total_iters) ** poly_power``; exactly 0 at the end."""
    if schedule.total_iters < 1:
        raise ContractViolation("poly schedule needs total_iters >= 1")
    if not 0 <= t <= schedule.total_iters:
        raise ContractViolation(f"iteration {t} outside [0, {schedule.total_iters}]")
    if t == 0:
        return float(schedule.base_lr)
    return float(schedule.base_lr * (1.0 - t / schedule.total_iters) ** schedule.poly_power)


def class_weights_from_counts(counts) -> np.ndarray:
    """Inverse pixel frequency, clamped to [0.1, 10], then normalised to mean 1."""
    counts = np.asarray(counts, dtype=np.float64)
    missing = np.flatnonzero(counts <= 0)
    if missing.size:
        raise ConfigurationError(f"class {int(missing[0])} never occurs in the training set")
    freq = counts / counts.sum()
    raw = np.clip(1.0 / freq, *WEIGHT_CLAMP)
    return raw / raw.mean()


def class_weights(train_set, num_classes: int) -> np.ndarray:
    if not len(train_set):
        raise ConfigurationError("training set is empty")
    counts = np.zeros(num_classes, dtype=np.int64)
    for scene in train_set:
        counts += np.bincount(scene.labels.ravel(), minlength=num_classes)[:num_classes]
    return class_weights_from_counts(counts)


def weighted_cross_entropy(logits: torch.Tensor, labels: torch.Tensor, weights) -> torch.Tensor:
    """Mean over pixels of ``w[label] * -log softmax(logits)[label]``.

    ``weights`` are mean-normalised here, so any positive rescaling of them
    leaves the loss unchanged.
    """
    if logits.dim() == 3:
        logits, labels = logits.unsqueeze(0), labels.unsqueeze(0)
    k = logits.shape[1]
    labels = labels.long()
    if labels.shape != (logits.shape[0],) + tuple(logits.shape[2:]):
        raise ContractViolation(f"label shape {tuple(labels.shape)} does not match logits {tuple(logits.shape)}")
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise ContractViolation(f"label outside [0, {k})")
    w = torch.as_tensor(weights, dtype=logits.dtype)
    if w.shape != (k,) or not torch.all(w > 0):
        raise ContractViolation("class weights must be K positive values")
    w = w / w.mean()
    nll = F.cross_entropy(logits, labels, reduction="none")
    return (w[labels] * nll).mean()


def make_optimizer(model, schedule) -> torch.optim.Optimizer:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.AdamW(
        params,
        lr=schedule.base_lr,
        betas=tuple(schedule.betas),
        eps=schedule.adam_eps,
        weight_decay=schedule.weight_decay,
    )


def _diagnostic_state(model, t, lr, loss):
    return {
        "iter": t,
        "lr": lr,
        "loss": repr(float(loss.detach())),
        "param_norms": {n: float(p.detach().norm()) for n, p in model.named_parameters()},
        "param_finite": {n: bool(torch.isfinite(p).all()) for n, p in model.named_parameters()},
    }


def train_step(model, optimizer, batch, schedule, t: int, weights) -> float:
    """One forward/backward/AdamW update at ``lr = poly_lr(schedule, t)``.

    ``batch`` is ``(images, labels, w)`` with ``w`` None for models that do not
    use the domain embedding. Weight decay is decoupled: parameters are scaled
    by ``1 - lr * weight_decay`` independently of the gradient.
    """
    if not 0 <= t < schedule.total_iters:
        raise ContractViolation(f"train_step at t={t} outside [0, {schedule.total_iters})")
    images, labels, w = batch
    lr = poly_lr(schedule, t)
    for group in optimizer.param_groups:
        group["lr"] = lr
    model.train()
    logits = model(images, w)
    loss = weighted_cross_entropy(logits, labels, weights)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite loss at iteration {t}", _diagnostic_state(model, t, lr, loss))
    optimizer.zero_grad(set_to_none=False)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def encoder_digest(model) -> str:
    h = hashlib.sha256()
    for p in model.encoder_parameters():
        h.update(p.detach().cpu().numpy().astype("<f4").tobytes())
    return h.hexdigest()


def make_embedder(config) -> DomainEmbedder:
    d = config.domain
    catalog = load_catalog(d.catalog_path) if d.catalog_path else list(DEFAULT_CATALOG)
    enc = StatisticalEncoder(d_emb=d.d_emb, seed=d.encoder_seed, height=config.data.height, width=config.data.width)
    return DomainEmbedder(catalog, enc, d.temperature)


@dataclass
class _Pool:
    images: torch.Tensor
    labels: torch.Tensor
    w: torch.Tensor
    raw: list

    @classmethod
    def build(cls, scenes, embedder):
        images = images_to_tensor([s.image for s in scenes])
        labels = torch.from_numpy(np.stack([s.labels for s in scenes]).astype(np.int64))
        w = torch.from_numpy(embedder.embed_many([s.image for s in scenes]).astype(np.float32))
        return cls(images, labels, w, [s.image for s in scenes])


@dataclass
class TrainResult:
    model: torch.nn.Module
    records: list
    checkpoint: bytes
    report: Optional[object] = None
    out_dir: Optional[Path] = None
    paths: dict = field(default_factory=dict)


def sampler_seed(seed: int) -> int:
    return int(np.random.SeedSequence([int(seed), 1]).generate_state(1)[0])


def train_loop(config, seed: Optional[int] = None, out_dir=None) -> TrainResult:
    """Train one model end to end and (optionally) write its run directory.

    Writes ``checkpoint.bin``, ``metrics.jsonl`` and, with ``train.eval_at_end``,
    ``report.json`` into ``out_dir``. Everything is a function of
    ``(config, seed)``.
    """
    seed = config.train.seed if seed is None else seed
    sched = config.train
    out_dir = Path(out_dir) if out_dir is not None else None
    embedder = make_embedder(config)
    model = build_model(config, seed)
    mix = MixSpec(config.data.real_fraction)

    real = build_dataset("train_source", config) if mix.real_fraction > 0 else []
    synthetic = build_dataset("train_synthetic", config) if mix.real_fraction < 1 else []
    weights = class_weights(list(real) + list(synthetic), config.model.num_classes)
    pools = {True: _Pool.build(real, embedder) if real else None,
             False: _Pool.build(synthetic, embedder) if synthetic else None}

    records = []
    frozen = config.model.freeze_encoder
    initial_digest = encoder_digest(model) if frozen else None

    def attest(t):
        digest = encoder_digest(model)
        if digest != initial_digest:
            raise RuntimeError(f"frozen encoder parameters changed by iteration {t}")
        records.append({"iter": t, "frozen_attestation": {"encoder_sha256": digest, "unchanged": True}})

    loss = None
    if sched.total_iters > 0:
        optimizer = make_optimizer(model, sched)
        draws = mixing_indices(len(real), len(synthetic), mix, sampler_seed(seed), sched.total_iters * sched.batch_size)
        use_w = model.requires_domain_embedding
        jitter = PhotometricJitter.from_data_config(config.data) if config.data.augment else None
        for t in range(sched.total_iters):
            chunk = draws[t * sched.batch_size:(t + 1) * sched.batch_size]
            augment = (jitter, embedder, seed, t) if jitter is not None else None
            batch = _gather(pools, chunk, use_w, augment)
            loss = train_step(model, optimizer, batch, sched, t, weights)
            step = t + 1
            if step % sched.log_every == 0 or step == sched.total_iters or t == 0:
                records.append({"iter": step, "loss": loss, "lr": poly_lr(sched, t)})
            if frozen and step % sched.attest_every == 0:
                attest(step)
    if frozen:
        attest(sched.total_iters)

    report = None
    if sched.eval_at_end:
        src = confusion_for_dataset(model, build_dataset("val_source", config), embedder)
        tgt = confusion_for_dataset(model, build_dataset("val_target", config), embedder)
        report = cross_domain_report(src, tgt)
        records.append({
            "iter": sched.total_iters,
            "loss": loss,
            "lr": 0.0,
            "split_metrics": {
                "val_source_miou": report.source_miou,
                "val_target_miou": report.target_miou,
                "miou_percent": report.miou_percent,
            },
        })

    extra = {"class_weights": [float(x) for x in weights], "variant_mix": mix.real_fraction}
    blob = serialize(model, config, seed, extra)
    result = TrainResult(model=model, records=records, checkpoint=blob, report=report, out_dir=out_dir)
    if out_dir is not None:
        result.paths = write_run(out_dir, result, config)
    return result


def _gather(pools, chunk, use_w, augment=None):
    """Stack one batch in draw order. ``augment`` is ``(jitter, embedder, seed, t)`` or None."""
    parts_x, parts_y, parts_w = [], [], []
    for j, (is_real, i) in enumerate(chunk):
        pool = pools[is_real]
        parts_y.append(pool.labels[i])
        if augment is None:
            parts_x.append(pool.images[i])
            parts_w.append(pool.w[i])
            continue
        jitter, embedder, seed, t = augment
        rng = np.random.default_rng([seed, 2, t, j])
        image = photometric_jitter(pool.raw[i], rng, jitter)
        parts_x.append(torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))))
        if use_w:
            # W is extracted from the image the model actually sees
            parts_w.append(torch.from_numpy(embedder(image)[1].astype(np.float32)))
    x = torch.stack(parts_x)
    y = torch.stack(parts_y)
    w = torch.stack(parts_w) if use_w else None
    return x, y, w


def write_run(out_dir, result: TrainResult, config) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"checkpoint": out_dir / "checkpoint.bin", "metrics": out_dir / "metrics.jsonl",
             "config": out_dir / "config.json"}
    paths["checkpoint"].write_bytes(result.checkpoint)
    with paths["metrics"].open("w") as fh:
        for rec in result.records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    paths["config"].write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    if result.report is not None:
        paths["report"] = out_dir / "report.json"
        paths["report"].write_text(result.report.to_json() + "\n")
    return paths
