"""Experiment configuration.

A config is a JSON object with four sections (``model``, ``data``, ``train``,
``domain``). Unknown keys are rejected so that a typo cannot silently turn one
ablation into another.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .errors import ConfigurationError

COMBINATION_MODES = ("none", "add", "sub")
NORM_SCOPES = ("instance", "batch")
VARIANTS = ("baseline", "frozen", "domino-add", "domino-sub")


@dataclass
class ModelConfig:
    num_classes: int = 4
    encoder_widths: list = field(default_factory=lambda: [16, 32, 64])
    decoder_widths: list = field(default_factory=lambda: [32, 16, 16])
    d_prompt: Optional[int] = None  # None -> same as domain.d_emb
    d_attn: int = 64
    domino_hidden: int = 64
    combination: str = "sub"
    domino_stages: Optional[list] = None  # None -> every decoder stage
    freeze_encoder: bool = False
    norm_scope: str = "instance"
    norm_epsilon: float = 1e-5

    def validate(self):
        if self.num_classes < 2:
            raise ConfigurationError("model.num_classes must be >= 2")
        for key in ("encoder_widths", "decoder_widths"):
            widths = getattr(self, key)
            if not widths or any(int(w) < 1 for w in widths):
                raise ConfigurationError(f"model.{key} must be a non-empty list of positive ints")
        if len(self.encoder_widths) != len(self.decoder_widths):
            raise ConfigurationError("model.decoder_widths must have one entry per encoder stage")
        for key in ("d_attn", "domino_hidden"):
            if getattr(self, key) < 1:
                raise ConfigurationError(f"model.{key} must be positive")
        if self.d_prompt is not None and self.d_prompt < 1:
            raise ConfigurationError("model.d_prompt must be positive")
        if self.combination not in COMBINATION_MODES:
            raise ConfigurationError(
                f"model.combination must be one of {COMBINATION_MODES}, got {self.combination!r}"
            )
        if self.norm_scope not in NORM_SCOPES:
            raise ConfigurationError(
                f"model.norm_scope must be one of {NORM_SCOPES}, got {self.norm_scope!r}"
            )
        if self.norm_epsilon <= 0:
            raise ConfigurationError("model.norm_epsilon must be positive")
        for s in self.stages_with_domino():
            if not 0 <= s < len(self.decoder_widths):
                raise ConfigurationError(f"model.domino_stages entry {s} out of range")

    def stages_with_domino(self):
        if self.domino_stages is None:
            return list(range(len(self.decoder_widths)))
        return sorted(set(int(s) for s in self.domino_stages))


@dataclass
class DataConfig:
    height: int = 64
    width: int = 64
    train_size: int = 512
    val_source_size: int = 64
    val_target_size: int = 64
    synthetic_size: int = 512
    base_seed: int = 0
    seed_stride: int = 100_000
    min_shapes: int = 2
    max_shapes: int = 5
    target_domains: list = field(default_factory=lambda: ["fog", "rain", "snow", "night"])
    synthetic_domains: Optional[list] = None  # None -> every non-target, non-clear domain
    allow_target_leakage: bool = False
    real_fraction: float = 1.0
    synthetic_jitter: int = 2
    # photometric augmentation of training draws (every variant alike)
    augment: bool = True
    jitter_brightness: float = 32 / 255
    jitter_contrast: list = field(default_factory=lambda: [0.5, 1.5])
    jitter_saturation: list = field(default_factory=lambda: [0.5, 1.5])
    jitter_prob: float = 0.5

    def validate(self, num_classes=None):
        from .data import DOMAIN_TRANSFORMS

        if self.height < 8 or self.width < 8:
            raise ConfigurationError("data.height and data.width must be >= 8")
        for key in ("train_size", "val_source_size", "val_target_size", "synthetic_size"):
            size = getattr(self, key)
            if size < 1:
                raise ConfigurationError(f"data.{key} must be positive")
            if size > self.seed_stride:
                raise ConfigurationError(
                    f"data.{key}={size} exceeds data.seed_stride={self.seed_stride}: seed ranges would overlap"
                )
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ConfigurationError("data.min_shapes/max_shapes must satisfy 1 <= min <= max")
        if not 0.0 <= self.real_fraction <= 1.0:
            raise ConfigurationError("data.real_fraction must lie in [0, 1]")
        if not self.target_domains:
            raise ConfigurationError("data.target_domains must be non-empty")
        for d in list(self.target_domains) + list(self.synthetic_domains or []):
            if d not in DOMAIN_TRANSFORMS:
                raise ConfigurationError(f"unknown domain_id {d!r} in data section")
        if "clear" in self.target_domains:
            raise ConfigurationError("data.target_domains must not contain 'clear'")
        if self.synthetic_jitter < 0:
            raise ConfigurationError("data.synthetic_jitter must be >= 0")
        if len(self.jitter_contrast) != 2 or len(self.jitter_saturation) != 2:
            raise ConfigurationError("data.jitter_contrast and data.jitter_saturation must be [lo, hi] pairs")
        from .data import PhotometricJitter

        PhotometricJitter.from_data_config(self)
        if not self.allow_target_leakage:
            leaked = set(self.synthetic_domains or []) & set(self.target_domains)
            if leaked:
                raise ConfigurationError(
                    f"data.synthetic_domains contains target domains {sorted(leaked)}; "
                    "set data.allow_target_leakage to opt in"
                )

    def resolved_synthetic_domains(self):
        from .data import DOMAIN_TRANSFORMS

        if self.synthetic_domains is not None:
            return list(self.synthetic_domains)
        excluded = {"clear"}
        if not self.allow_target_leakage:
            excluded |= set(self.target_domains)
        return [d for d in DOMAIN_TRANSFORMS if d not in excluded]


@dataclass
class TrainConfig:
    total_iters: int = 2000
    batch_size: int = 8
    base_lr: float = 1e-3
    weight_decay: float = 1e-3
    poly_power: float = 0.9
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    adam_eps: float = 1e-8
    seed: int = 0
    log_every: int = 50
    attest_every: int = 100
    eval_at_end: bool = True

    def validate(self):
        if self.total_iters < 0:
            raise ConfigurationError("train.total_iters must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("train.batch_size must be >= 1")
        if self.base_lr <= 0:
            raise ConfigurationError("train.base_lr must be positive")
        if self.weight_decay < 0:
            raise ConfigurationError("train.weight_decay must be non-negative")
        if self.poly_power <= 0:
            raise ConfigurationError("train.poly_power must be positive")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigurationError("train.betas must be two values in [0, 1)")
        if self.log_every < 1 or self.attest_every < 1:
            raise ConfigurationError("train.log_every and train.attest_every must be >= 1")


@dataclass
class DomainConfig:
    catalog_path: Optional[str] = None  # None -> built-in four-entry catalog
    temperature: float = 1.0
    d_emb: int = 32
    encoder_seed: int = 0

    def validate(self):
        if self.temperature <= 0:
            raise ConfigurationError("domain.temperature must be positive")
        if self.d_emb < 1:
            raise ConfigurationError("domain.d_emb must be positive")
        if self.catalog_path is not None and not Path(self.catalog_path).is_file():
            raise ConfigurationError(f"domain.catalog_path {self.catalog_path!r} does not exist")


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    domain: DomainConfig = field(default_factory=DomainConfig)

    def validate(self):
        self.model.validate()
        self.data.validate()
        self.train.validate()
        self.domain.validate()
        n_down = 2 ** len(self.model.encoder_widths)
        if self.data.height % n_down or self.data.width % n_down:
            raise ConfigurationError(
                f"data.height/width must be divisible by {n_down} for {len(self.model.encoder_widths)} encoder stages"
            )
        return self

    @property
    def d_prompt(self):
        return self.model.d_prompt if self.model.d_prompt is not None else self.domain.d_emb

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw):
        if not isinstance(raw, dict):
            raise ConfigurationError("config root must be a JSON object")
        sections = {}
        for f in dataclasses.fields(cls):
            sections[f.name] = f.default_factory
        unknown = set(raw) - set(sections)
        if unknown:
            raise ConfigurationError(f"unknown config key {sorted(unknown)[0]!r}")
        built = {}
        for name, factory in sections.items():
            built[name] = _build_section(factory, raw.get(name, {}), name)
        return cls(**built).validate()

    def with_overrides(self, **sections):
        """Copy with per-section field overrides, e.g. ``with_overrides(model={"combination": "add"})``."""
        raw = self.to_dict()
        for section, values in sections.items():
            if section not in raw:
                raise ConfigurationError(f"unknown config key {section!r}")
            raw[section].update(copy.deepcopy(values))
        return ExperimentConfig.from_dict(raw)


def _build_section(section_cls, raw, name):
    if not isinstance(raw, dict):
        raise ConfigurationError(f"config section {name!r} must be an object")
    allowed = {f.name for f in dataclasses.fields(section_cls)}
    for key in raw:
        if key not in allowed:
            raise ConfigurationError(f"unknown config key '{name}.{key}'")
    try:
        return section_cls(**copy.deepcopy(raw))
    except TypeError as exc:  # pragma: no cover - guarded by the key check above
        raise ConfigurationError(f"bad section {name!r}: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file {str(path)!r} does not exist")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {str(path)!r} is not valid JSON: {exc}") from exc
    # a relative catalog path is resolved against the config file's directory
    domain = raw.get("domain") if isinstance(raw, dict) else None
    if isinstance(domain, dict) and isinstance(domain.get("catalog_path"), str):
        catalog = Path(domain["catalog_path"])
        if not catalog.is_absolute():
            domain["catalog_path"] = str(path.parent / catalog)
    return ExperimentConfig.from_dict(raw)


def variant_overrides(variant: str) -> dict:
    """Model-section settings for the four ablation rows (frozen, baseline, add, sub)."""
    presets = {
        "baseline": {"combination": "none", "domino_stages": [], "freeze_encoder": False},
        "frozen": {"combination": "none", "domino_stages": [], "freeze_encoder": True},
        "domino-add": {"combination": "add", "domino_stages": None, "freeze_encoder": False},
        "domino-sub": {"combination": "sub", "domino_stages": None, "freeze_encoder": False},
    }
    if variant not in presets:
        raise ConfigurationError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return presets[variant]


def variant_of(model: ModelConfig) -> str:
    """Inverse of :func:`variant_overrides` for report tables."""
    if model.freeze_encoder:
        return "frozen"
    if model.combination == "add":
        return "domino-add"
    if model.combination == "sub":
        return "domino-sub"
    return "baseline"


def default_data_root():
    return os.environ.get("DOMINO_DATA_ROOT")
