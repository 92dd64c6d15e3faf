"""Automatic domain-embedding extraction.

A catalog of textual domain descriptions is encoded once; an image is scored
against every description by cosine similarity, the scores are turned into
weights with a softmax, and the domain embedding is the weighted sum of the
description embeddings.

The encoders are pluggable (anything satisfying :class:`EncoderPair`). The
bundled :class:`StatisticalEncoder` is a deterministic stand-in for a
vision-language model: it describes an image by a handful of global
photometric statistics, so cosine similarity between an image and a domain
description is meaningful on the procedural benchmark.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import ConfigurationError, DegenerateInputError


@dataclass(frozen=True)
class DomainDescription:
    id: str
    text: str


DEFAULT_CATALOG = (
    DomainDescription("clear", "a photo taken on a clear sunny day"),
    DomainDescription("fog", "a photo taken on a foggy day"),
    DomainDescription("rain", "a photo taken on a rainy day"),
    DomainDescription("night", "a photo taken at night"),
)


class EncoderPair(Protocol):
    d_emb: int

    def text_encode(self, text: str) -> np.ndarray: ...

    def image_encode(self, image: np.ndarray) -> np.ndarray: ...


def validate_catalog(catalog: Sequence[DomainDescription]):
    if not catalog:
        raise ConfigurationError("domain catalog is empty")
    seen = set()
    for desc in catalog:
        if not desc.text:
            raise ConfigurationError(f"domain description {desc.id!r} has empty text")
        if desc.id in seen:
            raise ConfigurationError(f"duplicate domain description id {desc.id!r}")
        seen.add(desc.id)


def load_catalog(path) -> list:
    """Read a JSON array of ``{"id": ..., "text": ...}``; file order is weight order."""
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"catalog file {str(path)!r} does not exist")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"catalog {str(path)!r} is not valid JSON: {exc}") from exc
    if not isinstance(raw, list):
        raise ConfigurationError("catalog must be a JSON array")
    catalog = []
    for i, entry in enumerate(raw):
        if not isinstance(entry, dict) or set(entry) != {"id", "text"}:
            raise ConfigurationError(f"catalog entry {i} must have exactly the keys 'id' and 'text'")
        catalog.append(DomainDescription(str(entry["id"]), str(entry["text"])))
    validate_catalog(catalog)
    return catalog


def save_catalog(path, catalog: Sequence[DomainDescription]):
    payload = [{"id": d.id, "text": d.text} for d in catalog]
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def encode_descriptions(catalog: Sequence[DomainDescription], enc: EncoderPair) -> list:
    validate_catalog(catalog)
    out = []
    for desc in catalog:
        vec = np.asarray(enc.text_encode(desc.text), dtype=np.float64)
        if vec.shape != (enc.d_emb,) or not np.all(np.isfinite(vec)):
            raise ConfigurationError(f"text encoder returned an invalid embedding for {desc.id!r}")
        out.append(vec)
    return out


def domain_weights(image_embedding, description_embeddings, temperature: float = 1.0) -> np.ndarray:
    """Softmax over descriptions of cos(image, description) / temperature."""
    if temperature <= 0:
        raise ConfigurationError("temperature must be positive")
    image = np.asarray(image_embedding, dtype=np.float64)
    descs = np.atleast_2d(np.asarray(description_embeddings, dtype=np.float64))
    if descs.shape[1] != image.shape[0]:
        raise ConfigurationError(
            f"embedding dimension mismatch: image {image.shape[0]} vs descriptions {descs.shape[1]}"
        )
    image_norm = np.linalg.norm(image)
    desc_norms = np.linalg.norm(descs, axis=1)
    if image_norm == 0 or not np.isfinite(image_norm):
        raise DegenerateInputError("image embedding has zero (or non-finite) norm; cosine undefined")
    if np.any(desc_norms == 0) or not np.all(np.isfinite(desc_norms)):
        raise DegenerateInputError("a description embedding has zero (or non-finite) norm; cosine undefined")
    cos = (descs @ image) / (desc_norms * image_norm)
    z = cos / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def extract_domain_embedding(image, catalog, enc: EncoderPair, temperature: float = 1.0):
    """Return ``(alpha, W)`` for one image, with ``W = sum_i alpha_i d_i``."""
    descs = encode_descriptions(catalog, enc)
    return _weighted(np.asarray(enc.image_encode(image), dtype=np.float64), descs, temperature)


def _weighted(image_embedding, descs, temperature):
    alpha = domain_weights(image_embedding, descs, temperature)
    w = np.zeros_like(descs[0])
    for a, d in zip(alpha, descs):
        w = w + a * d
    return alpha, w


class DomainEmbedder:
    """Catalog bound to an encoder; description embeddings are computed once."""

    def __init__(self, catalog, enc: EncoderPair, temperature: float = 1.0):
        self.catalog = list(catalog)
        self.enc = enc
        self.temperature = temperature
        self.description_embeddings = encode_descriptions(self.catalog, enc)

    @property
    def d_emb(self):
        return self.enc.d_emb

    def __call__(self, image):
        return _weighted(np.asarray(self.enc.image_encode(image), dtype=np.float64),
                         self.description_embeddings, self.temperature)

    def embed_many(self, images) -> np.ndarray:
        return np.stack([self(img)[1] for img in images]) if len(images) else np.zeros((0, self.d_emb))


# Statistical stand-in encoder

FEATURE_NAMES = (
    "mean_luminance",
    "luminance_std",
    "mean_gradient",
    "high_freq_fraction",
    "mean_r",
    "mean_g",
    "mean_b",
)

DOMAIN_KEYWORDS = {
    "clear": ("clear", "sunny", "cloudless"),
    "fog": ("fog", "foggy", "mist", "misty"),
    "rain": ("rain", "rainy", "raining", "wet"),
    "snow": ("snow", "snowy", "snowing"),
    "night": ("night", "nighttime", "dark"),
    "dusk": ("dusk", "sunset"),
    "overcast": ("overcast", "cloudy"),
    "glare": ("glare", "glaring"),
    "haze": ("haze", "hazy"),
    "sensor_noise": ("sensor_noise", "noise", "noisy", "grainy"),
    "twilight": ("twilight",),
}

_HIGH_FREQ_CUTOFF = 0.25  # cycles / pixel
_REFERENCE_SEED_BASE = 900_000_000


def image_statistics(image) -> np.ndarray:
    """Global statistics of an HWC image, in FEATURE_NAMES order."""
    from .data import luminance

    x = np.asarray(image, dtype=np.float64)
    lum = luminance(x)
    gy = np.diff(lum, axis=0)[:, :-1]
    gx = np.diff(lum, axis=1)[:-1, :]
    grad = np.sqrt(gx**2 + gy**2).mean() if gx.size else 0.0
    centred = lum - lum.mean()
    power = np.abs(np.fft.fft2(centred)) ** 2
    fy = np.fft.fftfreq(lum.shape[0])[:, None]
    fx = np.fft.fftfreq(lum.shape[1])[None, :]
    total = power.sum()
    hf = power[np.sqrt(fy**2 + fx**2) > _HIGH_FREQ_CUTOFF].sum() / total if total > 0 else 0.0
    means = x.reshape(-1, 3).mean(axis=0)
    return np.array([lum.mean(), lum.std(), grad, hf, *means])


@lru_cache(maxsize=8)
def _reference_statistics(height, width, n_reference):
    """Per-domain statistics of a fixed reference scene set: {domain_id: (n_reference, n_features)}."""
    from .data import DOMAIN_TRANSFORMS, SceneConfig, apply_domain_transform, generate_scene

    cfg = SceneConfig(height=height, width=width)
    scenes = [generate_scene(_REFERENCE_SEED_BASE + i, cfg) for i in range(n_reference)]
    out = {}
    for j, (domain_id, t) in enumerate(DOMAIN_TRANSFORMS.items()):
        out[domain_id] = np.stack([
            image_statistics(apply_domain_transform(s, t, seed=_REFERENCE_SEED_BASE + 1000 * j + i).image)
            for i, s in enumerate(scenes)
        ])
    return out


class StatisticalEncoder:
    """Deterministic image/text encoder pair over global image statistics.

    ``image_encode`` whitens :func:`image_statistics` (centre: mean of the known
    domains' canonical signatures; metric: pooled within-domain covariance of a
    fixed reference scene set) and maps the result to ``d_emb`` dimensions with
    a seeded orthonormal projection. ``text_encode`` maps text naming a known
    domain to the unit-normalised embedding of that domain's canonical
    signature; any other string gets a hash-seeded unit vector. Text vectors
    are therefore all unit length and W stays inside the unit ball.
    """

    def __init__(self, d_emb: int = 32, seed: int = 0, height: int = 64, width: int = 64,
                 n_reference: int = 64):
        if d_emb < 1:
            raise ConfigurationError("d_emb must be positive")
        self.d_emb = d_emb
        self.seed = seed
        n_feat = len(FEATURE_NAMES)
        rng = np.random.default_rng(seed)
        if d_emb >= n_feat:
            q, _ = np.linalg.qr(rng.normal(size=(d_emb, n_feat)))
            projection = q  # orthonormal columns
        else:
            q, _ = np.linalg.qr(rng.normal(size=(n_feat, d_emb)))
            projection = q.T  # orthonormal rows
        ref = _reference_statistics(height, width, n_reference)
        signatures = {k: v.mean(axis=0) for k, v in ref.items()}
        self.center = np.mean(list(signatures.values()), axis=0)
        within = np.mean([np.cov(v.T) for v in ref.values()], axis=0) + 1e-8 * np.eye(n_feat)
        whitening = np.linalg.cholesky(np.linalg.inv(within))
        # one matrix: whiten, then project
        self.matrix = projection @ whitening.T
        self.matrix.setflags(write=False)
        embedded = {k: self._embed(v) for k, v in signatures.items()}
        self._signatures = {k: v / np.linalg.norm(v) for k, v in embedded.items()}

    def _embed(self, stats):
        return self.matrix @ (stats - self.center)

    def image_encode(self, image) -> np.ndarray:
        return self._embed(image_statistics(image))

    def domain_of(self, text: str):
        for word in re.findall(r"[a-z_]+", text.lower()):
            for domain_id, words in DOMAIN_KEYWORDS.items():
                if word == domain_id or word in words:
                    return domain_id
        return None

    def text_encode(self, text: str) -> np.ndarray:
        domain_id = self.domain_of(text)
        if domain_id is not None:
            return self._signatures[domain_id].copy()
        digest = hashlib.sha256(f"{self.seed}:{text}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        v = rng.normal(size=self.d_emb)
        return v / np.linalg.norm(v)
