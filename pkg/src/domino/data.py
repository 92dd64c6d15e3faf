"""Procedural domain-shift benchmark.

Scenes are flat-shaded compositions of textured rectangles, circles and
triangles over a gradient background. A clear "source" domain is rendered
directly; adverse "target" domains and the synthetic pool are produced by
label-preserving photometric transforms.

Images are float32 arrays of shape (H, W, 3) in [0, 1]; label maps are uint8
arrays of shape (H, W).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigurationError

REAL = "real_analog"
SYNTHETIC = "synthetic_analog"
SPLITS = ("train_source", "val_source", "val_target", "train_synthetic")

# Luminance weights (ITU-R BT.601).
LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)

# Base colours per shape class; class c uses PALETTE[(c - 1) % len(PALETTE)].
PALETTE = np.array(
    [
        [0.90, 0.42, 0.35],
        [0.38, 0.80, 0.45],
        [0.45, 0.55, 0.95],
        [0.92, 0.85, 0.40],
        [0.80, 0.45, 0.85],
        [0.40, 0.85, 0.85],
    ]
)


@dataclass
class SceneConfig:
    height: int = 64
    width: int = 64
    num_classes: int = 4
    min_shapes: int = 2
    max_shapes: int = 5

    @classmethod
    def from_experiment(cls, config):
        return cls(
            height=config.data.height,
            width=config.data.width,
            num_classes=config.model.num_classes,
            min_shapes=config.data.min_shapes,
            max_shapes=config.data.max_shapes,
        )


@dataclass
class LabeledScene:
    image: np.ndarray
    labels: np.ndarray
    domain_id: str = "clear"
    provenance: str = REAL
    seed: int = 0

    def copy(self):
        return LabeledScene(self.image.copy(), self.labels.copy(), self.domain_id, self.provenance, self.seed)


@dataclass(frozen=True)
class DomainTransform:
    """Photometric corruption. Neutral values leave an image untouched.

    ``x -> clip(tint * (contrast_gain * (blur(x) - 0.5) + 0.5 + brightness_shift) + noise)``
    """

    domain_id: str
    brightness_shift: float = 0.0  # [-1, 1]
    contrast_gain: float = 1.0  # [0, 4]
    noise_std: float = 0.0  # [0, 1]
    blur_radius: float = 0.0  # gaussian sigma in pixels, [0, 8]
    tint: tuple = (1.0, 1.0, 1.0)  # per-channel gain, each in [0, 2]

    def __post_init__(self):
        if not -1.0 <= self.brightness_shift <= 1.0:
            raise ConfigurationError(f"{self.domain_id}: brightness_shift outside [-1, 1]")
        if not 0.0 <= self.contrast_gain <= 4.0:
            raise ConfigurationError(f"{self.domain_id}: contrast_gain outside [0, 4]")
        if not 0.0 <= self.noise_std <= 1.0:
            raise ConfigurationError(f"{self.domain_id}: noise_std outside [0, 1]")
        if not 0.0 <= self.blur_radius <= 8.0:
            raise ConfigurationError(f"{self.domain_id}: blur_radius outside [0, 8]")
        if len(self.tint) != 3 or not all(0.0 <= t <= 2.0 for t in self.tint):
            raise ConfigurationError(f"{self.domain_id}: tint must be three gains in [0, 2]")

    @property
    def is_identity(self):
        return (
            self.brightness_shift == 0.0
            and self.contrast_gain == 1.0
            and self.noise_std == 0.0
            and self.blur_radius == 0.0
            and tuple(self.tint) == (1.0, 1.0, 1.0)
        )


def _registry(*transforms):
    return {t.domain_id: t for t in transforms}


DOMAIN_TRANSFORMS = _registry(
    DomainTransform("clear"),
    # held-out adverse conditions (the evaluation target by default)
    DomainTransform("fog", brightness_shift=0.15, contrast_gain=0.45, blur_radius=1.2, noise_std=0.01, tint=(0.95, 0.97, 1.0)),
    DomainTransform("rain", brightness_shift=-0.12, contrast_gain=0.75, blur_radius=0.8, noise_std=0.07, tint=(0.92, 0.95, 1.05)),
    DomainTransform("snow", brightness_shift=0.2, contrast_gain=0.7, blur_radius=0.3, noise_std=0.15, tint=(1.0, 1.0, 1.03)),
    DomainTransform("night", brightness_shift=-0.5, contrast_gain=1.0, noise_std=0.03, tint=(0.85, 0.9, 1.15)),
    # conditions available to the synthetic pool
    DomainTransform("dusk", brightness_shift=-0.2, contrast_gain=0.85, tint=(1.1, 0.95, 0.8)),
    DomainTransform("overcast", brightness_shift=-0.05, contrast_gain=0.65, blur_radius=0.5, tint=(0.97, 0.97, 1.0)),
    DomainTransform("glare", brightness_shift=0.25, contrast_gain=1.2),
    DomainTransform("haze", brightness_shift=0.1, contrast_gain=0.6, blur_radius=0.8, noise_std=0.01),
    DomainTransform("sensor_noise", noise_std=0.1),
    DomainTransform("twilight", brightness_shift=-0.35, contrast_gain=0.9, noise_std=0.02, tint=(0.9, 0.9, 1.1)),
)


def get_transform(domain_id: str) -> DomainTransform:
    try:
        return DOMAIN_TRANSFORMS[domain_id]
    except KeyError:
        raise ConfigurationError(f"unknown domain_id {domain_id!r}") from None


def luminance(image: np.ndarray) -> np.ndarray:
    return np.asarray(image, dtype=np.float64) @ LUMA


# Scene rendering


@dataclass
class _Shape:
    kind: str  # rect | circle | triangle
    cls: int
    cy: float
    cx: float
    size: float
    angle: float
    color: np.ndarray
    freq: float
    phase: float


def _shape_mask(shape: _Shape, yy, xx, dy=0.0, dx=0.0, dsize=0.0):
    cy, cx = shape.cy + dy, shape.cx + dx
    s = max(shape.size + dsize, 1.0)
    if shape.kind == "rect":
        c, si = np.cos(shape.angle), np.sin(shape.angle)
        u = (xx - cx) * c + (yy - cy) * si
        v = -(xx - cx) * si + (yy - cy) * c
        return (np.abs(u) <= s) & (np.abs(v) <= 0.6 * s)
    if shape.kind == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= s * s
    # equilateral-ish triangle via three half-planes
    pts = [
        (cy + s * np.sin(shape.angle + k * 2 * np.pi / 3), cx + s * np.cos(shape.angle + k * 2 * np.pi / 3))
        for k in range(3)
    ]
    mask = np.ones_like(yy, dtype=bool)
    for k in range(3):
        (y0, x0), (y1, x1) = pts[k], pts[(k + 1) % 3]
        cross = (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
        mask &= cross <= 0
    if not mask.any():  # orientation flipped, use the other side
        mask = np.ones_like(yy, dtype=bool)
        for k in range(3):
            (y0, x0), (y1, x1) = pts[k], pts[(k + 1) % 3]
            mask &= (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0) >= 0
    return mask


def _texture(shape: _Shape, yy, xx, phase_jitter=0.0):
    # each class gets its own pattern so texture is a usable cue
    k = (shape.cls - 1) % 3
    ph = shape.phase + phase_jitter
    if k == 0:
        t = np.sin(2 * np.pi * shape.freq * yy + ph)  # horizontal stripes
    elif k == 1:
        t = np.sign(np.sin(2 * np.pi * shape.freq * yy + ph) * np.sin(2 * np.pi * shape.freq * xx + ph))
    else:
        t = np.cos(2 * np.pi * shape.freq * (xx + yy) / np.sqrt(2) + ph)  # diagonal stripes
    return 0.12 * t


def _sample_layout(rng: np.random.Generator, cfg: SceneConfig):
    h, w = cfg.height, cfg.width
    scale = min(h, w)
    kinds = ("rect", "circle", "triangle")
    n = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
    shapes = []
    for _ in range(n):
        cls = int(rng.integers(1, cfg.num_classes))
        base = PALETTE[(cls - 1) % len(PALETTE)]
        shapes.append(
            _Shape(
                kind=kinds[(cls - 1) % 3],
                cls=cls,
                cy=float(rng.uniform(0.15, 0.85) * h),
                cx=float(rng.uniform(0.15, 0.85) * w),
                size=float(rng.uniform(0.1, 0.24) * scale),
                angle=float(rng.uniform(0, 2 * np.pi)),
                color=np.clip(base + rng.uniform(-0.06, 0.06, size=3), 0.0, 1.0),
                freq=float(rng.uniform(0.12, 0.2)),
                phase=float(rng.uniform(0, 2 * np.pi)),
            )
        )
    top = rng.uniform(0.5, 0.75, size=3)
    bottom = rng.uniform(0.45, 0.7, size=3)
    return shapes, top, bottom


def _render(shapes, top, bottom, cfg: SceneConfig, jitter=None):
    h, w = cfg.height, cfg.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ramp = (yy / max(h - 1, 1))[..., None]
    image = top * (1 - ramp) + bottom * ramp
    image = image + 0.03 * np.sin(2 * np.pi * xx / w * 3)[..., None]
    labels = np.zeros((h, w), dtype=np.uint8)
    for i, shape in enumerate(shapes):
        dy = dx = dsize = phase = 0.0
        if jitter is not None:
            dy, dx, dsize, phase = jitter[i]
        mask = _shape_mask(shape, yy, xx, dy, dx, dsize)
        tex = _texture(shape, yy, xx, phase)
        image[mask] = np.clip(shape.color[None, :] + tex[mask][:, None], 0.0, 1.0)
        if jitter is None:
            labels[mask] = shape.cls
    return np.clip(image, 0.0, 1.0).astype(np.float32), labels


def generate_scene(seed: int, config: Optional[SceneConfig] = None) -> LabeledScene:
    """Render the clear-domain scene for ``seed``; labels are the exact rasterised geometry."""
    cfg = config or SceneConfig()
    rng = np.random.default_rng(seed)
    shapes, top, bottom = _sample_layout(rng, cfg)
    image, labels = _render(shapes, top, bottom, cfg)
    return LabeledScene(image=image, labels=labels, domain_id="clear", provenance=REAL, seed=int(seed))


def generate_synthetic_scene(scene_seed: int, jitter_seed: int, config: Optional[SceneConfig] = None,
                             max_jitter: int = 2) -> LabeledScene:
    """Same labels as ``generate_scene(scene_seed)`` but the image is drawn from perturbed geometry.

    The perturbation stands in for the imperfect image/label alignment of a
    label-conditioned generator.
    """
    cfg = config or SceneConfig()
    rng = np.random.default_rng(scene_seed)
    shapes, top, bottom = _sample_layout(rng, cfg)
    _, labels = _render(shapes, top, bottom, cfg)
    jr = np.random.default_rng(jitter_seed)
    jitter = [
        (
            float(jr.uniform(-max_jitter, max_jitter)),
            float(jr.uniform(-max_jitter, max_jitter)),
            float(jr.uniform(-max_jitter, max_jitter) / 2),
            float(jr.uniform(-np.pi, np.pi)),
        )
        for _ in shapes
    ]
    image, _ = _render(shapes, top, bottom, cfg, jitter=jitter)
    return LabeledScene(image=image, labels=labels, domain_id="clear", provenance=SYNTHETIC, seed=int(scene_seed))


def apply_domain_transform(scene: LabeledScene, t, seed: int) -> LabeledScene:
    """Apply ``t`` (a DomainTransform or a registered domain id). Labels are never touched."""
    if isinstance(t, str):
        t = get_transform(t)
    x = np.asarray(scene.image, dtype=np.float64)
    if not t.is_identity:
        if t.blur_radius > 0:
            x = gaussian_filter(x, sigma=(t.blur_radius, t.blur_radius, 0), mode="reflect")
        x = t.contrast_gain * (x - 0.5) + 0.5 + t.brightness_shift
        x = x * np.asarray(t.tint, dtype=np.float64)
        if t.noise_std > 0:
            rng = np.random.default_rng(seed)
            x = x + rng.normal(0.0, t.noise_std, size=x.shape)
        x = np.clip(x, 0.0, 1.0)
    return LabeledScene(
        image=x.astype(np.float32),
        labels=scene.labels.copy(),
        domain_id=t.domain_id,
        provenance=scene.provenance,
        seed=scene.seed,
    )


# Training-time photometric augmentation


@dataclass(frozen=True)
class PhotometricJitter:
    """Random brightness / contrast / saturation jitter, each applied with probability ``prob``.

    Ranges follow the usual segmentation training recipe (brightness +-32/255,
    contrast and saturation factors in [0.5, 1.5]).
    """

    brightness: float = 32 / 255
    contrast: tuple = (0.5, 1.5)
    saturation: tuple = (0.5, 1.5)
    prob: float = 0.5

    def __post_init__(self):
        if self.brightness < 0 or not 0 <= self.prob <= 1:
            raise ConfigurationError("jitter brightness must be >= 0 and prob in [0, 1]")
        for lo, hi in (self.contrast, self.saturation):
            if not 0 <= lo <= hi:
                raise ConfigurationError("jitter factor ranges must satisfy 0 <= lo <= hi")

    @classmethod
    def from_data_config(cls, data_cfg):
        return cls(data_cfg.jitter_brightness, tuple(data_cfg.jitter_contrast),
                   tuple(data_cfg.jitter_saturation), data_cfg.jitter_prob)


def photometric_jitter(image: np.ndarray, rng: np.random.Generator, jitter: PhotometricJitter) -> np.ndarray:
    """Jitter an HWC image in [0, 1]; all draws are made so the rng stream has fixed length."""
    img = np.asarray(image, dtype=np.float64)
    flips = rng.random(3) < jitter.prob
    delta = rng.uniform(-jitter.brightness, jitter.brightness)
    gain = rng.uniform(*jitter.contrast)
    sat = rng.uniform(*jitter.saturation)
    if flips[0]:
        img = img + delta
    if flips[1]:
        img = (img - 0.5) * gain + 0.5
    if flips[2]:
        lum = (img @ LUMA)[..., None]
        img = lum + sat * (img - lum)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# Datasets


def _split_offset(split):
    offsets = {"train_source": 0, "val_source": 1, "val_target": 2, "train_synthetic": 4}
    if split not in offsets:
        raise ConfigurationError(f"unknown split {split!r}; expected one of {SPLITS}")
    return offsets[split]


def split_seeds(split: str, data_config, base_seed: int) -> list:
    """Scene seeds for a split. Each split owns the range [base + k*stride, base + k*stride + size)."""
    sizes = {
        "train_source": data_config.train_size,
        "val_source": data_config.val_source_size,
        "val_target": data_config.val_target_size,
        "train_synthetic": data_config.synthetic_size,
    }
    size = sizes[split] if split in sizes else None
    offset = _split_offset(split)
    if size is None or size < 1:
        raise ConfigurationError(f"split {split!r} must have a positive size")
    if size > data_config.seed_stride:
        raise ConfigurationError(
            f"split {split!r} size {size} exceeds seed_stride {data_config.seed_stride}; seed ranges overlap"
        )
    if split == "train_synthetic":
        # synthetic scenes reuse the training label maps
        if size > data_config.train_size:
            raise ConfigurationError("data.synthetic_size must not exceed data.train_size")
        offset = 0
    start = base_seed + offset * data_config.seed_stride
    return list(range(start, start + size))


def build_dataset(split: str, config, base_seed: Optional[int] = None) -> list:
    """Materialise one split as a list of LabeledScene. Pure in (config, base_seed)."""
    data = config.data
    base = data.base_seed if base_seed is None else base_seed
    scene_cfg = SceneConfig.from_experiment(config)
    seeds = split_seeds(split, data, base)
    stride = data.seed_stride
    if split in ("train_source", "val_source"):
        return [generate_scene(s, scene_cfg) for s in seeds]
    if split == "val_target":
        targets = list(data.target_domains)
        out = []
        for i, s in enumerate(seeds):
            scene = generate_scene(s, scene_cfg)
            out.append(apply_domain_transform(scene, targets[i % len(targets)], seed=base + 3 * stride + i))
        return out
    # train_synthetic
    domains = data.resolved_synthetic_domains()
    if not domains:
        raise ConfigurationError("no domains available for the synthetic pool")
    out = []
    for i, s in enumerate(seeds):
        aux = base + 4 * stride + i
        rng = np.random.default_rng(aux)
        domain = domains[int(rng.integers(len(domains)))]
        scene = generate_synthetic_scene(s, aux, scene_cfg, max_jitter=data.synthetic_jitter)
        out.append(apply_domain_transform(scene, domain, seed=aux))
    return out


@dataclass(frozen=True)
class MixSpec:
    real_fraction: float

    def __post_init__(self):
        if not 0.0 <= self.real_fraction <= 1.0:
            raise ConfigurationError("real_fraction must lie in [0, 1]")


def mixing_indices(n_real: int, n_synthetic: int, mix: MixSpec, seed: int, n: int):
    """Draw ``n`` (is_real, index) pairs. Each draw picks the real pool with probability real_fraction."""
    if mix.real_fraction > 0 and n_real == 0:
        raise ConfigurationError("real_fraction > 0 but the real pool is empty")
    if mix.real_fraction < 1 and n_synthetic == 0:
        raise ConfigurationError("real_fraction < 1 but the synthetic pool is empty")
    rng = np.random.default_rng(seed)
    pick_real = rng.random(n) < mix.real_fraction
    real_idx = rng.integers(0, max(n_real, 1), size=n)
    synth_idx = rng.integers(0, max(n_synthetic, 1), size=n)
    return [(bool(r), int(i if r else j)) for r, i, j in zip(pick_real, real_idx, synth_idx)]


def mixing_sampler(real_pool: Sequence[LabeledScene], synthetic_pool: Sequence[LabeledScene],
                   mix: MixSpec, seed: int, n: int) -> list:
    draws = mixing_indices(len(real_pool), len(synthetic_pool), mix, seed, n)
    return [real_pool[i] if is_real else synthetic_pool[i] for is_real, i in draws]


# On-disk layout: <root>/<split>/<index>.img (float32 LE HWC), <index>.lbl (uint8 HW), <root>/manifest.json


def _write_if_changed(path: Path, payload: bytes) -> bool:
    if path.exists() and path.read_bytes() == payload:
        return False
    path.write_bytes(payload)
    return True


def save_dataset(root, datasets: dict, config, base_seed: int) -> int:
    """Write splits to ``root``. Returns the number of files actually (re)written."""
    root = Path(root)
    written = 0
    manifest = {
        "format": 1,
        "height": config.data.height,
        "width": config.data.width,
        "num_classes": config.model.num_classes,
        "base_seed": base_seed,
        "data_config": config.to_dict()["data"],
        "splits": {},
    }
    for split, scenes in datasets.items():
        split_dir = root / split
        split_dir.mkdir(parents=True, exist_ok=True)
        entries = []
        for i, scene in enumerate(scenes):
            written += _write_if_changed(split_dir / f"{i}.img", scene.image.astype("<f4").tobytes())
            written += _write_if_changed(split_dir / f"{i}.lbl", scene.labels.astype(np.uint8).tobytes())
            entries.append(
                {"index": i, "seed": scene.seed, "domain_id": scene.domain_id, "provenance": scene.provenance}
            )
        manifest["splits"][split] = entries
    payload = (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode()
    written += _write_if_changed(root / "manifest.json", payload)
    return written


def load_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.is_file():
        raise ConfigurationError(f"dataset manifest {str(path)!r} not found")
    return json.loads(path.read_text())


def load_split(root, split: str) -> list:
    root = Path(root)
    manifest = load_manifest(root)
    if split not in manifest["splits"]:
        raise ConfigurationError(f"split {split!r} not present in {str(root)!r}")
    h, w = manifest["height"], manifest["width"]
    scenes = []
    for entry in manifest["splits"][split]:
        i = entry["index"]
        image = np.fromfile(root / split / f"{i}.img", dtype="<f4").reshape(h, w, 3)
        labels = np.fromfile(root / split / f"{i}.lbl", dtype=np.uint8).reshape(h, w)
        scenes.append(LabeledScene(image.astype(np.float32), labels, entry["domain_id"], entry["provenance"], entry["seed"]))
    return scenes


def read_image_file(path, height: Optional[int] = None, width: Optional[int] = None) -> np.ndarray:
    """Load an HWC float image from ``.npy`` or the raw ``.img`` format.

    Raw files carry no shape; it is taken from the arguments, a sibling
    ``manifest.json`` one directory up, or assumed square.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"image file {str(path)!r} does not exist")
    if path.suffix == ".npy":
        image = np.load(path)
    else:
        flat = np.fromfile(path, dtype="<f4")
        if height is None or width is None:
            manifest_path = path.parent.parent / "manifest.json"
            if manifest_path.is_file():
                m = json.loads(manifest_path.read_text())
                height, width = m["height"], m["width"]
            else:
                side = int(round(np.sqrt(flat.size / 3)))
                height = width = side
        if flat.size != height * width * 3:
            raise ConfigurationError(f"image file {str(path)!r} does not hold {height}x{width}x3 floats")
        image = flat.reshape(height, width, 3)
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ConfigurationError(f"image {str(path)!r} must have shape (H, W, 3)")
    return image
