"""Synthetic image datasets, backdoor triggers and poisoning procedures."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ConfigError, UsageError
from .rng import Rng

FAMILIES = ("patch", "blend", "sinusoid", "warp")
CORNERS = ("bottom-right", "bottom-left", "top-right", "top-left")


def round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def count_for_fraction(frac: float, n: int) -> int:
    return int(math.floor(frac * n + 0.5))


@dataclass
class Dataset:
    images: np.ndarray           # uint8, (N, C, H, W)
    labels: np.ndarray           # int64, (N,)
    original_labels: np.ndarray  # int64, (N,)
    poisoned: np.ndarray         # bool, (N,)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.original_labels = np.asarray(self.original_labels, dtype=np.int64)
        self.poisoned = np.asarray(self.poisoned, dtype=bool)
        n = self.images.shape[0]
        if self.images.ndim != 4:
            raise UsageError(f"images must be (N,C,H,W), got {self.images.shape}")
        for name in ("labels", "original_labels", "poisoned"):
            if getattr(self, name).shape != (n,):
                raise UsageError(f"{name} length does not match {n} images")
        if np.any(self.labels[~self.poisoned] != self.original_labels[~self.poisoned]):
            raise UsageError("benign samples must keep their original label")

    @classmethod
    def benign(cls, images, labels) -> "Dataset":
        labels = np.asarray(labels, dtype=np.int64)
        return cls(images, labels.copy(), labels.copy(), np.zeros(len(labels), dtype=bool))

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        if idx.size == 0:
            idx = idx.astype(np.intp)
        return Dataset(self.images[idx], self.labels[idx], self.original_labels[idx],
                       self.poisoned[idx])

    def copy(self) -> "Dataset":
        return self.subset(np.arange(len(self)))

    def equals(self, other: "Dataset") -> bool:
        return (self.images.shape == other.images.shape
                and np.array_equal(self.images, other.images)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.original_labels, other.original_labels)
                and np.array_equal(self.poisoned, other.poisoned))


# ---------------------------------------------------------------- synthetic data

def gen_synthetic(K: int, n_per_class: int, channels: int, side: int, rng: Rng,
                  noise: float = 0.04, jitter: float = 1.0) -> Dataset:
    """Balanced procedural dataset: K classes of ``n_per_class`` images each.

    Class ``k`` is a Gaussian blob at a class-specific position and elongation
    overlaid with stripes of class-specific orientation and frequency.  Every
    sample gets its own blob offset (uniform within ``jitter`` pixels), stripe
    phase, contrast and Gaussian pixel noise (``noise`` in [0,1] intensity
    units).  Samples are returned in random order.
    """
    if K < 2:
        raise ConfigError(f"need at least 2 classes, got {K}")
    if side < 8:
        raise ConfigError(f"side {side} too small for the class patterns (min 8)")
    if noise < 0 or jitter < 0:
        raise ConfigError("noise and jitter must be non-negative")
    if channels < 1 or n_per_class < 0:
        raise ConfigError("channels must be >= 1 and n_per_class >= 0")
    n = K * n_per_class
    labels = np.repeat(np.arange(K), n_per_class)
    labels = labels[rng.permutation(n)]

    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    centre = (side - 1) / 2.0
    k = labels.astype(np.float64)
    angle = 2 * np.pi * k / K
    radius = side * 0.22
    cy = centre + radius * np.sin(angle) + rng.uniform(-jitter, jitter, n)
    cx = centre + radius * np.cos(angle) + rng.uniform(-jitter, jitter, n)
    sig_y = side * np.where(labels % 2 == 0, 0.10, 0.16)
    sig_x = side * np.where(labels % 2 == 0, 0.16, 0.10)
    blob = np.exp(-((yy[None] - cy[:, None, None]) ** 2) / (2 * sig_y[:, None, None] ** 2)
                  - ((xx[None] - cx[:, None, None]) ** 2) / (2 * sig_x[:, None, None] ** 2))

    theta = np.pi * k / K
    freq = 1.5 + (labels % 3)
    phase = rng.uniform(0, 2 * np.pi, n)
    proj = (xx[None] * np.cos(theta)[:, None, None] + yy[None] * np.sin(theta)[:, None, None])
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * freq[:, None, None] * proj / side + phase[:, None, None])

    contrast = rng.uniform(0.8, 1.2, n)[:, None, None]
    base = 0.12 + contrast * (0.55 * blob + 0.2 * stripes)
    tint = 1.0 - 0.3 * ((labels[:, None] + np.arange(channels)[None, :]) % 2)
    img = base[:, None] * tint[:, :, None, None]
    img = img + rng.normal(0.0, noise, img.shape)
    images = np.clip(round_half_up(img * 255.0), 0, 255).astype(np.uint8)
    return Dataset.benign(images, labels)


# ---------------------------------------------------------------- triggers

@dataclass
class TriggerSpec:
    family: str = "patch"
    target_class: int = 0
    # patch
    patch_size: int = 3
    corner: str = "bottom-right"
    intensity: int = 255
    # blend
    pattern_seed: int = 0
    opacity: float = 0.1
    # sinusoid
    amplitude: float = 20.0
    frequency: float = 6.0
    # warp
    warp_grid: int = 4
    warp_strength: float = 1.5
    warp_seed: int = 0

    def validate(self, image_shape: tuple[int, int, int] | None = None) -> None:
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown trigger family {self.family!r}")
        if self.target_class < 0:
            raise ConfigError("target class must be non-negative")
        if self.family == "patch":
            if self.corner not in CORNERS:
                raise ConfigError(f"unknown corner {self.corner!r}")
            if not 0 <= self.intensity <= 255:
                raise ConfigError("patch intensity must be in [0, 255]")
            if self.patch_size < 1:
                raise ConfigError("patch size must be positive")
            if image_shape is not None and self.patch_size >= min(image_shape[1:]):
                raise ConfigError("patch must be smaller than the image side")
        elif self.family == "blend":
            if not 0.0 <= self.opacity <= 1.0:
                raise ConfigError(f"blend opacity {self.opacity} outside [0, 1]")
        elif self.family == "sinusoid":
            if not 0.0 <= self.amplitude <= 255.0:
                raise ConfigError("sinusoid amplitude must be in [0, 255]")
        elif self.family == "warp":
            if self.warp_grid < 2 or self.warp_strength < 0:
                raise ConfigError("warp grid must be >= 2 and strength >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TriggerSpec":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown trigger fields {sorted(unknown)}")
        return cls(**d)


def blend_pattern(spec: TriggerSpec, shape: tuple[int, int, int]) -> np.ndarray:
    return Rng(spec.pattern_seed).integers(0, 256, size=shape).astype(np.float64)


def _bilinear_upsample(grid: np.ndarray, h: int, w: int) -> np.ndarray:
    g = grid.shape[-1]
    ys, xs = np.meshgrid(np.linspace(0, g - 1, h), np.linspace(0, g - 1, w), indexing="ij")
    return _bilinear_sample(grid, ys, xs)


def _bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample (..., H, W) at fractional (ys, xs) with border clamping."""
    h, w = img.shape[-2:]
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = ys - y0
    fx = xs - x0
    return ((1 - fy) * (1 - fx) * img[..., y0, x0] + (1 - fy) * fx * img[..., y0, x1]
            + fy * (1 - fx) * img[..., y1, x0] + fy * fx * img[..., y1, x1])


def warp_field(spec: TriggerSpec, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Smooth displacement field (dy, dx), fixed by ``spec.warp_seed``."""
    coarse = Rng(spec.warp_seed).uniform(-1.0, 1.0, size=(2, spec.warp_grid, spec.warp_grid))
    dy = _bilinear_upsample(coarse[0], h, w)
    dx = _bilinear_upsample(coarse[1], h, w)
    peak = max(np.abs(dy).max(), np.abs(dx).max(), 1e-12)
    scale = spec.warp_strength / peak
    return dy * scale, dx * scale


def apply_trigger_batch(images: np.ndarray, spec: TriggerSpec) -> np.ndarray:
    """Apply ``spec`` to every image of a uint8 (N,C,H,W) array; returns a new array."""
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 4:
        raise UsageError(f"expected (N,C,H,W) images, got {images.shape}")
    spec.validate(images.shape[1:])
    _, c, h, w = images.shape
    x = images.astype(np.float64)
    if spec.family == "patch":
        out = images.copy()
        s = spec.patch_size
        rows = slice(h - s, h) if spec.corner.startswith("bottom") else slice(0, s)
        cols = slice(w - s, w) if spec.corner.endswith("right") else slice(0, s)
        out[:, :, rows, cols] = spec.intensity
        return out
    if spec.family == "blend":
        y = (1.0 - spec.opacity) * x + spec.opacity * blend_pattern(spec, (c, h, w))[None]
    elif spec.family == "sinusoid":
        j = np.arange(w)
        y = x + spec.amplitude * np.sin(2 * np.pi * j * spec.frequency / w)
    else:
        dy, dx = warp_field(spec, h, w)
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        y = _bilinear_sample(x, yy + dy, xx + dx)
    return np.clip(round_half_up(y), 0, 255).astype(np.uint8)


def apply_trigger(image: np.ndarray, spec: TriggerSpec) -> np.ndarray:
    """Single-image (C,H,W) version of :func:`apply_trigger_batch`."""
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim != 3:
        raise UsageError(f"expected a (C,H,W) image, got {image.shape}")
    return apply_trigger_batch(image[None], spec)[0]


# ---------------------------------------------------------------- poisoning

def poison_poisoned_label(ds: Dataset, spec: TriggerSpec, gamma: float, rng: Rng) -> Dataset:
    """Trigger ``round(gamma * N)`` uniformly chosen samples and relabel them to the target."""
    if not 0.0 <= gamma < 1.0:
        raise ConfigError(f"poisoning rate must lie in [0, 1), got {gamma}")
    spec.validate(ds.image_shape)
    out = ds.copy()
    m = count_for_fraction(gamma, len(ds))
    if m == 0:
        return out
    idx = np.sort(rng.choice(len(ds), size=m, replace=False))
    out.images[idx] = apply_trigger_batch(ds.images[idx], spec)
    out.labels[idx] = spec.target_class
    out.poisoned[idx] = True
    return out


def poison_clean_label(ds: Dataset, spec: TriggerSpec, frac_of_target: float, rng: Rng) -> Dataset:
    """Trigger ``round(frac * n_target)`` samples already labelled with the target; labels untouched."""
    if not 0.0 <= frac_of_target <= 1.0:
        raise ConfigError(f"fraction of target class must lie in [0, 1], got {frac_of_target}")
    spec.validate(ds.image_shape)
    candidates = np.flatnonzero(ds.labels == spec.target_class)
    if candidates.size == 0:
        raise ConfigError(f"no samples of target class {spec.target_class}")
    out = ds.copy()
    m = count_for_fraction(frac_of_target, candidates.size)
    if m == 0:
        return out
    idx = np.sort(rng.choice(candidates, size=m, replace=False))
    out.images[idx] = apply_trigger_batch(ds.images[idx], spec)
    out.poisoned[idx] = True
    return out


def build_poisoned_testset(test: Dataset, spec: TriggerSpec) -> Dataset:
    """Triggered copies of every test sample whose true class is not the target."""
    if np.any(test.poisoned):
        raise UsageError("poisoned test set must be built from a benign test set")
    spec.validate(test.image_shape)
    keep = np.flatnonzero(test.original_labels != spec.target_class)
    if keep.size == 0:
        raise ConfigError("every test sample belongs to the target class")
    images = apply_trigger_batch(test.images[keep], spec)
    labels = test.original_labels[keep]
    return Dataset(images, labels.copy(), labels.copy(), np.ones(keep.size, dtype=bool))
