"""Synthetic template-classification data, OOD companions, corruptions, LDS1 files.

Every class owns a fixed random template image; samples are the template plus
i.i.d. Gaussian pixel noise.  OOD sets use templates drawn from a different
seed.  The LDS1 file layout is::

    b"LDS1" | u32 version | u32 count | u32 H | u32 W | u32 ch | u32 C
    | count*H*W*ch f32 (little-endian, row-major) | count u16 labels
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapters import ConfigError

LDS_MAGIC = b"LDS1"
LDS_VERSION = 1

CORRUPTION_KINDS = ("gaussian_noise", "blur", "contrast", "pixel_dropout")

# Per-severity magnitudes, index 0 is the identity.
NOISE_STD = (0.0, 0.25, 0.5, 0.75, 1.0, 1.5)  # multiples of template scale
BLUR_WIDTH = (1, 2, 3, 4, 5, 6)  # box kernel side in pixels
CONTRAST_FACTOR = (1.0, 0.75, 0.55, 0.4, 0.28, 0.18)
DROPOUT_FRACTION = (0.0, 0.1, 0.2, 0.3, 0.45, 0.6)

_SPLIT_CODES = {"train": 0, "test": 1, "val": 2, "ood": 3}


@dataclass
class SyntheticSpec:
    num_classes: int = 5
    image_size: int = 16
    channels: int = 1
    n_train: int = 500
    n_test: int = 500
    n_ood: int = 500
    template_seed: int = 1
    ood_template_seed: int = 2
    template_scale: float = 1.0
    noise_std: float = 3.0

    def __post_init__(self):
        if self.num_classes < 2 or self.num_classes > 0xFFFF:
            raise ConfigError(f"num_classes must be in 2..65535, got {self.num_classes}")
        if min(self.image_size, self.channels) < 1 or min(self.n_train, self.n_test, self.n_ood) < 0:
            raise ConfigError("image_size and channels must be positive and sample counts non-negative")
        if self.noise_std < 0 or self.template_scale <= 0:
            raise ConfigError("noise_std must be >= 0 and template_scale > 0")
        if self.template_seed == self.ood_template_seed:
            raise ConfigError("in-distribution and OOD template seeds must differ")


@dataclass
class Dataset:
    images: np.ndarray  # [n, H, W, ch] float32
    labels: np.ndarray  # [n] int64
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def geometry(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


def make_templates(spec: SyntheticSpec, seed: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(seed))
    shape = (spec.num_classes, spec.image_size, spec.image_size, spec.channels)
    return (spec.template_scale * rng.standard_normal(shape)).astype(np.float32)


def _sample(templates: np.ndarray, n: int, noise_std: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    labels = np.arange(n) % len(templates)
    rng.shuffle(labels)
    noise = rng.standard_normal((n,) + templates.shape[1:]).astype(np.float32)
    images = templates[labels] + np.float32(noise_std) * noise
    return images.astype(np.float32), labels.astype(np.int64)


def gen_synthetic(spec: SyntheticSpec, split: str = "train", seed: int = 0) -> Dataset:
    """Balanced labelled samples for ``split``; deterministic in (spec, split, seed)."""
    if split not in _SPLIT_CODES:
        raise ConfigError(f"unknown split {split!r}")
    n = {"train": spec.n_train, "test": spec.n_test, "val": spec.n_test, "ood": spec.n_ood}[split]
    templates = make_templates(spec, spec.template_seed)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, _SPLIT_CODES[split]])))
    images, labels = _sample(templates, n, spec.noise_std, rng)
    return Dataset(images, labels, spec.num_classes, {"split": split, "seed": seed})


def gen_ood(spec: SyntheticSpec, seed: int = 0) -> Dataset:
    """Samples around templates drawn from ``ood_template_seed``; labels index those templates."""
    templates = make_templates(spec, spec.ood_template_seed)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, _SPLIT_CODES["ood"]])))
    images, labels = _sample(templates, spec.n_ood, spec.noise_std, rng)
    return Dataset(images, labels, spec.num_classes, {"split": "ood", "seed": seed})


def nearest_template(images: np.ndarray, templates: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of and Euclidean distance to the closest template, per image."""
    flat = images.reshape(len(images), -1).astype(np.float64)
    t = templates.reshape(len(templates), -1).astype(np.float64)
    d2 = (flat**2).sum(1)[:, None] - 2 * flat @ t.T + (t**2).sum(1)[None, :]
    d = np.sqrt(np.maximum(d2, 0.0))
    return d.argmin(1), d.min(1)


# ---------------------------------------------------------------------------
# corruptions


def _box_blur(images: np.ndarray, width: int) -> np.ndarray:
    if width <= 1:
        return images.copy()
    lo = (width - 1) // 2
    hi = width - 1 - lo
    out = images.astype(np.float64)
    for axis in (1, 2):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (lo, hi)
        padded = np.pad(out, pad)
        c = np.cumsum(padded, axis=axis)
        c = np.concatenate([np.zeros_like(np.take(c, [0], axis=axis)), c], axis=axis)
        n = out.shape[axis]
        out = (np.take(c, np.arange(width, width + n), axis=axis)
               - np.take(c, np.arange(0, n), axis=axis)) / width
    return out.astype(np.float32)


def corrupt(images: np.ndarray, kind: str, severity: int, seed: int = 0, scale: float = 1.0) -> np.ndarray:
    """Apply a corruption at ``severity`` in 0..5 (0 is the identity).

    Magnitudes come from the module-level tables ``NOISE_STD``,
    ``BLUR_WIDTH``, ``CONTRAST_FACTOR`` and ``DROPOUT_FRACTION``.
    """
    if kind not in CORRUPTION_KINDS:
        raise ConfigError(f"unknown corruption kind {kind!r}; expected one of {CORRUPTION_KINDS}")
    if not 0 <= severity <= 5:
        raise ConfigError(f"severity must be in 0..5, got {severity}")
    images = np.asarray(images, dtype=np.float32)
    if severity == 0:
        return images.copy()
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, severity, CORRUPTION_KINDS.index(kind)])))
    if kind == "gaussian_noise":
        noise = rng.standard_normal(images.shape).astype(np.float32)
        return images + np.float32(NOISE_STD[severity] * scale) * noise
    if kind == "blur":
        return _box_blur(images, BLUR_WIDTH[severity])
    if kind == "contrast":
        mean = images.mean(axis=(1, 2, 3), keepdims=True)
        return (mean + np.float32(CONTRAST_FACTOR[severity]) * (images - mean)).astype(np.float32)
    keep = rng.random(images.shape[:3] + (1,)) >= DROPOUT_FRACTION[severity]
    return (images * keep).astype(np.float32)


# ---------------------------------------------------------------------------
# LDS1 file format


def write_dataset(path, ds: Dataset) -> None:
    path = Path(path)
    n, h, w, ch = ds.images.shape
    if ds.labels.size and int(ds.labels.max()) > 0xFFFF:
        raise ConfigError("labels do not fit in u16")
    header = LDS_MAGIC + struct.pack("<6I", LDS_VERSION, n, h, w, ch, ds.num_classes)
    payload = np.ascontiguousarray(ds.images, dtype="<f4").tobytes()
    labels = np.ascontiguousarray(ds.labels, dtype="<u2").tobytes()
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(header + payload + labels)
    tmp.replace(path)


def read_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != LDS_MAGIC:
        raise ConfigError(f"{path}: not an LDS1 dataset file")
    version, n, h, w, ch, c = struct.unpack_from("<6I", raw, 4)
    if version != LDS_VERSION:
        raise ConfigError(f"{path}: unsupported LDS version {version}")
    off = 4 + 24
    count = n * h * w * ch
    expected = off + 4 * count + 2 * n
    if len(raw) != expected:
        raise ConfigError(f"{path}: truncated or oversized file ({len(raw)} bytes, expected {expected})")
    images = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(n, h, w, ch).astype(np.float32)
    labels = np.frombuffer(raw, dtype="<u2", count=n, offset=off + 4 * count).astype(np.int64)
    return Dataset(images, labels, c)
