"""Synthetic shape classification data and an IDX-format loader.

Shapes are rendered analytically (signed-distance functions, one-pixel
anti-aliased edges) at an oversampled resolution; the native image is a box
downsample of that render. Both carry independent additive Gaussian noise.
Every sample is a pure function of (dataset seed, sample index), so datasets
regenerate bit-identically. Shape position and size are randomized so class
identity cannot be read off one fixed patch.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ParseError
from .extract import Image, sample_patchset
from .geometry import ImageSpec, Patch, PatchSet

SHAPE_NAMES = ("circle", "square", "triangle", "cross", "ring", "diamond", "hexagon", "star")


@dataclass(frozen=True)
class DatasetSpec:
    """Parameters of a synthetic shape dataset."""

    classes: int = 4
    size: int = 1000
    side: int = 64
    channels: int = 1
    seed: int = 0
    size_range: tuple[float, float] = (0.22, 0.38)
    offcenter: bool = False
    noise: float = 0.05
    oversample: int = 2

    def __post_init__(self):
        if not (2 <= self.classes <= len(SHAPE_NAMES)):
            raise ValueError(f"classes must lie in [2, {len(SHAPE_NAMES)}], got {self.classes}")
        if self.size < 1 or self.side < 8:
            raise ValueError("dataset size must be >= 1 and side >= 8")

    def to_dict(self) -> dict:
        return {
            "classes": self.classes,
            "size": self.size,
            "side": self.side,
            "channels": self.channels,
            "seed": self.seed,
            "size_range": list(self.size_range),
            "offcenter": self.offcenter,
            "noise": self.noise,
            "oversample": self.oversample,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "DatasetSpec":
        kwargs = dict(obj)
        if "size_range" in kwargs:
            kwargs["size_range"] = tuple(kwargs["size_range"])
        return cls(**kwargs)


@dataclass(frozen=True)
class Sample:
    """One classification sample."""

    image: Image
    label: int


def _sdf(kind: str, px: np.ndarray, py: np.ndarray, radius: float) -> np.ndarray:
    ax, ay = np.abs(px), np.abs(py)
    if kind == "circle":
        return np.hypot(px, py) - radius
    if kind == "square":
        return np.maximum(ax, ay) - 0.8 * radius
    if kind == "triangle":
        right = 0.866 * px - 0.5 * py - 0.5 * radius
        left = -0.866 * px - 0.5 * py - 0.5 * radius
        bottom = py - 0.5 * radius
        return np.maximum(np.maximum(right, left), bottom)
    if kind == "cross":
        arm = 0.35 * radius
        horiz = np.maximum(ax - radius, ay - arm)
        vert = np.maximum(ax - arm, ay - radius)
        return np.minimum(horiz, vert)
    if kind == "ring":
        return np.abs(np.hypot(px, py) - 0.7 * radius) - 0.3 * radius
    if kind == "diamond":
        return 0.7071 * (ax + ay) - 0.9 * radius
    if kind == "hexagon":
        return np.maximum(0.866 * ax + 0.5 * ay, ay) - 0.8 * radius
    if kind == "star":
        spike_h = 0.3 * ax + ay - radius
        spike_v = ax + 0.3 * ay - radius
        return np.minimum(spike_h, spike_v)
    raise ValueError(f"unknown shape kind {kind!r}")


class ShapeDataset:
    """Deterministically generated shape images with integer labels.

    Images are cached as 8-bit arrays; `native` and `oversampled` return
    float64 Images in [0, 1]. Labels are assigned round-robin by index.
    """

    def __init__(self, spec: DatasetSpec):
        self.spec = spec
        self.classes = spec.classes
        self.native_spec = ImageSpec(width=spec.side, height=spec.side, channels=spec.channels)
        hi_side = spec.side * spec.oversample
        self.oversampled_spec = ImageSpec(width=hi_side, height=hi_side, channels=spec.channels)
        self.labels = np.arange(spec.size, dtype=np.int64) % spec.classes
        self._native = np.zeros((spec.size, spec.side, spec.side), dtype=np.uint8)
        self._hi = np.zeros((spec.size, hi_side, hi_side), dtype=np.uint8)
        for i in range(spec.size):
            hi, native = _render_sample(spec, i, int(self.labels[i]))
            self._hi[i] = hi
            self._native[i] = native

    def __len__(self):
        return self.spec.size

    @property
    def oversample(self) -> int:
        return self.spec.oversample

    def label(self, i: int) -> int:
        return int(self.labels[i])

    def _wrap(self, plane: np.ndarray, spec: ImageSpec) -> Image:
        arr = plane.astype(np.float64) / 255.0
        px = np.broadcast_to(arr, (spec.channels,) + arr.shape).copy()
        return Image(spec=spec, pixels=px)

    def native(self, i: int) -> Image:
        return self._wrap(self._native[i], self.native_spec)

    def oversampled(self, i: int) -> Image:
        return self._wrap(self._hi[i], self.oversampled_spec)

    def sample(self, i: int) -> Sample:
        return Sample(image=self.native(i), label=self.label(i))


def _render_sample(spec: DatasetSpec, index: int, label: int):
    """Render one sample at oversampled and native resolution (uint8)."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    hi_side = spec.side * spec.oversample
    kind = SHAPE_NAMES[label]

    radius_hi = float(rng.uniform(*spec.size_range)) * hi_side / 2.0
    theta = float(rng.uniform(0.0, 2.0 * np.pi))
    margin = radius_hi * 1.25 + 2.0
    lo, hi = margin, hi_side - margin
    while True:
        cx = float(rng.uniform(lo, hi))
        cy = float(rng.uniform(lo, hi))
        if not spec.offcenter:
            break
        # off-center placement: keep the shape out of the central region
        mid = hi_side / 2.0
        if max(abs(cx - mid), abs(cy - mid)) >= 0.22 * hi_side:
            break
    bg = float(rng.uniform(0.15, 0.85))
    delta = float(rng.uniform(0.35, 0.6))
    sign = 1.0 if rng.integers(0, 2) == 1 else -1.0
    fg = bg + sign * delta
    if not (0.02 <= fg <= 0.98):
        fg = bg - sign * delta

    yy, xx = np.mgrid[0:hi_side, 0:hi_side].astype(np.float64)
    xx += 0.5 - cx
    yy += 0.5 - cy
    ct, st = np.cos(theta), np.sin(theta)
    rx = ct * xx + st * yy
    ry = -st * xx + ct * yy
    coverage = np.clip(0.5 - _sdf(kind, rx, ry, radius_hi), 0.0, 1.0)
    signal_hi = bg + (fg - bg) * coverage

    f = spec.oversample
    signal_native = signal_hi.reshape(spec.side, f, spec.side, f).mean(axis=(1, 3))
    noisy_hi = signal_hi + rng.normal(0.0, spec.noise, size=signal_hi.shape)
    noisy_native = signal_native + rng.normal(0.0, spec.noise, size=signal_native.shape)

    def quantize(a):
        return np.clip(np.rint(np.clip(a, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)

    return quantize(noisy_hi), quantize(noisy_native)


def synth_shapes(spec: DatasetSpec) -> ShapeDataset:
    """Generate the dataset described by spec (pure function of the spec)."""
    return ShapeDataset(spec)


def split_indices(n: int, val_fraction: float, seed: int):
    """Disjoint, exhaustive train/val index split via a seeded permutation."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5E1EC7]))
    perm = rng.permutation(n)
    n_val = int(round(val_fraction * n))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


class RawDataset:
    """Images and labels loaded from IDX files (native resolution only).

    The oversampled view is a bilinear upsample of the native image, used
    when no true hi-res source exists.
    """

    def __init__(self, images: np.ndarray, labels: np.ndarray, oversample: int = 2):
        if images.shape[0] != labels.shape[0]:
            raise ParseError(
                f"image count {images.shape[0]} != label count {labels.shape[0]}", offset=None
            )
        self._images = images  # (n, h, w) uint8
        self.labels = labels.astype(np.int64)
        self.classes = int(labels.max()) + 1 if len(labels) else 0
        h, w = images.shape[1:]
        self.oversample = oversample
        self.native_spec = ImageSpec(width=w, height=h, channels=1)
        self.oversampled_spec = ImageSpec(width=w * oversample, height=h * oversample, channels=1)

    def __len__(self):
        return self._images.shape[0]

    def label(self, i: int) -> int:
        return int(self.labels[i])

    def native(self, i: int) -> Image:
        arr = self._images[i].astype(np.float64) / 255.0
        return Image(spec=self.native_spec, pixels=arr[None])

    def oversampled(self, i: int) -> Image:
        native = self.native(i)
        f = self.oversample
        big = PatchSet(
            image=self.native_spec,
            r=self.native_spec.width * f,
            patches=(Patch(x=0.0, y=0.0, s=1.0 / f),),
        )
        up = sample_patchset(native, big)[0]  # (f*w, f*w, 1)
        return Image(spec=self.oversampled_spec, pixels=np.moveaxis(up, 2, 0).copy())


def _read_idx(path, want_dtype=0x08):
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4:
        raise ParseError("file shorter than IDX magic", offset=len(data))
    zero1, zero2, dtype, ndim = data[0], data[1], data[2], data[3]
    if zero1 != 0 or zero2 != 0:
        raise ParseError(f"bad IDX magic {data[:4]!r}", offset=0)
    if dtype != want_dtype:
        raise ParseError(f"unsupported IDX dtype 0x{dtype:02x}", offset=2)
    dims = []
    pos = 4
    for _ in range(ndim):
        if pos + 4 > len(data):
            raise ParseError("truncated IDX dimension header", offset=pos)
        dims.append(struct.unpack(">I", data[pos : pos + 4])[0])
        pos += 4
    count = int(np.prod(dims)) if dims else 0
    payload = data[pos : pos + count]
    if len(payload) < count:
        raise ParseError(
            f"truncated IDX payload: need {count} bytes, have {len(payload)}",
            offset=pos + len(payload),
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_raw_idx(images_path, labels_path) -> RawDataset:
    """Load a u8 IDX image tensor (N, H, W) and label vector (N)."""
    images = _read_idx(images_path)
    if images.ndim != 3:
        raise ParseError(f"expected 3-d IDX image tensor, got {images.ndim}-d", offset=3)
    labels = _read_idx(labels_path)
    if labels.ndim != 1:
        raise ParseError(f"expected 1-d IDX label vector, got {labels.ndim}-d", offset=3)
    return RawDataset(images=images.copy(), labels=labels.copy())


_CACHE_MAGIC = b"EPDS"
_CACHE_VERSION = 1


def save_dataset_cache(path, dataset: ShapeDataset) -> None:
    """Write native images and labels in the named-tensor container format."""
    from .tensorio import write_tensors

    tensors = {
        "images": dataset._native.astype(np.float64) / 255.0,
        "labels": dataset.labels.astype(np.float64),
        "meta.classes": np.array(float(dataset.classes)),
        "meta.seed": np.array(float(dataset.spec.seed)),
        "meta.side": np.array(float(dataset.spec.side)),
    }
    with open(path, "wb") as f:
        f.write(_CACHE_MAGIC)
        f.write(struct.pack("<I", _CACHE_VERSION))
        write_tensors(f, tensors)


def load_dataset_cache(path) -> RawDataset:
    """Read a dataset cache back as a raw (native-only) dataset."""
    from .tensorio import read_tensors

    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _CACHE_MAGIC:
        raise ParseError(f"bad dataset cache magic {data[:4]!r}", offset=0)
    (version,) = struct.unpack_from("<I", data, 4)
    if version != _CACHE_VERSION:
        raise ParseError(f"unsupported dataset cache version {version}", offset=4)
    tensors = read_tensors(data, 8)
    images = np.clip(np.rint(tensors["images"] * 255.0), 0, 255).astype(np.uint8)
    labels = tensors["labels"].astype(np.int64)
    return RawDataset(images=images, labels=labels)
