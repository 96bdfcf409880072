"""GRID, CENTRAL and EDGE patch-selection strategies.

CENTRAL starts from a coarse uniform grid and repeatedly quad-splits the
patch whose footprint center is nearest the image center. EDGE quad-splits
the patch with the largest Canny edge-pixel sum, keeping a list ordered by
descending score. Both emit exact partitions of the image.

The Canny detector is implemented with a fixed arithmetic order (sequential
accumulation over filter taps) so that results are reproducible and can be
checked bit-for-bit against a scalar reference implementation.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError
from .extract import Image
from .geometry import ImageSpec, Patch, PatchSet


@dataclass(frozen=True)
class EdgeMap:
    """Boolean edge bitmap, same height x width as the source image."""

    bitmap: np.ndarray


@dataclass(frozen=True)
class SplitQueueEntry:
    """A candidate footprint in the EDGE queue: square region plus its score."""

    x: int
    y: int
    side: int
    score: int


def _to_gray(img: Image) -> np.ndarray:
    px = img.pixels
    if img.spec.channels == 3:
        return px[0] * 0.299 + px[1] * 0.587 + px[2] * 0.114
    return px[0].astype(np.float64, copy=True)


def _gauss_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(4.0 * sigma))
    taps = np.exp(-(np.arange(-radius, radius + 1, dtype=np.float64) ** 2) / (2.0 * sigma * sigma))
    return taps / taps.sum()


def _blur(gray: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, edge-replicated borders, tap-order accumulation."""
    k = _gauss_kernel(sigma)
    radius = len(k) // 2
    padded = np.pad(gray, ((0, 0), (radius, radius)), mode="edge")
    out = np.zeros_like(gray)
    for i, w in enumerate(k):
        out += padded[:, i : i + gray.shape[1]] * w
    padded = np.pad(out, ((radius, radius), (0, 0)), mode="edge")
    out = np.zeros_like(gray)
    for i, w in enumerate(k):
        out += padded[i : i + gray.shape[0], :] * w
    return out


def _sobel(blurred: np.ndarray):
    """Sobel gradients with edge-replicated borders.

    gx uses [[-1,0,1],[-2,0,2],[-1,0,1]], gy its transpose; y grows downward.
    """
    p = np.pad(blurred, 1, mode="edge")
    h, w = blurred.shape
    win = {
        (dy, dx): p[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
        for dy in (-1, 0, 1)
        for dx in (-1, 0, 1)
    }
    gx = (
        -win[(-1, -1)] + win[(-1, 1)]
        - 2.0 * win[(0, -1)] + 2.0 * win[(0, 1)]
        - win[(1, -1)] + win[(1, 1)]
    )
    gy = (
        -win[(-1, -1)] - 2.0 * win[(-1, 0)] - win[(-1, 1)]
        + win[(1, -1)] + 2.0 * win[(1, 0)] + win[(1, 1)]
    )
    return gx, gy


_TAN_22_5 = math.tan(math.radians(22.5))
_TAN_67_5 = math.tan(math.radians(67.5))


def quantize_direction(gx, gy):
    """Quantize gradient direction (folded to [0, 180)) to an 8-neighbor axis.

    Bin 0 is horizontal (compare east/west), 1 the down-right diagonal, 2
    vertical, 3 the down-left diagonal. Boundaries are decided by slope
    comparison against tan(22.5) and tan(67.5), so no trigonometry is needed
    and a scalar reimplementation reproduces the bins exactly.
    """
    ax, ay = np.abs(gx), np.abs(gy)
    bins = np.full(np.shape(gx), 3, dtype=np.int8)
    same_sign = (gx > 0) == (gy > 0)
    bins[same_sign] = 1
    bins[ay < _TAN_22_5 * ax] = 0
    bins[ay >= _TAN_67_5 * ax] = 2
    return bins


def _nms(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Thin ridges to one pixel along the quantized gradient direction.

    A pixel survives iff its magnitude is strictly greater than the forward
    neighbor and >= the backward one; exact ties therefore resolve to the
    pixel later along the axis. Border pixels are suppressed.
    """
    h, w = mag.shape
    keep = np.zeros((h, w), dtype=bool)
    bins = quantize_direction(gx, gy)
    fwd = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    inner = np.s_[1 : h - 1, 1 : w - 1]
    for b, (dy, dx) in fwd.items():
        nf = mag[1 + dy : h - 1 + dy, 1 + dx : w - 1 + dx]
        nb = mag[1 - dy : h - 1 - dy, 1 - dx : w - 1 - dx]
        sel = bins[inner] == b
        keep[inner] |= sel & (mag[inner] > nf) & (mag[inner] >= nb)
    return keep


def _hysteresis(weak: np.ndarray, strong: np.ndarray) -> np.ndarray:
    """Grow strong pixels through the weak mask with 8-connectivity."""
    reached = strong.copy()
    while True:
        grown = reached.copy()
        grown[1:, :] |= reached[:-1, :]
        grown[:-1, :] |= reached[1:, :]
        grown[:, 1:] |= reached[:, :-1]
        grown[:, :-1] |= reached[:, 1:]
        grown[1:, 1:] |= reached[:-1, :-1]
        grown[1:, :-1] |= reached[:-1, 1:]
        grown[:-1, 1:] |= reached[1:, :-1]
        grown[:-1, :-1] |= reached[1:, 1:]
        grown &= weak
        grown |= strong
        if np.array_equal(grown, reached):
            return reached
        reached = grown


def canny(img: Image, sigma: float = 3.0, t_low: float = 0.1, t_high: float = 0.2) -> EdgeMap:
    """Canny edge detection: blur, Sobel, NMS, double threshold, hysteresis.

    Thresholds are fractions of the maximum gradient magnitude, so the output
    is invariant to uniform intensity scaling.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if not (0.0 <= t_low <= t_high <= 1.0):
        raise ValueError(f"need 0 <= t_low <= t_high <= 1, got {t_low}, {t_high}")
    gray = _to_gray(img)
    gx, gy = _sobel(_blur(gray, sigma))
    mag = np.sqrt(gx * gx + gy * gy)
    peak = mag.max()
    if peak == 0.0:
        return EdgeMap(bitmap=np.zeros(mag.shape, dtype=bool))
    norm = mag / peak
    ridge = _nms(mag, gx, gy)
    weak = ridge & (norm >= t_low)
    strong = ridge & (norm >= t_high)
    return EdgeMap(bitmap=_hysteresis(weak, strong))


# ---------------------------------------------------------------------------
# CENTRAL


def _initial_scale(image: ImageSpec, r: int) -> int:
    """Largest power-of-two starting scale <= 4 that tiles the image exactly."""
    for s0 in (4, 2, 1):
        if image.width % (r * s0) == 0 and image.height % (r * s0) == 0:
            return s0
    raise DimensionMismatchError(
        f"image {image.width}x{image.height} has no power-of-two coarse grid for r={r}"
    )


def _reachable_error(what, c0, target, max_count):
    counts = f"{c0} + 3k for k >= 0, up to {max_count}"
    raise ValueError(f"{what}: target {target} unreachable; reachable counts are {counts}")


def central_sampling(
    image: ImageSpec, r: int, target: int, min_side: float | None = None
) -> PatchSet:
    """Split the patches nearest the image center until `target` is reached.

    Starts from the coarsest power-of-two grid (scale <= 4) that tiles the
    image. Each step replaces one splittable patch with its four quadrants,
    choosing the largest side first, then the footprint center nearest the
    image center, then row-major order. Refinement therefore proceeds level
    by level, so the neutral target (the native grid count) reproduces the
    uniform unit-scale grid exactly. Every reachable count is c0 + 3k and
    the result always partitions the image.
    """
    s0 = _initial_scale(image, r)
    if min_side is None:
        min_side = r / 2
    side0 = float(r * s0)
    levels = 0
    while side0 / (2 ** (levels + 1)) >= min_side:
        levels += 1
    c0 = (image.width // (r * s0)) * (image.height // (r * s0))
    max_count = c0 * 4**levels
    if target < c0 or (target - c0) % 3 != 0 or target > max_count:
        _reachable_error("central_sampling", c0, target, max_count)

    boxes = [
        (float(cx * r * s0), float(cy * r * s0), side0)
        for cy in range(image.height // (r * s0))
        for cx in range(image.width // (r * s0))
    ]
    cx0, cy0 = image.width / 2.0, image.height / 2.0
    while len(boxes) < target:
        best = None
        best_key = None
        for i, (x, y, side) in enumerate(boxes):
            if side / 2.0 < min_side:
                continue
            d2 = (x + side / 2.0 - cx0) ** 2 + (y + side / 2.0 - cy0) ** 2
            key = (-side, d2, y, x)
            if best_key is None or key < best_key:
                best, best_key = i, key
        if best is None:
            _reachable_error("central_sampling", c0, target, max_count)
        x, y, side = boxes[best]
        half = side / 2.0
        quads = [(x, y, half), (x + half, y, half), (x, y + half, half), (x + half, y + half, half)]
        boxes[best : best + 1] = quads
    patches = tuple(Patch(x=x, y=y, s=side / r) for x, y, side in boxes)
    return PatchSet(image=image, r=r, patches=patches)


# ---------------------------------------------------------------------------
# EDGE


def _box_score(integral: np.ndarray, x: int, y: int, side: int) -> int:
    return int(
        integral[y + side, x + side]
        - integral[y, x + side]
        - integral[y + side, x]
        + integral[y, x]
    )


def edge_sampling(
    img: Image,
    r: int,
    target: int,
    initial_side: int | None = None,
    min_side: float | None = None,
    sigma: float = 3.0,
    t_low: float = 0.1,
    t_high: float = 0.2,
    edges: EdgeMap | None = None,
) -> PatchSet:
    """Quad-split the patches with the highest edge-pixel sums.

    The edge bitmap comes from `canny` (or is passed in via `edges`). The
    queue is kept in descending score order; each step splits the first entry
    whose side exceeds `min_side` and inserts the four quadrants, each after
    any existing equal scores (quadrants in row-major order). The returned
    patches are in final queue order and partition the image.
    """
    spec = img.spec
    if initial_side is None:
        initial_side = min(spec.width, spec.height) // 2
    if min_side is None:
        min_side = r / 2
    if initial_side < 1 or spec.width % initial_side != 0 or spec.height % initial_side != 0:
        raise DimensionMismatchError(
            f"image {spec.width}x{spec.height} not divisible by initial side {initial_side}"
        )
    c0 = (spec.width // initial_side) * (spec.height // initial_side)
    levels, side = 0, initial_side
    while side % 2 == 0 and side // 2 >= min_side:
        side //= 2
        levels += 1
    max_count = c0 * 4**levels
    if target < c0 or (target - c0) % 3 != 0 or target > max_count:
        _reachable_error("edge_sampling", c0, target, max_count)

    bitmap = (edges if edges is not None else canny(img, sigma, t_low, t_high)).bitmap
    integral = np.zeros((spec.height + 1, spec.width + 1), dtype=np.int64)
    integral[1:, 1:] = np.cumsum(np.cumsum(bitmap.astype(np.int64), axis=0), axis=1)

    queue: list[SplitQueueEntry] = []
    neg_scores: list[int] = []

    def insert(entry: SplitQueueEntry):
        i = bisect.bisect_right(neg_scores, -entry.score)
        neg_scores.insert(i, -entry.score)
        queue.insert(i, entry)

    initial = [
        SplitQueueEntry(
            x=cx * initial_side,
            y=cy * initial_side,
            side=initial_side,
            score=_box_score(integral, cx * initial_side, cy * initial_side, initial_side),
        )
        for cy in range(spec.height // initial_side)
        for cx in range(spec.width // initial_side)
    ]
    for e in initial:
        insert(e)

    while len(queue) < target:
        pick = None
        for i, e in enumerate(queue):
            if e.side % 2 == 0 and e.side // 2 >= min_side:
                pick = i
                break
        if pick is None:
            _reachable_error("edge_sampling", c0, target, max_count)
        e = queue.pop(pick)
        neg_scores.pop(pick)
        half = e.side // 2
        for dy in (0, 1):
            for dx in (0, 1):
                qx, qy = e.x + dx * half, e.y + dy * half
                insert(SplitQueueEntry(x=qx, y=qy, side=half, score=_box_score(integral, qx, qy, half)))

    patches = tuple(Patch(x=float(e.x), y=float(e.y), s=e.side / r) for e in queue)
    return PatchSet(image=spec, r=r, patches=patches)
