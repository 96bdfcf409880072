"""Patch geometry: grids, coverage rasterization, and block transforms.

A patch is a square region descriptor (x, y, s): top-left corner at pixel
coordinates (x, y) and footprint side r*s for a native token resolution r.
Coordinates are real-valued; rasterization maps footprints to the half-open
pixel box [x, x + r*s) x [y, y + r*s), so abutting tiles never double-count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionMismatchError


@dataclass(frozen=True)
class ImageSpec:
    """Pixel dimensions of a source image."""

    width: int
    height: int
    channels: int = 1

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image dimensions must be positive, got {self.width}x{self.height}")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")


@dataclass(frozen=True)
class Patch:
    """One sampled region: top-left (x, y), relative scale s, source tag.

    The footprint is the axis-aligned square [x, x + r*s] x [y, y + r*s];
    `source` identifies the originating image when batches are mixed.
    """

    x: float
    y: float
    s: float
    source: int = 0

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError(f"patch scale must be positive, got {self.s}")


@dataclass(frozen=True)
class PatchSet:
    """An ordered, immutable collection of patches over one image."""

    image: ImageSpec
    r: int
    patches: tuple[Patch, ...]

    def __post_init__(self):
        if self.r < 2:
            raise ValueError(f"native patch resolution must be >= 2, got {self.r}")
        object.__setattr__(self, "patches", tuple(self.patches))

    def __len__(self):
        return len(self.patches)

    def __iter__(self):
        return iter(self.patches)

    def __getitem__(self, i):
        return self.patches[i]

    def with_patches(self, patches) -> "PatchSet":
        return replace(self, patches=tuple(patches))

    def coords(self) -> np.ndarray:
        """(n, 3) float64 array of (x, y, s) rows in patch order."""
        return np.array([(p.x, p.y, p.s) for p in self.patches], dtype=np.float64).reshape(-1, 3)

    def to_json(self) -> dict:
        return {
            "image": {"w": self.image.width, "h": self.image.height, "c": self.image.channels},
            "r": self.r,
            "patches": [{"x": p.x, "y": p.y, "s": p.s, "src": p.source} for p in self.patches],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PatchSet":
        img = obj["image"]
        spec = ImageSpec(width=img["w"], height=img["h"], channels=img["c"])
        patches = tuple(
            Patch(x=p["x"], y=p["y"], s=p["s"], source=p.get("src", 0)) for p in obj["patches"]
        )
        return cls(image=spec, r=obj["r"], patches=patches)


@dataclass(frozen=True)
class CoverageMap:
    """Per-pixel count of covering patch footprints (height x width)."""

    counts: np.ndarray

    def covered_fraction(self) -> float:
        return float(np.count_nonzero(self.counts) / self.counts.size)


def make_grid(image: ImageSpec, r: int) -> PatchSet:
    """Regular non-overlapping tiling: (width/r) x (height/r) patches, s = 1.

    Patches are emitted row-major (left to right, top to bottom). Raises
    DimensionMismatchError when the image is not divisible by r.
    """
    if image.width % r != 0 or image.height % r != 0:
        raise DimensionMismatchError(
            f"image {image.width}x{image.height} not divisible by patch size {r}"
        )
    patches = tuple(
        Patch(x=float(cx * r), y=float(cy * r), s=1.0)
        for cy in range(image.height // r)
        for cx in range(image.width // r)
    )
    return PatchSet(image=image, r=r, patches=patches)


def make_density_grid(image: ImageSpec, r: int, n: int) -> PatchSet:
    """n x n tiling of a square image; footprint side width/n, s = width/(n*r)."""
    if n < 1:
        raise ValueError(f"grid side count must be >= 1, got {n}")
    if image.width != image.height:
        raise DimensionMismatchError(
            f"density grid needs a square image, got {image.width}x{image.height}"
        )
    side = image.width / n
    s = side / r
    patches = tuple(
        Patch(x=cx * side, y=cy * side, s=s) for cy in range(n) for cx in range(n)
    )
    return PatchSet(image=image, r=r, patches=patches)


def footprint_pixel_box(p: Patch, r: int, width: int, height: int):
    """Clipped half-open pixel index ranges (x0, x1, y0, y1) covered by p."""
    side = r * p.s
    x0 = max(0, math.ceil(p.x))
    y0 = max(0, math.ceil(p.y))
    x1 = min(width, math.ceil(p.x + side))
    y1 = min(height, math.ceil(p.y + side))
    return x0, x1, y0, y1


def rasterize_coverage(P: PatchSet) -> CoverageMap:
    """Count, per pixel, how many patch footprints cover it.

    Pixel (px, py) is covered by p iff x <= px < x + r*s and likewise in y;
    footprints are clipped to the image bounds before counting.
    """
    counts = np.zeros((P.image.height, P.image.width), dtype=np.int64)
    for p in P.patches:
        x0, x1, y0, y1 = footprint_pixel_box(p, P.r, P.image.width, P.image.height)
        if x0 < x1 and y0 < y1:
            counts[y0:y1, x0:x1] += 1
    return CoverageMap(counts=counts)


def coverage_fraction(P: PatchSet) -> float:
    """Fraction of image pixels covered by at least one footprint."""
    return rasterize_coverage(P).covered_fraction()


def _grid_cell_indices(P: PatchSet, block_origin, what: str):
    """Indices of the four unmodified grid cells of the 2x2 block, row-major."""
    bx, by = block_origin
    r = P.r
    ncols = P.image.width // r
    nrows = P.image.height // r
    if bx < 0 or by < 0 or 2 * bx + 1 >= ncols or 2 * by + 1 >= nrows:
        raise ValueError(f"{what}: block origin {block_origin} out of range for {ncols}x{nrows} grid")
    idx = []
    for dy in (0, 1):
        for dx in (0, 1):
            want = (float((2 * bx + dx) * r), float((2 * by + dy) * r))
            found = None
            for i, p in enumerate(P.patches):
                if p.x == want[0] and p.y == want[1] and p.s == 1.0:
                    found = i
                    break
            if found is None:
                raise ValueError(
                    f"{what}: grid cell at {want} missing or already modified in block {block_origin}"
                )
            idx.append(found)
    return idx


def block_rescale(P: PatchSet, block_origin, rng=None) -> PatchSet:
    """Replace a 2x2 block of unit-scale grid patches with one patch of s = 2.

    Coverage is unchanged and the token count drops by exactly 3. The merged
    patch takes the list position of the block's first (row-major) member.
    `rng` is accepted for signature parity with block_drop and is not used.
    """
    idx = _grid_cell_indices(P, block_origin, "block_rescale")
    bx, by = block_origin
    merged = Patch(x=float(2 * bx * P.r), y=float(2 * by * P.r), s=2.0)
    drop = set(idx[1:])
    out = []
    for i, p in enumerate(P.patches):
        if i == idx[0]:
            out.append(merged)
        elif i not in drop:
            out.append(p)
    return P.with_patches(out)


def block_drop(P: PatchSet, block_origin, rng) -> PatchSet:
    """Remove three of the four patches in a 2x2 grid block, keeping one.

    The survivor is chosen uniformly among the four (one integer draw);
    it is left unmodified at its original list position.
    """
    idx = _grid_cell_indices(P, block_origin, "block_drop")
    rng = np.random.default_rng(rng)
    keep = idx[int(rng.integers(0, 4))]
    drop = set(idx) - {keep}
    return P.with_patches(p for i, p in enumerate(P.patches) if i not in drop)


def add_redundant_patches(P: PatchSet, k: int, s_min: float, s_max: float, rng) -> PatchSet:
    """Append k random patches with s ~ U[s_min, s_max], footprints in-bounds.

    Draw order per appended patch: s, then x, then y. Original patches are
    untouched. Raises ValueError when the largest footprint cannot fit.
    """
    if k < 0:
        raise ValueError(f"patch count must be >= 0, got {k}")
    if not (0 < s_min <= s_max):
        raise ValueError(f"need 0 < s_min <= s_max, got [{s_min}, {s_max}]")
    if P.r * s_max > min(P.image.width, P.image.height):
        raise ValueError(
            f"footprint {P.r * s_max} exceeds image side "
            f"{min(P.image.width, P.image.height)}"
        )
    rng = np.random.default_rng(rng)
    extra = []
    for _ in range(k):
        s = float(rng.uniform(s_min, s_max))
        side = P.r * s
        x = float(rng.uniform(0.0, P.image.width - side))
        y = float(rng.uniform(0.0, P.image.height - side))
        extra.append(Patch(x=x, y=y, s=s))
    return P.with_patches(P.patches + tuple(extra))
