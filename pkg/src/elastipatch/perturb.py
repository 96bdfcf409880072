"""Scale, position, and missing-data perturbation operators.

All operators are pure: the random generator is an explicit argument and the
draw order is pinned so results reproduce across runs and machines. The
generator contract is numpy's PCG64 (a named, seedable 64-bit PRNG whose
uniform doubles come from 53-bit mantissa division). Draw order:

* scale: one uniform per patch, in patch-index order;
* position: per patch, dx then dy (q finite), or x then y (q infinite);
* missing data: d integer draws of a partial Fisher-Yates shuffle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .geometry import PatchSet


@dataclass(frozen=True)
class PerturbConfig:
    """Parameters of the perturbation pipeline.

    s1/s2 bound the per-patch scale draw; q is the positional shake as a
    fraction of the native patch size (math.inf means unrestricted placement
    within the image); d is the number of patches to drop, or a drop
    fraction when given as a float in [0, 1).
    """

    s1: float = 1.0
    s2: float = 1.0
    q: float = 0.0
    d: float | int = 0

    def __post_init__(self):
        if not (0 < self.s1 <= self.s2):
            raise ValueError(f"need 0 < s1 <= s2, got [{self.s1}, {self.s2}]")
        if self.q < 0:
            raise ValueError(f"shake fraction must be >= 0, got {self.q}")
        if self.d < 0 or (isinstance(self.d, float) and self.d >= 1 and self.d != int(self.d)):
            raise ValueError(f"dropout must be a count or a fraction in [0, 1), got {self.d}")

    def resolve_d(self, n: int) -> int:
        """Resolve the drop count for a set of n patches."""
        if isinstance(self.d, float) and 0 <= self.d < 1:
            return int(round(self.d * n))
        return int(self.d)

    @classmethod
    def from_dict(cls, obj: dict) -> "PerturbConfig":
        """Parse harness-config keys scale_min/scale_max/shake/dropout."""
        q = obj.get("shake", 0.0)
        if isinstance(q, str) and q.lower() in ("inf", "infinity"):
            q = math.inf
        return cls(
            s1=obj.get("scale_min", 1.0),
            s2=obj.get("scale_max", 1.0),
            q=q,
            d=obj.get("dropout", 0),
        )

    def to_dict(self) -> dict:
        q = "inf" if math.isinf(self.q) else self.q
        return {"scale_min": self.s1, "scale_max": self.s2, "shake": q, "dropout": self.d}


def e_scale(P: PatchSet, s1: float, s2: float, rng) -> PatchSet:
    """Redraw every patch's scale independently from U[s1, s2]."""
    if not (0 < s1 <= s2):
        raise ValueError(f"need 0 < s1 <= s2, got [{s1}, {s2}]")
    rng = np.random.default_rng(rng)
    scales = rng.uniform(s1, s2, size=len(P))
    return P.with_patches(
        replace(p, s=float(s)) for p, s in zip(P.patches, scales)
    )


def e_pos(P: PatchSet, q: float, rng) -> PatchSet:
    """Shake patch positions by offsets drawn from U[-r*q, r*q].

    q = math.inf switches to training mode: x and y are redrawn uniformly so
    that the footprint lies within the image.
    """
    if q < 0:
        raise ValueError(f"shake fraction must be >= 0, got {q}")
    rng = np.random.default_rng(rng)
    if math.isinf(q):
        u = rng.random(size=(len(P), 2))
        out = []
        for p, (ux, uy) in zip(P.patches, u):
            side = P.r * p.s
            x = ux * max(0.0, P.image.width - side)
            y = uy * max(0.0, P.image.height - side)
            out.append(replace(p, x=float(x), y=float(y)))
        return P.with_patches(out)
    amp = P.r * q
    deltas = rng.uniform(-amp, amp, size=(len(P), 2))
    return P.with_patches(
        replace(p, x=p.x + float(dx), y=p.y + float(dy))
        for p, (dx, dy) in zip(P.patches, deltas)
    )


def subset_indices(n: int, d: int, rng) -> set[int]:
    """Uniformly random d-subset of range(n) via a partial Fisher-Yates shuffle.

    Consumes exactly d integer draws from the generator.
    """
    rng = np.random.default_rng(rng)
    idx = list(range(n))
    for i in range(d):
        j = int(rng.integers(i, n))
        idx[i], idx[j] = idx[j], idx[i]
    return set(idx[:d])


def e_miss(P: PatchSet, d, rng) -> PatchSet:
    """Drop a uniformly random d-subset of patches; survivors keep order."""
    n = len(P)
    d = int(d)
    if not (0 <= d < n) and not (d == 0 and n == 0):
        raise ValueError(f"drop count must satisfy 0 <= d < {n}, got {d}")
    if d == 0:
        return P.with_patches(P.patches)
    dropped = subset_indices(n, d, rng)
    return P.with_patches(p for i, p in enumerate(P.patches) if i not in dropped)


def apply_pipeline(P: PatchSet, cfg: PerturbConfig, rng) -> PatchSet:
    """Compose the three operators: scale, then position, then missing data."""
    rng = np.random.default_rng(rng)
    out = e_scale(P, cfg.s1, cfg.s2, rng)
    out = e_pos(out, cfg.q, rng)
    out = e_miss(out, cfg.resolve_d(len(out)), rng)
    return out
