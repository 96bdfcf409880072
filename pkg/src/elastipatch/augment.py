"""PatchMix, elastic MixUp, and the randomized training-time patch sampler.

PatchMix swaps a random subset of tokens between two extracted batches and
recomputes the mixed label from the actual per-source coverage area, so the
label matches what the model really sees even when footprints overlap or
leave gaps. Elastic MixUp blends token pixels of two batches that share the
same per-index patch scales.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .encoding import EncodingConfig, encode_patchset
from .extract import Image, TokenBatch, sample_patchset
from .geometry import ImageSpec, Patch, PatchSet, rasterize_coverage
from .perturb import subset_indices


@dataclass(frozen=True)
class SoftLabel:
    """Per-class probability weights: non-negative, summing to one."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        if np.any(w < 0):
            raise ValueError("label weights must be non-negative")
        if abs(float(w.sum()) - 1.0) > 1e-9:
            raise ValueError(f"label weights must sum to 1, got {w.sum()}")

    @classmethod
    def one_hot(cls, label: int, classes: int) -> "SoftLabel":
        w = np.zeros(classes, dtype=np.float64)
        w[label] = 1.0
        return cls(weights=w)

    def mix(self, other: "SoftLabel", w_self: float) -> "SoftLabel":
        return SoftLabel(weights=w_self * self.weights + (1.0 - w_self) * other.weights)


@dataclass(frozen=True)
class MixPlan:
    """Which token indices come from batch B, and the drawn mix fraction."""

    take_b: np.ndarray  # boolean per token
    mix_fraction: float


@dataclass(frozen=True)
class TrainAugmentConfig:
    """Training-regime knobs: scale range, oversampled source, mix settings."""

    scale_min: float = 1.0 / 3.0
    scale_max: float = 1.0
    oversample: float = 2.0
    patchmix_prob: float = 0.5
    mixup_alpha: float = 0.8


def plan_patchmix(n: int, mix_fraction: float, rng) -> MixPlan:
    """Choose round(mix_fraction * n) token indices uniformly, no replacement."""
    if not (0.0 <= mix_fraction <= 1.0):
        raise ValueError(f"mix fraction must lie in [0, 1], got {mix_fraction}")
    k = int(round(mix_fraction * n))
    flags = np.zeros(n, dtype=bool)
    if k:
        flags[sorted(subset_indices(n, k, rng))] = True
    return MixPlan(take_b=flags, mix_fraction=mix_fraction)


def coverage_label_weight(patches: PatchSet, take_b: np.ndarray) -> float:
    """Area share of B-sourced footprints over all covered pixels.

    Pixels covered by both sources are credited fractionally by per-source
    cover counts. Falls back to the token fraction when nothing rasterizes
    (all footprints off-image).
    """
    set_a = patches.with_patches(p for p, b in zip(patches.patches, take_b) if not b)
    set_b = patches.with_patches(p for p, b in zip(patches.patches, take_b) if b)
    ca = rasterize_coverage(set_a).counts
    cb = rasterize_coverage(set_b).counts
    tot = ca + cb
    covered = tot > 0
    if not covered.any():
        return float(np.count_nonzero(take_b)) / max(1, len(take_b))
    credit_b = float((cb[covered] / tot[covered]).sum())
    return credit_b / float(np.count_nonzero(covered))


def patchmix(
    tokensA: TokenBatch,
    tokensB: TokenBatch,
    labelA: SoftLabel,
    labelB: SoftLabel,
    mix_fraction: float,
    rng,
) -> tuple[TokenBatch, SoftLabel]:
    """Mix two token batches by swapping a random token subset from B into A.

    The output label weighs A and B by their actual covered-area shares,
    which reduces to the selected-token fraction for disjoint equal-area
    patches (the grid / CutMix case).
    """
    if len(tokensA) != len(tokensB):
        raise ValueError(f"token counts differ: {len(tokensA)} vs {len(tokensB)}")
    if tokensA.patches.image != tokensB.patches.image or tokensA.patches.r != tokensB.patches.r:
        raise ValueError("mixed batches must share image dimensions and patch resolution")
    plan = plan_patchmix(len(tokensA), mix_fraction, rng)
    take = plan.take_b
    pixels = np.where(take[:, None, None, None], tokensB.pixels, tokensA.pixels)
    encodings = np.where(take[:, None], tokensB.encodings, tokensA.encodings)
    mixed_patches = tokensA.patches.with_patches(
        replace(tokensB.patches[i], source=1) if take[i] else replace(tokensA.patches[i], source=0)
        for i in range(len(tokensA))
    )
    w_b = coverage_label_weight(mixed_patches, take)
    label = labelB.mix(labelA, w_b)  # w_b * B + (1 - w_b) * A
    return TokenBatch(pixels=pixels, encodings=encodings, patches=mixed_patches), label


def mixup_elastic(
    tokensA: TokenBatch,
    tokensB: TokenBatch,
    labelA: SoftLabel,
    labelB: SoftLabel,
    lam: float,
) -> tuple[TokenBatch, SoftLabel]:
    """Convex pixel blend lam*A + (1-lam)*B of two scale-aligned batches.

    Requires equal token counts and element-wise equal patch scales (the
    training pipeline draws one scale sequence for both images). Positions
    and encodings are taken from A.
    """
    if len(tokensA) != len(tokensB):
        raise ValueError(f"token counts differ: {len(tokensA)} vs {len(tokensB)}")
    if not (0.0 <= lam <= 1.0):
        raise ValueError(f"mixup lambda must lie in [0, 1], got {lam}")
    sa = [p.s for p in tokensA.patches]
    sb = [p.s for p in tokensB.patches]
    if sa != sb:
        raise ValueError("patch scale sequences differ element-wise")
    pixels = lam * tokensA.pixels + (1.0 - lam) * tokensB.pixels
    label = labelA.mix(labelB, lam)
    return TokenBatch(pixels=pixels, encodings=tokensA.encodings, patches=tokensA.patches), label


def training_sampler(image: ImageSpec, r: int, cfg: TrainAugmentConfig, rng) -> PatchSet:
    """Full-count random patch set for elastic training.

    Emits (width/r)*(height/r) patches with s ~ U[scale_min, scale_max] and
    positions uniform such that each footprint lies inside the image. Draw
    order per patch: s, then x, then y.
    """
    rng = np.random.default_rng(rng)
    n = (image.width // r) * (image.height // r)
    patches = []
    for _ in range(n):
        s = float(rng.uniform(cfg.scale_min, cfg.scale_max))
        side = r * s
        x = float(rng.uniform(0.0, max(0.0, image.width - side)))
        y = float(rng.uniform(0.0, max(0.0, image.height - side)))
        patches.append(Patch(x=x, y=y, s=s))
    return PatchSet(image=image, r=r, patches=tuple(patches))


def extract_from_oversampled(
    hi_img: Image, P: PatchSet, enc_cfg: EncodingConfig, factor: float
) -> TokenBatch:
    """Extract pixels from a higher-resolution render of the same scene.

    Patch coordinates stay in the native frame (and are encoded there); for
    pixel sampling they are scaled by `factor` to address the hi-res image,
    so sub-native scales gain true detail instead of interpolation.
    """
    scaled = PatchSet(
        image=hi_img.spec,
        r=P.r,
        patches=tuple(
            replace(p, x=p.x * factor, y=p.y * factor, s=p.s * factor) for p in P.patches
        ),
    )
    return TokenBatch(
        pixels=sample_patchset(hi_img, scaled),
        encodings=encode_patchset(P, enc_cfg),
        patches=P,
    )
