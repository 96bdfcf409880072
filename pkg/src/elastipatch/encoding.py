"""Four-corner sinusoidal positional encoding for continuous patch coordinates.

Each of the four corner coordinates x, y, x + r*s, y + r*s is expanded into an
interleaved sine/cosine vector of length l and the four vectors are
concatenated, giving every token a continuous position-and-extent signature of
dimension 4*l. Coordinates are raw pixels; encodings are computed in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Patch, PatchSet


@dataclass(frozen=True)
class EncodingConfig:
    """Per-coordinate embedding length l (even) and frequency base."""

    l: int = 16
    base: float = 10000.0

    def __post_init__(self):
        if self.l < 2 or self.l % 2 != 0:
            raise ValueError(f"embedding length must be even and >= 2, got {self.l}")

    @property
    def dim(self) -> int:
        """Total encoding dimension: four corners times l."""
        return 4 * self.l


def _wavelengths(cfg: EncodingConfig) -> np.ndarray:
    """Divisors base^(2i/l) for i = 0 .. l/2 - 1."""
    i = np.arange(cfg.l // 2, dtype=np.float64)
    return cfg.base ** (2.0 * i / cfg.l)


def sincos_1d(pos: float, cfg: EncodingConfig) -> np.ndarray:
    """Length-l vector with sin(pos/base^(2i/l)) at 2i and cos at 2i+1."""
    phase = np.asarray(pos, dtype=np.float64)[..., None] / _wavelengths(cfg)
    out = np.empty(phase.shape[:-1] + (cfg.l,), dtype=np.float64)
    out[..., 0::2] = np.sin(phase)
    out[..., 1::2] = np.cos(phase)
    return out


def encode_patch(p: Patch, r: int, cfg: EncodingConfig) -> np.ndarray:
    """Concatenated encodings of (x, y, x + r*s, y + r*s), in that order."""
    return encode_corners(
        np.array([[p.x, p.y, p.x + r * p.s, p.y + r * p.s]], dtype=np.float64), cfg
    )[0]


def encode_corners(corners: np.ndarray, cfg: EncodingConfig) -> np.ndarray:
    """Encode an (n, 4) array of corner coordinates into (n, 4*l)."""
    n = corners.shape[0]
    return sincos_1d(corners, cfg).reshape(n, 4 * cfg.l)


def encode_patchset(P: PatchSet, cfg: EncodingConfig) -> np.ndarray:
    """(n, 4*l) encodings for all patches of P, in patch order."""
    c = P.coords()
    corners = np.empty((len(P), 4), dtype=np.float64)
    corners[:, 0] = c[:, 0]
    corners[:, 1] = c[:, 1]
    corners[:, 2] = c[:, 0] + P.r * c[:, 2]
    corners[:, 3] = c[:, 1] + P.r * c[:, 2]
    return encode_corners(corners, cfg)
