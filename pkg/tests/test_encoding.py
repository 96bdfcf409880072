import math

import mpmath
import numpy as np
import pytest

from elastipatch.encoding import EncodingConfig, encode_patch, encode_patchset, sincos_1d
from elastipatch.geometry import ImageSpec, Patch, make_grid
from elastipatch.perturb import e_scale


def mp_sincos(pos, l, base=10000.0):
    """Arbitrary-precision oracle for the interleaved sin/cos vector."""
    mpmath.mp.dps = 50
    out = []
    for i in range(l // 2):
        arg = mpmath.mpf(pos) / mpmath.mpf(base) ** (mpmath.mpf(2 * i) / l)
        out.append(float(mpmath.sin(arg)))
        out.append(float(mpmath.cos(arg)))
    return np.array(out)


def test_pos_zero_pattern():
    cfg = EncodingConfig(l=8)
    assert np.array_equal(sincos_1d(0.0, cfg), np.array([0.0, 1.0] * 4))


def test_pi_point_analytic():
    cfg = EncodingConfig(l=8)
    v = sincos_1d(math.pi, cfg)
    assert abs(v[0] - math.sin(math.pi)) == 0.0
    assert v[1] == pytest.approx(-1.0, abs=1e-15)


def test_sincos_matches_high_precision_oracle():
    cfg = EncodingConfig(l=8)
    v = sincos_1d(16.0, cfg)
    assert v.shape == (8,)
    assert np.max(np.abs(v - mp_sincos(16.0, 8))) < 1e-12


@pytest.mark.parametrize("pos", [0.37, 5.0, 123.456, 223.0, 1000.0])
def test_sincos_oracle_various_positions(pos):
    cfg = EncodingConfig(l=16)
    assert np.max(np.abs(sincos_1d(pos, cfg) - mp_sincos(pos, 16))) < 1e-12


def test_encode_patch_structure():
    cfg = EncodingConfig(l=8)
    p = Patch(0.0, 0.0, 1.0)
    enc = encode_patch(p, 16, cfg)
    assert enc.shape == (32,)
    zero = sincos_1d(0.0, cfg)
    sixteen = sincos_1d(16.0, cfg)
    assert np.array_equal(enc[:8], zero)
    assert np.array_equal(enc[8:16], zero)
    assert np.array_equal(enc[16:24], sixteen)
    assert np.array_equal(enc[24:32], sixteen)


def test_corner_order_is_x_y_xrs_yrs():
    cfg = EncodingConfig(l=4)
    p = Patch(1.0, 2.0, 0.5)
    enc = encode_patch(p, 8, cfg)
    assert np.array_equal(enc[0:4], sincos_1d(1.0, cfg))
    assert np.array_equal(enc[4:8], sincos_1d(2.0, cfg))
    assert np.array_equal(enc[8:12], sincos_1d(5.0, cfg))
    assert np.array_equal(enc[12:16], sincos_1d(6.0, cfg))


def test_scale_change_touches_only_second_half():
    cfg = EncodingConfig(l=8)
    a = encode_patch(Patch(3.0, 7.0, 1.0), 16, cfg)
    b = encode_patch(Patch(3.0, 7.0, 1.7), 16, cfg)
    assert np.array_equal(a[: 2 * cfg.l], b[: 2 * cfg.l])
    assert not np.array_equal(a[2 * cfg.l :], b[2 * cfg.l :])


def test_squared_norm_is_two_l():
    cfg = EncodingConfig(l=16)
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = Patch(float(rng.uniform(-10, 250)), float(rng.uniform(-10, 250)), float(rng.uniform(0.1, 4)))
        enc = encode_patch(p, 16, cfg)
        assert (enc**2).sum() == pytest.approx(2 * cfg.l, abs=1e-12)


def test_shift_consistency():
    """Encoding of a moved patch equals encoding at the shifted corners."""
    cfg = EncodingConfig(l=8)
    p = Patch(12.0, 30.0, 1.25)
    dx, dy = 3.5, -7.25
    moved = Patch(p.x + dx, p.y + dy, p.s)
    direct = encode_patch(moved, 16, cfg)
    rebuilt = np.concatenate(
        [
            sincos_1d(p.x + dx, cfg),
            sincos_1d(p.y + dy, cfg),
            sincos_1d(p.x + 16 * p.s + dx, cfg),
            sincos_1d(p.y + 16 * p.s + dy, cfg),
        ]
    )
    assert np.array_equal(direct, rebuilt)


def test_scale_locality_formula():
    """Scale change offsets only the lower-right corners, by r * ds."""
    cfg = EncodingConfig(l=8)
    p = Patch(5.0, 9.0, 1.0)
    ds = 0.375
    scaled = Patch(p.x, p.y, p.s + ds)
    direct = encode_patch(scaled, 16, cfg)
    rebuilt = np.concatenate(
        [
            sincos_1d(p.x, cfg),
            sincos_1d(p.y, cfg),
            sincos_1d(p.x + 16 * p.s + 16 * ds, cfg),
            sincos_1d(p.y + 16 * p.s + 16 * ds, cfg),
        ]
    )
    assert np.array_equal(direct, rebuilt)


def test_batch_encoding_matches_single():
    cfg = EncodingConfig(l=16)
    grid = make_grid(ImageSpec(64, 64, 1), 8)
    scaled = e_scale(grid, 0.5, 2.0, np.random.default_rng(1))
    batch = encode_patchset(scaled, cfg)
    assert batch.shape == (64, 64)
    for i, p in enumerate(scaled):
        assert np.array_equal(batch[i], encode_patch(p, 8, cfg))


def test_determinism_bit_identical():
    cfg = EncodingConfig(l=16)
    p = Patch(0.123456789, 98.7654321, 1.618)
    a = encode_patch(p, 16, cfg)
    b = encode_patch(p, 16, cfg)
    assert a.tobytes() == b.tobytes()


def test_config_validation():
    with pytest.raises(ValueError):
        EncodingConfig(l=7)
    with pytest.raises(ValueError):
        EncodingConfig(l=0)
    assert EncodingConfig(l=16).dim == 64
