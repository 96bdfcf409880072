"""Sampling-strategy tests.

The scalar Canny oracle in oracles.py follows the documented detector
contract (tap-order blur accumulation, Sobel expression order, sqrt
magnitude, slope-comparison direction bins, tie rule, BFS hysteresis) with
plain Python loops, so its boolean output must match the vectorized
detector exactly.
"""

import numpy as np
import pytest
from oracles import reference_canny

from elastipatch.errors import DimensionMismatchError
from elastipatch.extract import image_from_array
from elastipatch.geometry import ImageSpec, make_grid, rasterize_coverage
from elastipatch.sampling import EdgeMap, canny, central_sampling, edge_sampling


def step_image(side=48, col=None):
    arr = np.zeros((side, side))
    arr[:, (col or side // 2):] = 1.0
    return image_from_array(arr)


def test_constant_image_has_no_edges():
    img = image_from_array(np.full((32, 32), 0.5))
    em = canny(img, sigma=2.0)
    assert isinstance(em, EdgeMap)
    assert not em.bitmap.any()


def test_vertical_step_gives_single_column_line():
    em = canny(step_image(48, 24), sigma=2.0)
    hit_cols = np.unique(np.nonzero(em.bitmap)[1])
    assert list(hit_cols) == [24]
    rows = np.nonzero(em.bitmap)[0]
    assert len(rows) > 20  # a line, not isolated points


def test_intensity_scaling_invariance():
    rng = np.random.default_rng(0)
    arr = rng.random((40, 40))
    a = canny(image_from_array(arr), sigma=1.5)
    b = canny(image_from_array(arr * 2.0), sigma=1.5)
    assert np.array_equal(a.bitmap, b.bitmap)


@pytest.mark.parametrize(
    "maker,sigma",
    [
        (lambda: step_image(32, 16), 1.5),
        (lambda: image_from_array(np.random.default_rng(1).random((32, 32))), 1.5),
        (lambda: image_from_array(np.random.default_rng(2).random((24, 24, 3))), 1.0),
        (lambda: step_image(40, 13), 3.0),
    ],
)
def test_canny_matches_scalar_reference(maker, sigma):
    img = maker()
    got = canny(img, sigma=sigma, t_low=0.1, t_high=0.2)
    want = reference_canny(img, sigma=sigma, t_low=0.1, t_high=0.2)
    assert np.array_equal(got.bitmap, want)


def test_canny_argument_validation():
    img = step_image(16)
    with pytest.raises(ValueError):
        canny(img, sigma=0.0)
    with pytest.raises(ValueError):
        canny(img, sigma=1.0, t_low=0.5, t_high=0.2)


# ---------------------------------------------------------------------------
# CENTRAL


def test_central_neutral_point_is_unit_grid():
    spec = ImageSpec(224, 224, 1)
    c = central_sampling(spec, 16, 196)
    assert len(c) == 196
    assert all(p.s == 1.0 for p in c)
    assert {(p.x, p.y) for p in c} == {(p.x, p.y) for p in make_grid(spec, 16)}


def test_central_no_splits_at_initial_count():
    spec = ImageSpec(64, 64, 1)
    c = central_sampling(spec, 8, 4)  # s0 = 4 -> 2x2 coarse grid
    assert len(c) == 4
    assert all(p.s == 4.0 for p in c)


def test_central_partitions_for_valid_targets():
    spec = ImageSpec(64, 64, 1)
    for target in (4, 7, 16, 31, 64, 97, 154, 256):
        c = central_sampling(spec, 8, target)
        assert len(c) == target
        assert (rasterize_coverage(c).counts == 1).all()


def test_central_splits_are_centered():
    spec = ImageSpec(64, 64, 1)
    c = central_sampling(spec, 8, 16 + 9)  # three splits past the 16-patch level
    small = [p for p in c if p.s == 1.0]
    # the refined patches hug the image center
    for p in small:
        cx = p.x + 4 * p.s
        cy = p.y + 4 * p.s
        assert abs(cx - 32) <= 16 and abs(cy - 32) <= 16


def test_central_unreachable_targets_name_reachable_counts():
    spec = ImageSpec(64, 64, 1)
    with pytest.raises(ValueError) as err:
        central_sampling(spec, 8, 5)
    assert "4 + 3k" in str(err.value)
    with pytest.raises(ValueError):
        central_sampling(spec, 8, 3)
    with pytest.raises(ValueError):
        central_sampling(spec, 8, 100000)


def test_central_deterministic():
    spec = ImageSpec(224, 224, 1)
    assert central_sampling(spec, 16, 118) == central_sampling(spec, 16, 118)


# ---------------------------------------------------------------------------
# EDGE


def cross_quadrant_image(side=64):
    """Edges confined to the top-left quadrant: a bright cross on darkness."""
    arr = np.full((side, side), 0.1)
    q = side // 2
    c = q // 2
    arr[c - 2 : c + 2, 4 : q - 4] = 0.9  # horizontal bar
    arr[4 : q - 4, c - 2 : c + 2] = 0.9  # vertical bar
    return image_from_array(arr)


def test_edge_initial_grid_and_reachable_targets():
    img = image_from_array(np.zeros((224, 224)))
    P = edge_sampling(img, 16, 4)
    assert len(P) == 4
    assert all(p.s * 16 == 112 for p in P)
    for target in (7, 10, 22):
        assert len(edge_sampling(img, 16, target)) == target


def test_edge_blank_image_still_partitions():
    img = image_from_array(np.zeros((64, 64)))
    for target in (4, 16, 40):
        P = edge_sampling(img, 8, target)
        assert len(P) == target
        assert (rasterize_coverage(P).counts == 1).all()


def test_edge_concentrates_on_edgy_quadrant():
    img = cross_quadrant_image(64)
    P = edge_sampling(img, 8, 16, sigma=2.0)
    assert len(P) == 16
    quadrant_counts = {"tl": 0, "tr": 0, "bl": 0, "br": 0}
    for p in P:
        cx = p.x + 8 * p.s / 2
        cy = p.y + 8 * p.s / 2
        key = ("t" if cy < 32 else "b") + ("l" if cx < 32 else "r")
        quadrant_counts[key] += 1
    others = [quadrant_counts[k] for k in ("tr", "bl", "br")]
    assert quadrant_counts["tl"] > max(others)
    assert (rasterize_coverage(P).counts == 1).all()
    assert all(p.s * 8 >= 4 for p in P)


def test_edge_respects_min_side_and_side_set():
    img = cross_quadrant_image(64)
    P = edge_sampling(img, 8, 28, sigma=2.0, min_side=8)
    sides = {p.s * 8 for p in P}
    assert sides <= {32.0, 16.0, 8.0}
    assert len(P) == 28


def test_edge_scores_order_queue():
    """Patches come out in descending edge-score order."""
    img = cross_quadrant_image(64)
    from elastipatch.sampling import canny as run_canny

    edges = run_canny(img, 2.0, 0.1, 0.2).bitmap
    P = edge_sampling(img, 8, 10, sigma=2.0)
    scores = []
    for p in P:
        x0, y0, side = int(p.x), int(p.y), int(p.s * 8)
        scores.append(int(edges[y0 : y0 + side, x0 : x0 + side].sum()))
    assert scores == sorted(scores, reverse=True)


def test_edge_unreachable_and_indivisible():
    img = image_from_array(np.zeros((64, 64)))
    with pytest.raises(ValueError) as err:
        edge_sampling(img, 8, 5)
    assert "4 + 3k" in str(err.value)
    with pytest.raises(ValueError):
        edge_sampling(img, 8, 10**6)
    with pytest.raises(DimensionMismatchError):
        edge_sampling(img, 8, 4, initial_side=30)


def test_edge_deterministic_and_accepts_precomputed_edges():
    img = cross_quadrant_image(64)
    a = edge_sampling(img, 8, 19, sigma=2.0)
    b = edge_sampling(img, 8, 19, sigma=2.0)
    assert a == b
    edges = canny(img, 2.0, 0.1, 0.2)
    c = edge_sampling(img, 8, 19, edges=edges)
    assert c == a
