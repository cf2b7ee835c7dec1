from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.distance import pdist, squareform

from ptychoflow.core import (
    BoundsError,
    ExperimentGeometry,
    PhaseMap,
    ScanPath,
    ScanPosition,
    extract_patch,
    grid_path,
    insert_patch,
    position_to_pixel,
    real_space_pixel,
    spiral_path,
    spiral_scale,
)


def brute_median_nn(xy: np.ndarray) -> float:
    d = squareform(pdist(xy))
    np.fill_diagonal(d, np.inf)
    return float(np.median(d.min(axis=1)))


def test_spiral_963_median_spacing():
    path = spiral_path(963, 50.0)
    assert len(path) == 963
    assert 47.5 <= brute_median_nn(path.xy()) <= 52.5


def test_spiral_single_point_at_origin():
    path = spiral_path(1, 50.0)
    assert len(path) == 1
    assert (path[0].x, path[0].y) == (0.0, 0.0)


def test_spiral_small_radius_bound():
    s0 = spiral_scale(10)
    r = np.hypot(*spiral_path(10, 50.0).xy().T)
    assert r.max() <= 50 * math.sqrt(10) * s0 * 1.01
    # closed-form radius oracle r_k = step * sqrt(k) * s0
    np.testing.assert_allclose(r, 50 * np.sqrt(np.arange(10)) * s0, rtol=1e-12, atol=1e-9)


def test_spiral_golden_angle():
    xy = spiral_path(5, 10.0).xy()
    theta = np.unwrap(np.arctan2(xy[1:, 1], xy[1:, 0]))
    np.testing.assert_allclose(np.diff(theta) % (2 * np.pi), math.radians(137.50776), atol=1e-9)


def test_spiral_positions_distinct_at_1e4():
    xy = spiral_path(10_000, 50.0).xy()
    assert len(np.unique(np.round(xy, 6), axis=0)) == 10_000


@pytest.mark.parametrize("n,step", [(0, 50.0), (-3, 50.0), (5, 0.0), (5, -1.0)])
def test_spiral_invalid_arguments(n, step):
    with pytest.raises(ValueError):
        spiral_path(n, step)


def test_grid_path_is_centred_with_exact_step():
    path = grid_path(25, 20.0)
    xy = path.xy()
    assert len(path) == 25
    np.testing.assert_allclose(xy.mean(axis=0), 0.0, atol=1e-12)
    assert brute_median_nn(xy) == pytest.approx(20.0)


def test_real_space_pixel_reference_geometry():
    geom = ExperimentGeometry(10.4, 55.0, 1.55, 512)
    oracle = (1.23984 / 10.4) * 1e-9 * 1.55 / (512 * 55e-6) * 1e9
    assert real_space_pixel(geom) == pytest.approx(oracle, rel=1e-12)
    assert real_space_pixel(geom) == pytest.approx(6.56, abs=0.01)


@given(
    e=st.floats(1.0, 30.0),
    pix=st.floats(5.0, 200.0),
    z=st.floats(0.1, 10.0),
    k=st.integers(3, 10),
)
def test_real_space_pixel_homogeneity(e, pix, z, k):
    g = ExperimentGeometry(e, pix, z, 2**k)
    assert real_space_pixel(ExperimentGeometry(e, pix, z, 2 ** (k + 1))) == pytest.approx(real_space_pixel(g) / 2, rel=1e-14)
    assert real_space_pixel(ExperimentGeometry(e, pix, 2 * z, 2**k)) == pytest.approx(2 * real_space_pixel(g), rel=1e-14)


@pytest.mark.parametrize("kw", [{"frame_dim": 48}, {"photon_energy": 0}, {"detector_distance": -1.0}])
def test_geometry_validation(kw):
    with pytest.raises(ValueError):
        ExperimentGeometry(**kw)


def test_extract_full_image_is_identity(rng):
    img = rng.standard_normal((8, 8)) + 1j * rng.standard_normal((8, 8))
    np.testing.assert_array_equal(extract_patch(img, (4, 4), 8), img)


def test_extract_patch_center_convention():
    img = np.arange(16).reshape(4, 4)
    patch = extract_patch(img, (1, 1), 2)
    # span [c - dim/2, c + dim/2) -> rows 0..1, cols 0..1
    np.testing.assert_array_equal(patch, [[0, 1], [4, 5]])


def test_extract_then_insert_into_zero(rng):
    img = rng.standard_normal((10, 10))
    out = np.zeros_like(img)
    insert_patch(out, extract_patch(img, (5, 4), 4), (5, 4))
    np.testing.assert_array_equal(out[3:7, 2:6], img[3:7, 2:6])
    out[3:7, 2:6] = 0
    assert not out.any()


@given(r=st.integers(-3, 12), c=st.integers(-3, 12), dim=st.sampled_from([2, 4, 6]))
def test_extract_patch_bounds(r, c, dim):
    img = np.zeros((10, 10))
    inside = r - dim // 2 >= 0 and c - dim // 2 >= 0 and r - dim // 2 + dim <= 10 and c - dim // 2 + dim <= 10
    if inside:
        assert extract_patch(img, (r, c), dim).shape == (dim, dim)
    else:
        with pytest.raises(BoundsError):
            extract_patch(img, (r, c), dim)


@given(st.lists(st.tuples(st.floats(-1e4, 1e4), st.floats(-1e4, 1e4)), min_size=1, max_size=30))
def test_scanpath_csv_round_trip(coords):
    path = ScanPath(tuple(ScanPosition(i, x, y) for i, (x, y) in enumerate(coords)), 5.0)
    text = path.to_csv()
    assert text.splitlines()[0] == "index,x_nm,y_nm"
    back = ScanPath.from_csv(text, 5.0)
    assert back == path


def test_scanpath_rejects_gaps():
    with pytest.raises(ValueError):
        ScanPath((ScanPosition(0, 0, 0), ScanPosition(2, 1, 1)), 1.0)


def test_position_to_pixel_rounds():
    assert position_to_pixel(ScanPosition(0, 24.0, -26.0), 10.0, (64, 64)) == (32 - 3, 32 + 2)


def test_phase_map_range():
    with pytest.raises(ValueError):
        PhaseMap(np.full((2, 2), 4.0))
