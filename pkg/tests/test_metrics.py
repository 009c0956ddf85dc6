import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from kneessm import metrics
from kneessm.mesh import TriMesh
from kneessm.spm import spm_ttest, ttest2
from kneessm.synthetic import icosphere, plane_grid
from kneessm.volume import LabelVolume


# -- Dice ---------------------------------------------------------------------

def _vol(mask):
    return LabelVolume(np.asarray(mask, dtype=np.uint8))


def test_dice_examples():
    a = np.zeros((4, 4, 4), dtype=np.uint8)
    a[:2, :2, :2] = 1
    assert metrics.dice(_vol(a), _vol(a), 1) == 1.0
    b = np.zeros_like(a)
    b[2:, 2:, 2:] = 1
    assert metrics.dice(_vol(a), _vol(b), 1) == 0.0
    c = np.zeros_like(a)
    c[1:3, :2, :2] = 1
    assert a.sum() == 8 and c.sum() == 8 and (a & c).sum() == 4
    assert metrics.dice(_vol(a), _vol(c), 1) == 0.5


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_dice_matches_count_and_is_symmetric(seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 3, size=(5, 6, 4)).astype(np.uint8)
    b = rng.integers(0, 3, size=(5, 6, 4)).astype(np.uint8)
    if not ((a == 1).any() or (b == 1).any()):
        return
    d = metrics.dice(_vol(a), _vol(b), 1)
    assert d == oracles.dice_count(a, b, 1)
    assert d == metrics.dice(_vol(b), _vol(a), 1)
    shift = tuple(int(s) for s in rng.integers(0, 4, 3))
    rolled = metrics.dice(_vol(np.roll(a, shift, (0, 1, 2))), _vol(np.roll(b, shift, (0, 1, 2))), 1)
    assert rolled == d


def test_dice_grid_mismatch():
    with pytest.raises(ValueError):
        metrics.dice(_vol(np.ones((2, 2, 2))), _vol(np.ones((2, 2, 3))), 1)
    with pytest.raises(ValueError):
        metrics.dice(LabelVolume(np.ones((2, 2, 2)), (1, 1, 1)), LabelVolume(np.ones((2, 2, 2)), (1, 1, 2)), 1)


# -- point-set distances ------------------------------------------------------

def test_hausdorff_examples():
    assert metrics.hausdorff([[0, 0, 0]], [[3, 4, 0]]) == 5.0
    assert metrics.hausdorff([[0, 0, 0], [10, 0, 0]], [[0, 0, 0]]) == 10.0
    assert metrics.hausdorff([[0, 0, 0], [10, 0, 0]], [[0, 0, 0]], directed=True) == 10.0
    assert metrics.hausdorff([[0, 0, 0]], [[0, 0, 0], [10, 0, 0]], directed=True) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 40), st.integers(1, 40))
def test_point_distances_match_brute_force(seed, na, nb):
    rng = np.random.default_rng(seed)
    A, B = rng.normal(size=(na, 3)), rng.normal(size=(nb, 3))
    h, avg = metrics.hausdorff(A, B), metrics.average_surface_distance(A, B)
    assert abs(h - oracles.hausdorff_points(A, B)) < 1e-9
    assert abs(avg - oracles.average_points(A, B)) < 1e-9
    assert avg <= h
    assert metrics.hausdorff(B, A) == h
    assert metrics.average_surface_distance(B, A) == pytest.approx(avg, abs=1e-12)
    v = rng.normal(size=3) * 100
    assert metrics.hausdorff(A + v, B + v) == pytest.approx(h, abs=1e-9)
    perm = rng.permutation(na)
    assert metrics.average_surface_distance(A[perm], B) == pytest.approx(avg, abs=1e-12)


def test_percentile_hausdorff():
    A = np.zeros((100, 3))
    A[:, 0] = np.arange(100)
    B = A.copy()
    B[-1, 0] = 1000
    assert metrics.hausdorff(A, B, percentile=95) < metrics.hausdorff(A, B)


def test_empty_inputs():
    with pytest.raises(ValueError):
        metrics.hausdorff(np.zeros((0, 3)), [[0, 0, 0]])
    empty = TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int))
    with pytest.raises(ValueError):
        metrics.average_surface_distance(empty, icosphere(1))
    with pytest.raises(ValueError):
        metrics.area_fraction_beyond(empty, icosphere(1))


# -- mesh distances -----------------------------------------------------------

def test_identical_meshes():
    s = icosphere(2)
    # interior samples are projected back onto their own faces: round-off only
    assert metrics.hausdorff(s, s) < 1e-12
    assert metrics.average_surface_distance(s, s) < 1e-12
    assert metrics.area_fraction_beyond(s, s) == 0.0


def test_parallel_planes():
    a = plane_grid(8, size=5.0)
    b = plane_grid(5, size=5.0, z=0.7)
    assert metrics.average_surface_distance(a, b) == pytest.approx(0.7, abs=1e-12)
    assert metrics.hausdorff(a, b) == pytest.approx(0.7, abs=1e-12)


def test_point_to_triangle_beats_vertex_distance():
    a = plane_grid(1, size=10.0)
    q = [[3.0, 4.0, 0.5]]
    assert metrics.hausdorff(q, a.vertices) > 1.0
    assert metrics.directed_distances(q, a)[0] == pytest.approx(0.5)


def test_area_fraction_examples():
    a = plane_grid(4, size=3.0, z=2.0)
    b = plane_grid(4, size=3.0)
    assert metrics.area_fraction_beyond(a, b, 1.0) == 1.0
    left = plane_grid(4, size=1.0)
    right = plane_grid(4, size=1.0, z=2.0)
    right = right.with_vertices(right.vertices + [1.0, 0.0, 0.0])
    two_patch = TriMesh(np.vstack([left.vertices, right.vertices]),
                        np.vstack([left.faces, right.faces + left.n_vertices]))
    truth = plane_grid(8, size=2.0)
    frac = metrics.area_fraction_beyond(two_patch, truth, 1.0)
    assert frac == pytest.approx(0.5, abs=1e-12)
    assert frac == pytest.approx(oracles.area_fraction_beyond(two_patch, truth, 1.0), abs=1e-12)


def test_surface_report_and_directed():
    a = icosphere(2, radius=1.0)
    b = icosphere(3, radius=1.3)
    r = metrics.surface_distance_report(a, b)
    assert r.hausdorff_mm >= r.average_mm >= 0
    assert r.average_mm == pytest.approx(metrics.average_surface_distance(a, b))
    d = metrics.surface_distance_report(a, b, directed=True)
    assert d.directed and d.average_mm == pytest.approx(metrics.average_surface_distance(a, b, directed=True))
    assert set(r.to_dict()) >= {"hausdorff_mm", "average_mm", "area_fraction_beyond_threshold", "threshold_mm"}
    with pytest.raises(ValueError):
        metrics.SurfaceDistanceReport(1.0, 2.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        metrics.SurfaceDistanceReport(2.0, 1.0, 1.5, 1.0)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_mesh_distances_symmetric_and_translation_invariant(seed):
    rng = np.random.default_rng(seed)
    a = icosphere(1, radius=2.0)
    b = icosphere(1, radius=2.0).with_vertices(icosphere(1, radius=2.0).vertices + rng.normal(scale=0.2, size=(42, 3)))
    v = rng.normal(size=3) * 50
    h, avg = metrics.hausdorff(a, b), metrics.average_surface_distance(a, b)
    assert metrics.hausdorff(b, a) == pytest.approx(h, abs=1e-12)
    assert metrics.average_surface_distance(b, a) == pytest.approx(avg, rel=1e-12)
    moved_a, moved_b = a.with_vertices(a.vertices + v), b.with_vertices(b.vertices + v)
    assert metrics.hausdorff(moved_a, moved_b) == pytest.approx(h, abs=1e-9)
    assert avg <= h


# -- SPM ----------------------------------------------------------------------

def _smooth_noise(rng, n, q=20):
    from scipy.ndimage import gaussian_filter1d

    return gaussian_filter1d(rng.normal(size=(n, q)), 2.0, axis=1)


def test_spm_identical_groups():
    a = _smooth_noise(np.random.default_rng(0), 5)
    r = spm_ttest(a, a.copy())
    np.testing.assert_array_equal(r.t, 0.0)
    assert not r.clusters and not r.h0_rejected


def test_spm_large_offset_covers_trajectory():
    rng = np.random.default_rng(1)
    a = _smooth_noise(rng, 5)
    r = spm_ttest(a, a + 10 * a.std(), alpha=0.05)
    assert len(r.clusters) == 1
    c = r.clusters[0]
    assert (c.start, c.end) == (0, 19)
    assert 0 <= c.p <= 1


@pytest.mark.parametrize("sizes", [(4, 4), (5, 4), (3, 5)])
def test_spm_threshold_matches_enumeration(sizes):
    rng = np.random.default_rng(sum(sizes))
    a, b = _smooth_noise(rng, sizes[0], 12), _smooth_noise(rng, sizes[1], 12)
    r = spm_ttest(a, b, alpha=0.05)
    assert r.critical_t == pytest.approx(oracles.max_t_threshold(a, b, 0.05), rel=1e-10)


def test_spm_t_matches_scipy():
    from scipy import stats

    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(6, 15)), rng.normal(size=(7, 15))
    np.testing.assert_allclose(ttest2(a, b), stats.ttest_ind(a, b, axis=0).statistic, rtol=1e-12)


def test_spm_sampled_permutations_deterministic():
    rng = np.random.default_rng(4)
    a, b = _smooth_noise(rng, 10), _smooth_noise(rng, 10)
    r1 = spm_ttest(a, b, permutations=500, seed=9)
    r2 = spm_ttest(a, b, permutations=500, seed=9)
    assert r1.critical_t == r2.critical_t and r1.n_permutations == 500
    assert r1.to_dict() == r2.to_dict()


def test_spm_clusters_are_supra_threshold():
    rng = np.random.default_rng(5)
    a = _smooth_noise(rng, 6, 40)
    b = _smooth_noise(rng, 6, 40)
    b[:, 10:20] += 3.0
    r = spm_ttest(a, b)
    assert r.clusters
    for c in r.clusters:
        assert np.all(np.abs(r.t[c.start:c.end + 1]) > r.critical_t)
        assert 0 <= c.p <= 1


def test_spm_errors():
    a = np.zeros((5, 10))
    with pytest.raises(ValueError, match="sample count"):
        spm_ttest(a, np.zeros((5, 9)))
    with pytest.raises(ValueError, match="at least 2"):
        spm_ttest(a, np.zeros((1, 10)))
