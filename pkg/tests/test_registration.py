import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation
from sklearn.base import clone

import oracles
from kneessm.registration import (
    CoarseAligner,
    CpdParams,
    GeneralizedProcrustes,
    NonRigidCPD,
    RegistrationError,
    RigidCPD,
    SimilarityTransform,
    coarse_align,
    cpd_nonrigid,
    cpd_rigid,
    gpa,
    kabsch,
    load_transform,
    rotation_angle,
    save_transform,
)
from kneessm.synthetic import bone_like_points, sinusoidal_warp


@pytest.fixture(scope="module")
def bone():
    return bone_like_points(300, seed=1)


def _is_proper(R):
    return np.abs(R.T @ R - np.eye(3)).max() < 1e-9 and abs(np.linalg.det(R) - 1) < 1e-9


# -- transforms ---------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
def test_similarity_inverse_and_compose(seed, scale):
    rng = np.random.default_rng(seed)
    a = SimilarityTransform(oracles.random_rotation(rng)[0], rng.normal(size=3), scale)
    b = SimilarityTransform(oracles.random_rotation(rng)[0], rng.normal(size=3), 1.0 / scale)
    x = rng.normal(size=(10, 3))
    np.testing.assert_allclose(a.inverse().apply(a.apply(x)), x, atol=1e-9)
    np.testing.assert_allclose(a.compose(b).apply(x), a.apply(b.apply(x)), atol=1e-9)


def test_similarity_validation_and_io(tmp_path):
    with pytest.raises(ValueError):
        SimilarityTransform(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(ValueError):
        SimilarityTransform(scale=0.0)
    t = SimilarityTransform(Rotation.from_rotvec([0.1, 0.2, 0.3]).as_matrix(), [1, 2, 3], 1.5)
    save_transform(t, tmp_path / "t.json")
    back = load_transform(tmp_path / "t.json")
    np.testing.assert_array_equal(back.rotation, t.rotation)
    assert back.scale == t.scale


def test_kabsch_recovers_rotation(rng):
    A = rng.normal(size=(30, 3))
    A -= A.mean(0)
    R, _ = oracles.random_rotation(rng)
    np.testing.assert_allclose(kabsch(A, A @ R.T), R, atol=1e-12)


# -- coarse alignment ---------------------------------------------------------

def test_coarse_identity(bone):
    t, out = coarse_align(bone, bone)
    np.testing.assert_allclose(t.rotation, np.eye(3), atol=1e-9)
    np.testing.assert_allclose(t.translation, 0, atol=1e-9)
    assert t.scale == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(out.points, bone, atol=1e-9)


def test_coarse_translation(bone):
    t, _ = coarse_align(bone + [10, 0, 0], bone)
    np.testing.assert_allclose(t.translation, [-10, 0, 0], atol=1e-9)
    assert t.scale == pytest.approx(1.0, abs=1e-12)


def test_coarse_scale(bone):
    t, out = coarse_align(2 * bone, bone)
    assert t.scale == pytest.approx(0.5, abs=1e-12)
    np.testing.assert_allclose(out.points, bone, atol=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_coarse_resolves_axis_signs(bone, seed):
    rng = np.random.default_rng(seed)
    R, _ = oracles.random_rotation(rng)
    t, out = coarse_align(bone @ R.T + rng.normal(size=3) * 20, bone)
    assert _is_proper(t.rotation)
    np.testing.assert_allclose(out.points, bone, atol=1e-6)


def test_coarse_degenerate():
    flat = np.random.default_rng(0).normal(size=(20, 3)) * [1, 1, 0]
    with pytest.raises(RegistrationError, match="degenerate"):
        coarse_align(flat, flat)


# -- rigid CPD ----------------------------------------------------------------

def test_rigid_identity(bone):
    t, _ = cpd_rigid(bone, bone, CpdParams(w=0.0))
    np.testing.assert_allclose(t.rotation, np.eye(3), atol=1e-6)
    np.testing.assert_allclose(t.translation, 0, atol=1e-6)


def test_rigid_known_motion(bone):
    R0 = Rotation.from_euler("z", 20, degrees=True).as_matrix()
    t0 = np.array([1.0, 2.0, 3.0])
    est = RigidCPD(w=0.0).fit(bone, bone @ R0.T + t0)
    assert oracles.rotation_distance(est.transform_.rotation, R0) < 1e-3
    assert np.linalg.norm(est.transform_.translation - t0) < 1e-3
    ll = np.array(est.log_likelihood_)
    assert np.all(np.diff(ll) >= -1e-9 * np.abs(ll[1:]))
    assert _is_proper(est.transform_.rotation)


def test_rigid_with_outliers(bone):
    rng = np.random.default_rng(4)
    R0 = Rotation.from_euler("z", 20, degrees=True).as_matrix()
    fixed = bone @ R0.T + [1.0, 2.0, 3.0]
    lo, hi = fixed.min(0), fixed.max(0)
    fixed = np.vstack([fixed, rng.uniform(lo, hi, size=(len(bone) // 10, 3))])
    t, _ = cpd_rigid(bone, fixed, CpdParams(w=0.1))
    assert np.degrees(oracles.rotation_distance(t.rotation, R0)) < 1.0


def test_rigid_scale_flag(bone):
    est = RigidCPD(w=0.0, with_scale=True).fit(bone, 1.3 * bone)
    assert est.transform_.scale == pytest.approx(1.3, rel=1e-6)


def test_rotation_angle():
    R = Rotation.from_rotvec([0, 0, 0.7]).as_matrix()
    assert rotation_angle(R) == pytest.approx(0.7)


def test_estimators_follow_sklearn_conventions():
    for est in (RigidCPD(w=0.2), NonRigidCPD(beta=1.5), GeneralizedProcrustes(scaling=True), CoarseAligner()):
        copy = clone(est)
        assert copy.get_params() == est.get_params()
    assert RigidCPD(w=0.2).set_params(w=0.3).w == 0.3


def test_cpd_params_validation():
    for kw in ({"w": 1.0}, {"beta": 0.0}, {"lamb": -1.0}, {"tolerance": 0.0}, {"max_iterations": 0}):
        with pytest.raises(ValueError):
            CpdParams(**kw)
    with pytest.raises(ValueError):
        RigidCPD(w=-0.1).fit(np.eye(3), np.eye(3))


# -- non-rigid CPD ------------------------------------------------------------

def test_nonrigid_identity(bone):
    out = cpd_nonrigid(bone, bone)
    assert np.linalg.norm(out.points - bone, axis=1).max() < 1e-6


def test_nonrigid_warp_residual():
    pts = bone_like_points(500, seed=3)
    fixed = pts + sinusoidal_warp(pts, 2.0)
    out = cpd_nonrigid(pts, fixed).points
    assert np.linalg.norm(out - fixed, axis=1).mean() < 0.2


def test_nonrigid_stiff_limit_is_rigid(bone):
    shifted = bone + [0.8, -0.5, 0.3]
    stiff = cpd_nonrigid(bone, shifted, CpdParams(lamb=1e6)).points
    _, rigid = cpd_rigid(bone, shifted)
    assert np.linalg.norm(stiff - rigid.points, axis=1).max() < 1e-3
    # under a warp the field tends to a constant offset as lambda grows
    spread = []
    for lamb in (3.0, 1e3, 1e6, 1e9):
        d = NonRigidCPD(lamb=lamb).fit(bone, shifted + sinusoidal_warp(bone, 0.3)).registered_ - bone
        spread.append(np.linalg.norm(d - d.mean(0), axis=1).max())
    assert np.all(np.diff(spread) < 0) and spread[-1] < 1e-3


def test_nonrigid_translation_equivariance(bone):
    fixed = bone + sinusoidal_warp(bone, 1.5)
    v = np.array([30.0, -12.0, 7.0])
    a = cpd_nonrigid(bone, fixed).points
    b = cpd_nonrigid(bone + v, fixed + v).points
    np.testing.assert_allclose(b, a + v, atol=1e-6)


def test_nonrigid_displacement_field_is_smooth(bone):
    est = NonRigidCPD().fit(bone, bone + sinusoidal_warp(bone, 2.0))
    np.testing.assert_allclose(est.transform(bone), est.registered_, atol=1e-9)
    d = est.displacement(bone)
    assert np.abs(d).max() < 3.0


def test_nonrigid_size_guard():
    big = np.zeros((20_001, 3))
    with pytest.raises(RegistrationError, match="dense-kernel limit"):
        NonRigidCPD().fit(big, big)


# -- GPA ----------------------------------------------------------------------

def _cohort(rng, n=8, m=40):
    base = rng.normal(size=(m, 3)) * [5, 3, 2]
    out = []
    for _ in range(n):
        R, _ = oracles.random_rotation(rng)
        out.append((base + rng.normal(scale=0.3, size=base.shape)) @ R.T + rng.normal(size=3) * 10)
    return np.array(out)


def test_gpa_duplicate():
    x = np.random.default_rng(0).normal(size=(20, 3))
    aligned, mean = gpa([x, x])
    np.testing.assert_allclose(aligned[0].points, aligned[1].points, atol=1e-12)
    np.testing.assert_allclose(mean.points, aligned[0].points, atol=1e-12)


def test_gpa_rigid_copy(rng):
    x = rng.normal(size=(50, 3))
    R, _ = oracles.random_rotation(rng)
    aligned, _ = gpa([x, x @ R.T + [3, 4, 5]])
    assert np.abs(aligned[0].points - aligned[1].points).max() < 1e-8


@pytest.mark.parametrize("scaling", [False, True])
def test_gpa_objective_and_centroid(rng, scaling):
    est = GeneralizedProcrustes(scaling=scaling)
    aligned = est.fit_transform(_cohort(rng))
    obj = np.array(est.objective_)
    assert np.all(np.diff(obj) <= 1e-9 * obj[0])
    np.testing.assert_allclose(est.mean_.mean(0), 0, atol=1e-12)
    for t in est.transforms_:
        assert _is_proper(t.rotation)
    np.testing.assert_allclose(est.transform(_cohort(rng)).mean(1), 0, atol=1e-9)
    assert aligned.shape[0] == 8


def test_gpa_cardinality_mismatch():
    with pytest.raises(ValueError):
        gpa([np.zeros((5, 3)), np.zeros((6, 3))])
