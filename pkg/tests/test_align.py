import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from portrait_nerf.align import (
    KeypointSet,
    canonical_warp_for_subject,
    fit_similarity,
    mean_geometry,
    rms_residual,
    svd3,
)
from portrait_nerf.data import gen_subject
from portrait_nerf.errors import DegenerateConfiguration, MismatchedLabels
from portrait_nerf.field.analytic import CANONICAL_LANDMARKS, LANDMARK_NAMES
from portrait_nerf.geom import Similarity, random_rotation, rotation_from_axis_angle

seeds = st.integers(0, 2**32 - 1)
LABELS = tuple(f"k{i}" for i in range(8))


def kps(points, labels=LABELS):
    return KeypointSet(labels[: len(points)], points)


def planted(rng, n=8):
    X = rng.normal(size=(n, 3))
    T = Similarity(rng.uniform(0.5, 2.0), random_rotation(rng), rng.normal(size=3) * 2)
    return X, T


# --- svd3 --------------------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(seeds)
def test_svd3_reconstructs(seed):
    A = np.random.default_rng(seed).normal(size=(3, 3))
    U, s, Vt = svd3(A)
    np.testing.assert_allclose(U @ np.diag(s) @ Vt, A, atol=1e-12)
    np.testing.assert_allclose(U.T @ U, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(Vt @ Vt.T, np.eye(3), atol=1e-12)
    assert np.all(np.diff(s) <= 0) and s[-1] >= 0
    np.testing.assert_allclose(s, np.linalg.svd(A, compute_uv=False), atol=1e-12)


def test_svd3_planted_decomposition():
    rng = np.random.default_rng(0)
    U0, V0 = random_rotation(rng), random_rotation(rng)
    A = U0 @ np.diag([5.0, 2.0, 0.5]) @ V0.T
    _, s, _ = svd3(A)
    np.testing.assert_allclose(s, [5.0, 2.0, 0.5], atol=1e-13)


@pytest.mark.parametrize("A", [np.zeros((3, 3)), np.outer([1.0, 2, 3], [0.0, 1, -1]), np.diag([1.0, 1.0, 0.0])])
def test_svd3_rank_deficient(A):
    U, s, Vt = svd3(A)
    np.testing.assert_allclose(U @ np.diag(s) @ Vt, A, atol=1e-12)
    np.testing.assert_allclose(U.T @ U, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(Vt @ Vt.T, np.eye(3), atol=1e-12)


# --- mean geometry -------------------------------------------------------------

def test_mean_of_one_set():
    ks = kps(np.random.default_rng(0).normal(size=(8, 3)))
    np.testing.assert_array_equal(mean_geometry([ks]).points, ks.points)


def test_mean_of_mirrored_sets_is_zero():
    X = np.random.default_rng(1).normal(size=(8, 3))
    assert np.all(mean_geometry([kps(X), kps(-X)]).points == 0.0)


def test_mean_matches_independent_sum():
    rng = np.random.default_rng(2)
    sets = [rng.normal(size=(8, 3)) for _ in range(3)]
    expected = np.zeros((8, 3))
    for X in reversed(sets):
        for i in range(8):
            for j in range(3):
                expected[i, j] += X[i, j] / 3.0
    np.testing.assert_allclose(mean_geometry([kps(X) for X in sets]).points, expected, atol=1e-15)


def test_mean_rejects_mismatched_labels():
    X = np.zeros((8, 3))
    with pytest.raises(MismatchedLabels):
        mean_geometry([kps(X), KeypointSet(LABELS[::-1], X)])


# --- similarity fit --------------------------------------------------------------

def test_fit_identity():
    X = np.random.default_rng(0).normal(size=(8, 3))
    T = fit_similarity(kps(X), kps(X))
    assert abs(T.s - 1) < 1e-12
    np.testing.assert_allclose(T.R, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(T.t, 0, atol=1e-12)


def test_fit_planted_example():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(8, 3))
    R0 = random_rotation(rng)
    Y = 2.0 * X @ R0.T + np.array([1.0, 2.0, 3.0])
    T = fit_similarity(kps(X), kps(Y))
    assert abs(T.s - 2.0) < 1e-9
    np.testing.assert_allclose(T.R, R0, atol=1e-9)
    np.testing.assert_allclose(T.t, [1, 2, 3], atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(seeds)
def test_fit_recovers_planted(seed):
    X, T0 = planted(np.random.default_rng(seed))
    T = fit_similarity(kps(X), kps(T0.apply(X)))
    assert T.allclose(T0, atol=1e-9)
    np.testing.assert_allclose(T.R.T @ T.R, np.eye(3), atol=1e-12)
    assert np.linalg.det(T.R) > 0


def test_fit_from_reflected_data_is_still_proper():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(8, 3))
    Y = X * np.array([1.0, 1.0, -1.0])
    T = fit_similarity(kps(X), kps(Y))
    assert np.linalg.det(T.R) > 0
    np.testing.assert_allclose(T.R.T @ T.R, np.eye(3), atol=1e-12)


@pytest.mark.parametrize("X", [
    np.outer(np.arange(5.0), [1.0, 2.0, -1.0]) + 0.5,
    np.zeros((4, 3)),
    np.ones((2, 3)),
])
def test_fit_degenerate(X):
    labels = LABELS[: len(X)]
    with pytest.raises(DegenerateConfiguration):
        fit_similarity(KeypointSet(labels, X), KeypointSet(labels, X + 1))


def test_fit_rejects_label_mismatch():
    X = np.random.default_rng(0).normal(size=(8, 3))
    with pytest.raises(MismatchedLabels):
        fit_similarity(kps(X), KeypointSet(LABELS[::-1], X))


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_fit_equivariance(seed):
    rng = np.random.default_rng(seed)
    X, Y = rng.normal(size=(8, 3)), rng.normal(size=(8, 3))
    T = Similarity(rng.uniform(0.5, 2.0), random_rotation(rng), rng.normal(size=3))
    lhs = fit_similarity(kps(T.apply(X)), kps(Y))
    rhs = fit_similarity(kps(X), kps(Y)) @ T.inverse()
    assert lhs.allclose(rhs, atol=1e-9)


def test_fit_is_global_minimum():
    rng = np.random.default_rng(4)
    X, Y = rng.normal(size=(8, 3)), rng.normal(size=(8, 3))
    T = fit_similarity(kps(X), kps(Y))
    best = rms_residual(kps(X), kps(Y), T)
    for _ in range(100):
        eps = rng.normal(size=7) * 1e-3
        dR = rotation_from_axis_angle(rng.normal(size=3), abs(eps[0]))
        P = Similarity(T.s + eps[1], T.R @ dR, T.t + eps[4:7])
        assert rms_residual(kps(X), kps(Y), P) >= best


# --- canonical warp --------------------------------------------------------------

def test_subject_equal_to_mean_gives_identity():
    X = np.random.default_rng(5).normal(size=(8, 3))
    T = canonical_warp_for_subject(kps(X), kps(X))
    assert T.allclose(Similarity(), atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_planted_subject_warp_recovered(seed):
    subj = gen_subject(seed, 1.0)
    src = KeypointSet(LANDMARK_NAMES, subj.keypoints)
    mean = KeypointSet(LANDMARK_NAMES, CANONICAL_LANDMARKS)
    T = canonical_warp_for_subject(src, mean)
    assert T.allclose(subj.subject_to_canonical, atol=1e-9)
    np.testing.assert_allclose(T.apply(subj.keypoints), CANONICAL_LANDMARKS, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_warp_never_increases_residual(seed):
    rng = np.random.default_rng(seed)
    X, Y = rng.normal(size=(8, 3)), rng.normal(size=(8, 3))
    T = fit_similarity(kps(X), kps(Y))
    assert rms_residual(kps(X), kps(Y), T) <= rms_residual(kps(X), kps(Y)) + 1e-12
