import numpy as np
import pytest
from hypothesis import given, strategies as st

from lrsift import textures as tx
from lrsift.imaging import AffineWarp, SingularWarpError
from lrsift.lowrank import (SOLVE_TILT_CALLS, TiltParams, TiltProblem, _gauge_constraints, _WarpedWindow,
                            default_lambda, fix_aspect_ratio, numerical_rank, rpca_alm, soft_threshold, solve_tilt,
                            svt)


def rot(deg):
    t = np.radians(deg)
    return np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])


def similarity_deviation(M):
    """Max entry distance of M / sqrt|det M| to the nearest rotation (or reflection)."""
    M = M / np.sqrt(abs(np.linalg.det(M)))
    U, _, Vt = np.linalg.svd(M)
    return np.abs(M - U @ Vt).max()


# -- proximal operators -----------------------------------------------------

def test_soft_threshold():
    np.testing.assert_array_equal(soft_threshold(np.array([-3.0, -0.5, 0.2, 2.0]), 1.0), [-2.0, 0.0, 0.0, 1.0])


def test_svt_shrinks_singular_values(rng):
    X = rng.normal(size=(8, 6))
    s = np.linalg.svd(X, compute_uv=False)
    Y, nuc = svt(X, s[2])
    s2 = np.linalg.svd(Y, compute_uv=False)
    np.testing.assert_allclose(s2[:2], s[:2] - s[2], atol=1e-10)
    assert numerical_rank(Y, 1e-9) == 2
    assert nuc == pytest.approx(s2.sum())


# -- RPCA -------------------------------------------------------------------

def test_rpca_rank_one():
    u = np.linspace(0.2, 1.0, 40)
    v = np.linspace(1.0, 0.5, 30)
    D = np.outer(u, v)
    res = rpca_alm(D, 1 / np.sqrt(40))
    assert np.linalg.norm(res.low_rank - D) / np.linalg.norm(D) <= 1e-4
    assert np.abs(res.sparse).max() <= 1e-4


def test_rpca_rank_two_with_corruption(rng):
    L0 = rng.random((50, 2)) @ rng.random((2, 50)) / 2
    S0 = np.zeros((50, 50))
    idx = rng.choice(2500, 125, replace=False)
    S0.flat[idx] = rng.uniform(-1, 1, 125)
    res = rpca_alm(L0 + S0)
    assert np.linalg.norm(res.low_rank - L0) / np.linalg.norm(L0) <= 1e-3
    assert res.converged


def test_rpca_zero():
    res = rpca_alm(np.zeros((20, 25)))
    assert not res.low_rank.any() and not res.sparse.any()


@given(st.integers(0, 10_000))
def test_rpca_residual_when_converged(seed):
    rng = np.random.default_rng(seed)
    D = rng.random((30, 24))
    p = TiltParams()
    res = rpca_alm(D, params=p)
    if res.converged:
        assert np.linalg.norm(D - res.low_rank - res.sparse) / np.linalg.norm(D) <= p.inner_tol


def test_default_lambda():
    assert default_lambda((30, 50)) == pytest.approx(1 / np.sqrt(50))


# -- numerical rank ------------------------------------------------------------

def test_numerical_rank_examples(rng):
    assert numerical_rank(np.eye(5), 0.01) == 5
    assert numerical_rank(np.outer(rng.random(7), rng.random(9)), 0.01) == 1
    assert numerical_rank(np.diag([1, 0.5, 0.005]), 0.01) == 2
    assert numerical_rank(np.zeros((4, 4))) == 0


# -- aspect ratio gauge ----------------------------------------------------------

def test_fix_aspect_ratio_examples():
    np.testing.assert_allclose(fix_aspect_ratio(AffineWarp(np.diag([2.0, 0.5]))).linear, np.eye(2), atol=1e-12)
    np.testing.assert_allclose(fix_aspect_ratio(AffineWarp(rot(30))).linear, rot(30), atol=1e-12)
    np.testing.assert_allclose(fix_aspect_ratio(AffineWarp(2 * np.eye(2))).linear, 2 * np.eye(2), atol=1e-12)
    with pytest.raises(SingularWarpError):
        fix_aspect_ratio(AffineWarp([[1, 1], [1, 1]]))


@given(st.lists(st.floats(-2, 2), min_size=4, max_size=4))
def test_fix_aspect_ratio_idempotent_and_det_preserving(v):
    L = np.array(v).reshape(2, 2)
    if abs(np.linalg.det(L)) < 1e-2:
        L = L + np.eye(2) * 1.5
    w = AffineWarp(L, [1.0, -2.0])
    once = fix_aspect_ratio(w)
    twice = fix_aspect_ratio(once)
    assert np.abs(once.entries() - twice.entries()).max() <= 1e-10
    assert np.linalg.det(once.linear) == pytest.approx(np.linalg.det(L), rel=1e-10)
    steps = np.linalg.norm(np.linalg.inv(once.linear), axis=0)
    assert steps[0] == pytest.approx(steps[1], rel=1e-10)


# -- Jacobian and gauge -----------------------------------------------------------

def test_jacobian_matches_finite_differences():
    img = tx.noise((120, 120), seed=4, blur=3.0)
    ww = _WarpedWindow(img, np.array([59.5, 59.5]), (40, 40), blur=0.0)
    S = np.array([[1.05, 0.1], [-0.05, 0.95]])
    _, Jn, _ = ww.jacobian(S)
    h = 1e-4
    fd = np.zeros_like(Jn)
    for k in range(4):
        P = np.zeros(4)
        P[k] = h
        Dp, _ = ww.normalized(S @ (np.eye(2) + P.reshape(2, 2)))
        Dm, _ = ww.normalized(S @ (np.eye(2) - P.reshape(2, 2)))
        fd[:, k] = (Dp - Dm).ravel() / (2 * h)
    rel = np.linalg.norm(Jn - fd, axis=0) / np.linalg.norm(fd, axis=0)
    assert rel.max() <= 1e-2


def test_gauge_constraints_kill_scale_and_aspect():
    S = np.array([[1.2, 0.3], [0.1, 0.8]])
    C = _gauge_constraints(S)
    # a pure scale and the axis-stretch directions violate the constraints
    assert abs(C @ np.eye(2).ravel()).max() > 0.1
    assert abs(C @ np.diag([1.0, -1.0]).ravel())[1] > 0.1
    # a skew (rotation generator) satisfies tr P = 0
    assert C[0] @ np.array([0.0, 1.0, -1.0, 0.0]) == 0


# -- solve_tilt -------------------------------------------------------------------

def test_rectified_checkerboard_is_fixed_point():
    img = tx.checkerboard((100, 100), 10)
    sol = solve_tilt(TiltProblem(img, center=np.array([49.5, 49.5]), window=(60, 60)))
    assert np.abs(sol.warp.linear - np.eye(2)).max() <= 0.02
    assert sol.outer_iterations <= 5


def test_sheared_checkerboard_rectified_to_similarity():
    Ls = np.array([[1.0, 0.3], [0.0, 1.0]])
    img = tx.affine_deform(tx.checkerboard((200, 200), 10), Ls)
    sol = solve_tilt(TiltProblem(img, center=np.array([99.5, 99.5]), window=(60, 60)))
    assert similarity_deviation(sol.warp.linear @ Ls) <= 0.05
    assert sol.converged


def test_objective_history_monotone():
    img = tx.affine_deform(tx.window_grid((200, 200)), np.array([[1.0, -0.2], [0.15, 1.0]]))
    sol = solve_tilt(TiltProblem(img, center=np.array([99.5, 99.5]), window=(60, 60),
                                 params=TiltParams(orientation_init=False)))
    assert len(sol.history) >= 2
    assert np.all(np.diff(sol.history) <= 1e-6)


def test_noise_patch_degrades_gracefully():
    img = tx.noise((60, 60), seed=0)
    p = TiltParams()
    sol = solve_tilt(TiltProblem(img, params=p))
    ww = _WarpedWindow(img, np.array([29.5, 29.5]), (60, 60), p.blur_sigma)
    D, _ = ww.normalized(np.linalg.inv(sol.warp.linear))
    assert np.linalg.norm(D - sol.low_rank - sol.sparse) <= p.constraint_tol
    assert np.mean(np.abs(sol.sparse) > 1e-4) <= 0.5


def test_constant_patch_short_circuits():
    SOLVE_TILT_CALLS.reset()
    sol = solve_tilt(TiltProblem(np.full((40, 40), 0.3)))
    assert sol.outer_iterations == 0
    np.testing.assert_array_equal(sol.warp.linear, np.eye(2))
    assert SOLVE_TILT_CALLS.value == 1


def test_problem_validation():
    with pytest.raises(ValueError):
        solve_tilt(TiltProblem(np.zeros((10, 10))))
    with pytest.raises(ValueError):
        solve_tilt(TiltProblem(tx.noise((40, 40)), lam=-1.0))
    with pytest.raises(SingularWarpError):
        solve_tilt(TiltProblem(tx.noise((40, 40)), init_warp=AffineWarp([[1, 1], [1, 1]])))
    with pytest.raises(ValueError):
        TiltParams(mu_growth=1.0).validate()
