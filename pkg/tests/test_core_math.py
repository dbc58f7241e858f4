import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from pnphvae.core_math import (
    LOG_2PI,
    DiagGaussian,
    ImageGrid,
    LinearMap,
    adjoint_mismatch,
    cg_solve,
    dense_solve,
    gaussian_interpolate,
    gaussian_kl,
    gaussian_log_pdf,
    spectral_norm,
)


def test_image_grid_shapes_and_validation():
    g = ImageGrid(np.zeros((2, 3)))
    assert g.shape == (2, 3, 1) and g.as_array().shape == (2, 3)
    assert ImageGrid(np.zeros((2, 3, 3))).channels == 3
    assert g.flat().size == 6
    with pytest.raises(ValueError):
        ImageGrid(np.zeros((2, 3, 2)))
    with pytest.raises(ValueError):
        ImageGrid(np.array([[np.nan]]))


def test_diag_gaussian_rejects_bad_variance():
    with pytest.raises(ValueError):
        DiagGaussian([0.0], [0.0])
    with pytest.raises(ValueError):
        DiagGaussian([0.0, 1.0], [1.0])


def test_log_pdf_standard_normal_at_mode():
    assert gaussian_log_pdf(DiagGaussian([0.0], [1.0]), [0.0]) == pytest.approx(-0.5 * LOG_2PI)
    assert gaussian_log_pdf(DiagGaussian([0.0], [1.0]), [0.0]) == pytest.approx(-0.9189385, abs=1e-7)


def test_log_pdf_at_mean_with_variance_four():
    assert gaussian_log_pdf(DiagGaussian([3.0], [4.0]), [3.0]) == pytest.approx(-0.5 * (math.log(4) + LOG_2PI))


def test_log_pdf_sums_independent_coordinates():
    g = DiagGaussian([0.0, 0.0], [1.0, 1.0])
    one = gaussian_log_pdf(DiagGaussian([0.0], [1.0]), [1.0])
    assert gaussian_log_pdf(g, [1.0, 1.0]) == pytest.approx(2 * one)
    with pytest.raises(ValueError):
        gaussian_log_pdf(g, [1.0])


def test_interpolate_hand_values():
    q = DiagGaussian([0.0], [0.5])
    p = DiagGaussian([4.0], [1.0])
    assert gaussian_interpolate(q, p, 3.0)[0] == pytest.approx(2.4)
    assert gaussian_interpolate(q, p, 0.0)[0] == 0.0
    with pytest.raises(ValueError):
        gaussian_interpolate(q, DiagGaussian([0.0, 1.0], [1.0, 1.0]), 1.0)


def test_interpolate_matches_golden_section_minimum():
    rng = np.random.default_rng(0)
    for _ in range(20):
        mq, mp = rng.normal(size=2) * 3
        vq, vp = rng.uniform(0.1, 2.0, size=2)
        lam = rng.uniform(0, 5)
        q, p = DiagGaussian([mq], [vq]), DiagGaussian([mp], [vp])
        obj = lambda z: -gaussian_log_pdf(q, [z]) - lam * gaussian_log_pdf(p, [z])  # noqa: E731
        grid = np.linspace(min(mq, mp) - 1, max(mq, mp) + 1, 2001)
        z0 = grid[np.argmin([obj(z) for z in grid])]
        res = minimize_scalar(obj, bracket=(z0 - 0.01, z0, z0 + 0.01), method="golden", tol=1e-10)
        assert gaussian_interpolate(q, p, lam)[0] == pytest.approx(res.x, abs=1e-6)


finite = st.floats(-10, 10)
pos = st.floats(0.01, 10)


@settings(max_examples=200, deadline=None)
@given(finite, finite, pos, pos, st.floats(0, 100), st.floats(0, 100))
def test_interpolate_between_means_and_monotone(mq, mp, vq, vp, l1, l2):
    q, p = DiagGaussian([mq], [vq]), DiagGaussian([mp], [vp])
    a, b = sorted((l1, l2))
    za = gaussian_interpolate(q, p, a)[0]
    zb = gaussian_interpolate(q, p, b)[0]
    lo, hi = min(mq, mp), max(mq, mp)
    eps = 1e-9 * (1 + abs(lo) + abs(hi))
    assert lo - eps <= za <= hi + eps
    # a larger weight moves each coordinate toward the prior mean
    assert abs(zb - mp) <= abs(za - mp) + eps


def test_kl_zero_for_identical_and_positive_otherwise():
    g = DiagGaussian([0.0, 1.0], [1.0, 2.0])
    assert gaussian_kl(g, g) == 0.0
    assert gaussian_kl(DiagGaussian([0.5, 1.0], [1.0, 1.0]), g) > 0


def test_linear_map_dense_roundtrip_and_adjoint():
    rng = np.random.default_rng(0)
    m = rng.standard_normal((5, 3))
    L = LinearMap.from_matrix(m)
    assert np.allclose(L.to_dense(), m)
    assert np.allclose(L.T.to_dense(), m.T)
    assert adjoint_mismatch(L) <= 1e-10
    assert np.allclose(L.normal(0.5).to_dense(), m.T @ m + 0.5 * np.eye(3))


def test_cg_identity_one_iteration():
    b = np.arange(5.0) + 1
    r = cg_solve(LinearMap.identity(5), b)
    assert r.converged and r.n_iter == 1
    assert np.allclose(r.x, b)


def test_cg_diagonal():
    rng = np.random.default_rng(1)
    d = np.arange(1.0, 9.0)
    b = rng.standard_normal(8)
    r = cg_solve(LinearMap.from_matrix(np.diag(d)), b)
    assert np.allclose(r.x, b / d, rtol=1e-8)


def test_cg_matches_dense_solve():
    rng = np.random.default_rng(2)
    A = rng.standard_normal((16, 16))
    M = LinearMap.from_matrix(A).normal(0.5)
    b = rng.standard_normal(16)
    r = cg_solve(M, b, tol=1e-12)
    ref = dense_solve(M, b)
    assert r.converged
    assert np.linalg.norm(r.x - ref) <= 1e-8 * np.linalg.norm(ref)


@pytest.mark.parametrize("n", [4, 16, 64])
def test_cg_random_spd(n):
    rng = np.random.default_rng(n)
    A = rng.standard_normal((n, n))
    M = A.T @ A + 0.1 * np.eye(n)
    b = rng.standard_normal(n)
    r = cg_solve(LinearMap.from_matrix(M), b, tol=1e-12, max_iter=2000)
    ref = np.linalg.solve(M, b)
    assert np.linalg.norm(r.x - ref) <= 1e-8 * np.linalg.norm(ref)


def test_cg_flags_unconverged():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((30, 30))
    r = cg_solve(LinearMap.from_matrix(A.T @ A + 1e-3 * np.eye(30)), rng.standard_normal(30), max_iter=2)
    assert not r.converged and r.n_iter == 2


def test_cg_rejects_indefinite():
    with pytest.raises(np.linalg.LinAlgError):
        cg_solve(LinearMap.from_matrix(-np.eye(3)), np.ones(3))


def test_spectral_norm_examples():
    assert spectral_norm(LinearMap.from_matrix(2 * np.eye(4))) == pytest.approx(2.0, abs=1e-6)
    assert spectral_norm(LinearMap.from_matrix(np.diag([1.0, 5.0, 3.0]))) == pytest.approx(5.0, abs=1e-6)


def test_spectral_norm_symmetric_matches_eigensolver():
    rng = np.random.default_rng(4)
    S = rng.standard_normal((8, 8))
    S = S + S.T
    ref = np.max(np.abs(np.linalg.eigvalsh(S)))
    assert spectral_norm(LinearMap.from_matrix(S), iters=5000) == pytest.approx(ref, rel=1e-6)


def test_spectral_norm_is_deterministic_and_handles_zero():
    M = LinearMap.from_matrix(np.random.default_rng(5).standard_normal((6, 6)))
    assert spectral_norm(M, seed=3) == spectral_norm(M, seed=3)
    with pytest.raises(ValueError):
        spectral_norm(LinearMap.from_matrix(np.zeros((3, 3))))
