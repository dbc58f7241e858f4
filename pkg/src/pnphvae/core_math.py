"""Dense numeric primitives: image grids, diagonal Gaussians, linear maps,
conjugate gradients and power iteration."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ImageGrid:
    """A height x width x channels grid of reals, nominally in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=float)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ValueError(f"ImageGrid needs shape (H, W) or (H, W, 1|3), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("ImageGrid values must be finite")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def as_array(self) -> np.ndarray:
        """(H, W) for grayscale, (H, W, 3) for color."""
        if self.channels == 1:
            return self.data[:, :, 0].copy()
        return self.data.copy()

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1).copy()


@dataclass(frozen=True)
class DiagGaussian:
    """Gaussian with diagonal covariance."""

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        var = np.atleast_1d(np.asarray(self.variance, dtype=float))
        if mean.shape != var.shape:
            raise ValueError(f"mean shape {mean.shape} != variance shape {var.shape}")
        if not np.all(np.isfinite(var)) or np.any(var <= 0):
            raise ValueError("variance entries must be finite and > 0")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", var)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def precision(self) -> np.ndarray:
        return 1.0 / self.variance


def gaussian_log_pdf(g: DiagGaussian, v) -> float:
    """Fully normalized log-density of ``g`` at ``v``."""
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if v.shape != g.mean.shape:
        raise ValueError(f"point shape {v.shape} does not match Gaussian {g.mean.shape}")
    r = v - g.mean
    return float(-0.5 * np.sum(r * r / g.variance + np.log(g.variance) + LOG_2PI))


def gaussian_interpolate(q: DiagGaussian, p: DiagGaussian, lam: float) -> np.ndarray:
    """Minimizer of ``-log q(z) - lam * log p(z)``.

    Per coordinate this is the precision-weighted average of the two means,
    with the prior precision scaled by ``lam``.
    """
    if q.mean.shape != p.mean.shape:
        raise ValueError(f"dimension mismatch: {q.mean.shape} vs {p.mean.shape}")
    if lam < 0:
        raise ValueError("lam must be >= 0")
    sq = 1.0 / q.variance
    sp = lam / p.variance
    return (sq * q.mean + sp * p.mean) / (sq + sp)


def gaussian_kl(q: DiagGaussian, p: DiagGaussian) -> float:
    """Closed-form KL(q || p) for diagonal Gaussians."""
    if q.mean.shape != p.mean.shape:
        raise ValueError(f"dimension mismatch: {q.mean.shape} vs {p.mean.shape}")
    d = q.mean - p.mean
    return float(
        0.5
        * np.sum(np.log(p.variance) - np.log(q.variance) + (q.variance + d * d) / p.variance - 1.0)
    )


@dataclass(frozen=True)
class LinearMap:
    """A linear operator given by its action and the action of its adjoint.

    Both callables take and return flat vectors.
    """

    apply: Callable[[np.ndarray], np.ndarray]
    apply_adjoint: Callable[[np.ndarray], np.ndarray]
    in_dim: int
    out_dim: int

    def __call__(self, u):
        return self.apply(u)

    @property
    def T(self) -> "LinearMap":
        return LinearMap(self.apply_adjoint, self.apply, self.out_dim, self.in_dim)

    @classmethod
    def from_matrix(cls, m) -> "LinearMap":
        m = np.array(m, dtype=float)
        return cls(lambda u: m @ u, lambda v: m.T @ v, m.shape[1], m.shape[0])

    @classmethod
    def identity(cls, n: int) -> "LinearMap":
        return cls(lambda u: np.array(u, dtype=float), lambda v: np.array(v, dtype=float), n, n)

    def to_dense(self) -> np.ndarray:
        eye = np.eye(self.in_dim)
        return np.column_stack([self.apply(eye[:, j]) for j in range(self.in_dim)])

    def normal(self, shift: float = 0.0) -> "LinearMap":
        """The map u -> A^t A u + shift * u."""

        def apply(u):
            return self.apply_adjoint(self.apply(u)) + shift * u

        return LinearMap(apply, apply, self.in_dim, self.in_dim)


def adjoint_mismatch(op: LinearMap, n_probes: int = 100, seed: int = 0) -> float:
    """Largest ``|<Au, v> - <u, A^t v>| / (|u| |v|)`` over random probes."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_probes):
        u = rng.standard_normal(op.in_dim)
        v = rng.standard_normal(op.out_dim)
        lhs = float(np.dot(op.apply(u), v))
        rhs = float(np.dot(u, op.apply_adjoint(v)))
        worst = max(worst, abs(lhs - rhs) / (np.linalg.norm(u) * np.linalg.norm(v)))
    return worst


@dataclass
class CGResult:
    x: np.ndarray
    converged: bool
    n_iter: int
    rel_residual: float
    history: list = field(default_factory=list, repr=False)


def cg_solve(M: LinearMap, b, tol: float = 1e-8, max_iter: int = 500, x0=None) -> CGResult:
    """Conjugate gradients for a symmetric positive definite ``M``.

    Stops once ``|Mx - b| <= tol * |b|``. If ``max_iter`` is hit first the
    best iterate is returned with ``converged=False``.
    """
    if tol <= 0:
        raise ValueError("tol must be > 0")
    b = np.asarray(b, dtype=float)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return CGResult(np.zeros_like(b), True, 0, 0.0)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - M.apply(x) if x0 is not None else b.copy()
    p = r.copy()
    rr = float(r @ r)
    best_x, best_res = x.copy(), math.sqrt(rr) / bnorm
    history = [best_res]
    if best_res <= tol:
        return CGResult(x, True, 0, best_res, history)
    for k in range(1, max_iter + 1):
        Mp = M.apply(p)
        pMp = float(p @ Mp)
        if not np.isfinite(pMp):
            raise FloatingPointError(f"non-finite curvature at CG iteration {k}")
        if pMp <= 0:
            raise np.linalg.LinAlgError(f"operator is not positive definite (p^t M p = {pMp:g})")
        alpha = rr / pMp
        x = x + alpha * p
        r = r - alpha * Mp
        rr_new = float(r @ r)
        if not np.isfinite(rr_new):
            raise FloatingPointError(f"non-finite residual at CG iteration {k}")
        res = math.sqrt(rr_new) / bnorm
        history.append(res)
        if res < best_res:
            best_x, best_res = x.copy(), res
        if res <= tol:
            return CGResult(x, True, k, res, history)
        p = r + (rr_new / rr) * p
        rr = rr_new
    return CGResult(best_x, False, max_iter, best_res, history)


def dense_solve(M, b) -> np.ndarray:
    """Direct SPD solve by Cholesky; the oracle for :func:`cg_solve`."""
    M = M.to_dense() if isinstance(M, LinearMap) else np.asarray(M, dtype=float)
    if M.shape[0] > 4096:
        raise ValueError("dense_solve is limited to dimension <= 4096")
    c = np.linalg.cholesky(M)
    return np.linalg.solve(c.T, np.linalg.solve(c, np.asarray(b, dtype=float)))


def spectral_norm(M: LinearMap, iters: int = 1000, seed: int = 0, rtol: float = 1e-15) -> float:
    """Largest singular value of ``M`` by power iteration on ``M^t M``."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    for _attempt in range(3):
        u = rng.standard_normal(M.in_dim)
        n = np.linalg.norm(u)
        w = M.apply_adjoint(M.apply(u / n))
        if np.linalg.norm(w) > 0:
            break
    else:
        # A^t A annihilates random vectors: the map is (numerically) zero.
        raise ValueError("power iteration start vector collapsed to zero three times")
    u = u / n
    est = 0.0
    for _ in range(iters):
        w = M.apply_adjoint(M.apply(u))
        wn = np.linalg.norm(w)
        if wn == 0:
            return 0.0
        new = math.sqrt(float(u @ w))
        u = w / wn
        if abs(new - est) <= rtol * new:
            est = new
            break
        est = new
    # Rayleigh quotient at the final vector is the sharpest estimate.
    return math.sqrt(max(float(u @ M.apply_adjoint(M.apply(u))), 0.0))
