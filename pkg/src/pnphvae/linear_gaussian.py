"""Analytic linear-Gaussian hierarchical VAE.

Every quantity of the restoration theory (joint MAP, tempered marginal,
posterior-mean denoiser, minimizer of the encoder objective) has a closed
form here, so this module is the ground truth for the iterative code.

Randomly built models use an innovation decoder: the image is an affine
function of the per-level innovations ``z_l - W_l z_<l - b_l`` through
orthogonal directions. The exact posterior conditionals are then diagonal
and share the prior's dependence on ``z_<l``, which is the setting where the
greedy encoder reaches the global minimum of the encoder objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import serialization
from .core_math import LOG_2PI, DiagGaussian, LinearMap
from .hvae import TAU_FLOOR, HvaeModel, as_schedule

DIAG_TOL = 1e-9
MAX_CONDITION = 1e6


@dataclass(frozen=True)
class DenseGaussian:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        cov = np.asarray(self.cov, dtype=float)
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise ValueError("covariance is not symmetric")
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "_chol", np.linalg.cholesky(self.cov))

    def logpdf(self, x) -> float:
        r = np.ravel(x) - self.mean
        w = np.linalg.solve(self._chol, r)
        logdet = 2.0 * np.sum(np.log(np.diag(self._chol)))
        return float(-0.5 * (w @ w + logdet + r.size * LOG_2PI))

    def grad_logpdf(self, x) -> np.ndarray:
        r = self.mean - np.ravel(x)
        return np.linalg.solve(self._chol.T, np.linalg.solve(self._chol, r))


def _condition(mean, cov, keep, given, value):
    """Mean slope, offset and covariance of ``u[keep] | u[given] = value``."""
    S_kg = cov[np.ix_(keep, given)]
    S_gg = cov[np.ix_(given, given)]
    if len(given):
        K = np.linalg.solve(S_gg, S_kg.T).T
    else:
        K = np.zeros((len(keep), 0))
    c = cov[np.ix_(keep, keep)] - K @ S_kg.T
    if value is None:
        return K, mean[keep] - K @ mean[given], 0.5 * (c + c.T)
    return mean[keep] + K @ (value - mean[given]), 0.5 * (c + c.T)


class LinearGaussianHvae(HvaeModel):
    """Affine prior cascade, affine decoder, constant diagonal variances.

    ``W`` is the strictly block-lower-triangular matrix whose level-``l`` row
    block maps the stacked prefix ``z_<l`` to the prior mean of ``z_l``.
    The encoder is the exact posterior, derived by dense conditioning,
    unless ``encoder`` supplies affine per-level conditionals explicitly as
    ``(F_l, G_l, e_l, s_l)`` with mean ``F_l z_<l + G_l x + e_l``.
    """

    def __init__(self, dims, W, b, v_prior, D, c, gamma2, x_shape=None, encoder=None):
        self.dims = [int(d) for d in dims]
        n = sum(self.dims)
        self.offsets = np.concatenate([[0], np.cumsum(self.dims)]).astype(int)
        self.W = np.array(W, dtype=float).reshape(n, n)
        self.b = np.array(b, dtype=float).reshape(n)
        self.v_prior = np.array(v_prior, dtype=float).reshape(n)
        self.D = np.array(D, dtype=float)
        self.c = np.array(c, dtype=float).ravel()
        self.gamma2 = float(gamma2)
        self.x_shape = (self.D.shape[0],) if x_shape is None else tuple(x_shape)
        if self.D.shape != (int(np.prod(self.x_shape)), n):
            raise ValueError(f"decoder matrix shape {self.D.shape} inconsistent with dims/x_shape")
        for lo, hi in zip(self.offsets[:-1], self.offsets[1:]):
            if np.any(self.W[lo:hi, lo:]):
                raise ValueError("W must be strictly block lower triangular")
        if np.any(self.v_prior <= 0) or self.gamma2 <= 0:
            raise ValueError("all variances must be > 0")
        self._joint = self._joint_gaussian(np.ones(n))
        self.condition_number = float(np.linalg.cond(self._joint[1]))
        if not np.isfinite(self.condition_number) or self.condition_number > MAX_CONDITION:
            raise np.linalg.LinAlgError(f"joint covariance condition number {self.condition_number:.3g} too large")
        self.encoder = self._exact_encoder(self._joint) if encoder is None else [tuple(map(np.asarray, e)) for e in encoder]

    # -- structure helpers

    def _sl(self, level):
        return slice(self.offsets[level], self.offsets[level + 1])

    def latent_dims(self):
        return list(self.dims)

    @property
    def n_latent(self) -> int:
        return int(self.offsets[-1])

    def stack(self, z) -> np.ndarray:
        return np.concatenate([np.ravel(zl) for zl in z]) if len(z) else np.zeros(0)

    def split(self, u) -> list:
        return [np.array(u[self._sl(l)]) for l in range(self.n_levels)]

    def _level_taus(self, tau) -> np.ndarray:
        sched = as_schedule(tau, self.n_levels)
        return np.concatenate([np.full(d, max(t, TAU_FLOOR)) for d, t in zip(self.dims, sched.taus)])

    # -- joint Gaussian over (z, x)

    def _joint_gaussian(self, tau_vec):
        n = self.n_latent
        K = np.linalg.inv(np.eye(n) - self.W)
        mz = K @ self.b
        Sz = K @ np.diag(tau_vec**2 * self.v_prior) @ K.T
        mx = self.D @ mz + self.c
        Sxz = self.D @ Sz
        Sx = self.D @ Sz @ self.D.T + self.gamma2 * np.eye(self.D.shape[0])
        mean = np.concatenate([mz, mx])
        cov = np.block([[Sz, Sxz.T], [Sxz, Sx]])
        return mean, 0.5 * (cov + cov.T)

    def joint_gaussian(self, tau=1.0) -> DenseGaussian:
        """Gaussian over the stacked ``(z, x)`` with tempered prior variances."""
        return DenseGaussian(*self._joint_gaussian(self._level_taus(tau)))

    def _exact_encoder(self, joint):
        mean, cov = joint
        n = self.n_latent
        xs = list(range(n, n + self.D.shape[0]))
        enc = []
        for level in range(self.n_levels):
            sl = self._sl(level)
            keep = list(range(sl.start, sl.stop))
            given = list(range(0, sl.start)) + xs
            K, off, C = _condition(mean, cov, keep, given, None)
            off_diag = C - np.diag(np.diag(C))
            if np.abs(off_diag).max(initial=0.0) > DIAG_TOL * np.abs(np.diag(C)).max():
                raise ValueError(
                    f"exact posterior conditional at level {level} is not diagonal; "
                    "use an innovation decoder with orthogonal directions"
                )
            enc.append((K[:, : sl.start], K[:, sl.start :], off, np.diag(C).copy()))
        return enc

    # -- HvaeModel interface

    def prior_conditional(self, level, prefix):
        sl = self._sl(level)
        u = self.stack(prefix)
        mean = self.W[sl, : sl.start] @ u + self.b[sl]
        return DiagGaussian(mean, self.v_prior[sl])

    def encoder_conditional(self, level, prefix, x):
        F, G, e, s = self.encoder[level]
        mean = F @ self.stack(prefix) + G @ np.ravel(x) + e
        return DiagGaussian(mean, s)

    def decoder_mean(self, z):
        return (self.D @ self.stack(z) + self.c).reshape(self.x_shape)

    def decoder_variance(self):
        return self.gamma2

    def neg_log_joint_grad(self, x, z, tau):
        u = self.stack(z)
        prec = 1.0 / (self._level_taus(tau) ** 2 * self.v_prior)
        R = np.eye(self.n_latent) - self.W
        r = R @ u - self.b
        rx = np.ravel(x) - (self.D @ u + self.c)
        prior = np.sum(0.5 * prec * r * r + 0.5 * (np.log(self.v_prior) + LOG_2PI) * prec * self.v_prior)
        dec = 0.5 * (rx @ rx / self.gamma2 + rx.size * (math.log(self.gamma2) + LOG_2PI))
        gz = R.T @ (prec * r) - self.D.T @ rx / self.gamma2
        gx = rx / self.gamma2
        return float(prior + dec), gx.reshape(self.x_shape), self.split(gz)

    # -- variants

    def tempered(self, tau) -> "LinearGaussianHvae":
        """Same model with prior variances scaled by ``tau_l^2``."""
        return LinearGaussianHvae(
            self.dims, self.W, self.b, self._level_taus(tau) ** 2 * self.v_prior,
            self.D, self.c, self.gamma2, self.x_shape,
        )

    def with_deterministic_encoder(self, tau, eps: float) -> "LinearGaussianHvae":
        """Encoder means from the exact tempered posterior, variances scaled by ``eps``.

        As ``eps -> 0`` the encoder becomes a Dirac at the tempered-posterior
        chain while the prior stays untempered.
        """
        enc = [(F, G, e, eps * s) for F, G, e, s in self.tempered(tau).encoder]
        return LinearGaussianHvae(self.dims, self.W, self.b, self.v_prior, self.D, self.c, self.gamma2, self.x_shape, encoder=enc)

    def reshaped(self, x_shape) -> "LinearGaussianHvae":
        return LinearGaussianHvae(self.dims, self.W, self.b, self.v_prior, self.D, self.c, self.gamma2, x_shape, encoder=self.encoder)

    # -- serialization

    def to_param_file(self) -> serialization.ParamFile:
        tensors = {"W": self.W, "b": self.b, "v_prior": self.v_prior, "D": self.D, "c": self.c, "gamma2": np.array([self.gamma2])}
        return serialization.ParamFile("linear_gaussian", self.dims, self.x_shape, tensors)

    @classmethod
    def from_param_file(cls, pf: serialization.ParamFile) -> "LinearGaussianHvae":
        if pf.kind != "linear_gaussian":
            raise ValueError(f"parameter file holds a {pf.kind!r} model")
        t = pf.tensors
        return cls(pf.dims, t["W"], t["b"], t["v_prior"], t["D"], t["c"], float(t["gamma2"][0]), pf.x_shape or None)


def build_random_model(dims, d_x=None, seed: int = 0, conditioning: float = 0.5, x_shape=None,
                       gamma2: float | None = None) -> LinearGaussianHvae:
    """Random innovation-decoder model; deterministic in ``seed``.

    ``conditioning`` in (0, 1] scales the strength of the prior cascade
    ``W``; smaller values give a better conditioned joint covariance.
    """
    dims = [int(d) for d in dims]
    if not dims or min(dims) < 1:
        raise ValueError("all latent dims must be >= 1")
    if x_shape is not None:
        d_x = int(np.prod(x_shape))
    n = sum(dims)
    if d_x is None or d_x < n:
        raise ValueError(f"d_x must be >= total latent dimension {n}")
    if not 0 < conditioning <= 1:
        raise ValueError("conditioning must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    offs = np.concatenate([[0], np.cumsum(dims)])
    W = np.zeros((n, n))
    for lo, hi in zip(offs[1:-1], offs[2:]):
        W[lo:hi, :lo] = conditioning * rng.standard_normal((hi - lo, lo)) / math.sqrt(lo)
    b = 0.5 * rng.standard_normal(n)
    v = rng.uniform(0.5, 1.5, n)
    U, _ = np.linalg.qr(rng.standard_normal((d_x, n)))
    scales = rng.uniform(0.4, 1.2, n)
    D_innov = U * scales
    c0 = 0.5 + 0.1 * rng.standard_normal(d_x)
    g2 = float(rng.uniform(0.15, 0.5)) if gamma2 is None else float(gamma2)
    D = D_innov @ (np.eye(n) - W)
    c = c0 - D_innov @ b
    return LinearGaussianHvae(dims, W, b, v, D, c, g2, x_shape)


# ------------------------------------------------------------ oracles


def _dense_op_matrix(A, d_x) -> np.ndarray:
    if isinstance(A, np.ndarray):
        return A
    if isinstance(A, LinearMap):
        return A.to_dense()
    return A.as_linear_map().to_dense()


def exact_joint_map(model: LinearGaussianHvae, y, A, sigma: float, tau):
    """Global minimizer of the decoder-side objective over ``(x, z)``.

    Every term is quadratic, so the normal equations of the stacked problem
    are assembled and solved densely.
    """
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    d_x = model.x_dim
    n = model.n_latent
    Am = _dense_op_matrix(A, d_x)
    y = np.ravel(y)
    prec = 1.0 / (model._level_taus(tau) ** 2 * model.v_prior)
    R = np.eye(n) - model.W
    g2 = model.gamma2
    Hxx = Am.T @ Am / sigma**2 + np.eye(d_x) / g2
    Hxz = -model.D / g2
    Hzz = R.T @ (prec[:, None] * R) + model.D.T @ model.D / g2
    H = np.block([[Hxx, Hxz], [Hxz.T, Hzz]])
    g = np.concatenate([Am.T @ y / sigma**2 + model.c / g2, R.T @ (prec * model.b) - model.D.T @ model.c / g2])
    try:
        u = np.linalg.solve(H, g)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("joint MAP normal equations are singular") from exc
    return u[:d_x].reshape(model.x_shape), model.split(u[d_x:])


def marginal_tempered_prior(model: LinearGaussianHvae, tau) -> DenseGaussian:
    """Gaussian law of ``x`` when each prior level has variance scaled by ``tau_l^2``."""
    mean, cov = model._joint_gaussian(model._level_taus(tau))
    n = model.n_latent
    return DenseGaussian(mean[n:], cov[n:, n:])


def tempered_posterior_mean(model: LinearGaussianHvae, x, tau) -> np.ndarray:
    mean, cov = model._joint_gaussian(model._level_taus(tau))
    n = model.n_latent
    m, _ = _condition(mean, cov, list(range(n)), list(range(n, mean.size)), np.ravel(x))
    return m


def posterior_mean_denoiser(model: LinearGaussianHvae, x, tau) -> np.ndarray:
    """``E[mu(z) | x]`` under the tempered joint; affine decoder makes it ``mu(E[z|x])``."""
    return (model.D @ tempered_posterior_mean(model, x, tau) + model.c).reshape(model.x_shape)


def tweedie_check(model: LinearGaussianHvae, x, tau):
    """Both sides of ``D(x) - x = gamma^2 grad log p_tau(x)``."""
    lhs = np.ravel(posterior_mean_denoiser(model, x, tau)) - np.ravel(x)
    rhs = model.gamma2 * marginal_tempered_prior(model, tau).grad_logpdf(x)
    return lhs, rhs


def brute_force_min_J2(model: LinearGaussianHvae, x, tau) -> list:
    """Exact minimizer over all latents of the encoder-side objective.

    The objective is a sum of Gaussian quadratics in the stacked ``z``; its
    Hessian and linear term are assembled from the affine encoder and prior
    parameters and solved directly.
    """
    sched = as_schedule(tau, model.n_levels)
    n = model.n_latent
    x = np.ravel(x)
    Fq = np.zeros((n, n))
    oq = np.zeros(n)
    sq = np.zeros(n)
    lam = np.zeros(n)
    for level, (F, G, e, s) in enumerate(model.encoder):
        sl = model._sl(level)
        Fq[sl, : sl.start] = F
        oq[sl] = G @ x + e
        sq[sl] = 1.0 / s
        lam[sl] = sched.lambdas[level]
    Rq = np.eye(n) - Fq
    Rp = np.eye(n) - model.W
    wp = lam / model.v_prior
    H = Rq.T @ (sq[:, None] * Rq) + Rp.T @ (wp[:, None] * Rp)
    g = Rq.T @ (sq * oq) + Rp.T @ (wp * model.b)
    try:
        u = np.linalg.solve(H, g)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("encoder objective Hessian is singular") from exc
    return model.split(u)


def affine_reconstruction(model: HvaeModel, tau):
    """Matrix and offset of ``x -> reconstruct(x, tau)`` for an affine model, by probing."""
    from .hvae import reconstruct

    d = model.x_dim
    zero = np.zeros(model.x_shape)
    r0 = np.ravel(reconstruct(model, zero, tau))
    M = np.empty((d, d))
    eye = np.eye(d)
    for j in range(d):
        M[:, j] = np.ravel(reconstruct(model, eye[j].reshape(model.x_shape), tau)) - r0
    return M, r0


def reconstruction_lipschitz(model: HvaeModel, tau) -> float:
    """Exact Lipschitz constant of an affine reconstruction (largest singular value)."""
    M, _ = affine_reconstruction(model, tau)
    return float(np.linalg.norm(M, 2))


def parse_oracle_spec(spec: str, x_shape=None) -> LinearGaussianHvae:
    """Build a model from ``oracle:<seed>:<d0,d1,...>[:<d_x>]``."""
    parts = spec.split(":")
    if parts[0] != "oracle" or len(parts) not in (3, 4):
        raise ValueError(f"malformed oracle model spec {spec!r}")
    seed = int(parts[1])
    dims = [int(d) for d in parts[2].split(",") if d]
    d_x = None
    if len(parts) == 4:
        d_x = int(parts[3])
        if x_shape is not None and int(np.prod(x_shape)) != d_x:
            raise ValueError("oracle d_x disagrees with the image size")
    if d_x is None and x_shape is None:
        d_x = 2 * sum(dims)
    return build_random_model(dims, d_x=None if x_shape else d_x, seed=seed, x_shape=x_shape)
