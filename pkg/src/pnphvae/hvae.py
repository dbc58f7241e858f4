"""Hierarchical VAE abstraction, tempered regularized encoding and the
joint-MAP objectives."""

from __future__ import annotations

import abc
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .core_math import LOG_2PI, DiagGaussian, gaussian_interpolate, gaussian_kl, gaussian_log_pdf

if TYPE_CHECKING:
    from .operators import DataFidelity

LatentHierarchy = list  # list[np.ndarray], one flat vector per level

TAU_FLOOR = 1e-6


@dataclass(frozen=True)
class TemperatureSchedule:
    taus: tuple

    def __post_init__(self):
        taus = tuple(float(t) for t in np.atleast_1d(self.taus))
        if not taus:
            raise ValueError("temperature schedule needs at least one level")
        for t in taus:
            if not (0.0 < t <= 1.0):
                raise ValueError(f"temperatures must lie in (0, 1], got {t}")
        object.__setattr__(self, "taus", taus)

    @classmethod
    def constant(cls, tau: float, n_levels: int) -> "TemperatureSchedule":
        return cls((tau,) * n_levels)

    def __len__(self):
        return len(self.taus)

    @property
    def lambdas(self) -> tuple:
        """Latent regularization weights ``1/tau^2 - 1``."""
        return tuple(1.0 / max(t, TAU_FLOOR) ** 2 - 1.0 for t in self.taus)


def as_schedule(tau, n_levels: int) -> TemperatureSchedule:
    """Accept a schedule or a scalar temperature shared by all levels."""
    if isinstance(tau, TemperatureSchedule):
        sched = tau
    elif np.ndim(tau) == 0:
        sched = TemperatureSchedule.constant(float(tau), n_levels)
    else:
        sched = TemperatureSchedule(tuple(tau))
    if len(sched) != n_levels:
        raise ValueError(f"schedule has {len(sched)} levels, model has {n_levels}")
    return sched


class HvaeModel(abc.ABC):
    """Gaussian hierarchical VAE with a constant-variance Gaussian decoder.

    Images are numpy arrays of shape ``x_shape``; latents are a list of flat
    vectors, coarsest level first.
    """

    x_shape: tuple

    @abc.abstractmethod
    def latent_dims(self) -> list:
        ...

    @abc.abstractmethod
    def prior_conditional(self, level: int, prefix: Sequence[np.ndarray]) -> DiagGaussian:
        """p(z_l | z_<l)."""

    @abc.abstractmethod
    def encoder_conditional(self, level: int, prefix: Sequence[np.ndarray], x) -> DiagGaussian:
        """q(z_l | z_<l, x)."""

    @abc.abstractmethod
    def decoder_mean(self, z: Sequence[np.ndarray]) -> np.ndarray:
        ...

    @abc.abstractmethod
    def decoder_variance(self) -> float:
        ...

    @property
    def n_levels(self) -> int:
        return len(self.latent_dims())

    @property
    def x_dim(self) -> int:
        return int(np.prod(self.x_shape))

    def neg_log_joint_grad(self, x, z, tau):
        """Value and gradients of ``-sum_l log p(z_l|z_<l)/tau_l^2 - log p(x|z)``.

        Returns ``(value, grad_x, [grad_z_l, ...])``. Models that cannot
        differentiate through their networks leave this unimplemented.
        """
        raise NotImplementedError(f"{type(self).__name__} does not provide J1 gradients")


def _check_finite(g: DiagGaussian, level: int, what: str):
    if not (np.all(np.isfinite(g.mean)) and np.all(np.isfinite(g.variance))):
        raise FloatingPointError(f"non-finite {what} conditional parameters at level {level}")


def encode_regularized(model: HvaeModel, x, tau) -> LatentHierarchy:
    """Greedy coarse-to-fine encoding with tempered latent regularization.

    At each level the latent is the minimizer of
    ``-log q(z_l|z_<l,x) - lambda_l log p(z_l|z_<l)`` given the coarser
    latents already chosen.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("encode_regularized received a non-finite image")
    sched = as_schedule(tau, model.n_levels)
    z: LatentHierarchy = []
    for level, lam in enumerate(sched.lambdas):
        q = model.encoder_conditional(level, z, x)
        _check_finite(q, level, "encoder")
        if lam == 0.0:
            z.append(q.mean.copy())
            continue
        p = model.prior_conditional(level, z)
        _check_finite(p, level, "prior")
        z.append(gaussian_interpolate(q, p, lam))
    return z


def reconstruct(model: HvaeModel, x, tau) -> np.ndarray:
    """The autoencoder-with-latent-regularization map ``x -> mu(E_tau(x))``."""
    return model.decoder_mean(encode_regularized(model, x, tau))


def prior_mean_chain(model: HvaeModel) -> LatentHierarchy:
    z: LatentHierarchy = []
    for level in range(model.n_levels):
        z.append(model.prior_conditional(level, z).mean.copy())
    return z


def encoder_mean_chain(model: HvaeModel, x) -> LatentHierarchy:
    z: LatentHierarchy = []
    for level in range(model.n_levels):
        z.append(model.encoder_conditional(level, z, x).mean.copy())
    return z


def sample_prior(model: HvaeModel, tau, rng: np.random.Generator, shape=None) -> np.ndarray:
    """Ancestral sample from the tempered prior, decoded to its mean image."""
    if shape is not None and tuple(shape) != tuple(model.x_shape):
        raise ValueError(f"model generates shape {model.x_shape}, asked for {tuple(shape)}")
    sched = as_schedule(tau, model.n_levels)
    z: LatentHierarchy = []
    for level, t in enumerate(sched.taus):
        p = model.prior_conditional(level, z)
        z.append(p.mean + t * np.sqrt(p.variance) * rng.standard_normal(p.dim))
    return model.decoder_mean(z)


def decoder_log_likelihood(model: HvaeModel, x, z) -> float:
    """log N(x; mu(z), gamma^2 I)."""
    x = np.asarray(x, dtype=float)
    mu = model.decoder_mean(z)
    if mu.shape != x.shape:
        raise ValueError(f"image shape {x.shape} does not match decoder output {mu.shape}")
    g2 = model.decoder_variance()
    r = x - mu
    return float(-0.5 * (np.sum(r * r) / g2 + x.size * (math.log(g2) + LOG_2PI)))


def _check_latents(model: HvaeModel, z):
    dims = model.latent_dims()
    if len(z) != len(dims):
        raise ValueError(f"expected {len(dims)} latent levels, got {len(z)}")
    for level, (zl, d) in enumerate(zip(z, dims)):
        if np.size(zl) != d:
            raise ValueError(f"level {level} latent has size {np.size(zl)}, expected {d}")


def eval_J1(model: HvaeModel, x, z, tau, fidelity: "DataFidelity | None" = None) -> float:
    """Decoder-side joint-MAP objective, normalization constants included."""
    _check_latents(model, z)
    sched = as_schedule(tau, model.n_levels)
    total = 0.0
    for level, t in enumerate(sched.taus):
        p = model.prior_conditional(level, z[:level])
        total -= gaussian_log_pdf(p, z[level]) / max(t, TAU_FLOOR) ** 2
    total -= decoder_log_likelihood(model, x, z)
    if fidelity is not None:
        total += fidelity.value(x)
    return total


def eval_J2_tilde(model: HvaeModel, x, z, tau, fidelity: "DataFidelity | None" = None) -> float:
    """Encoder-side objective with the z-independent data-prior term dropped."""
    _check_latents(model, z)
    sched = as_schedule(tau, model.n_levels)
    total = 0.0
    for level, lam in enumerate(sched.lambdas):
        q = model.encoder_conditional(level, z[:level], x)
        total -= gaussian_log_pdf(q, z[level])
        if lam != 0.0:
            p = model.prior_conditional(level, z[:level])
            total -= lam * gaussian_log_pdf(p, z[level])
    if fidelity is not None:
        total += fidelity.value(x)
    return total


@dataclass(frozen=True)
class J2Terms:
    """Per-level split of the encoder-side objective.

    ``A`` couples z_l with its prefix through the product-Gaussian mean.
    ``B_det`` collects log-determinants and ``B_mean`` the mismatch between
    encoder and prior means; both depend on the prefix only. ``C`` is constant.
    """

    A: np.ndarray
    B_det: np.ndarray
    B_mean: np.ndarray
    C: np.ndarray

    @property
    def B(self) -> np.ndarray:
        return self.B_det + self.B_mean

    def total(self) -> float:
        return float(np.sum(self.A) + np.sum(self.B) + np.sum(self.C))


def j2_decomposition(model: HvaeModel, x, z, tau) -> J2Terms:
    """Split ``-sum_l log q_l + lambda_l log p_l`` into A + B + C per level.

    Uses the product-of-Gaussians identity with precisions
    ``S = S_q + lambda S_p`` and mean ``m = S^-1 (S_q m_q + lambda S_p m_p)``.
    """
    _check_latents(model, z)
    sched = as_schedule(tau, model.n_levels)
    L = model.n_levels
    A, Bd, Bm, C = (np.zeros(L) for _ in range(4))
    for level, lam in enumerate(sched.lambdas):
        q = model.encoder_conditional(level, z[:level], x)
        p = model.prior_conditional(level, z[:level])
        sq = 1.0 / q.variance
        sp = 1.0 / p.variance
        S = sq + lam * sp
        m = (sq * q.mean + lam * sp * p.mean) / S
        zl = np.asarray(z[level], dtype=float)
        A[level] = 0.5 * np.sum(S * (zl - m) ** 2)
        Bd[level] = -0.5 * np.sum(np.log(sq)) - 0.5 * lam * np.sum(np.log(sp))
        Bm[level] = 0.5 * np.sum(sq * lam * sp / S * (q.mean - p.mean) ** 2)
        C[level] = 0.5 * q.dim * (1.0 + lam) * LOG_2PI
    return J2Terms(A, Bd, Bm, C)


def elbo_samples(model: HvaeModel, x, rng: np.random.Generator, n_samples: int = 1) -> np.ndarray:
    """Per-sample ELBO estimates: ``log p(x|z) - sum_l KL(q_l || p_l)``.

    Latents are drawn ancestrally from the encoder by reparameterization;
    each level's KL is closed-form given the sampled prefix.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    x = np.asarray(x, dtype=float)
    out = np.empty(n_samples)
    for s in range(n_samples):
        z: LatentHierarchy = []
        kl = 0.0
        for level in range(model.n_levels):
            q = model.encoder_conditional(level, z, x)
            p = model.prior_conditional(level, z)
            kl += gaussian_kl(q, p)
            z.append(q.mean + np.sqrt(q.variance) * rng.standard_normal(q.dim))
        out[s] = decoder_log_likelihood(model, x, z) - kl
    return out


def elbo(model: HvaeModel, x, rng: np.random.Generator, n_samples: int = 1) -> float:
    return float(np.mean(elbo_samples(model, x, rng, n_samples)))


def kl_to_prior(model: HvaeModel, x, rng: np.random.Generator, n_samples: int = 1) -> float:
    """Monte-Carlo estimate of the hierarchical KL(q(z|x) || p(z))."""
    x = np.asarray(x, dtype=float)
    total = 0.0
    for _ in range(n_samples):
        z: LatentHierarchy = []
        for level in range(model.n_levels):
            q = model.encoder_conditional(level, z, x)
            p = model.prior_conditional(level, z)
            total += gaussian_kl(q, p)
            z.append(q.mean + np.sqrt(q.variance) * rng.standard_normal(q.dim))
    return total / n_samples
