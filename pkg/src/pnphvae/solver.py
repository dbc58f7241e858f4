"""Alternating restoration loop, the Adam baseline and convergence
diagnostics."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .hvae import HvaeModel, as_schedule, encode_regularized, eval_J1, reconstruct
from .operators import DataFidelity, x_update

TRACE_COLUMNS = ("iter", "residual", "J1", "Lk", "fp_residual", "seconds")


@dataclass
class SolverConfig:
    tau: object = 0.8
    max_iter: int = 50
    tol: float | None = None  # None -> 1e-5 * sqrt(dim)
    init_mode: str = "adjoint"
    trace_every: int = 1
    plateau_window: int = 0  # 0 disables the plateau stop
    plateau_rtol: float = 0.01
    x0: np.ndarray | None = None

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.tol is not None and not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.init_mode not in ("adjoint", "zeros", "observation"):
            raise ValueError(f"unknown init_mode {self.init_mode!r}")


@dataclass
class AdamConfig:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_iter: int = 1000
    seed: int = 0
    init_mode: str = "adjoint"
    z_init: str = "encode"  # or "random"
    trace_every: int = 1

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")


@dataclass
class SolverTrace:
    iters: list = field(default_factory=list)
    residual: list = field(default_factory=list)
    J1: list = field(default_factory=list)
    Lk: list = field(default_factory=list)
    fp_residual: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    stop_reason: str = ""

    def append(self, it, res, j1, fp, sec):
        self.iters.append(it)
        self.residual.append(res)
        self.J1.append(j1)
        self.Lk.append(math.nan)
        self.fp_residual.append(fp)
        self.seconds.append(sec)

    def __len__(self):
        return len(self.iters)

    def rows(self):
        return zip(self.iters, self.residual, self.J1, self.Lk, self.fp_residual, self.seconds)

    def first_iter_below(self, threshold: float):
        for it, r in zip(self.iters, self.residual):
            if r <= threshold:
                return it
        return None

    def to_csv(self, path, with_time: bool = True) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS if with_time else TRACE_COLUMNS[:-1])
            for row in self.rows():
                vals = [row[0]] + [repr(float(v)) for v in row[1:]]
                w.writerow(vals if with_time else vals[:-1])

    @classmethod
    def from_csv(cls, path) -> "SolverTrace":
        tr = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                tr.iters.append(int(row["iter"]))
                tr.residual.append(float(row["residual"]))
                tr.J1.append(float(row["J1"]))
                tr.Lk.append(float(row["Lk"]))
                tr.fp_residual.append(float(row["fp_residual"]))
                tr.seconds.append(float(row.get("seconds", "nan")))
        return tr


def initial_estimate(fidelity: DataFidelity, mode: str = "adjoint") -> np.ndarray:
    op = fidelity.op
    if mode == "zeros":
        return np.zeros(op.in_shape)
    if mode == "observation":
        if tuple(fidelity.y.shape) != tuple(op.in_shape):
            raise ValueError("observation init needs an observation of the image's shape")
        return np.array(fidelity.y, dtype=float)
    if mode == "adjoint":
        return np.clip(op.apply_adjoint(fidelity.y), 0.0, 1.0)
    raise ValueError(f"unknown init mode {mode!r}")


def pnp_operator(model: HvaeModel, fidelity: DataFidelity, tau):
    """One iteration ``x -> prox_{gamma^2 f}(reconstruct(x, tau))``."""
    g2 = model.decoder_variance()

    def T(x):
        return x_update(fidelity, reconstruct(model, x, tau), g2)

    return T


def contraction_bound(sigma: float, gamma2: float, lambda_min: float, lipschitz: float) -> float:
    """Upper bound on the Lipschitz constant of one restoration iteration."""
    return sigma**2 / (gamma2 * lambda_min + sigma**2) * lipschitz


def _plateau(residuals, window, rtol) -> bool:
    if window <= 0 or len(residuals) <= window:
        return False
    old, new = residuals[-window - 1], residuals[-1]
    return old > 0 and abs(new - old) / old < rtol


def run_pnp_hvae(model: HvaeModel, fidelity: DataFidelity, cfg: SolverConfig):
    """Alternate greedy latent encoding and the closed-form image update.

    Returns ``(x, z, trace)``. The contraction ratio of iteration ``k`` is
    ``|T(x_{k+1}) - T(x_k)| / |x_{k+1} - x_k|``, which for this loop is the
    ratio of consecutive residuals; the last one costs one extra ``T`` call.
    """
    tau = as_schedule(cfg.tau, model.n_levels)
    g2 = model.decoder_variance()
    x = initial_estimate(fidelity, cfg.init_mode) if cfg.x0 is None else np.array(cfg.x0, dtype=float)
    tol = 1e-5 * math.sqrt(x.size) if cfg.tol is None else cfg.tol
    trace = SolverTrace()
    residuals = []
    pending = None  # trace row still waiting for its contraction ratio
    t0 = time.perf_counter()
    z = None
    for k in range(cfg.max_iter):
        z = encode_regularized(model, x, tau)
        mu = model.decoder_mean(z)
        x_new = x_update(fidelity, mu, g2)
        if not np.all(np.isfinite(x_new)):
            raise FloatingPointError(f"non-finite iterate at iteration {k + 1}")
        res = float(np.linalg.norm(x_new - x))
        if pending is not None:
            trace.Lk[pending] = res / residuals[-1] if residuals[-1] > 0 else math.nan
            pending = None
        residuals.append(res)
        if cfg.trace_every and k % cfg.trace_every == 0:
            fp = float(np.linalg.norm(g2 * fidelity.grad(x) - (mu - x)))
            trace.append(k + 1, res, eval_J1(model, x_new, z, tau, fidelity), fp, time.perf_counter() - t0)
            pending = len(trace) - 1
        x = x_new
        if res <= tol:
            trace.stop_reason = "tol"
            break
        if _plateau(residuals, cfg.plateau_window, cfg.plateau_rtol):
            trace.stop_reason = "plateau"
            break
    else:
        trace.stop_reason = "max_iter"
    if pending is not None:
        x_next = pnp_operator(model, fidelity, tau)(x)
        prev = residuals[-1]
        trace.Lk[pending] = float(np.linalg.norm(x_next - x)) / prev if prev > 0 else math.nan
    return x, z, trace


def run_adam_baseline(model: HvaeModel, fidelity: DataFidelity, cfg: AdamConfig, tau, x0=None):
    """Minimize the decoder-side objective jointly over ``(x, z)`` with Adam.

    Starts from the same image initialization as :func:`run_pnp_hvae` and
    the regularized encoding of it. The trace records the same fields.
    """
    tau = as_schedule(tau, model.n_levels)
    try:
        model.neg_log_joint_grad
        probe_x = initial_estimate(fidelity, cfg.init_mode) if x0 is None else np.array(x0, dtype=float)
        z0 = encode_regularized(model, probe_x, tau)
        model.neg_log_joint_grad(probe_x, z0, tau)
    except NotImplementedError as exc:
        raise NotImplementedError(f"Adam baseline needs J1 gradients: {exc}") from exc
    rng = np.random.default_rng(cfg.seed)
    x = probe_x
    if cfg.z_init == "random":
        z = [rng.standard_normal(np.size(zl)) for zl in z0]
    else:
        z = [np.array(zl, dtype=float) for zl in z0]
    sizes = [x.size] + [zl.size for zl in z]
    splits = np.cumsum(sizes)[:-1]

    def pack(x, z):
        return np.concatenate([np.ravel(x)] + [np.ravel(zl) for zl in z])

    def unpack(u):
        parts = np.split(u, splits)
        return parts[0].reshape(x.shape), parts[1:]

    T = pnp_operator(model, fidelity, tau)
    g2 = model.decoder_variance()
    u = pack(x, z)
    m = np.zeros_like(u)
    v = np.zeros_like(u)
    trace = SolverTrace()
    t0 = time.perf_counter()
    Tx = recon = None
    for k in range(1, cfg.max_iter + 1):
        _, gx, gz = model.neg_log_joint_grad(x, z, tau)
        grad = pack(gx + fidelity.grad(x), gz)
        m = cfg.beta1 * m + (1 - cfg.beta1) * grad
        v = cfg.beta2 * v + (1 - cfg.beta2) * grad * grad
        mhat = m / (1 - cfg.beta1**k)
        vhat = v / (1 - cfg.beta2**k)
        u = u - cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)
        x_new, z_new = unpack(u)
        if not np.all(np.isfinite(u)):
            raise FloatingPointError(f"non-finite Adam iterate at iteration {k}")
        if cfg.trace_every and (k - 1) % cfg.trace_every == 0:
            if Tx is None:
                recon = reconstruct(model, x, tau)
                Tx = x_update(fidelity, recon, g2)
            recon_new = reconstruct(model, x_new, tau)
            Tx_new = x_update(fidelity, recon_new, g2)
            step = float(np.linalg.norm(x_new - x))
            fp = float(np.linalg.norm(g2 * fidelity.grad(x) - (recon - x)))
            val = eval_J1(model, x_new, z_new, tau, fidelity)
            trace.append(k, step, val, fp, time.perf_counter() - t0)
            trace.Lk[-1] = float(np.linalg.norm(Tx_new - Tx)) / step if step > 0 else math.nan
            Tx, recon = Tx_new, recon_new
        else:
            Tx = recon = None
        x, z = x_new, z_new
    trace.stop_reason = "max_iter"
    return x, z, trace


def estimate_lipschitz_ratios(model: HvaeModel, tau, images, sigma_noise: float, n_pairs: int,
                              rng: np.random.Generator) -> list:
    """Ratios ``|R(u) - R(v)| / |u - v|`` for noisy pairs of distinct images.

    Each ratio is a lower bound on the Lipschitz constant of the
    regularized reconstruction ``R``.
    """
    images = [np.asarray(im, dtype=float) for im in images]
    if len(images) < 2:
        raise ValueError("need at least two images")
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    ratios = []
    for _ in range(n_pairs):
        i, j = rng.choice(len(images), size=2, replace=False)
        u = images[i] + sigma_noise * rng.standard_normal(images[i].shape)
        v = images[j] + sigma_noise * rng.standard_normal(images[j].shape)
        d = float(np.linalg.norm(u - v))
        if d == 0.0:
            continue
        ratios.append(float(np.linalg.norm(reconstruct(model, u, tau) - reconstruct(model, v, tau))) / d)
    if not ratios:
        raise ValueError("every sampled pair was degenerate (u == v)")
    return ratios


def fixed_point_residual(model: HvaeModel, fidelity: DataFidelity, x, tau) -> float:
    """``|grad f(x) - (reconstruct(x) - x) / gamma^2|``; zero exactly at fixed points."""
    x = np.asarray(x, dtype=float)
    r = reconstruct(model, x, tau)
    return float(np.linalg.norm(fidelity.grad(x) - (r - x) / model.decoder_variance()))
