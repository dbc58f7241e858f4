"""Oracle checks on random linear-Gaussian instances.

Each check returns a :class:`CheckResult` carrying the measured worst case
next to the threshold it is held to, so the same code backs both the
``oracle-check`` command and the acceptance tests.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import serialization
from .hvae import encode_regularized, eval_J2_tilde, j2_decomposition
from .linear_gaussian import (
    LinearGaussianHvae,
    brute_force_min_J2,
    build_random_model,
    exact_joint_map,
    marginal_tempered_prior,
    reconstruction_lipschitz,
    tweedie_check,
)
from .operators import DataFidelity, DenseOp, MaskOp, degrade
from .solver import (
    AdamConfig,
    SolverConfig,
    contraction_bound,
    fixed_point_residual,
    pnp_operator,
    run_adam_baseline,
    run_pnp_hvae,
)

TAUS = (1.0, 0.8, 0.6)


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    threshold: float
    seconds: float = 0.0
    details: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: measured={self.measured:.3e} threshold={self.threshold:.1e} ({self.seconds:.2f}s)"


def _rel(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def random_model(rng: np.random.Generator, max_level_dim: int = 16, max_dx: int = 64, **kw) -> LinearGaussianHvae:
    """Random innovation-decoder model with ``L in {1,2,3}``, ``d_l <= 16`` and ``d_x <= 64``."""
    L = int(rng.integers(1, 4))
    dims = [int(d) for d in rng.integers(1, max_level_dim + 1, size=L)]
    d_x = int(rng.integers(sum(dims), max_dx + 1))
    return build_random_model(dims, d_x=d_x, seed=int(rng.integers(2**31)), **kw)


def contraction_instance(rng: np.random.Generator, bound_max: float = 0.95, max_dx: int = 32):
    """Random ``(model, op, fidelity, tau, bound)`` whose worst-case contraction
    factor ``sigma^2 L_tau / (gamma^2 lambda_min + sigma^2)`` is below ``bound_max``."""
    while True:
        model = random_model(rng, max_level_dim=8, max_dx=max_dx)
        tau = float(rng.choice(TAUS))
        d = model.x_dim
        A = rng.standard_normal((d, d)) / np.sqrt(d) + np.eye(d)
        op = DenseOp(A, model.x_shape)
        sigma = float(rng.uniform(0.3, 1.0)) * np.sqrt(model.gamma2)
        L_tau = reconstruction_lipschitz(model, tau)
        bound = contraction_bound(sigma, model.gamma2, op.lambda_min(), L_tau)
        if bound < bound_max:
            x_true = model.decoder_mean([rng.standard_normal(n) for n in model.latent_dims()])
            y = degrade(x_true, op, sigma, rng)
            return model, op, DataFidelity(op, y, sigma), tau, bound


def check_global_minimum(n_models: int = 50, seed: int = 0, rtol: float = 1e-9) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_models):
        model = random_model(rng)
        x = model.decoder_mean([rng.standard_normal(n) for n in model.latent_dims()])
        x = x + 0.3 * rng.standard_normal(x.shape)
        for tau in TAUS:
            z = np.concatenate(encode_regularized(model, x, tau))
            zb = np.concatenate(brute_force_min_J2(model, x, tau))
            worst = max(worst, _rel(z, zb))
    return CheckResult("greedy encoding equals global minimum", worst <= rtol, worst, rtol,
                       time.perf_counter() - t0)


def check_joint_map(n_instances: int = 20, seed: int = 1, rtol: float = 1e-6, max_iter: int = 200) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst, worst_iters, worst_bound = 0.0, 0, 0.0
    for _ in range(n_instances):
        model, op, fid, tau, bound = contraction_instance(rng)
        x, _, tr = run_pnp_hvae(model, fid, SolverConfig(tau=tau, max_iter=max_iter, tol=1e-12, trace_every=0))
        xs, _ = exact_joint_map(model, fid.y, op, fid.sigma, tau)
        worst = max(worst, _rel(x, xs))
        worst_bound = max(worst_bound, bound)
    return CheckResult("restoration loop converges to the joint MAP", worst <= rtol, worst, rtol,
                       time.perf_counter() - t0, {"max_bound": worst_bound})


def check_contraction_bound(n_instances: int = 6, n_pairs: int = 200, seed: int = 2, slack: float = 1e-9) -> CheckResult:
    """Compares measured ratios of the full iteration against the bound.

    Uses dense and mask operators, whose normal equations are solved exactly.
    ``measured`` is the largest ``ratio - bound`` seen.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    excess = -np.inf
    max_ratio = 0.0
    for i in range(n_instances):
        model = random_model(rng, max_level_dim=8, max_dx=32)
        tau = float(rng.choice(TAUS))
        d = model.x_dim
        if i % 2 == 0:
            op = DenseOp(rng.standard_normal((d, d)) / np.sqrt(d) + np.eye(d), model.x_shape)
        else:
            mask = (rng.random(model.x_shape) > 0.3).astype(float)
            op = MaskOp(mask)
        sigma = float(rng.uniform(0.2, 1.5)) * np.sqrt(model.gamma2)
        y = degrade(model.decoder_mean([np.zeros(n) for n in model.latent_dims()]), op, sigma, rng)
        fid = DataFidelity(op, y, sigma)
        bound = contraction_bound(sigma, model.gamma2, op.lambda_min(), reconstruction_lipschitz(model, tau))
        T = pnp_operator(model, fid, tau)
        for _ in range(n_pairs):
            u = rng.standard_normal(model.x_shape)
            v = u + rng.standard_normal(model.x_shape) * rng.uniform(0.01, 2.0)
            r = np.linalg.norm(T(u) - T(v)) / np.linalg.norm(u - v)
            max_ratio = max(max_ratio, r)
            excess = max(excess, r - bound)
    return CheckResult("iteration ratios stay below the contraction bound", excess <= slack, excess, slack,
                       time.perf_counter() - t0, {"max_ratio": max_ratio})


def _fd_grad(fun, x, h):
    g = np.zeros(x.size)
    xf = np.ravel(x).astype(float)
    for i in range(x.size):
        e = np.zeros_like(xf)
        e[i] = h
        g[i] = (fun((xf + e).reshape(x.shape)) - fun((xf - e).reshape(x.shape))) / (2 * h)
    return g


def check_fixed_point(n_instances: int = 10, seed: int = 3, tol: float = 1e-9, eps: float = 1e-8,
                      crit_tol: float = 1e-4, fd_tol: float = 1e-5) -> list:
    """Fixed-point residual at convergence, the critical-point identity on the
    near-deterministic encoder model, and a finite-difference check of the
    marginal score."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    fp_worst, crit_worst, fd_worst = 0.0, 0.0, 0.0
    for _ in range(n_instances):
        model, op, fid, tau, _ = contraction_instance(rng)
        x, _, _ = run_pnp_hvae(model, fid, SolverConfig(tau=tau, max_iter=500, tol=tol, trace_every=0))
        fp_worst = max(fp_worst, fixed_point_residual(model, fid, x, tau) / tol)

        det = model.with_deterministic_encoder(tau, eps)
        xd, _, _ = run_pnp_hvae(det, fid, SolverConfig(tau=tau, max_iter=500, tol=tol, trace_every=0))
        marg = marginal_tempered_prior(model, tau)
        grad_g = -marg.grad_logpdf(xd)
        crit_worst = max(crit_worst, float(np.linalg.norm(np.ravel(fid.grad(xd)) + grad_g)))
        fd = -_fd_grad(marg.logpdf, xd, 1e-5)
        fd_worst = max(fd_worst, _rel(grad_g, fd))
    dt = time.perf_counter() - t0
    return [
        CheckResult("fixed-point residual at convergence (in units of tol)", fp_worst <= 10.0, fp_worst, 10.0, dt),
        CheckResult("critical point of the tempered MAP objective", crit_worst <= crit_tol, crit_worst, crit_tol, 0.0),
        CheckResult("marginal score matches finite differences", fd_worst <= fd_tol, fd_worst, fd_tol, 0.0),
    ]


def check_tweedie(n_triples: int = 100, seed: int = 4, rtol: float = 1e-8, fd_tol: float = 1e-5,
                  n_fd: int = 10) -> list:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst, fd_worst = 0.0, 0.0
    for i in range(n_triples):
        model = random_model(rng, max_level_dim=8, max_dx=32)
        tau = float(rng.uniform(0.5, 1.0))
        x = rng.standard_normal(model.x_shape) + 0.5
        lhs, rhs = tweedie_check(model, x, tau)
        worst = max(worst, _rel(lhs, rhs))
        if i < n_fd:
            marg = marginal_tempered_prior(model, tau)
            fd = model.gamma2 * _fd_grad(marg.logpdf, x, 1e-5)
            fd_worst = max(fd_worst, _rel(rhs, fd))
    dt = time.perf_counter() - t0
    return [
        CheckResult("denoiser residual equals scaled marginal score", worst <= rtol, worst, rtol, dt),
        CheckResult("marginal score matches finite differences", fd_worst <= fd_tol, fd_worst, fd_tol, 0.0),
    ]


def check_decomposition(n_triples: int = 100, seed: int = 5, tol: float = 1e-9) -> CheckResult:
    """Changes of the encoder objective between two latents equal changes of
    the A + B terms (the constant C cancels)."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_triples):
        model = random_model(rng, max_level_dim=8, max_dx=32)
        tau = float(rng.choice(TAUS))
        x = rng.standard_normal(model.x_shape)
        z1 = [rng.standard_normal(n) for n in model.latent_dims()]
        z2 = [rng.standard_normal(n) for n in model.latent_dims()]
        dj = eval_J2_tilde(model, x, z1, tau) - eval_J2_tilde(model, x, z2, tau)
        t1, t2 = j2_decomposition(model, x, z1, tau), j2_decomposition(model, x, z2, tau)
        dab = (t1.A.sum() + t1.B.sum()) - (t2.A.sum() + t2.B.sum())
        worst = max(worst, abs(dj - dab) / max(1.0, abs(dj)))
    return CheckResult("encoder objective splits into A + B + const", worst <= tol, worst, tol,
                       time.perf_counter() - t0)


# ------------------------------------------------------------ reference instance

@dataclass
class ReferenceInstance:
    model: LinearGaussianHvae
    fidelity: DataFidelity
    tau: float


def reference_instance() -> ReferenceInstance:
    """The shipped linear-Gaussian model with its pinned observation."""
    root = resources.files("pnphvae").joinpath("data")
    model = LinearGaussianHvae.from_param_file(serialization.loads(root.joinpath("lg_reference.params").read_bytes()))
    obs = serialization.loads(root.joinpath("lg_reference_obs.params").read_bytes())
    op = DenseOp(obs.tensors["A"], model.x_shape)
    fid = DataFidelity(op, obs.tensors["y"].reshape(op.out_shape), float(obs.meta["sigma"]))
    return ReferenceInstance(model, fid, float(obs.meta["tau"]))


def build_reference_files(directory, seed: int = 11) -> None:
    """Regenerate the shipped reference model and observation."""
    import os

    rng = np.random.default_rng(seed)
    model = build_random_model([4, 8], d_x=16, seed=seed, gamma2=0.2)
    d = model.x_dim
    A = np.eye(d)  # denoising
    sigma, tau = 0.1, 0.8
    x_true = model.decoder_mean([rng.standard_normal(n) for n in model.latent_dims()])
    y = A @ np.ravel(x_true) + sigma * rng.standard_normal(d)
    serialization.save(os.path.join(directory, "lg_reference.params"), model.to_param_file())
    obs = serialization.ParamFile("observation", [1], (d,), {"A": A, "y": y}, {"sigma": sigma, "tau": tau})
    serialization.save(os.path.join(directory, "lg_reference_obs.params"), obs)


@dataclass
class StabilityComparison:
    pnp_trace: object
    adam_traces: dict  # lr -> trace
    pnp_first_below: int | None
    adam_first_below: dict
    pnp_lk_std: float
    adam_lk_std: dict
    pnp_final_J1: float
    adam_final_J1: dict
    optimum_J1: float


def _lk_std(trace) -> float:
    lk = np.array(trace.Lk, dtype=float)
    lk = lk[np.isfinite(lk)]
    return float(np.std(lk)) if lk.size else float("nan")


def stability_comparison(inst: ReferenceInstance | None = None, lrs=(0.01, 0.001), adam_iters: int = 5000,
                         threshold: float = 1e-5, pnp_max_iter: int = 200, seed: int = 0) -> StabilityComparison:
    from .hvae import eval_J1

    inst = reference_instance() if inst is None else inst
    m, fid, tau = inst.model, inst.fidelity, inst.tau
    x, z, ptr = run_pnp_hvae(m, fid, SolverConfig(tau=tau, max_iter=pnp_max_iter, tol=threshold, trace_every=1))
    xs, zs = exact_joint_map(m, fid.y, fid.op, fid.sigma, tau)
    atr, first, stds, finals = {}, {}, {}, {}
    for lr in lrs:
        _, _, tr = run_adam_baseline(m, fid, AdamConfig(lr=lr, max_iter=adam_iters, seed=seed), tau)
        atr[lr], first[lr], stds[lr], finals[lr] = tr, tr.first_iter_below(threshold), _lk_std(tr), tr.J1[-1]
    return StabilityComparison(ptr, atr, ptr.first_iter_below(threshold), first, _lk_std(ptr), stds,
                               ptr.J1[-1], finals, eval_J1(m, xs, zs, tau, fid))


def check_stability(cmp: StabilityComparison | None = None, j1_slack: float = 1e-3) -> list:
    t0 = time.perf_counter()
    cmp = stability_comparison() if cmp is None else cmp
    dt = time.perf_counter() - t0
    pnp_it = cmp.pnp_first_below if cmp.pnp_first_below is not None else np.inf
    out = []
    for lr in cmp.adam_traces:
        a_it = cmp.adam_first_below[lr] if cmp.adam_first_below[lr] is not None else np.inf
        out.append(CheckResult(f"restoration loop settles before Adam lr={lr} (iterations)", pnp_it < a_it,
                               float(pnp_it), float(a_it), dt, {"adam_iterations": a_it}))
        out.append(CheckResult(f"contraction ratio spread below Adam lr={lr} (std)",
                               cmp.pnp_lk_std <= cmp.adam_lk_std[lr], cmp.pnp_lk_std, cmp.adam_lk_std[lr], 0.0))
        gap = cmp.adam_final_J1[lr] - cmp.pnp_final_J1
        out.append(CheckResult(f"Adam lr={lr} final J1 no worse than the loop's", gap <= j1_slack, gap, j1_slack, 0.0))
    return out


def run_all(verbose_print=None) -> list:
    """Every oracle check; returns the list of results."""
    results = [check_global_minimum(), check_joint_map(), check_contraction_bound()]
    results += check_fixed_point()
    results += check_tweedie()
    results.append(check_decomposition())
    results += check_stability()
    if verbose_print is not None:
        for r in results:
            verbose_print(r.line())
    return results
