"""Report figures, rendered off-screen to PNG files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}  # keeps repeated runs byte-identical


def lipschitz_histogram(path, ratios_by_tau: dict, bins: int = 40) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for tau, r in ratios_by_tau.items():
        ax.hist(np.asarray(r), bins=bins, alpha=0.6, label=f"tau={tau:g}")
    ax.axvline(1.0, color="k", lw=1, ls="--")
    ax.set_xlabel("|R(u) - R(v)| / |u - v|")
    ax.set_ylabel("count")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata=_META)
    plt.close(fig)


def convergence_plot(path, traces: dict) -> None:
    """J1 and contraction ratio against iteration, one line per named trace."""
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.5))
    for name, tr in traces.items():
        it = np.asarray(tr.iters)
        a1.plot(it, np.asarray(tr.J1), label=name)
        a2.plot(it, np.asarray(tr.Lk), label=name, lw=0.8)
    a1.set_xlabel("iteration")
    a1.set_ylabel("J1")
    a1.set_xscale("log")
    a2.set_xlabel("iteration")
    a2.set_ylabel("L_k")
    a2.set_xscale("log")
    a1.legend()
    fig.tight_layout()
    fig.savefig(path, metadata=_META)
    plt.close(fig)


def loss_curve_plot(path, curve) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(curve.step_loss, lw=0.4, alpha=0.4, label="per step")
    ax.plot(curve.smoothed, lw=1.2, label="smoothed")
    ax.set_xlabel("step")
    ax.set_ylabel("negative ELBO")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata=_META)
    plt.close(fig)
