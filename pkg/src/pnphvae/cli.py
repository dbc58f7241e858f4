"""Command-line front end: ``pnphvae <task> --config <file> [--key value ...]``."""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import checks, config, serialization
from .config import ConfigError
from .hvae import sample_prior
from .linear_gaussian import LinearGaussianHvae, parse_oracle_spec
from .metrics import psnr, ssim_report
from .netpbm import read_image, write_image
from .operators import (
    CircularBlurOp,
    DataFidelity,
    DownsampleOp,
    IdentityOp,
    MaskOp,
    degrade,
    make_kernel,
    random_mask,
    read_array_text,
    read_kernel,
)
from .solver import SolverConfig, estimate_lipschitz_ratios, run_pnp_hvae
from .toy_hvae import ToyHvaeParams, as_hvae_model, generate_dataset, train

SIGMA_FLOOR = 1e-6  # keeps the data term defined for noiseless observations
RESTORATION_TASKS = ("deblur", "inpaint", "sr", "denoise")


def load_model(spec: str, x_shape=None):
    if not spec:
        raise ConfigError("this task needs a model (a parameter file or oracle:<seed>:<dims>)")
    if spec.startswith("oracle:"):
        return parse_oracle_spec(spec, x_shape)
    pf = serialization.load(spec)
    if pf.kind == "toy_hvae":
        return as_hvae_model(ToyHvaeParams.from_param_file(pf), x_shape)
    if pf.kind == "linear_gaussian":
        m = LinearGaussianHvae.from_param_file(pf)
        return m if x_shape is None else m.reshaped(x_shape)
    raise ConfigError(f"{spec}: unsupported model kind {pf.kind!r}")


def build_operator(cfg: dict, shape, rng: np.random.Generator):
    task = cfg["task"]
    if task == "deblur":
        if cfg["kernel"]:
            kernel = read_kernel(cfg["kernel"])
        elif cfg["kernel_kind"] == "motion_line":
            kernel = make_kernel("motion_line", length=cfg["kernel_length"], angle=cfg["kernel_angle"],
                                 size=cfg["kernel_size"] or None)
        elif cfg["kernel_kind"] == "box":
            kernel = make_kernel("box", size=cfg["kernel_size"] or 3)
        else:
            kernel = make_kernel(cfg["kernel_kind"], bandwidth=cfg["kernel_bandwidth"], size=cfg["kernel_size"] or None)
        return CircularBlurOp(kernel, shape)
    if task == "inpaint":
        mask = read_array_text(cfg["mask"]) if cfg["mask"] else random_mask(shape[:2], cfg["mask_fraction"], rng)
        if mask.shape != tuple(shape[:2]):
            raise ConfigError(f"mask shape {mask.shape} does not match image {tuple(shape[:2])}")
        if len(shape) == 3:
            mask = np.repeat(mask[:, :, None], shape[2], axis=2)
        return MaskOp(mask)
    if task == "sr":
        return DownsampleOp(cfg["sr_factor"], shape, bandwidth=cfg["sr_bandwidth"] or None)
    if task == "denoise":
        return IdentityOp(shape)
    raise ConfigError(f"task {task!r} has no degradation operator")


def _ext(arr) -> str:
    return ".ppm" if np.ndim(arr) == 3 else ".pgm"


def _write_manifest(cfg: dict) -> None:
    with open(os.path.join(cfg["output"], "manifest.txt"), "w") as fh:
        fh.write(config.dumps(cfg))


def run_restoration(cfg: dict) -> int:
    from .plotting import convergence_plot

    if not cfg["input"]:
        raise ConfigError("restoration tasks need an input image")
    rng = np.random.default_rng(cfg["seed"])
    x_true = read_image(cfg["input"]).as_array()
    op = build_operator(cfg, x_true.shape, rng)
    sigma = config.sigma_unit(cfg)
    if cfg["observation"]:
        y = read_image(cfg["observation"]).as_array()
    else:
        y = degrade(x_true, op, sigma, rng)
    fid = DataFidelity(op, y, max(sigma, SIGMA_FLOOR))
    model = load_model(cfg["model"], x_true.shape)
    scfg = SolverConfig(
        tau=config.tau_for(cfg, model.n_levels),
        max_iter=config.solver_max_iter(cfg),
        tol=config.solver_tol(cfg, x_true.size),
        init_mode=cfg["init_mode"],
        trace_every=cfg["trace_every"],
        plateau_window=config.plateau_window(cfg),
    )
    t0 = time.perf_counter()
    x, _, trace = run_pnp_hvae(model, fid, scfg)
    seconds = time.perf_counter() - t0

    out = cfg["output"]
    write_image(os.path.join(out, "restored" + _ext(x)), x)
    write_image(os.path.join(out, "observation" + _ext(y)), y)
    trace.to_csv(os.path.join(out, "trace.csv"))
    if len(trace):
        convergence_plot(os.path.join(out, "convergence.png"), {"restoration": trace})
    rep = ssim_report(x_true, x)
    metrics = {"psnr": psnr(x_true, x), "ssim": rep.value}
    if y.shape == x_true.shape:
        metrics["psnr_observed"] = psnr(x_true, y)
        metrics["ssim_observed"] = ssim_report(x_true, y).value
    metrics.update({"ssim_fallback": int(rep.global_fallback), "iterations": len(trace.iters) or "na",
                    "stop": trace.stop_reason, "seconds": seconds})
    config.write_kv(os.path.join(out, "metrics.txt"), metrics)
    _write_manifest(cfg)
    print(" ".join(f"{k}={v}" for k, v in metrics.items() if k != "seconds"))
    return 0


def run_oracle_check(cfg: dict) -> int:
    results = checks.run_all(print)
    with open(os.path.join(cfg["output"], "oracle_check.txt"), "w") as fh:
        for r in results:
            fh.write(r.line() + "\n")
    _write_manifest(cfg)
    return 0 if all(r.passed for r in results) else 1


def run_lipschitz(cfg: dict) -> int:
    from .plotting import lipschitz_histogram

    spec = cfg["model"]
    if spec.startswith("oracle:"):
        model = load_model(spec)
        irng = np.random.default_rng(cfg["images_seed"])
        images = [sample_prior(model, 1.0, irng) for _ in range(cfg["n_images"])]
    else:
        model = load_model(spec)
        images = list(generate_dataset(cfg["n_images"], model.params.patch_size, cfg["images_seed"]).patches)
    rng = np.random.default_rng(cfg["seed"])
    sigma = cfg["noise_sigma"] / 255.0
    ratios = {}
    for tau in config.tau_values(cfg):
        ratios[tau] = estimate_lipschitz_ratios(model, tau, images, sigma, cfg["n_pairs"], rng)
    out = cfg["output"]
    with open(os.path.join(out, "ratios.csv"), "w") as fh:
        fh.write("tau,ratio\n")
        for tau, rs in ratios.items():
            for r in rs:
                fh.write(f"{tau!r},{r!r}\n")
    lipschitz_histogram(os.path.join(out, "lipschitz.png"), ratios)
    metrics = {}
    for tau, rs in ratios.items():
        rs = np.asarray(rs)
        metrics[f"frac_below_1_tau{tau:g}"] = float(np.mean(rs < 1.0))
        metrics[f"max_tau{tau:g}"] = float(rs.max())
    config.write_kv(os.path.join(out, "metrics.txt"), metrics)
    _write_manifest(cfg)
    print(" ".join(f"{k}={v}" for k, v in metrics.items()))
    return 0


def run_train_toy(cfg: dict) -> int:
    from .plotting import loss_curve_plot

    data = generate_dataset(cfg["n_patches"], cfg["patch_size"], cfg["dataset_seed"])
    params = ToyHvaeParams.init(config.int_list(cfg["dims"]), cfg["patch_size"], cfg["width"], cfg["seed"])
    params, curve = train(params, data, cfg["epochs"], cfg["lr"], cfg["seed"], cfg["batch_size"])
    out = cfg["output"]
    meta = {"epochs": cfg["epochs"], "lr": cfg["lr"], "dataset_seed": cfg["dataset_seed"], "seed": cfg["seed"],
            "batch_size": cfg["batch_size"]}
    serialization.save(os.path.join(out, "model.params"), params.to_param_file(meta))
    with open(os.path.join(out, "loss.csv"), "w") as fh:
        fh.write("step,loss,smoothed\n")
        for i, (a, b) in enumerate(zip(curve.step_loss, curve.smoothed)):
            fh.write(f"{i},{a!r},{b!r}\n")
    loss_curve_plot(os.path.join(out, "loss.png"), curve)
    metrics = {"first_epoch_loss": float(curve.epoch_mean[0]), "last_epoch_loss": float(curve.epoch_mean[-1]),
               "gamma2": as_hvae_model(params).decoder_variance()}
    config.write_kv(os.path.join(out, "metrics.txt"), metrics)
    _write_manifest(cfg)
    print(" ".join(f"{k}={v}" for k, v in metrics.items()))
    return 0


def run_adam_compare(cfg: dict) -> int:
    from .plotting import convergence_plot

    if cfg["model"] not in ("", "reference"):
        raise ConfigError("adam-compare runs on the shipped reference instance; leave model empty")
    cmp = checks.stability_comparison(lrs=tuple(config.float_list(cfg["adam_lrs"])), adam_iters=cfg["adam_iters"],
                                      seed=cfg["seed"])
    out = cfg["output"]
    cmp.pnp_trace.to_csv(os.path.join(out, "trace_pnp.csv"))
    traces = {"restoration loop": cmp.pnp_trace}
    for lr, tr in cmp.adam_traces.items():
        tr.to_csv(os.path.join(out, f"trace_adam_lr{lr:g}.csv"))
        traces[f"Adam lr={lr:g}"] = tr
    convergence_plot(os.path.join(out, "convergence.png"), traces)
    na = lambda v: "na" if v is None else v  # noqa: E731
    metrics = {"pnp_iters_to_1e-5": na(cmp.pnp_first_below), "pnp_lk_std": cmp.pnp_lk_std,
               "pnp_final_J1": cmp.pnp_final_J1, "optimum_J1": cmp.optimum_J1}
    for lr in cmp.adam_traces:
        metrics[f"adam{lr:g}_iters_to_1e-5"] = na(cmp.adam_first_below[lr])
        metrics[f"adam{lr:g}_lk_std"] = cmp.adam_lk_std[lr]
        metrics[f"adam{lr:g}_final_J1"] = cmp.adam_final_J1[lr]
    config.write_kv(os.path.join(out, "metrics.txt"), metrics)
    _write_manifest(cfg)
    for r in checks.check_stability(cmp):
        print(r.line())
    return 0


HANDLERS = {
    "oracle-check": run_oracle_check,
    "lipschitz": run_lipschitz,
    "train-toy": run_train_toy,
    "adam-compare": run_adam_compare,
    **{t: run_restoration for t in RESTORATION_TASKS},
}


def _parse_overrides(tokens) -> dict:
    out = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"option {tok} needs a value")
            value = tokens[i + 1]
            i += 1
        out[key.replace("-", "_")] = value
        i += 1
    return out


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="pnphvae",
        description="Image restoration with a hierarchical VAE prior.",
        epilog="Any config key may be overridden as --key value.",
    )
    p.add_argument("task", choices=config.TASKS)
    p.add_argument("--config", help="key = value configuration file")
    return p


def main(argv=None) -> int:
    parser = make_parser()
    args, rest = parser.parse_known_args(argv)  # unknown task exits with status 2
    try:
        overrides = _parse_overrides(rest)
        overrides["task"] = args.task
        cfg = config.load(args.config, overrides) if args.config else config.resolve({}, overrides)
        os.makedirs(cfg["output"], exist_ok=True)
        return HANDLERS[args.task](cfg)
    except (ConfigError, ValueError, OSError, FloatingPointError, NotImplementedError,
            np.linalg.LinAlgError) as exc:
        print(f"pnphvae {args.task}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
