"""Flat ``key = value`` run configuration.

Precedence is command line over config file over defaults. Noise levels
are given on the 0-255 pixel scale and converted to [0, 1] units where used.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TASKS = ("deblur", "inpaint", "sr", "denoise", "oracle-check", "lipschitz", "train-toy", "adam-compare")

# default temperature per noise level, read off on the 0-255 scale
TAU_TABLE_SIGMA = (2.55, 7.65, 12.75)
TAU_TABLE_TAU = (0.95, 0.8, 0.6)

# key -> (type, default). Empty strings and zeros mean "task default".
FIELDS = {
    "task": (str, ""),
    "model": (str, ""),
    "input": (str, ""),
    "observation": (str, ""),
    "output": (str, "out"),
    "seed": (int, 0),
    "sigma": (float, 2.55),
    "tau": (str, ""),
    "kernel": (str, ""),
    "kernel_kind": (str, "gaussian"),
    "kernel_bandwidth": (float, 1.0),
    "kernel_size": (int, 0),
    "kernel_length": (float, 9.0),
    "kernel_angle": (float, 0.0),
    "mask": (str, ""),
    "mask_fraction": (float, 0.25),
    "sr_factor": (int, 2),
    "sr_bandwidth": (float, 0.0),
    "max_iter": (int, 0),
    "tol": (float, 0.0),
    "init_mode": (str, "adjoint"),
    "trace_every": (int, 1),
    "plateau_window": (int, -1),
    "n_pairs": (int, 500),
    "noise_sigma": (float, 25.5),
    "n_images": (int, 200),
    "images_seed": (int, 12345),
    "n_patches": (int, 2000),
    "patch_size": (int, 8),
    "width": (int, 64),
    "dims": (str, "8,32"),
    "epochs": (int, 20),
    "lr": (float, 0.002),
    "batch_size": (int, 8),
    "dataset_seed": (int, 0),
    "adam_lrs": (str, "0.01,0.001"),
    "adam_iters": (int, 5000),
}


class ConfigError(ValueError):
    pass


def parse_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def _convert(key: str, value):
    if key not in FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    typ = FIELDS[key][0]
    try:
        return typ(value)
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: cannot read {value!r} as {typ.__name__}") from exc


def resolve(file_values: dict | None = None, overrides: dict | None = None) -> dict:
    cfg = {k: d for k, (_, d) in FIELDS.items()}
    for src in (file_values or {}), (overrides or {}):
        for k, v in src.items():
            cfg[k] = _convert(k, v)
    if cfg["task"] and cfg["task"] not in TASKS:
        raise ConfigError(f"unknown task {cfg['task']!r}")
    if cfg["sigma"] < 0:
        raise ConfigError("sigma must be >= 0")
    if cfg["tau"]:
        taus = tau_values(cfg)
        if not all(0 < t <= 1 for t in taus):
            raise ConfigError(f"tau values must lie in (0, 1], got {cfg['tau']!r}")
    return cfg


def load(path, overrides: dict | None = None) -> dict:
    with open(path) as fh:
        return resolve(parse_text(fh.read(), str(path)), overrides)


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def dumps(cfg: dict) -> str:
    """Manifest text; reading it back with :func:`resolve` gives ``cfg``."""
    return "".join(f"{k} = {_fmt(cfg[k])}\n" for k in FIELDS)


def sigma_unit(cfg: dict) -> float:
    return cfg["sigma"] / 255.0


def default_tau(sigma255: float) -> float:
    """Interpolate the per-noise-level temperature table, clamped at its ends."""
    return float(np.interp(sigma255, TAU_TABLE_SIGMA, TAU_TABLE_TAU))


def tau_values(cfg: dict) -> list:
    if not cfg["tau"]:
        return [default_tau(cfg["sigma"])]
    try:
        return [float(t) for t in cfg["tau"].split(",")]
    except ValueError as exc:
        raise ConfigError(f"cannot read tau {cfg['tau']!r}") from exc


def tau_for(cfg: dict, n_levels: int):
    taus = tau_values(cfg)
    if len(taus) == 1:
        return taus[0]
    if len(taus) != n_levels:
        raise ConfigError(f"tau lists {len(taus)} levels, model has {n_levels}")
    return tuple(taus)


def int_list(s: str) -> list:
    return [int(v) for v in s.split(",") if v.strip()]


def float_list(s: str) -> list:
    return [float(v) for v in s.split(",") if v.strip()]


def solver_max_iter(cfg: dict) -> int:
    if cfg["max_iter"] > 0:
        return cfg["max_iter"]
    return 200 if cfg["task"] == "inpaint" else 50


def solver_tol(cfg: dict, dim: int):
    return cfg["tol"] if cfg["tol"] > 0 else 1e-5 * math.sqrt(dim)


def plateau_window(cfg: dict) -> int:
    if cfg["plateau_window"] >= 0:
        return cfg["plateau_window"]
    return 10 if cfg["task"] == "inpaint" else 0


@dataclass(frozen=True)
class MetricsReport:
    psnr: float
    ssim: float
    seconds: float

    def as_dict(self) -> dict:
        return {"psnr": self.psnr, "ssim": self.ssim, "seconds": self.seconds}


def write_kv(path, values: dict) -> None:
    """One line of space-separated ``key=value`` pairs."""
    with open(path, "w") as fh:
        fh.write(" ".join(f"{k}={_fmt(v)}" for k, v in values.items()) + "\n")


def read_kv(path) -> dict:
    with open(path) as fh:
        return dict(item.split("=", 1) for item in fh.read().split())
