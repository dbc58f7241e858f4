"""A small dense hierarchical VAE over grayscale patches and its training loop.

Parameter layout (``ToyHvaeParams.names()`` gives the exact order):

* ``enc{l}.W1, enc{l}.b1, enc{l}.W2, enc{l}.b2`` for each level ``l``: input
  ``[x, z_0, ..., z_{l-1}]``, one tanh hidden layer, output ``[mean, logvar]``.
* ``prior0.mean, prior0.logvar``: the coarsest prior is a learned constant.
* ``prior{l}.W1, prior{l}.b1, prior{l}.W2, prior{l}.b2`` for ``l >= 1``:
  input ``[z_0, ..., z_{l-1}]``, same shape of network.
* ``dec.W1, dec.b1, dec.W2, dec.b2``: input all latents, output the mean.
* ``dec.logvar``: per-pixel log-variance.

All log-variances are clamped to ``[LOGVAR_MIN, LOGVAR_MAX]``. Row-vector
convention: a batch is an ``(n, features)`` array and a layer is ``h @ W + b``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import autodiff as ad
from .core_math import LOG_2PI, DiagGaussian
from .hvae import TAU_FLOOR, HvaeModel, as_schedule
from .serialization import ParamFile

LOGVAR_MIN, LOGVAR_MAX = -8.0, 4.0
KINDS = ("two_region", "gradient", "texture")
_KIND_PATTERN = (0, 0, 0, 0, 1, 1, 1, 2, 2, 2)  # 40% / 30% / 30%


# ---------------------------------------------------------------- dataset

def two_region_patch(size: int, rng: np.random.Generator) -> np.ndarray:
    """Piecewise-constant patch split by a random straight edge."""
    c = np.arange(size) - (size - 1) / 2.0
    vv, uu = np.meshgrid(c, c, indexing="ij")
    theta = rng.uniform(0.0, 2 * math.pi)
    offset = rng.uniform(-size / 4.0, size / 4.0)
    side = np.cos(theta) * uu + np.sin(theta) * vv > offset
    if side.all() or not side.any():
        side = np.cos(theta) * uu + np.sin(theta) * vv > 0.0
    a = rng.uniform(0.05, 0.95)
    b = rng.uniform(0.05, 0.95)
    while abs(a - b) < 0.2:
        b = rng.uniform(0.05, 0.95)
    return np.where(side, a, b)


def gradient_patch(size: int, rng: np.random.Generator) -> np.ndarray:
    c = np.arange(size) - (size - 1) / 2.0
    vv, uu = np.meshgrid(c, c, indexing="ij")
    theta = rng.uniform(0.0, 2 * math.pi)
    t = np.cos(theta) * uu + np.sin(theta) * vv
    t = (t - t.min()) / (t.max() - t.min())
    a, b = rng.uniform(0.05, 0.95, size=2)
    return a + (b - a) * t


def texture_patch(size: int, rng: np.random.Generator, n_waves: int = 6) -> np.ndarray:
    """Sum of a few low-frequency cosines, centered on a random level."""
    c = np.arange(size) / size
    vv, uu = np.meshgrid(c, c, indexing="ij")
    kmax = max(1, size // 4)
    g = np.zeros((size, size))
    for _ in range(n_waves):
        ku, kv = rng.integers(-kmax, kmax + 1, size=2)
        g += rng.standard_normal() * np.cos(2 * math.pi * (ku * uu + kv * vv) + rng.uniform(0, 2 * math.pi))
    peak = np.max(np.abs(g))
    if peak > 0:
        g /= peak
    return rng.uniform(0.35, 0.65) + rng.uniform(0.15, 0.3) * g


_MAKERS = (two_region_patch, gradient_patch, texture_patch)


@dataclass
class PatchDataset:
    patches: np.ndarray  # (n, size, size), values in [0, 1]
    kinds: list
    downscaled: np.ndarray  # bool per patch
    size: int
    seed: int

    def __len__(self):
        return self.patches.shape[0]

    def as_grids(self) -> list:
        from .core_math import ImageGrid
        return [ImageGrid(p) for p in self.patches]

    def flat(self) -> np.ndarray:
        return self.patches.reshape(len(self), -1)


def generate_dataset(n: int, size: int, seed: int, noise: float = 0.01) -> PatchDataset:
    """Deterministic synthetic patch mixture.

    Kinds cycle through a fixed 10-slot pattern (4 two-region, 3 gradient,
    3 texture). Every other block of ten is rendered at twice the size and
    2x2-average downscaled.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if size not in (8, 16):
        raise ValueError("size must be 8 or 16")
    rng = np.random.default_rng(seed)
    out = np.empty((n, size, size))
    kinds, down = [], np.zeros(n, dtype=bool)
    for i in range(n):
        k = _KIND_PATTERN[i % 10]
        down[i] = (i // 10) % 2 == 1
        if down[i]:
            big = _MAKERS[k](2 * size, rng)
            p = big.reshape(size, 2, size, 2).mean(axis=(1, 3))
        else:
            p = _MAKERS[k](size, rng)
        out[i] = np.clip(p + noise * rng.standard_normal((size, size)), 0.0, 1.0)
        kinds.append(KINDS[k])
    return PatchDataset(out, kinds, down, size, seed)


# ---------------------------------------------------------------- parameters

@dataclass
class ToyHvaeParams:
    dims: list
    patch_size: int
    width: int
    tensors: dict = field(default_factory=dict)

    @property
    def n_levels(self) -> int:
        return len(self.dims)

    @property
    def n_pixels(self) -> int:
        return self.patch_size**2

    def names(self) -> list:
        out = []
        for l in range(self.n_levels):
            out += [f"enc{l}.W1", f"enc{l}.b1", f"enc{l}.W2", f"enc{l}.b2"]
        out += ["prior0.mean", "prior0.logvar"]
        for l in range(1, self.n_levels):
            out += [f"prior{l}.W1", f"prior{l}.b1", f"prior{l}.W2", f"prior{l}.b2"]
        out += ["dec.W1", "dec.b1", "dec.W2", "dec.b2", "dec.logvar"]
        return out

    def shapes(self) -> dict:
        P, w, d = self.n_pixels, self.width, self.dims
        s = {}
        for l in range(self.n_levels):
            s.update(_mlp_shapes(f"enc{l}", P + sum(d[:l]), w, 2 * d[l]))
        s["prior0.mean"] = (1, d[0])
        s["prior0.logvar"] = (1, d[0])
        for l in range(1, self.n_levels):
            s.update(_mlp_shapes(f"prior{l}", sum(d[:l]), w, 2 * d[l]))
        s.update(_mlp_shapes("dec", sum(d), w, P))
        s["dec.logvar"] = (1, P)
        return s

    @classmethod
    def init(cls, dims, patch_size: int = 8, width: int = 64, seed: int = 0) -> "ToyHvaeParams":
        p = cls(list(int(d) for d in dims), int(patch_size), int(width))
        rng = np.random.default_rng(seed)
        for name, shape in p.shapes().items():
            if name.endswith(".W1") or name.endswith(".W2"):
                scale = 1.0 / math.sqrt(shape[0])
                if name.endswith(".W2") and not name.startswith("dec"):
                    scale *= 0.1  # start conditionals close to their biases
                p.tensors[name] = scale * rng.standard_normal(shape)
            else:
                p.tensors[name] = np.zeros(shape)
        p.tensors["dec.b2"][:] = 0.5
        p.tensors["dec.logvar"][:] = -3.0
        return p

    def copy(self) -> "ToyHvaeParams":
        return ToyHvaeParams(list(self.dims), self.patch_size, self.width,
                             {k: v.copy() for k, v in self.tensors.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.tensors[n].ravel() for n in self.names()])

    def with_flat(self, vec) -> "ToyHvaeParams":
        vec = np.asarray(vec, dtype=float)
        out = self.copy()
        i = 0
        for n in self.names():
            k = out.tensors[n].size
            out.tensors[n] = vec[i:i + k].reshape(out.tensors[n].shape).copy()
            i += k
        if i != vec.size:
            raise ValueError(f"flat vector has {vec.size} entries, layout needs {i}")
        return out

    def to_param_file(self, meta=None) -> ParamFile:
        m = {"width": self.width, "patch": self.patch_size}
        m.update(meta or {})
        return ParamFile("toy_hvae", list(self.dims), (self.patch_size, self.patch_size),
                         {n: self.tensors[n] for n in self.names()}, m)

    @classmethod
    def from_param_file(cls, pf: ParamFile) -> "ToyHvaeParams":
        if pf.kind != "toy_hvae":
            raise ValueError(f"expected a toy_hvae parameter file, got kind {pf.kind!r}")
        p = cls(list(pf.dims), int(pf.meta["patch"]), int(pf.meta["width"]))
        shapes = p.shapes()
        for n in p.names():
            if n not in pf.tensors:
                raise ValueError(f"parameter file lacks tensor {n!r}")
            if tuple(pf.tensors[n].shape) != shapes[n]:
                raise ValueError(f"tensor {n!r} has shape {pf.tensors[n].shape}, expected {shapes[n]}")
            p.tensors[n] = np.array(pf.tensors[n])
        return p


def _mlp_shapes(prefix, n_in, width, n_out):
    return {f"{prefix}.W1": (n_in, width), f"{prefix}.b1": (1, width),
            f"{prefix}.W2": (width, n_out), f"{prefix}.b2": (1, n_out)}


# ---------------------------------------------------------------- forward passes

def _mlp(P, prefix, h):
    a = ad.tanh(h @ P[f"{prefix}.W1"] + P[f"{prefix}.b1"])
    return a @ P[f"{prefix}.W2"] + P[f"{prefix}.b2"]


def _split_gauss(out, d):
    return out[:, :d], ad.clip(out[:, d:], LOGVAR_MIN, LOGVAR_MAX)


def _prior(P, params, level, prefix, n):
    d = params.dims[level]
    if level == 0:
        ones = np.ones((n, 1))
        return ones @ P["prior0.mean"], ad.clip(ones @ P["prior0.logvar"], LOGVAR_MIN, LOGVAR_MAX)
    return _split_gauss(_mlp(P, f"prior{level}", ad.concat(prefix)), d)


def _encoder(P, params, level, prefix, x):
    return _split_gauss(_mlp(P, f"enc{level}", ad.concat([x] + list(prefix))), params.dims[level])


def _decoder_mean(P, z):
    return _mlp(P, "dec", ad.concat(z))


def _as_vars(params, trainable: bool):
    return {n: ad.Var(v) for n, v in params.tensors.items()}


def _gauss_nll(v, mean, logvar):
    """Summed ``-log N(v; mean, exp(logvar))`` as a graph node."""
    r = v - mean
    return ad.total(ad.square(r) * ad.exp(-logvar) + logvar + LOG_2PI) * 0.5


def negative_elbo(params: ToyHvaeParams, batch, noise):
    """Batch-mean negative ELBO and its gradient for every tensor.

    ``noise`` is one standard-normal array per level, shape ``(n, d_l)``;
    fixing it makes the objective deterministic for gradient checks.
    Returns ``(loss, kl_mean, grads)``.
    """
    xb = np.asarray(batch, dtype=float).reshape(len(batch), -1)
    n = xb.shape[0]
    P = _as_vars(params, True)
    x = ad.Var(xb)
    z, kls = [], []
    for level in range(params.n_levels):
        mq, lq = _encoder(P, params, level, z, x)
        mp, lp = _prior(P, params, level, z, n)
        # closed-form KL(q || p) for diagonal Gaussians
        kl = ad.total(lp - lq + (ad.exp(lq) + ad.square(mq - mp)) * ad.exp(-lp) - 1.0) * 0.5
        kls.append(kl)
        z.append(mq + ad.exp(lq * 0.5) * noise[level])
    mu = _decoder_mean(P, z)
    lv = ad.clip(ad.Var(np.ones((n, 1))) @ P["dec.logvar"], LOGVAR_MIN, LOGVAR_MAX)
    loss = _gauss_nll(x, mu, lv)
    kl_total = kls[0]
    for k in kls[1:]:
        kl_total = kl_total + k
    loss = (loss + kl_total) * (1.0 / n)
    loss.backward()
    grads = {name: (v.grad if v.grad is not None else np.zeros_like(v.value)) for name, v in P.items()}
    return float(loss.value), float(kl_total.value) / n, grads


# ---------------------------------------------------------------- training

@dataclass
class LossCurve:
    step_loss: np.ndarray
    smoothed: np.ndarray
    epoch_mean: np.ndarray
    kl: np.ndarray


class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_good: ToyHvaeParams):
        super().__init__(message)
        self.last_good = last_good


def train(params: ToyHvaeParams, data, epochs: int, lr: float, seed: int, batch_size: int = 64,
          beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, smoothing: float = 0.9):
    """Adamax on the one-sample reparameterized ELBO.

    Returns ``(trained_params, LossCurve)``; the input params are not
    modified. A non-finite loss raises :class:`TrainingDiverged` carrying
    the last parameters that produced a finite loss.
    """
    X = data.flat() if isinstance(data, PatchDataset) else np.asarray(data, dtype=float).reshape(len(data), -1)
    if X.shape[1] != params.n_pixels:
        raise ValueError(f"patches have {X.shape[1]} pixels, model expects {params.n_pixels}")
    rng = np.random.default_rng(seed)
    p = params.copy()
    m = {k: np.zeros_like(v) for k, v in p.tensors.items()}
    u = {k: np.zeros_like(v) for k, v in p.tensors.items()}
    steps, kls, epoch_means = [], [], []
    t = 0
    for ep in range(epochs):
        order = rng.permutation(X.shape[0])
        ep_losses = []
        for start in range(0, X.shape[0], batch_size):
            idx = order[start:start + batch_size]
            noise = [rng.standard_normal((idx.size, d)) for d in p.dims]
            loss, kl, grads = negative_elbo(p, X[idx], noise)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {ep}, step {t}", p)
            t += 1
            good = p.copy()
            for k in p.tensors:
                m[k] = beta1 * m[k] + (1 - beta1) * grads[k]
                u[k] = np.maximum(beta2 * u[k], np.abs(grads[k]))
                p.tensors[k] = p.tensors[k] - lr / (1 - beta1**t) * m[k] / (u[k] + eps)
            if not all(np.all(np.isfinite(v)) for v in p.tensors.values()):
                raise TrainingDiverged(f"non-finite parameters at epoch {ep}, step {t}", good)
            steps.append(loss)
            kls.append(kl)
            ep_losses.append(loss)
        epoch_means.append(float(np.mean(ep_losses)))
    steps = np.array(steps)
    smoothed = np.empty_like(steps)
    acc = steps[0] if steps.size else 0.0
    for i, s in enumerate(steps):
        acc = smoothing * acc + (1 - smoothing) * s
        smoothed[i] = acc
    return p, LossCurve(steps, smoothed, np.array(epoch_means), np.array(kls))


# ---------------------------------------------------------------- HvaeModel adapter

class ToyHvae(HvaeModel):
    """Wraps trained params as an :class:`HvaeModel` over whole images.

    Images whose sides are multiples of the patch size are cut into
    non-overlapping patches (color channels become extra patches) and every
    patch is processed independently, so latents are the per-patch latents
    stacked patch-major. The decoder variance is the geometric mean of the
    learned per-pixel variances.
    """

    def __init__(self, params: ToyHvaeParams, image_shape=None):
        self.params = params
        s = params.patch_size
        shape = (s, s) if image_shape is None else tuple(int(v) for v in image_shape)
        if len(shape) not in (2, 3) or shape[0] % s or shape[1] % s:
            raise ValueError(f"image shape {shape} is not a grid of {s}x{s} patches")
        self.x_shape = shape
        self._channels = shape[2] if len(shape) == 3 else 1
        self.n_patches = (shape[0] // s) * (shape[1] // s) * self._channels
        self._P = {k: ad.Var(v) for k, v in params.tensors.items()}
        lv = np.clip(params.tensors["dec.logvar"], LOGVAR_MIN, LOGVAR_MAX)
        self._gamma2 = float(np.exp(np.mean(lv)))

    def reshaped(self, image_shape) -> "ToyHvae":
        return ToyHvae(self.params, image_shape)

    # patch tiling
    def to_patches(self, x) -> np.ndarray:
        s = self.params.patch_size
        x = np.asarray(x, dtype=float)
        if x.shape != self.x_shape:
            raise ValueError(f"image shape {x.shape} does not match model shape {self.x_shape}")
        x3 = x.reshape(x.shape[0], x.shape[1], self._channels)
        H, W = x.shape[0] // s, x.shape[1] // s
        t = x3.reshape(H, s, W, s, self._channels).transpose(4, 0, 2, 1, 3)
        return t.reshape(self.n_patches, s * s)

    def from_patches(self, patches) -> np.ndarray:
        s = self.params.patch_size
        H, W = self.x_shape[0] // s, self.x_shape[1] // s
        t = np.asarray(patches).reshape(self._channels, H, W, s, s).transpose(1, 3, 2, 4, 0)
        return t.reshape(self.x_shape)

    def latent_dims(self) -> list:
        return [self.n_patches * d for d in self.params.dims]

    def _prefix(self, prefix):
        return [ad.Var(np.asarray(z, dtype=float).reshape(self.n_patches, d))
                for z, d in zip(prefix, self.params.dims)]

    @staticmethod
    def _gauss(mean, logvar) -> DiagGaussian:
        return DiagGaussian(mean.value.ravel(), np.exp(logvar.value).ravel())

    def prior_conditional(self, level, prefix) -> DiagGaussian:
        return self._gauss(*_prior(self._P, self.params, level, self._prefix(prefix), self.n_patches))

    def encoder_conditional(self, level, prefix, x) -> DiagGaussian:
        xv = ad.Var(self.to_patches(x))
        return self._gauss(*_encoder(self._P, self.params, level, self._prefix(prefix), xv))

    def decoder_mean(self, z) -> np.ndarray:
        return self.from_patches(_decoder_mean(self._P, self._prefix(z)).value)

    def decoder_variance(self) -> float:
        return self._gamma2

    def neg_log_joint_grad(self, x, z, tau):
        sched = as_schedule(tau, self.n_levels)
        xv = ad.Var(self.to_patches(x))
        zv = self._prefix(z)
        total = None
        for level, t in enumerate(sched.taus):
            mp, lp = _prior(self._P, self.params, level, zv[:level], self.n_patches)
            term = _gauss_nll(zv[level], mp, lp) * (1.0 / max(t, TAU_FLOOR) ** 2)
            total = term if total is None else total + term
        mu = _decoder_mean(self._P, zv)
        r = xv - mu
        total = total + ad.total(ad.square(r)) * (0.5 / self._gamma2)
        total.backward()
        value = float(total.value) + 0.5 * self.x_dim * (math.log(self._gamma2) + LOG_2PI)
        gx = self.from_patches(xv.grad)
        gz = [(v.grad if v.grad is not None else np.zeros_like(v.value)).ravel() for v in zv]
        return value, gx, gz


def as_hvae_model(params: ToyHvaeParams, image_shape=None) -> ToyHvae:
    return ToyHvae(params, image_shape)


# ---------------------------------------------------------------- reference run

def load_reference_config() -> dict:
    """The pinned training budget used by the acceptance tests and CLI."""
    text = resources.files("pnphvae").joinpath("data/toy_reference.cfg").read_text()
    out = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return {
        "n_patches": int(out["n_patches"]),
        "patch_size": int(out["patch_size"]),
        "width": int(out["width"]),
        "dims": [int(d) for d in out["dims"].split(",")],
        "epochs": int(out["epochs"]),
        "lr": float(out["lr"]),
        "seed": int(out["seed"]),
        "dataset_seed": int(out["dataset_seed"]),
        "batch_size": int(out["batch_size"]),
    }


def train_reference(cfg: dict | None = None):
    """Generate the reference dataset and train on it; returns ``(params, curve, data)``."""
    cfg = load_reference_config() if cfg is None else cfg
    data = generate_dataset(cfg["n_patches"], cfg["patch_size"], cfg["dataset_seed"])
    params = ToyHvaeParams.init(cfg["dims"], cfg["patch_size"], cfg["width"], cfg["seed"])
    params, curve = train(params, data, cfg["epochs"], cfg["lr"], cfg["seed"], cfg["batch_size"])
    return params, curve, data
