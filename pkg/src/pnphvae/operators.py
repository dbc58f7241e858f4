"""Degradation operators, blur kernels, the quadratic data term and its
proximal step."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .core_math import ImageGrid, LinearMap, cg_solve

CG_TOL = 1e-8
CG_MAX_ITER = 500


class ConvergenceWarning(RuntimeWarning):
    pass


def _as_array(x) -> np.ndarray:
    if isinstance(x, ImageGrid):
        return x.as_array()
    return np.asarray(x, dtype=float)


# ---------------------------------------------------------------- kernels


@dataclass(frozen=True)
class BlurKernel:
    taps: np.ndarray

    def __post_init__(self):
        taps = np.atleast_2d(np.asarray(self.taps, dtype=float))
        if taps.ndim != 2 or taps.shape[0] % 2 == 0 or taps.shape[1] % 2 == 0:
            raise ValueError(f"kernel sides must be odd, got shape {taps.shape}")
        s = taps.sum()
        if not np.isfinite(s) or s == 0:
            raise ValueError("kernel must have a finite, nonzero sum")
        taps = taps / s
        taps.setflags(write=False)
        object.__setattr__(self, "taps", taps)

    @property
    def shape(self):
        return self.taps.shape


def _gaussian_kernel(bandwidth: float, size: int | None) -> np.ndarray:
    if not bandwidth > 0:
        raise ValueError("gaussian bandwidth must be > 0")
    if size is None:
        size = 2 * max(1, math.ceil(4 * bandwidth)) + 1
    if size < 1 or size % 2 == 0:
        raise ValueError("kernel size must be odd and >= 1")
    r = np.arange(size) - size // 2
    g = np.exp(-0.5 * (r / bandwidth) ** 2)
    return np.outer(g, g)


def _motion_line_kernel(length: float, angle: float, size: int | None) -> np.ndarray:
    if length < 1:
        raise ValueError("motion length must be >= 1")
    if size is None:
        size = 2 * (math.ceil(length / 2) + 1) + 1
    if size % 2 == 0:
        raise ValueError("kernel size must be odd")
    k = np.zeros((size, size))
    c = size // 2
    theta = math.radians(angle)
    n = max(2, int(math.ceil(8 * length)))
    # Bilinear splatting of evenly spaced points along the segment.
    for t in np.linspace(-0.5, 0.5, n) * (length - 1):
        px = c + t * math.cos(theta)
        py = c - t * math.sin(theta)
        x0, y0 = math.floor(px), math.floor(py)
        fx, fy = px - x0, py - y0
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                yy, xx = y0 + dy, x0 + dx
                if 0 <= yy < size and 0 <= xx < size:
                    k[yy, xx] += wx * wy
    return k


def make_kernel(kind: str, **params) -> BlurKernel:
    """Build a normalized blur kernel.

    ``gaussian(bandwidth, size=None)``: isotropic, truncated at 4 bandwidths
    unless ``size`` is given. ``box(size)``. ``motion_line(length, angle,
    size=None)``: anti-aliased segment, angle in degrees.
    """
    if kind == "gaussian":
        taps = _gaussian_kernel(float(params["bandwidth"]), params.get("size"))
    elif kind == "box":
        size = int(params.get("size", 3))
        if size < 1 or size % 2 == 0:
            raise ValueError("box size must be odd and >= 1")
        taps = np.ones((size, size))
    elif kind == "motion_line":
        taps = _motion_line_kernel(float(params["length"]), float(params.get("angle", 0.0)), params.get("size"))
    elif kind == "delta":
        taps = np.ones((1, 1))
    else:
        raise ValueError(f"unknown kernel kind {kind!r}")
    return BlurKernel(taps)


def write_array_text(path, arr) -> None:
    """Plain-text 2-d array: a ``rows cols`` header, then one row per line."""
    arr = np.atleast_2d(np.asarray(arr, dtype=float))
    with open(path, "w") as fh:
        fh.write(f"{arr.shape[0]} {arr.shape[1]}\n")
        for row in arr:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_array_text(path) -> np.ndarray:
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise ValueError(f"{path}: empty array file")
    try:
        rows, cols = (int(v) for v in lines[0].split())
    except ValueError as exc:
        raise ValueError(f"{path}: header must be 'rows cols', got {lines[0]!r}") from exc
    body = lines[1:]
    if len(body) != rows:
        raise ValueError(f"{path}: header says {rows} rows, found {len(body)}")
    out = np.empty((rows, cols))
    for i, ln in enumerate(body):
        vals = ln.split()
        if len(vals) != cols:
            raise ValueError(f"{path}: row {i} has {len(vals)} values, expected {cols}")
        out[i] = [float(v) for v in vals]
    return out


def read_kernel(path) -> BlurKernel:
    return BlurKernel(read_array_text(path))


def write_kernel(path, kernel: BlurKernel) -> None:
    write_array_text(path, kernel.taps)


# -------------------------------------------------------------- operators


class DegradationOp:
    """Linear observation operator acting on arrays of shape ``in_shape``."""

    kind = "abstract"
    in_shape: tuple
    out_shape: tuple

    def apply(self, x) -> np.ndarray:
        raise NotImplementedError

    def apply_adjoint(self, v) -> np.ndarray:
        raise NotImplementedError

    def lambda_min(self) -> float:
        """Lower bound on the smallest eigenvalue of A^t A."""
        return 0.0

    def as_linear_map(self) -> LinearMap:
        return LinearMap(
            lambda u: self.apply(np.reshape(u, self.in_shape)).ravel(),
            lambda v: self.apply_adjoint(np.reshape(v, self.out_shape)).ravel(),
            int(np.prod(self.in_shape)),
            int(np.prod(self.out_shape)),
        )

    def solve_normal(self, rhs, shift: float) -> np.ndarray:
        """Solve ``(A^t A + shift I) x = rhs``; CG unless a subclass knows better."""
        res = cg_solve(self.as_linear_map().normal(shift), np.ravel(rhs), tol=CG_TOL, max_iter=CG_MAX_ITER)
        if not res.converged:
            warnings.warn(
                f"CG stopped after {res.n_iter} iterations at relative residual {res.rel_residual:.2e}",
                ConvergenceWarning,
                stacklevel=2,
            )
        return res.x.reshape(self.in_shape)

    def describe(self) -> str:
        return self.kind


class IdentityOp(DegradationOp):
    kind = "identity"

    def __init__(self, shape):
        self.in_shape = self.out_shape = tuple(shape)

    def apply(self, x):
        return np.array(x, dtype=float)

    def apply_adjoint(self, v):
        return np.array(v, dtype=float)

    def lambda_min(self):
        return 1.0

    def solve_normal(self, rhs, shift):
        return np.asarray(rhs, dtype=float) / (1.0 + shift)


class MaskOp(DegradationOp):
    """Pixelwise mask ``A = diag(m)``; unobserved pixels read as 0."""

    kind = "mask"

    def __init__(self, mask):
        self.mask = np.array(mask, dtype=float)
        if np.any(self.mask < 0) or np.any(self.mask > 1):
            raise ValueError("mask entries must lie in [0, 1]")
        self.in_shape = self.out_shape = self.mask.shape

    def apply(self, x):
        return self.mask * np.asarray(x, dtype=float)

    def apply_adjoint(self, v):
        return self.mask * np.asarray(v, dtype=float)

    def lambda_min(self):
        return float(np.min(self.mask**2))

    def solve_normal(self, rhs, shift):
        return np.asarray(rhs, dtype=float) / (self.mask**2 + shift)


def random_mask(shape, fraction_missing: float, rng: np.random.Generator) -> np.ndarray:
    """Binary mask with exactly ``round(fraction * n)`` unobserved pixels."""
    n = int(np.prod(shape))
    k = int(round(fraction_missing * n))
    m = np.ones(n)
    m[rng.permutation(n)[:k]] = 0.0
    return m.reshape(shape)


def _kernel_spectrum(kernel: BlurKernel, hw) -> np.ndarray:
    H, W = hw
    kh, kw = kernel.shape
    # taps beyond the image period wrap around, as periodic convolution implies
    pad = np.zeros((H, W))
    rows = (np.arange(kh) - kh // 2) % H
    cols = (np.arange(kw) - kw // 2) % W
    np.add.at(pad, (rows[:, None], cols[None, :]), kernel.taps)
    return np.fft.fft2(pad)


class CircularBlurOp(DegradationOp):
    """Convolution with periodic boundaries, diagonalized by the 2-d FFT."""

    kind = "blur"

    def __init__(self, kernel: BlurKernel, shape):
        self.kernel = kernel
        self.in_shape = self.out_shape = tuple(shape)
        self._spec = _kernel_spectrum(kernel, self.in_shape[:2])
        if len(self.in_shape) == 3:
            self._spec = self._spec[:, :, None]

    def _filter(self, x, spec):
        X = np.fft.fft2(np.asarray(x, dtype=float), axes=(0, 1))
        return np.real(np.fft.ifft2(X * spec, axes=(0, 1)))

    def apply(self, x):
        return self._filter(x, self._spec)

    def apply_adjoint(self, v):
        return self._filter(v, np.conj(self._spec))

    def lambda_min(self):
        return float(np.min(np.abs(self._spec) ** 2))

    def solve_normal(self, rhs, shift):
        return self._filter(rhs, 1.0 / (np.abs(self._spec) ** 2 + shift))


class DownsampleOp(DegradationOp):
    """Gaussian anti-alias blur followed by keeping every ``factor``-th pixel."""

    kind = "downsample"

    def __init__(self, factor: int, shape, bandwidth: float | None = None, kernel: BlurKernel | None = None):
        factor = int(factor)
        shape = tuple(shape)
        if factor < 1:
            raise ValueError("factor must be >= 1")
        if shape[0] % factor or shape[1] % factor:
            raise ValueError(f"image sides {shape[:2]} must be multiples of the factor {factor}")
        self.factor = factor
        if kernel is None:
            kernel = make_kernel("gaussian", bandwidth=0.5 * factor if bandwidth is None else bandwidth)
        self.blur = CircularBlurOp(kernel, shape)
        self.in_shape = shape
        self.out_shape = (shape[0] // factor, shape[1] // factor) + shape[2:]

    def apply(self, x):
        s = self.factor
        return self.blur.apply(x)[::s, ::s].copy()

    def apply_adjoint(self, v):
        s = self.factor
        up = np.zeros(self.in_shape)
        up[::s, ::s] = v
        return self.blur.apply_adjoint(up)

    def lambda_min(self):
        return self.blur.lambda_min() if self.factor == 1 else 0.0


class DenseOp(DegradationOp):
    """An explicit matrix acting on the flattened image."""

    kind = "dense"

    def __init__(self, matrix, in_shape=None):
        self.matrix = np.array(matrix, dtype=float)
        self.in_shape = (self.matrix.shape[1],) if in_shape is None else tuple(in_shape)
        if int(np.prod(self.in_shape)) != self.matrix.shape[1]:
            raise ValueError("in_shape does not match the matrix width")
        self.out_shape = (self.matrix.shape[0],)
        self._gram = self.matrix.T @ self.matrix

    def apply(self, x):
        return self.matrix @ np.ravel(x)

    def apply_adjoint(self, v):
        return (self.matrix.T @ np.ravel(v)).reshape(self.in_shape)

    def lambda_min(self):
        return float(max(np.linalg.eigvalsh(self._gram)[0], 0.0))

    def solve_normal(self, rhs, shift):
        c = np.linalg.cholesky(self._gram + shift * np.eye(self._gram.shape[0]))
        x = np.linalg.solve(c.T, np.linalg.solve(c, np.ravel(rhs)))
        return x.reshape(self.in_shape)


# ------------------------------------------------------------ data term


@dataclass(frozen=True)
class DataFidelity:
    """``f(x) = |Ax - y|^2 / (2 sigma^2)``."""

    op: DegradationOp
    y: np.ndarray
    sigma: float

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.shape != tuple(self.op.out_shape):
            raise ValueError(f"observation shape {y.shape} != operator output {self.op.out_shape}")
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        object.__setattr__(self, "y", y)

    def value(self, x) -> float:
        r = self.op.apply(x) - self.y
        return float(np.sum(r * r) / (2.0 * self.sigma**2))

    def grad(self, x) -> np.ndarray:
        return self.op.apply_adjoint(self.op.apply(x) - self.y) / self.sigma**2


def grad_f(fidelity: DataFidelity, x) -> np.ndarray:
    return fidelity.grad(x)


def degrade(x, op: DegradationOp, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """``A x + sigma * n`` with standard normal ``n``."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    ax = op.apply(_as_array(x))
    return ax + sigma * rng.standard_normal(ax.shape)


def x_update(fidelity: DataFidelity, mu, gamma2: float) -> np.ndarray:
    """Minimize ``f(x) + |x - mu|^2 / (2 gamma^2)``, i.e. ``prox_{gamma^2 f}(mu)``."""
    if not gamma2 > 0:
        raise ValueError("gamma2 must be > 0")
    c = fidelity.sigma**2 / gamma2
    rhs = fidelity.op.apply_adjoint(fidelity.y) + c * np.asarray(mu, dtype=float)
    return fidelity.op.solve_normal(rhs, c)
