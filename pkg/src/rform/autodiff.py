"""Reverse-mode autodiff on numpy float64 arrays.

Every op computes its result eagerly with numpy and, while gradients are enabled,
attaches a backward closure to the output. `backward(loss)` topologically sorts the
graph reachable from the scalar loss and runs the closures in reverse, accumulating
into `.grad` buffers. The graph is per-expression: dropping the loss reference frees
it, so a fresh tape is built on every optimization step.

Ops are fused at the granularity the training loop needs (a whole affine layer, a
whole layer-norm, GELU) to keep the per-step interpreter overhead low.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import ContractError, DimensionError

_grad_enabled = True


class no_grad:
    """Context manager that disables tape construction inside its block."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A float64 array plus a gradient slot and an optional backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        return out

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A named leaf tensor whose grad buffer persists across steps (zeroed explicitly)."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled:
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                out._parents = tuple(parents)
                out._backward = backward
                return out
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    return out


def _acc(p: Tensor, g: np.ndarray, owned: bool) -> None:
    # `owned` marks g as freshly allocated: safe to hand over without copying.
    if not p.requires_grad:
        return
    if p.grad is None:
        p.grad = g if owned else g.copy()
    else:
        p.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> tuple[np.ndarray, bool]:
    """Sum g down to `shape` (inverse of numpy broadcasting). Returns (array, owned)."""
    if g.shape == shape:
        return g, False
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape), True


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss (seed gradient 1.0)."""
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p._backward is not None and id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def bw(g):
        ga, owned = _unbroadcast(g, a.data.shape)
        _acc(a, ga, owned)
        gb, owned = _unbroadcast(g, b.data.shape)
        _acc(b, gb, owned)

    return _make(data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def bw(g):
        ga, owned = _unbroadcast(g, a.data.shape)
        _acc(a, ga, owned)
        gb, _ = _unbroadcast(g, b.data.shape)
        _acc(b, -gb, True)

    return _make(data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def bw(g):
        ga, _ = _unbroadcast(g * b.data, a.data.shape)
        _acc(a, ga, True)
        gb, _ = _unbroadcast(g * a.data, b.data.shape)
        _acc(b, gb, True)

    return _make(data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def bw(g):
        ga, _ = _unbroadcast(g / b.data, a.data.shape)
        _acc(a, ga, True)
        gb, _ = _unbroadcast(-g * data / b.data, b.data.shape)
        _acc(b, gb, True)

    return _make(data, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _acc(a, -g, True)

    return _make(-a.data, (a,), bw)


def scale(a, k: float) -> Tensor:
    """Multiply by a python scalar constant."""
    a = as_tensor(a)
    k = float(k)

    def bw(g):
        _acc(a, g * k, True)

    return _make(a.data * k, (a,), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def bw(g):
        _acc(a, g @ b.data.T, True)
        _acc(b, a.data.T @ g, True)

    return _make(data, (a, b), bw)


def linear(x, w, b) -> Tensor:
    """Affine layer x @ w + b, fused forward and backward."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise DimensionError(f"linear shapes incompatible: {x.data.shape}, {w.data.shape}")
    data = x.data @ w.data
    data += b.data

    def bw(g):
        _acc(x, g @ w.data.T, True)
        _acc(w, x.data.T @ g, True)
        _acc(b, g.sum(axis=0), True)

    return _make(data, (x, w, b), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def bw(g):
        _acc(a, g * data, True)

    return _make(data, (a,), bw)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)

    def bw(g):
        _acc(a, g * (1.0 - data * data), True)

    return _make(data, (a,), bw)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def bw(g):
        # denominator floored to keep a zero-radicand row finite; callers only
        # consume such rows through masked selects where the cofactor is zero
        _acc(a, g * (0.5 / np.maximum(data, 1e-150)), True)

    return _make(data, (a,), bw)


def clip_vals(a, lo: float, hi: float) -> Tensor:
    """Hard clamp with zero gradient outside [lo, hi]."""
    a = as_tensor(a)
    data = np.clip(a.data, lo, hi)
    passthrough = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        _acc(a, g * passthrough, True)

    return _make(data, (a,), bw)


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    data = np.asarray(a.data.sum())

    def bw(g):
        _acc(a, np.full(a.data.shape, float(g)), True)

    return _make(data, (a,), bw)


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    data = np.asarray(a.data.mean())
    inv = 1.0 / a.data.size

    def bw(g):
        _acc(a, np.full(a.data.shape, float(g) * inv), True)

    return _make(data, (a,), bw)


def mean_sumsq(a) -> Tensor:
    """mean over rows of the squared row norm: (a**2).sum(axis=1).mean()."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"mean_sumsq expects a 2-D array, got {a.data.shape}")
    data = np.asarray(np.einsum("ij,ij->", a.data, a.data) / a.data.shape[0])
    coef = 2.0 / a.data.shape[0]

    def bw(g):
        _acc(a, (float(g) * coef) * a.data, True)

    return _make(data, (a,), bw)


def concat(parts: Sequence, axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _acc(p, g[tuple(idx)], False)

    return _make(data, parts, bw)


def norm_rows(a) -> Tensor:
    """Euclidean norm of each row, shape (n, 1)."""
    a = as_tensor(a)
    data = np.sqrt(np.einsum("ij,ij->i", a.data, a.data))[:, None]

    def bw(g):
        _acc(a, (g / np.maximum(data, 1e-300)) * a.data, True)

    return _make(data, (a,), bw)


def dot_rows(a, b) -> Tensor:
    """Row-wise inner product, shape (n, 1)."""
    a, b = as_tensor(a), as_tensor(b)
    data = np.einsum("ij,ij->i", a.data, b.data)[:, None]

    def bw(g):
        _acc(a, g * b.data, True)
        _acc(b, g * a.data, True)

    return _make(data, (a, b), bw)


def where_mask(mask: np.ndarray, a, b) -> Tensor:
    """Select a where mask else b; the mask is plain data, never differentiated."""
    a, b = as_tensor(a), as_tensor(b)
    data = np.where(mask, a.data, b.data)

    def bw(g):
        ga, _ = _unbroadcast(np.where(mask, g, 0.0), a.data.shape)
        _acc(a, ga, True)
        gb, _ = _unbroadcast(np.where(mask, 0.0, g), b.data.shape)
        _acc(b, gb, True)

    return _make(data, (a, b), bw)


# ---------------------------------------------------------------------------
# GELU via an exact-accuracy Gaussian CDF table

_SQRT_2PI_INV = 1.0 / math.sqrt(2.0 * math.pi)
_TAB_LO = -12.5
_TAB_HI = 12.5
_TAB_STEP = 1e-3


def _build_cdf_tables():
    from scipy.special import ndtr

    n = int(round((_TAB_HI - _TAB_LO) / _TAB_STEP)) + 1
    xs = _TAB_LO + _TAB_STEP * np.arange(n)
    return ndtr(xs), np.exp(-0.5 * xs * xs) * _SQRT_2PI_INV


_CDF_TAB, _PDF_TAB = _build_cdf_tables()

try:
    from numba import njit

    @njit(cache=True, fastmath=True)
    def _phi_kernel(x, out, cdf, pdf):
        lo = -12.5
        h = 1e-3
        inv = 1000.0
        imax = cdf.size - 2
        for k in range(x.size):
            v = x[k]
            if v <= lo:
                out[k] = 0.0
                continue
            if v >= 12.5:
                out[k] = 1.0
                continue
            u = (v - lo) * inv
            i = int(u)
            if i > imax:
                i = imax
            t = u - i
            t2 = t * t
            t3 = t2 * t
            out[k] = (
                cdf[i] * (2.0 * t3 - 3.0 * t2 + 1.0)
                + pdf[i] * h * (t3 - 2.0 * t2 + t)
                + cdf[i + 1] * (3.0 * t2 - 2.0 * t3)
                + pdf[i + 1] * h * (t3 - t2)
            )

    def normal_cdf(x: np.ndarray) -> np.ndarray:
        """Standard normal CDF, cubic-Hermite interpolation of exact node values (~2e-15 abs)."""
        out = np.empty_like(x)
        _phi_kernel(x.ravel(), out.ravel(), _CDF_TAB, _PDF_TAB)
        return out

    @njit(cache=True)
    def _gelu_bw_kernel(x, cdf, g, out):
        c = 0.3989422804014327  # 1/sqrt(2*pi)
        for k in range(x.size):
            v = x[k]
            out[k] = g[k] * (cdf[k] + v * (np.exp(-0.5 * v * v) * c))

    def _gelu_grad(x: np.ndarray, cdf: np.ndarray, g: np.ndarray) -> np.ndarray:
        out = np.empty_like(x)
        _gelu_bw_kernel(x.ravel(), cdf.ravel(), np.ascontiguousarray(g).ravel(), out.ravel())
        return out

    @njit(cache=True)
    def _ln_fwd_kernel(x, gain, bias, eps, out, xhat, inv):
        rows, width = x.shape
        for i in range(rows):
            s = 0.0
            for j in range(width):
                s += x[i, j]
            mu = s / width
            v = 0.0
            for j in range(width):
                d = x[i, j] - mu
                v += d * d
            iv = 1.0 / np.sqrt(v / width + eps)
            inv[i] = iv
            for j in range(width):
                h = (x[i, j] - mu) * iv
                xhat[i, j] = h
                out[i, j] = h * gain[j] + bias[j]

    @njit(cache=True)
    def _ln_bw_kernel(g, gain, xhat, inv, gx_out, ggain_out, gbias_out):
        rows, width = g.shape
        for j in range(width):
            ggain_out[j] = 0.0
            gbias_out[j] = 0.0
        for i in range(rows):
            t1 = 0.0
            t2 = 0.0
            for j in range(width):
                gx = g[i, j] * gain[j]
                t1 += gx
                t2 += gx * xhat[i, j]
                ggain_out[j] += g[i, j] * xhat[i, j]
                gbias_out[j] += g[i, j]
            c = inv[i] / width
            for j in range(width):
                gx = g[i, j] * gain[j]
                gx_out[i, j] = c * (width * gx - t1 - xhat[i, j] * t2)

    def _ln_forward(x, gain, bias, eps):
        out = np.empty_like(x)
        xhat = np.empty_like(x)
        inv = np.empty(x.shape[0])
        _ln_fwd_kernel(x, gain, bias, eps, out, xhat, inv)
        return out, xhat, inv

    def _ln_backward(g, gain, xhat, inv):
        gx = np.empty_like(xhat)
        ggain = np.empty_like(gain)
        gbias = np.empty_like(gain)
        _ln_bw_kernel(np.ascontiguousarray(g), gain, xhat, inv, gx, ggain, gbias)
        return gx, ggain, gbias

except ImportError:  # pragma: no cover - exercised only without numba installed

    def normal_cdf(x: np.ndarray) -> np.ndarray:
        from scipy.special import ndtr

        return ndtr(x)

    def _gelu_grad(x: np.ndarray, cdf: np.ndarray, g: np.ndarray) -> np.ndarray:
        return g * (cdf + x * normal_pdf(x))

    def _ln_forward(x, gain, bias, eps):
        mu = x.mean(axis=1, keepdims=True)
        xc = x - mu
        var = np.einsum("ij,ij->i", xc, xc)[:, None] / x.shape[1]
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        return xhat * gain + bias, xhat, inv[:, 0]

    def _ln_backward(g, gain, xhat, inv):
        gx = g * gain
        t1 = gx.sum(axis=1, keepdims=True)
        t2 = np.einsum("ij,ij->i", gx, xhat)[:, None]
        c = inv[:, None] / g.shape[1]
        return (
            c * (g.shape[1] * gx - t1 - xhat * t2),
            np.einsum("ij,ij->j", g, xhat),
            g.sum(axis=0),
        )


def normal_pdf(x: np.ndarray) -> np.ndarray:
    return np.exp(-0.5 * x * x) * _SQRT_2PI_INV


def gelu(a) -> Tensor:
    """Exact GELU x * Phi(x); the backward reuses the cached CDF values."""
    a = as_tensor(a)
    cdf = normal_cdf(a.data)
    data = a.data * cdf

    def bw(g):
        _acc(a, _gelu_grad(a.data, cdf, g), True)

    return _make(data, (a,), bw)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean / unit variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.data.ndim != 2:
        raise DimensionError(f"layer_norm expects a 2-D array, got {x.data.shape}")
    data, xhat, inv = _ln_forward(x.data, gain.data, bias.data, eps)

    def bw(g):
        gx, ggain, gbias = _ln_backward(g, gain.data, xhat, inv)
        _acc(x, gx, True)
        _acc(gain, ggain, True)
        _acc(bias, gbias, True)

    return _make(data, (x, gain, bias), bw)


def cube_fold(a) -> Tensor:
    """Fold each coordinate into [-1, 1] by repeated boundary reflection.

    Computes 1 - |((x + 1) mod 4) - 2| with the non-negative modulo, which reflects
    any real coordinate back into the interval the way a billiard on a segment would.
    """
    a = as_tensor(a)
    m = np.mod(a.data + 1.0, 4.0) - 2.0
    data = 1.0 - np.abs(m)

    def bw(g):
        _acc(a, g * -np.sign(m), True)

    return _make(data, (a,), bw)
