"""Networks, optimizer, target averaging, and checkpoint serialization.

The MLP applies GELU after every hidden affine layer; layer normalization (used by
the critics) sits between the affine map and the activation. Adam follows the
standard bias-corrected update with a global-norm gradient clip applied on the fly,
leaving the stored gradients untouched for the caller to zero.
"""

from __future__ import annotations

import struct
from typing import Iterable, Mapping, Sequence

import numpy as np

from .autodiff import (
    Parameter,
    Tensor,
    _ln_forward,
    as_tensor,
    gelu,
    grad_enabled,
    layer_norm,
    linear,
    normal_cdf,
)
from .errors import ContractError, FormatError, NumericError


class Mlp:
    """Fully connected net: widths[0] -> ... -> widths[-1], GELU on hidden layers."""

    def __init__(
        self,
        widths: Sequence[int],
        rng: np.random.Generator,
        use_layer_norm: bool = False,
    ):
        if len(widths) < 2:
            raise ContractError("an Mlp needs at least an input and an output width")
        self.widths = tuple(int(w) for w in widths)
        self.use_layer_norm = use_layer_norm
        self._params: list[Parameter] = []
        self._layers = []
        n_affine = len(self.widths) - 1
        for i, (fan_in, fan_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            w = Parameter(f"w{i}", rng.uniform(-bound, bound, (fan_in, fan_out)))
            b = Parameter(f"b{i}", np.zeros(fan_out))
            self._params += [w, b]
            hidden = i < n_affine - 1
            if use_layer_norm and hidden:
                g = Parameter(f"ln{i}g", np.ones(fan_out))
                c = Parameter(f"ln{i}c", np.zeros(fan_out))
                self._params += [g, c]
                self._layers.append((w, b, g, c, hidden))
            else:
                self._layers.append((w, b, None, None, hidden))

    def parameters(self) -> list[Parameter]:
        return list(self._params)

    def param(self, name: str) -> Parameter:
        for p in self._params:
            if p.name == name:
                return p
        raise KeyError(name)

    def forward(self, x, frozen: bool = False) -> Tensor:
        """Forward pass; frozen=True detaches the weights so no gradient reaches them."""
        if not grad_enabled():
            arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
            return Tensor(self.forward_np(arr))
        h = as_tensor(x)
        for w, b, g, c, hidden in self._layers:
            if frozen:
                h = linear(h, w.detach(), b.detach())
                if g is not None:
                    h = layer_norm(h, g.detach(), c.detach())
            else:
                h = linear(h, w, b)
                if g is not None:
                    h = layer_norm(h, g, c)
            if hidden:
                h = gelu(h)
        return h

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        """Tape-free forward on a plain array; arithmetic mirrors the op versions
        exactly (same sequence of float64 operations), so results are bit-identical."""
        h = x
        for w, b, g, c, hidden in self._layers:
            h = h @ w.data
            h += b.data
            if g is not None:
                h = _ln_forward(h, g.data, c.data, 1e-5)[0]
            if hidden:
                h = h * normal_cdf(h)
        return h

    __call__ = forward

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self._params}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        for p in self._params:
            if p.name not in state:
                raise ContractError(f"missing parameter {p.name!r} in state")
            arr = np.asarray(state[p.name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ContractError(
                    f"shape mismatch for {p.name!r}: {arr.shape} vs {p.data.shape}"
                )
            p.data[...] = arr

    def copy_from(self, other: "Mlp") -> None:
        self.load_state({p.name: p.data for p in other._params})


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad[...] = 0.0


def global_grad_norm(params: Sequence[Parameter]) -> float:
    total = 0.0
    for p in params:
        g = p.grad.ravel()
        total += float(g @ g)
    return float(np.sqrt(total))


def clip_scale(norm: float, max_norm: float) -> float:
    """Scale factor that caps a gradient norm at max_norm; identity at or below it."""
    if max_norm <= 0.0 or norm <= max_norm:
        return 1.0
    return max_norm / norm


class Adam:
    """Adam with bias correction; betas 0.9/0.999, eps 1e-8.

    The global-norm clip is applied to the update, not to the stored grads.
    """

    def __init__(
        self,
        params: Sequence[Parameter],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        max_grad_norm: float = 0.0,
    ):
        self.params = list(params)
        self.lr = float(lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.max_grad_norm = float(max_grad_norm)
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        norm = global_grad_norm(self.params)
        if not np.isfinite(norm):
            # any non-finite entry poisons the squared-sum norm; scan only then
            for p in self.params:
                if not np.isfinite(p.grad).all():
                    raise NumericError(f"non-finite gradient in parameter {p.name!r}")
        s = clip_scale(norm, self.max_grad_norm)
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad if s == 1.0 else p.grad * s
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        zero_grads(self.params)


def polyak_update(targets: Sequence[Parameter], onlines: Sequence[Parameter], tau: float) -> None:
    """In-place target <- (1 - tau) * target + tau * online, matched by name and shape."""
    if len(targets) != len(onlines):
        raise ContractError(
            f"parameter lists differ in length: {len(targets)} vs {len(onlines)}"
        )
    for t, o in zip(targets, onlines):
        if t.name != o.name:
            raise ContractError(f"parameter name mismatch: {t.name!r} vs {o.name!r}")
        if t.data.shape != o.data.shape:
            raise ContractError(
                f"parameter shape mismatch for {t.name!r}: {t.data.shape} vs {o.data.shape}"
            )
        t.data *= 1.0 - tau
        t.data += tau * o.data


# ---------------------------------------------------------------------------
# checkpoint format: magic "RFCK", version, then named float64 arrays

CHECKPOINT_MAGIC = b"RFCK"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(named: Mapping[str, np.ndarray]) -> bytes:
    """Serialize named arrays: u32 count, then per array a u32-length utf-8 name,
    u32 rank, u32 dims, and the float64 little-endian payload."""
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(named))]
    for name, arr in named.items():
        raw = name.encode("utf-8")
        a = np.asarray(arr, dtype="<f8")
        if a.ndim and not a.flags.c_contiguous:
            a = np.ascontiguousarray(a)
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(a.tobytes())
    return b"".join(out)


def parse_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    def need(off: int, n: int) -> None:
        if off + n > len(buf):
            raise FormatError(f"checkpoint truncated at byte {len(buf)} (needed {off + n})")

    need(0, 8)
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:4]!r} at byte 0")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at byte 4")
    off = 12
    named: dict[str, np.ndarray] = {}
    for _ in range(count):
        need(off, 4)
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        need(off, nlen)
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        need(off, 4)
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        need(off, 4 * rank)
        shape = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        need(off, 8 * size)
        arr = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape)
        named[name] = arr.astype(np.float64, copy=True)
        off += 8 * size
    if off != len(buf):
        raise FormatError(f"trailing bytes after checkpoint payload at byte {off}")
    return named


def save_checkpoint(path, named: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(named))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
