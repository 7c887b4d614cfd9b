"""Dense tensors on top of numpy with a reverse-mode gradient tape.

Only the operations the forecasting model needs are provided. Shapes are
explicit: binary elementwise ops accept equal shapes or a Python scalar, and
anything else goes through :func:`broadcast_to`.

Every recorded operation is appended to the calling thread's current
:class:`Tape`. Recording order is a valid topological order, so ``backward``
just walks the tape in reverse. A tape is consumed by ``backward`` and the
thread then starts a fresh one.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class TapeStateError(RuntimeError):
    """A tape was used after it was consumed, or backward was misused."""


_DTYPES = {"f32": np.float32, "f64": np.float64}
_state = threading.local()


def _local():
    if not hasattr(_state, "tape"):
        _state.tape = Tape()
        _state.grad_enabled = True
        _state.dtype = _default_dtype[0]
    return _state


_default_dtype = [np.float32]


def set_precision(name: str) -> None:
    """Set the process-wide default dtype ("f32" or "f64")."""
    _default_dtype[0] = _DTYPES[name]
    _local().dtype = _DTYPES[name]


def get_dtype():
    return _local().dtype


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the calling thread's default dtype."""
    st = _local()
    old = st.dtype
    st.dtype = _DTYPES[name]
    try:
        yield
    finally:
        st.dtype = old


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    st = _local()
    old = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = old


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of executed operations for one forward/backward cycle."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: "Tensor", inputs: tuple, backward: Callable) -> None:
        if self.consumed:
            raise TapeStateError("cannot record on a consumed tape")
        out._tape = self
        out._index = len(self.nodes)
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, loss: "Tensor") -> None:
        if loss.data.ndim != 0:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise TapeStateError("tape already consumed by a previous backward()")
        if loss._tape is not self:
            raise TapeStateError("loss was not recorded on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        touched: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes[: loss._index + 1]):
            g = grads.get(id(node.out))
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    touched[key] = t

        for key, t in touched.items():
            g = grads[key]
            t.grad = g if t.grad is None else t.grad + g

        self.consumed = True
        self.nodes = []
        st = _local()
        if st.tape is self:
            st.tape = Tape()

    def reset(self) -> None:
        self.nodes = []
        self.consumed = False


def current_tape() -> Tape:
    return _local().tape


def reset_tape() -> Tape:
    """Discard the thread's current tape and start a new one."""
    st = _local()
    st.tape = Tape()
    return st.tape


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "_index")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        dt = dtype if dtype is not None else _local().dtype
        arr = np.asarray(data, dtype=dt)
        if arr.size == 0 and arr.ndim == 0:
            raise DimensionError("empty scalar")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None
        self._index = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self) -> None:
        if self._tape is None:
            if self.data.ndim != 0:
                raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
            raise TapeStateError("tensor was not produced by a recorded operation")
        self._tape.backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(self, o)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: add(neg(self), o)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(self, o)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)

    def __truediv__(self, o):
        if isinstance(o, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return mul(self, 1.0 / o)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes if axes else None)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _make(data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    st = _local()
    needs = st.grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.grad = None
    out.name = None
    out._tape = None
    out._index = -1
    if needs:
        st.tape.record(out, inputs, backward)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (no implicit broadcasting)")


def _const(a: Tensor, b, op: str) -> np.ndarray:
    c = np.asarray(b, dtype=a.dtype)
    if c.ndim and c.shape != a.shape:
        raise DimensionError(f"{op}: constant of shape {c.shape} against tensor {a.shape}")
    return c


# elementwise arithmetic


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _same_shape(a, b, "add")
        return _make(a.data + b.data, (a, b), lambda g: (g, g))
    return _make(a.data + _const(a, b, "add"), (a,), lambda g: (g,))


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _same_shape(a, b, "sub")
        return _make(a.data - b.data, (a, b), lambda g: (g, -g))
    return _make(a.data - _const(a, b, "sub"), (a,), lambda g: (g,))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _same_shape(a, b, "mul")
        ad, bd = a.data, b.data
        return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))
    s = _const(a, b, "mul")
    return _make(a.data * s, (a,), lambda g: (g * s,))


def abs_(a: Tensor) -> Tensor:
    # subgradient at 0 is 0
    sgn = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sgn,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    # tanh form never overflows
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


# reductions and shape plumbing


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return _make(np.asarray(a.data.mean(), dtype=a.dtype), (a,),
                 lambda g: (np.full(shape, g / n, dtype=g.dtype),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    out = a.data.reshape(tuple(shape))
    return _make(out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast of ``a`` to ``shape``; the gradient is summed back."""
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise DimensionError(f"broadcast_to: cannot broadcast {src} to {shape}") from exc
    lead = len(shape) - len(src)
    keep = tuple(i for i, n in enumerate(src) if n == 1 and shape[lead + i] != 1)

    def backward(g):
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        if keep:
            g = g.sum(axis=keep, keepdims=True)
        return (g,)

    return _make(out, (a,), backward)


def index_axis(a: Tensor, axis: int, i: int) -> Tensor:
    """Select one index along ``axis`` (the axis is removed)."""
    shape, dt = a.shape, a.dtype
    sl = [slice(None)] * a.ndim
    sl[axis] = i
    sl = tuple(sl)

    def backward(g):
        full = np.zeros(shape, dtype=dt)
        full[sl] = g
        return (full,)

    return _make(a.data[sl], (a,), backward)


def stack(items: Sequence[Tensor], axis: int) -> Tensor:
    shapes = {t.shape for t in items}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([t.data for t in items], axis=axis)
    n = len(items)

    def backward(g):
        return tuple(np.take(g, k, axis=axis) for k in range(n))

    return _make(out, tuple(items), backward)


def concat_last(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat_last: leading shapes {a.shape[:-1]} and {b.shape[:-1]} differ")
    p = a.shape[-1]
    out = np.concatenate([a.data, b.data], axis=-1)
    return _make(out, (a, b), lambda g: (g[..., :p], g[..., p:]))


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    shape, dt = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dt)
        full[..., start:stop] = g
        return (full,)

    return _make(a.data[..., start:stop], (a,), backward)


def split_last(a: Tensor, p: int) -> tuple[Tensor, Tensor]:
    return slice_last(a, 0, p), slice_last(a, p, a.shape[-1])


# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Leading (batch) extents must match exactly when present."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(ad @ bd, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w (+ b)`` over the last axis of ``x``, any number of leading axes."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out = out + b.data

    def backward(g):
        gx = g @ wd.T
        g2 = g.reshape(-1, g.shape[-1])
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _make(out, inputs, backward)


def batched_node_contract(x: Tensor, w: Tensor) -> Tensor:
    """Per-node weights: ``out[..., n, f] = sum_c x[..., n, c] * w[n, c, f]``.

    ``x`` is [N, C] or [B, N, C]; ``w`` is [N, C, F].
    """
    if w.ndim != 3 or x.ndim not in (2, 3) or x.shape[-2:] != w.shape[:2]:
        raise DimensionError(f"batched_node_contract: x {x.shape} incompatible with w {w.shape}")
    xd, wd = x.data, w.data
    if x.ndim == 2:
        out = np.matmul(xd[:, None, :], wd)[:, 0, :]

        def backward(g):
            gx = np.matmul(g[:, None, :], np.swapaxes(wd, 1, 2))[:, 0, :]
            gw = xd[:, :, None] * g[:, None, :]
            return gx, gw

        return _make(out, (x, w), backward)

    # [B,N,C] -> [N,B,C] so the node axis is the matmul batch axis
    xn = xd.transpose(1, 0, 2)
    out = np.matmul(xn, wd).transpose(1, 0, 2)

    def backward(g):
        gn = g.transpose(1, 0, 2)
        gx = np.matmul(gn, np.swapaxes(wd, 1, 2)).transpose(1, 0, 2)
        gw = np.matmul(np.swapaxes(xn, 1, 2), gn)
        return gx, gw

    return _make(out, (x, w), backward)


def node_mix(s: Tensor, x: Tensor) -> Tensor:
    """Graph propagation ``out[b] = s @ x[b]`` for ``s`` [N,N] and ``x`` [B,N,C]."""
    if s.ndim != 2 or x.ndim != 3 or s.shape[1] != x.shape[1]:
        raise DimensionError(f"node_mix: operator {s.shape} incompatible with x {x.shape}")
    sd, xd = s.data, x.data
    out = np.matmul(sd, xd)

    def backward(g):
        n = sd.shape[0]
        gs = g.transpose(1, 0, 2).reshape(n, -1) @ xd.transpose(1, 0, 2).reshape(n, -1).T
        return gs, np.matmul(sd.T, g)

    return _make(out, (s, x), backward)


def embed_pool(e: Tensor, pool: Tensor) -> Tensor:
    """Contract a node embedding [N,d] with a pool [d, ...] into [N, ...]."""
    if e.ndim != 2 or pool.shape[0] != e.shape[1]:
        raise DimensionError(f"embed_pool: embedding {e.shape} incompatible with pool {pool.shape}")
    ed, pd = e.data, pool.data
    rest = pool.shape[1:]
    flat = pd.reshape(pd.shape[0], -1)
    out = (ed @ flat).reshape((ed.shape[0],) + rest)

    def backward(g):
        g2 = g.reshape(g.shape[0], -1)
        return g2 @ flat.T, (ed.T @ g2).reshape(pd.shape)

    return _make(out, (e, pool), backward)


# normalisations


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    if a.ndim == 0 or a.shape[-1] < 1:
        raise DimensionError(f"softmax_rows: need a last axis of extent >= 1, got {a.shape}")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    f = x.shape[-1]
    if gain.shape != (f,) or bias.shape != (f,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs features {f}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    denom = np.sqrt(var + eps)
    # eps=0 on a constant slice: define the normalised value as 0
    inv = np.divide(1.0, denom, out=np.zeros_like(denom), where=denom > 0)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def backward(g):
        g2 = g.reshape(-1, f)
        ggain = (g2 * xhat.reshape(-1, f)).sum(axis=0)
        gbias = g2.sum(axis=0)
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), backward)
