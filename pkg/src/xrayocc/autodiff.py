"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Ops are recorded onto a :class:`Graph` tape while it is the active graph and
at least one input requires a gradient.  The tape is topologically ordered by
construction, so ``backward`` is a single reversed sweep.

    params = ParamStore()
    params.add("w", np.ones((3, 2)))
    with Graph() as g:
        loss = reduce_mean(square(linear(x, params["w"], params["b"])))
    g.backward(loss)
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    """Incompatible input shapes for an op."""

    def __init__(self, op: str, message: str, dims: Any = None):
        self.op = op
        self.dims = dims
        text = f"{op}: {message}"
        if dims is not None:
            text += f" (dims: {dims})"
        super().__init__(text)


class NumericError(AutodiffError, FloatingPointError):
    pass


class UsageError(AutodiffError, RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is None and not isinstance(data, (np.ndarray, np.generic)):
            dtype = np.float32  # python scalars / lists: 32-bit default
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


@dataclass
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    attrs: dict
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


def _graph_stack() -> list["Graph"]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_graph() -> "Graph | None":
    stack = _graph_stack()
    return stack[-1] if stack else None


@dataclass
class Graph:
    """Tape of recorded op nodes; one backward pass per forward pass."""

    nodes: list[Node] = field(default_factory=list)
    _consumed: bool = False

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _graph_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, node: Node) -> None:
        if self._consumed:
            raise UsageError("graph already differentiated; build a new graph per forward pass")
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def backward(graph: Graph, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if graph._consumed:
        raise UsageError("backward called twice on the same graph")
    if loss.size != 1:
        raise UsageError(f"loss must be a scalar, got shape {loss.shape}")
    produced = {id(n.output) for n in graph.nodes}
    if id(loss) not in produced:
        raise UsageError("backward without a recorded forward pass for this loss")
    graph._consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if not np.all(np.isfinite(gi)):
                raise NumericError(f"non-finite gradient flowing out of {node.kind}")
            if id(inp) in produced:
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
            else:
                gi = gi.astype(inp.data.dtype, copy=False)
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi


# ---------------------------------------------------------------------------
# op registry

OpImpl = Callable[[list[np.ndarray], dict], tuple[np.ndarray, Callable]]
OPS: dict[str, OpImpl] = {}


def register(kind: str):
    def deco(fn: OpImpl) -> OpImpl:
        OPS[kind] = fn
        return fn

    return deco


def forward_op(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    if kind not in OPS:
        raise UsageError(f"unknown op kind {kind!r}")
    arrays = [t.data for t in inputs]
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):  # reported below
        out, bwd = OPS[kind](arrays, attrs)
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{kind} produced non-finite output")
    graph = active_graph()
    track = graph is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=track)
    if track:
        graph.record(Node(kind, tuple(inputs), result, attrs, bwd))
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, "operands cannot be broadcast together", (a.shape, b.shape)) from None


@register("add")
def _add(xs, attrs):
    a, b = xs
    _check_broadcast("add", a, b)
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


@register("sub")
def _sub(xs, attrs):
    a, b = xs
    _check_broadcast("sub", a, b)
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


@register("mul")
def _mul(xs, attrs):
    a, b = xs
    _check_broadcast("mul", a, b)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


@register("square")
def _square(xs, attrs):
    (a,) = xs
    return a * a, lambda g: (2.0 * a * g,)


@register("relu")
def _relu(xs, attrs):
    (a,) = xs
    mask = a > 0
    return np.where(mask, a, 0).astype(a.dtype), lambda g: (g * mask,)


@register("sigmoid")
def _sigmoid(xs, attrs):
    (a,) = xs
    s = 0.5 * (np.tanh(0.5 * a) + 1.0)
    return s, lambda g: (g * s * (1.0 - s),)


@register("reduce_mean")
def _reduce_mean(xs, attrs):
    (a,) = xs
    out = np.asarray(a.mean(dtype=a.dtype), dtype=a.dtype)
    return out, lambda g: (np.full(a.shape, g / a.size, dtype=a.dtype),)


@register("reshape")
def _reshape(xs, attrs):
    (a,) = xs
    shape = tuple(attrs["shape"])
    try:
        out = a.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", "cannot reshape", (a.shape, shape)) from None
    return out, lambda g: (g.reshape(a.shape),)


@register("concat")
def _concat(xs, attrs):
    axis = attrs.get("axis", 0)
    ref = xs[0]
    for x in xs[1:]:
        if x.ndim != ref.ndim or any(
            x.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis % ref.ndim
        ):
            raise ShapeError("concat", f"inputs differ off axis {axis}", [t.shape for t in xs])
    out = np.concatenate(xs, axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bwd(g):
        return tuple(np.split(g, bounds, axis=axis))

    return out, bwd


@register("slice")
def _slice(xs, attrs):
    (a,) = xs
    axis, start, stop = attrs["axis"], attrs["start"], attrs["stop"]
    if not (0 <= start < stop <= a.shape[axis]):
        raise ShapeError("slice", f"range [{start}, {stop}) outside axis {axis}", a.shape)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bwd(g):
        full = np.zeros_like(a)
        full[idx] = g
        return (full,)

    return a[idx], bwd


@register("weighted_sum")
def _weighted_sum(xs, attrs):
    weights = attrs["weights"]
    if len(weights) != len(xs):
        raise ShapeError("weighted_sum", "one weight per input required", (len(weights), len(xs)))
    ref = xs[0].shape
    for x in xs[1:]:
        if x.shape != ref:
            raise ShapeError("weighted_sum", "inputs must share a shape", [t.shape for t in xs])
    dtype = xs[0].dtype
    ws = [np.asarray(w, dtype=dtype) for w in weights]
    out = ws[0] * xs[0]
    for w, x in zip(ws[1:], xs[1:]):
        out = out + w * x
    out = np.ascontiguousarray(np.broadcast_to(out, ref), dtype=dtype)
    return out, lambda g: tuple(_unbroadcast(g * w, ref) for w in ws)


@register("linear")
def _linear(xs, attrs):
    x, w, b = xs
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError("linear", "input width must match weight rows", (x.shape, w.shape, b.shape))
    out = x @ w + b

    def bwd(g):
        g2 = g.reshape(-1, w.shape[1])
        x2 = x.reshape(-1, w.shape[0])
        return g @ w.T, x2.T @ g2, g2.sum(axis=0)

    return out, bwd


@register("conv2d")
def _conv2d(xs, attrs):
    x, w, b = xs
    stride = int(attrs.get("stride", 1))
    pad = int(attrs.get("padding", 0))
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError("conv2d", "expected x (B,Ci,H,W), w (Co,Ci,kh,kw), b (Co,)", (x.shape, w.shape, b.shape))
    kh, kw = w.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError("conv2d", "kernel larger than padded input", (xp.shape, w.shape))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = out + b[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bwd(g):
        if squeeze:
            g = g[None]
        db = g.sum(axis=(0, 2, 3))
        dw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib
        dx = dxp[:, :, pad : dxp.shape[2] - pad, pad : dxp.shape[3] - pad] if pad else dxp
        if squeeze:
            dx = dx[0]
        return dx, dw, db

    return (out[0] if squeeze else out), bwd


@register("bilinear_sample")
def _bilinear_sample(xs, attrs):
    planes, coords = xs
    squeeze = planes.ndim == 3
    if squeeze:
        planes, coords = planes[None], coords[None]
    if planes.ndim != 4 or coords.ndim != 3 or coords.shape[0] != planes.shape[0] or coords.shape[2] != 2:
        raise ShapeError("bilinear_sample", "expected planes (B,C,h,w) and coords (B,N,2)", (planes.shape, coords.shape))
    nb, nc, h, w = planes.shape
    cx, cy = coords[..., 0], coords[..., 1]
    valid = (cx >= 0) & (cx <= w - 1) & (cy >= 0) & (cy <= h - 1)
    cx = np.where(valid, cx, 0)
    cy = np.where(valid, cy, 0)
    x0 = np.floor(cx).astype(np.int64)
    y0 = np.floor(cy).astype(np.int64)
    fx = (cx - x0).astype(planes.dtype)
    fy = (cy - y0).astype(planes.dtype)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    vmask = valid.astype(planes.dtype)
    corners = (
        (y0, x0, (1 - fx) * (1 - fy) * vmask),
        (y0, x1, fx * (1 - fy) * vmask),
        (y1, x0, (1 - fx) * fy * vmask),
        (y1, x1, fx * fy * vmask),
    )
    flat = planes.transpose(0, 2, 3, 1).reshape(nb * h * w, nc)
    base = (np.arange(nb)[:, None] * h)
    out = np.zeros((nb, coords.shape[1], nc), dtype=planes.dtype)
    index = []
    for yy, xx, wt in corners:
        idx = (base + yy) * w + xx
        index.append((idx, wt))
        out += flat[idx] * wt[..., None]

    def bwd(g):
        if squeeze:
            g = g[None]
        dflat = np.zeros_like(flat)
        for idx, wt in index:
            np.add.at(dflat, idx.reshape(-1), (g * wt[..., None]).reshape(-1, nc))
        dplanes = dflat.reshape(nb, h, w, nc).transpose(0, 3, 1, 2)
        if squeeze:
            dplanes = dplanes[0]
        return np.ascontiguousarray(dplanes), None

    return (out[0] if squeeze else out), bwd


# ---------------------------------------------------------------------------
# functional surface


def add(a: Tensor, b: Tensor) -> Tensor:
    return forward_op("add", [a, b])


def sub(a: Tensor, b: Tensor) -> Tensor:
    return forward_op("sub", [a, b])


def mul(a: Tensor, b: Tensor) -> Tensor:
    return forward_op("mul", [a, b])


def square(a: Tensor) -> Tensor:
    return forward_op("square", [a])


def relu(a: Tensor) -> Tensor:
    return forward_op("relu", [a])


def sigmoid(a: Tensor) -> Tensor:
    return forward_op("sigmoid", [a])


def reduce_mean(a: Tensor) -> Tensor:
    return forward_op("reduce_mean", [a])


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return forward_op("reshape", [a], shape=tuple(shape))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    return forward_op("concat", list(xs), axis=axis)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    return forward_op("slice", [a], axis=axis, start=start, stop=stop)


def weighted_sum(xs: Sequence[Tensor], weights: Sequence) -> Tensor:
    """``sum_k weights[k] * xs[k]``; weights are constants (scalars or broadcastable arrays)."""
    return forward_op("weighted_sum", list(xs), weights=list(weights))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return forward_op("linear", [x, w, b])


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    return forward_op("conv2d", [x, w, b], stride=stride, padding=padding)


def bilinear_sample(planes: Tensor, coords) -> Tensor:
    """Sample ``planes`` (B,C,h,w) at continuous (col, row) ``coords`` (B,N,2) -> (B,N,C).

    Coordinates outside ``[0, w-1] x [0, h-1]`` yield zeros and no gradient.
    """
    if not isinstance(coords, Tensor):
        coords = Tensor(np.asarray(coords, dtype=np.float64))
    return forward_op("bilinear_sample", [planes, coords])


# ---------------------------------------------------------------------------
# parameters and optimizer


class ParamStore:
    """Named trainable tensors, iterated in sorted-name order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value, dtype=np.float32) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(k, self._params[k]) for k in self.names()]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def num_values(self) -> int:
        return sum(t.size for t in self._params.values())

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for name, t in self.items():
            out.add(name, t.data, dtype=dtype)
        return out

    def copy(self) -> "ParamStore":
        return self.astype(None)

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self._params.items():
            if state[k].shape != t.shape:
                raise ShapeError("load_state", f"shape mismatch for {k}", (state[k].shape, t.shape))
            t.data = np.array(state[k], dtype=t.dtype)

    def freeze(self) -> None:
        for t in self._params.values():
            t.requires_grad = False


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamStore, state: AdamState) -> None:
    """One bias-corrected Adam update in place; grads are left untouched."""
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise UsageError(f"adam_step: no gradient for {missing}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m.astype(p.dtype), v.astype(p.dtype)
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - step).astype(p.dtype)
