"""Dense float64 tensors with reverse-mode differentiation.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to one gradient per parent. Calling
:func:`backward` on a scalar walks the recorded graph in reverse
topological order and sums gradient contributions, so a node used twice
receives the sum of both paths.

Arrays carry a leading batch axis wherever the OCR model needs one:
images are ``(N, H, W, C)``, sequences ``(N, T, D)``.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "backward",
    "constant",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "dense",
    "tanh",
    "sigmoid",
    "relu",
    "clip",
    "exp",
    "log",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "flip",
    "reverse_prefix",
    "concat",
    "softmax_rows",
    "log_softmax_rows",
    "conv2d",
    "maxpool2",
    "lstm_seq",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "parents", "op", "requires_grad", "grad", "_backward")

    def __init__(
        self,
        data,
        parents: tuple["Tensor", ...] = (),
        op: str = "leaf",
        backward_fn: BackwardFn | None = None,
        requires_grad: bool = False,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = parents
        self.op = op
        self._backward = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"

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

    def sum(self):
        return sum(self)


def constant(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, op, fn) -> Tensor:
    return Tensor(data, tuple(parents), op, fn)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # sum out axes that numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from exc


# --------------------------------------------------------------------------
# graph traversal


class Graph:
    """Nodes reachable from a root, parents before children."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes
        self.index = {id(n): i for i, n in enumerate(nodes)}

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node.parents):
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor, graph: Graph | None = None) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(node) for every node that requires a gradient.

    Returns a mapping from tensor to gradient array and also stores each
    gradient on ``tensor.grad``.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = graph or Graph.from_root(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.get(id(node))
        if g is None or node._backward is None or not node.requires_grad:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    out: dict[Tensor, np.ndarray] = {}
    for node in graph.nodes:
        g = grads.get(id(node))
        if g is not None and node.requires_grad:
            node.grad = g
            out[node] = g
    return out


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _check_broadcast(a.data, b.data, "add")

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), "add", fn)


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _check_broadcast(a.data, b.data, "sub")

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), "sub", fn)


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _check_broadcast(a.data, b.data, "mul")

    def fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), "mul", fn)


def neg(a) -> Tensor:
    a = constant(a)
    return _node(-a.data, (a,), "neg", lambda g: (-g,))


def tanh(a) -> Tensor:
    a = constant(a)
    out = np.tanh(a.data)
    return _node(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def sigmoid(a) -> Tensor:
    a = constant(a)
    out = _sigmoid(a.data)
    return _node(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = constant(a)
    on = a.data > 0
    return _node(np.where(on, a.data, 0.0), (a,), "relu", lambda g: (g * on,))


def clip(a, lo: float, hi: float) -> Tensor:
    a = constant(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), "clip", lambda g: (g * inside,))


def exp(a) -> Tensor:
    a = constant(a)
    out = np.exp(a.data)
    return _node(out, (a,), "exp", lambda g: (g * out,))


def log(a) -> Tensor:
    a = constant(a)
    return _node(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


# --------------------------------------------------------------------------
# reductions and reshaping


def sum(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = constant(a)
    return _node(a.data.sum(), (a,), "sum", lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a) -> Tensor:
    a = constant(a)
    n = a.data.size
    return _node(a.data.mean(), (a,), "mean", lambda g: (np.full(a.shape, g / n),))


def reshape(a, shape: Iterable[int]) -> Tensor:
    a = constant(a)
    src = a.shape
    return _node(a.data.reshape(tuple(shape)), (a,), "reshape", lambda g: (g.reshape(src),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = constant(a)
    inverse = np.argsort(axes)
    return _node(a.data.transpose(axes), (a,), "transpose", lambda g: (g.transpose(inverse),))


def flip(a, axis: int) -> Tensor:
    a = constant(a)
    return _node(np.flip(a.data, axis).copy(), (a,), "flip", lambda g: (np.flip(g, axis).copy(),))


def reverse_prefix(a, lengths: Sequence[int]) -> Tensor:
    """Reverse the first ``lengths[k]`` steps along axis 1 of item ``k``.

    Steps past the length stay where they are, so a right-to-left pass
    over padded sequences starts at each item's own last step.
    """
    a = constant(a)
    n, steps = a.shape[:2]
    if len(lengths) != n or any(not 0 < int(L) <= steps for L in lengths):
        raise ShapeError(f"reverse_prefix: lengths {list(lengths)} do not fit shape {a.shape}")
    index = np.tile(np.arange(steps), (n, 1))
    for k, L in enumerate(lengths):
        index[k, :L] = index[k, :L][::-1]
    rows = np.arange(n)[:, None]
    # the permutation is its own inverse
    return _node(a.data[rows, index], (a,), "reverse_prefix", lambda g: (g[rows, index],))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [constant(t) for t in tensors]
    ax = axis % ts[0].data.ndim
    for t in ts[1:]:
        if t.data.ndim != ts[0].data.ndim or any(
            d != e for k, (d, e) in enumerate(zip(t.shape, ts[0].shape)) if k != ax
        ):
            raise ShapeError(f"concat: shapes {[t.shape for t in ts]} differ off axis {axis}")
    cuts = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _node(
        np.concatenate([t.data for t in ts], axis=ax),
        tuple(ts),
        "concat",
        lambda g: tuple(np.split(g, cuts, axis=ax)),
    )


# --------------------------------------------------------------------------
# linear algebra


def matmul(a, w) -> Tensor:
    """``a[..., k] @ w[k, m]`` with a 2-D right operand."""
    a, w = constant(a), constant(w)
    if w.ndim != 2 or a.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {w.shape}")

    def fn(g):
        ga = g @ w.data.T if a.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = a.data.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1])
        return ga, gw

    return _node(a.data @ w.data, (a, w), "matmul", fn)


def dense(x, weights, bias) -> Tensor:
    weights, bias = constant(weights), constant(bias)
    if bias.shape != (weights.shape[-1],):
        raise ShapeError(f"dense: bias shape {bias.shape} does not match weights {weights.shape}")
    return add(matmul(x, weights), bias)


def log_softmax_rows(a) -> Tensor:
    a = constant(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    soft = np.exp(out)

    def fn(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _node(out, (a,), "log_softmax", fn)


def softmax_rows(a) -> Tensor:
    a = constant(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (a,), "softmax", fn)


# --------------------------------------------------------------------------
# convolution and pooling


def conv2d(x, kernels, bias=None) -> Tensor:
    """Same-padded cross-correlation.

    x is ``(N, H, W, Cin)``, kernels ``(k, k, Cin, Cout)`` with odd ``k``.
    Out-of-image samples read as zero.
    """
    x, kernels = constant(x), constant(kernels)
    if x.ndim != 4 or kernels.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernels, got {x.shape} and {kernels.shape}")
    k, k2, cin, cout = kernels.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {k}x{k2}")
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d: input has {x.shape[3]} channels, kernels expect {cin}")
    n, h, w, _ = x.shape
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)))
    # cols[n, i, j, di, dj, c] = xp[n, i + di, j + dj, c]
    cols = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    cols = cols.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, k * k * cin)
    kmat = kernels.data.reshape(k * k * cin, cout)
    out = (cols @ kmat).reshape(n, h, w, cout)

    parents = [x, kernels]
    if bias is not None:
        bias = constant(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
        out = out + bias.data
        parents.append(bias)

    def fn(g):
        gx = gk = gb = None
        g2 = g.reshape(n * h * w, cout)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for di in range(k):
                for dj in range(k):
                    gxp[:, di : di + h, dj : dj + w, :] += g @ kernels.data[di, dj].T
            gx = gxp[:, p : p + h, p : p + w, :]
        if kernels.requires_grad:
            gk = (cols.T @ g2).reshape(kernels.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        return (gx, gk, gb)[: len(parents)]

    return _node(out, parents, "conv2d", fn)


def maxpool2(x) -> Tensor:
    """2x2 max pooling, stride 2, ceil mode.

    The gradient goes to the first maximal element of each window in
    row-major order.
    """
    x = constant(x)
    if x.ndim != 4 or x.shape[1] < 1 or x.shape[2] < 1:
        raise ShapeError(f"maxpool2: expected (N, H, W, C) with H, W >= 1, got {x.shape}")
    n, h, w, c = x.shape
    h2, w2 = -(-h // 2), -(-w // 2)
    xp = x.data
    if (h % 2) or (w % 2):
        xp = np.pad(xp, ((0, 0), (0, 2 * h2 - h), (0, 2 * w2 - w), (0, 0)), constant_values=-np.inf)
    corners = [xp[:, di::2, dj::2, :] for di in (0, 1) for dj in (0, 1)]
    out = np.maximum(np.maximum(corners[0], corners[1]), np.maximum(corners[2], corners[3]))
    picks = []
    taken = np.zeros(out.shape, dtype=bool)
    for corner in corners:
        pick = (corner == out) & ~taken
        taken |= pick
        picks.append(pick)

    def fn(g):
        full = np.zeros((n, 2 * h2, 2 * w2, c))
        for (di, dj), pick in zip(((0, 0), (0, 1), (1, 0), (1, 1)), picks):
            full[:, di::2, dj::2, :] = g * pick
        return (full[:, :h, :w, :],)

    return _node(out, (x,), "maxpool2", fn)


# --------------------------------------------------------------------------
# recurrence


def lstm_seq(x, w_in, w_rec, bias) -> Tensor:
    """Single-direction LSTM over axis 1 with zero initial state.

    x is ``(N, T, D)``; ``w_in`` is ``(D, 4H)``, ``w_rec`` ``(H, 4H)`` and
    ``bias`` ``(4H,)`` with gate blocks ordered input, forget, cell, output.
    Returns hidden states ``(N, T, H)``.
    """
    x, w_in, w_rec, bias = (constant(t) for t in (x, w_in, w_rec, bias))
    if x.ndim != 3 or x.shape[1] < 1:
        raise ShapeError(f"lstm_seq: expected (N, T, D) with T >= 1, got {x.shape}")
    n, steps, d = x.shape
    hid = w_rec.shape[0]
    if w_in.shape != (d, 4 * hid) or w_rec.shape != (hid, 4 * hid) or bias.shape != (4 * hid,):
        raise ShapeError(
            f"lstm_seq: weight shapes {w_in.shape}, {w_rec.shape}, {bias.shape} "
            f"do not fit input dim {d} and hidden {hid}"
        )
    pre_in = x.data @ w_in.data + bias.data
    gates = np.empty((n, steps, 4 * hid))
    cells = np.empty((n, steps, hid))
    hs = np.empty((n, steps, hid))
    h = np.zeros((n, hid))
    c = np.zeros((n, hid))
    for t in range(steps):
        z = pre_in[:, t] + h @ w_rec.data
        i = _sigmoid(z[:, :hid])
        f = _sigmoid(z[:, hid : 2 * hid])
        gg = np.tanh(z[:, 2 * hid : 3 * hid])
        o = _sigmoid(z[:, 3 * hid :])
        c = f * c + i * gg
        h = o * np.tanh(c)
        gates[:, t] = np.concatenate([i, f, gg, o], axis=1)
        cells[:, t] = c
        hs[:, t] = h

    def fn(gout):
        dz_all = np.empty_like(gates)
        dw_rec = np.zeros_like(w_rec.data)
        dh_next = np.zeros((n, hid))
        dc_next = np.zeros((n, hid))
        for t in reversed(range(steps)):
            i = gates[:, t, :hid]
            f = gates[:, t, hid : 2 * hid]
            gg = gates[:, t, 2 * hid : 3 * hid]
            o = gates[:, t, 3 * hid :]
            c_t = cells[:, t]
            c_prev = cells[:, t - 1] if t > 0 else np.zeros((n, hid))
            h_prev = hs[:, t - 1] if t > 0 else np.zeros((n, hid))
            tc = np.tanh(c_t)
            dh = gout[:, t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = np.concatenate(
                [
                    dc * gg * i * (1.0 - i),
                    dc * c_prev * f * (1.0 - f),
                    dc * i * (1.0 - gg * gg),
                    dh * tc * o * (1.0 - o),
                ],
                axis=1,
            )
            dz_all[:, t] = dz
            dw_rec += h_prev.T @ dz
            dh_next = dz @ w_rec.data.T
            dc_next = dc * f
        dx = dz_all @ w_in.data.T if x.requires_grad else None
        dw_in = x.data.reshape(-1, d).T @ dz_all.reshape(-1, 4 * hid)
        db = dz_all.sum(axis=(0, 1))
        return dx, dw_in, dw_rec, db

    return _node(hs, (x, w_in, w_rec, bias), "lstm", fn)
