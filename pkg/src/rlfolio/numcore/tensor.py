"""Reverse-mode autodiff on a dynamically recorded tape.

Tensors wrap float64 numpy arrays. Every op that touches a tensor requiring
gradients records its parents and a backward closure; :func:`backward` walks
the recorded tape in reverse topological order. First-order gradients only.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from rlfolio.errors import ContractError, ShapeError


class Tensor:
    """A dense float64 array plus the tape bookkeeping for reverse mode."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple = (),
        backward_fn: Callable | None = None,
        op: str = "leaf",
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward_fn = backward_fn
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x) -> Tensor:
    """Wrap arrays/scalars into a constant Tensor; pass Tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(data, parents, backward_fn, op) -> Tensor:
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn, op=op)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# element-wise ops (broadcasting)
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from e

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return _make(out, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}") from e

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.shape))

    return _make(out, (a, b), bwd, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from e

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), bwd, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data / b.data
    except ValueError as e:
        raise ShapeError(f"div: {a.shape} vs {b.shape}") from e

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out, (a, b), bwd, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        if a.requires_grad:
            _accum(a, -g)

    return _make(-a.data, (a,), bwd, "neg")


# ---------------------------------------------------------------------------
# linear algebra and structure
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """numpy matmul semantics for operands of ndim 1 or 2."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim > 2 or b.ndim > 2:
        raise ShapeError(f"matmul: ndim>2 unsupported ({a.shape} @ {b.shape})")
    try:
        out = a.data @ b.data
    except ValueError as e:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}") from e

    def bwd(g):
        ad, bd = a.data, b.data
        if a.ndim == 1 and b.ndim == 1:  # dot -> scalar
            if a.requires_grad:
                _accum(a, g * bd)
            if b.requires_grad:
                _accum(b, g * ad)
        elif a.ndim == 2 and b.ndim == 2:
            if a.requires_grad:
                _accum(a, g @ bd.T)
            if b.requires_grad:
                _accum(b, ad.T @ g)
        elif a.ndim == 2 and b.ndim == 1:  # (m,n)@(n,) -> (m,)
            if a.requires_grad:
                _accum(a, np.outer(g, bd))
            if b.requires_grad:
                _accum(b, ad.T @ g)
        else:  # (n,)@(n,p) -> (p,)
            if a.requires_grad:
                _accum(a, bd @ g)
            if b.requires_grad:
                _accum(b, np.outer(ad, g))

    return _make(out, (a, b), bwd, "matmul")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {a.shape} -> {shape}") from e

    def bwd(g):
        if a.requires_grad:
            _accum(a, g.reshape(a.shape))

    return _make(out, (a,), bwd, "reshape")


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    out = np.transpose(a.data, axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        if a.requires_grad:
            _accum(a, np.transpose(g, inv))

    return _make(out, (a,), bwd, "transpose")


def getitem(a, idx) -> Tensor:
    """Static indexing/slicing; gradient scatters back into a zero tensor."""
    a = as_tensor(a)
    out = a.data[idx]

    def bwd(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            _accum(a, buf)

    return _make(out, (a,), bwd, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {[t.shape for t in ts]}") from e
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accum(t, g[tuple(sl)])

    return _make(out, tuple(ts), bwd, "concat")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if not a.requires_grad:
            return
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg, a.shape).copy())

    return _make(out, (a,), bwd, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    denom = a.size if axis is None else a.shape[axis]

    def bwd(g):
        if not a.requires_grad:
            return
        if axis is None:
            _accum(a, np.broadcast_to(g / denom, a.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg / denom, a.shape).copy())

    return _make(out, (a,), bwd, "mean")


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * out * (1.0 - out))

    return _make(out, (a,), bwd, "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * (1.0 - out * out))

    return _make(out, (a,), bwd, "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * (a.data > 0.0))

    return _make(out, (a,), bwd, "relu")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * out)

    return _make(out, (a,), bwd, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g / a.data)

    return _make(out, (a,), bwd, "log")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        if a.requires_grad:
            dot = (g * out).sum(axis=axis, keepdims=True)
            _accum(a, out * (g - dot))

    return _make(out, (a,), bwd, "softmax")


# ---------------------------------------------------------------------------
# dilated causal convolution and the LSTM cell
# ---------------------------------------------------------------------------


def conv1d_causal(x, w, dilation: int = 1) -> Tensor:
    """1-D dilated causal convolution.

    x: (B, C_in, T), w: (C_out, C_in, K) -> (B, C_out, T). Output at time t
    depends only on inputs at times t - (K-1)*dilation .. t (left zero pad).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d_causal: x {x.shape}, w {w.shape}")
    B, C_in, T = x.shape
    C_out, _, K = w.shape
    pad = (K - 1) * dilation
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, 0)))
    out = np.zeros((B, C_out, T))
    for k in range(K):
        out += np.einsum("oc,bct->bot", w.data[:, :, k], xp[:, :, k * dilation : k * dilation + T])

    def bwd(g):
        if w.requires_grad:
            gw = np.zeros_like(w.data)
            for k in range(K):
                gw[:, :, k] = np.einsum(
                    "bot,bct->oc", g, xp[:, :, k * dilation : k * dilation + T]
                )
            _accum(w, gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for k in range(K):
                gxp[:, :, k * dilation : k * dilation + T] += np.einsum(
                    "oc,bot->bct", w.data[:, :, k], g
                )
            _accum(x, gxp[:, :, pad:])

    return _make(out, (x, w), bwd, "conv1d_causal")


def lstm_cell(x, h, c, w_ih, w_hh, b):
    """One LSTM step composed from the primitives above.

    x: (In,) or (B, In); h, c: (H,) or (B, H). Gate order: input, forget,
    cell, output. Returns (h_next, c_next). Zero weights and zero bias give
    a zero hidden state for zero (h, c).
    """
    x, h, c = as_tensor(x), as_tensor(h), as_tensor(c)
    H = h.shape[-1]
    if x.ndim == 1:
        gates = add(add(matmul(w_ih, x), matmul(w_hh, h)), b)
        sl = lambda j: getitem(gates, slice(j * H, (j + 1) * H))  # noqa: E731
    else:
        gates = add(add(matmul(x, transpose(w_ih, (1, 0))), matmul(h, transpose(w_hh, (1, 0)))), b)
        sl = lambda j: getitem(gates, (slice(None), slice(j * H, (j + 1) * H)))  # noqa: E731
    i = sigmoid(sl(0))
    f = sigmoid(sl(1))
    g = tanh(sl(2))
    o = sigmoid(sl(3))
    c_next = add(mul(f, c), mul(i, g))
    h_next = mul(o, tanh(c_next))
    return h_next, c_next


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every reachable tensor."""
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)
