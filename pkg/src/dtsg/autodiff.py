"""Reverse-mode automatic differentiation over numpy arrays.

A small tape-based engine: :class:`Tensor` wraps an ndarray and records the
operation that produced it, so :meth:`Tensor.backward` can accumulate
gradients into every reachable leaf with ``requires_grad=True``.  Fused
primitives are provided for the numerically fiddly or performance-critical
pieces (layer norm, masked softmax, the LSTM recurrence) so the model code
can stay a plain composition of array expressions.

All math runs in whatever dtype the inputs carry; float64 gives gradients
accurate enough for central-finite-difference checking at eps=1e-5.
"""

from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (pure forward evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """An ndarray plus the backward closure that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=np.float64)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents = ()

    # -- array-ish conveniences -------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A view of the same data cut off from the tape."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # -- autodiff ----------------------------------------------------------
    def backward(self, grad=None):
        """Backpropagate from this tensor to all reachable leaves."""
        if grad is None:
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.grad = np.array(grad, copy=True)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other, like=self), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _accumulate(t: Tensor, g: np.ndarray):
    """Add `g` into t.grad; copies on first assignment because `g` may be
    shared (a passthrough of the child's gradient, or a view of it)."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad += g


def _accumulate_owned(t: Tensor, g: np.ndarray):
    """Like `_accumulate` for gradients the caller just computed into a
    fresh, exclusively owned array: the first assignment adopts it."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def _accumulate_unbroadcast(t: Tensor, g: np.ndarray):
    """Reduce `g` to t's shape and accumulate; the reduction result is
    owned when a reduction actually happened, shared otherwise."""
    if not t.requires_grad:
        return
    ub = _unbroadcast(g, t.data.shape)
    if ub is g:
        _accumulate(t, ub)
    else:
        _accumulate_owned(t, ub)


def _node(data: np.ndarray, parents: tuple, backward) -> Tensor:
    """Wrap an op result; record the tape only when gradients are live."""
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = parents
        out._backward = backward
        return out
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape` (reverse numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data + b.data

    def backward(g):
        _accumulate_unbroadcast(a, g)
        _accumulate_unbroadcast(b, g)

    return _node(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data - b.data

    def backward(g):
        _accumulate_unbroadcast(a, g)
        if b.requires_grad:
            _accumulate_owned(b, _unbroadcast(-g, b.data.shape))

    return _node(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate_owned(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate_owned(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out, (a, b), backward)


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accumulate_owned(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accumulate_owned(
                b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(out, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            if b.data.ndim == 1:
                ga = np.multiply.outer(g, b.data) if g.ndim else g * b.data
            else:
                ga = g @ np.swapaxes(b.data, -1, -2)
            _accumulate_owned(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            if a.data.ndim == 1:
                gb = np.multiply.outer(a.data, g) if g.ndim else a.data * g
            elif b.data.ndim == 2 and a.data.ndim > 2:
                # batched input x 2-d weight: fold the batch dims into one
                # GEMM instead of materializing a per-batch gradient stack
                k = a.data.shape[-1]
                m = g.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
            _accumulate_owned(b, _unbroadcast(gb, b.data.shape))

    return _node(out, (a, b), backward)


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------

def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)

    def backward(g):
        _accumulate_owned(x, g * out)

    return _node(out, (x,), backward)


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.log(x.data)

    def backward(g):
        _accumulate_owned(x, g / x.data)

    return _node(out, (x,), backward)


def sqrt(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)

    def backward(g):
        _accumulate_owned(x, g * (0.5 / out))

    return _node(out, (x,), backward)


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = x.data * x.data

    def backward(g):
        _accumulate_owned(x, g * (2.0 * x.data))

    return _node(out, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)

    def backward(g):
        _accumulate_owned(x, g * (1.0 - out * out))

    return _node(out, (x,), backward)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form is overflow-safe at both tails
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)

    def backward(g):
        _accumulate_owned(x, g * out * (1.0 - out))

    return _node(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)

    def backward(g):
        _accumulate_owned(x, g * (x.data > 0.0))

    return _node(out, (x,), backward)


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), evaluated without overflow; derivative is sigmoid."""
    x = as_tensor(x)
    out = np.logaddexp(0.0, x.data)

    def backward(g):
        _accumulate_owned(x, g * _sigmoid(x.data))

    return _node(out, (x,), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accumulate_owned(x, np.broadcast_to(g, x.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate_owned(x, np.broadcast_to(g, x.data.shape).copy())

    return _node(out, (x,), backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    denom = x.data.size if axis is None else x.data.shape[axis]

    def backward(g):
        if axis is None:
            _accumulate_owned(x, np.broadcast_to(g / denom, x.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate_owned(x, np.broadcast_to(g / denom, x.data.shape).copy())

    return _node(out, (x,), backward)


def amax(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; ties route their gradient to the first argmax."""
    x = as_tensor(x)
    out = x.data.max(axis=axis, keepdims=keepdims)
    idx = np.argmax(x.data, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        buf = np.zeros_like(x.data)
        np.put_along_axis(buf, np.expand_dims(idx, axis), g, axis=axis)
        _accumulate_owned(x, buf)

    return _node(out, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def backward(g):
        _accumulate(x, g.reshape(x.data.shape))

    return _node(out, (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    x = as_tensor(x)
    out = x.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(x, g.transpose(inv))

    return _node(out, (x,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, piece)

    return _node(out, tuple(tensors), backward)


def take(x: Tensor, idx) -> Tensor:
    """Basic/fancy indexing with scatter-add backward."""
    x = as_tensor(x)
    out = x.data[idx]

    def backward(g):
        buf = np.zeros_like(x.data)
        if isinstance(idx, (int, np.integer)):
            buf[idx] += g  # np.add.at is much slower for plain indices
        else:
            np.add.at(buf, idx, g)
        _accumulate_owned(x, buf)

    return _node(np.array(out, copy=True), (x,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup `table[ids]` with additive scatter into the table's grad."""
    out = table.data[ids]

    def backward(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, ids, g)
        _accumulate_owned(table, buf)

    return _node(out, (table,), backward)


# ---------------------------------------------------------------------------
# fused numerical primitives
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accumulate_owned(x, out * (g - dot))

    return _node(out, (x,), backward)


def masked_softmax(x: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax over positions where `mask` is True; False positions get
    exactly 0 weight.  Every slice along `axis` must have a valid entry.
    """
    x = as_tensor(x)
    mask = np.broadcast_to(mask, x.data.shape)
    if not mask.any(axis=axis).all():
        raise ValueError("masked_softmax: a slice has no valid positions")
    neg = np.where(mask, x.data, -np.inf)
    shifted = neg - neg.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accumulate_owned(x, out * (g - dot))

    return _node(out, (x,), backward)


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    soft = e / s
    if not keepdims:
        out = out.squeeze(axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate_owned(x, g * soft)

    return _node(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            axes = tuple(range(g.ndim - 1))
            _accumulate_owned(gain, (g * xhat).sum(axis=axes))
        if bias.requires_grad:
            axes = tuple(range(g.ndim - 1))
            _accumulate_owned(bias, g.sum(axis=axes))
        if x.requires_grad:
            gh = g * gain.data
            n = x.data.shape[-1]
            dx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            del n
            _accumulate_owned(x, dx)

    return _node(out, (x, gain, bias), backward)


def lstm_stacked(x: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor) -> Tensor:
    """K independent LSTMs advanced in lockstep: x is (K, B, T, D_in) with
    per-slot weights (K, D_in, 4H) / (K, H, 4H) / (K, 1, 4H); returns
    (K, B, T, H).  One tape node, so K recurrences cost one Python loop.
    Internally time-major so every per-step slice is contiguous."""
    x = as_tensor(x)
    X, Wx, Wh, B = x.data, w_x.data, w_h.data, b.data
    k, bsz, T, d_in = X.shape
    H = Wh.shape[-2]
    xz = np.matmul(X.reshape(k, bsz * T, d_in), Wx).reshape(k, bsz, T, 4 * H)
    xz = np.ascontiguousarray((xz + B[:, None]).transpose(2, 0, 1, 3))

    h = np.zeros((k, bsz, H), X.dtype)
    c = np.zeros((k, bsz, H), X.dtype)
    hs = np.empty((T, k, bsz, H), X.dtype)
    track = _GRAD_ENABLED and (x.requires_grad or w_x.requires_grad
                               or w_h.requires_grad or b.requires_grad)
    if track:
        gates = np.empty((T, k, bsz, 4 * H), X.dtype)
        cells = np.empty((T, k, bsz, H), X.dtype)
        tanh_c = np.empty((T, k, bsz, H), X.dtype)
        h_prev = np.empty((T, k, bsz, H), X.dtype)

    for t in range(T):
        z = xz[t] + np.matmul(h, Wh)
        sig_part = _sigmoid(z[..., : 3 * H])
        i = sig_part[..., :H]
        f = sig_part[..., H: 2 * H]
        o = sig_part[..., 2 * H:]
        g_cand = np.tanh(z[..., 3 * H:])
        if track:
            h_prev[t] = h
            cells[t] = c
            gates[t, ..., :3 * H] = sig_part
            gates[t, ..., 3 * H:] = g_cand
        c = f * c + i * g_cand
        tc = np.tanh(c)
        h = o * tc
        if track:
            tanh_c[t] = tc
        hs[t] = h

    out = np.ascontiguousarray(hs.transpose(1, 2, 0, 3))  # (K, B, T, H)
    if not track:
        return Tensor(out)

    def backward(gout):
        gout_t = gout.transpose(2, 0, 1, 3)  # time-major view
        dZ = np.empty((T, k, bsz, 4 * H), X.dtype)
        dWh = np.zeros_like(Wh)
        dh = np.zeros((k, bsz, H), X.dtype)
        dc = np.zeros((k, bsz, H), X.dtype)
        for t in range(T - 1, -1, -1):
            dh = dh + gout_t[t]
            i = gates[t, ..., :H]
            f = gates[t, ..., H: 2 * H]
            o = gates[t, ..., 2 * H: 3 * H]
            gc = gates[t, ..., 3 * H:]
            tc = tanh_c[t]
            c_prev = cells[t]
            do = dh * tc
            dc = dc + dh * o * (1.0 - tc * tc)
            di = dc * gc
            df = dc * c_prev
            dg = dc * i
            dz = dZ[t]
            dz[..., :H] = di * i * (1.0 - i)
            dz[..., H: 2 * H] = df * f * (1.0 - f)
            dz[..., 2 * H: 3 * H] = do * o * (1.0 - o)
            dz[..., 3 * H:] = dg * (1.0 - gc * gc)
            dWh += np.matmul(h_prev[t].transpose(0, 2, 1), dz)
            dh = np.matmul(dz, Wh.transpose(0, 2, 1))
            dc = dc * f
        # (T, K, B, 4H) -> (K, B*T, 4H) for the two big GEMMs
        dZ_flat = np.ascontiguousarray(
            dZ.transpose(1, 2, 0, 3)).reshape(k, bsz * T, 4 * H)
        if w_x.requires_grad:
            _accumulate_owned(
                w_x, np.matmul(X.reshape(k, bsz * T, d_in).transpose(0, 2, 1),
                               dZ_flat))
        if w_h.requires_grad:
            _accumulate_owned(w_h, dWh)
        if b.requires_grad:
            _accumulate_owned(b, dZ_flat.sum(axis=1, keepdims=True))
        if x.requires_grad:
            _accumulate_owned(
                x, np.matmul(dZ_flat, Wx.transpose(0, 2, 1)).reshape(X.shape))

    return _node(out, (x, w_x, w_h, b), backward)


def lstm(x: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor) -> Tensor:
    """Single-layer LSTM over a (B, T, D_in) sequence; returns (B, T, H).

    Hidden and cell state start at zero.  Gate order in the weight matrices
    is (input, forget, output, candidate).  The whole recurrence runs as one
    tape node with a hand-written backward pass through time.
    """
    x = as_tensor(x)
    X, Wx, Wh, B = x.data, w_x.data, w_h.data, b.data
    bsz, T, _ = X.shape
    H = Wh.shape[0]
    xz = X.reshape(bsz * T, -1) @ Wx
    xz = xz.reshape(bsz, T, 4 * H) + B

    h = np.zeros((bsz, H), X.dtype)
    c = np.zeros((bsz, H), X.dtype)
    hs = np.empty((bsz, T, H), X.dtype)
    track = _GRAD_ENABLED and (x.requires_grad or w_x.requires_grad
                               or w_h.requires_grad or b.requires_grad)
    if track:
        gates = np.empty((bsz, T, 4 * H), X.dtype)
        cells = np.empty((bsz, T, H), X.dtype)
        tanh_c = np.empty((bsz, T, H), X.dtype)
        h_prev = np.empty((bsz, T, H), X.dtype)

    for t in range(T):
        z = xz[:, t] + h @ Wh
        sig_part = _sigmoid(z[:, : 3 * H])
        i = sig_part[:, :H]
        f = sig_part[:, H: 2 * H]
        o = sig_part[:, 2 * H:]
        g_cand = np.tanh(z[:, 3 * H:])
        if track:
            h_prev[:, t] = h
            cells[:, t] = c
            gates[:, t, :3 * H] = sig_part
            gates[:, t, 3 * H:] = g_cand
        c = f * c + i * g_cand
        tc = np.tanh(c)
        h = o * tc
        if track:
            tanh_c[:, t] = tc
        hs[:, t] = h

    if not track:
        return Tensor(hs)

    def backward(gout):
        dZ = np.empty((bsz, T, 4 * H), X.dtype)
        dWh = np.zeros_like(Wh)
        dh = np.zeros((bsz, H), X.dtype)
        dc = np.zeros((bsz, H), X.dtype)
        for t in range(T - 1, -1, -1):
            dh = dh + gout[:, t]
            i = gates[:, t, :H]
            f = gates[:, t, H: 2 * H]
            o = gates[:, t, 2 * H: 3 * H]
            gc = gates[:, t, 3 * H:]
            tc = tanh_c[:, t]
            c_prev = cells[:, t]
            do = dh * tc
            dc = dc + dh * o * (1.0 - tc * tc)
            di = dc * gc
            df = dc * c_prev
            dg = dc * i
            dz = dZ[:, t]
            dz[:, :H] = di * i * (1.0 - i)
            dz[:, H: 2 * H] = df * f * (1.0 - f)
            dz[:, 2 * H: 3 * H] = do * o * (1.0 - o)
            dz[:, 3 * H:] = dg * (1.0 - gc * gc)
            dWh += h_prev[:, t].T @ dz
            dh = dz @ Wh.T
            dc = dc * f
        dZ_flat = dZ.reshape(bsz * T, 4 * H)
        if w_x.requires_grad:
            _accumulate_owned(w_x, X.reshape(bsz * T, -1).T @ dZ_flat)
        if w_h.requires_grad:
            _accumulate_owned(w_h, dWh)
        if b.requires_grad:
            _accumulate_owned(b, dZ_flat.sum(axis=0))
        if x.requires_grad:
            _accumulate_owned(x, (dZ_flat @ Wx.T).reshape(X.shape))

    return _node(hs, (x, w_x, w_h, b), backward)
