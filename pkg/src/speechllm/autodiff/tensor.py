"""Dense numpy-backed tensors with reverse-mode automatic differentiation.

Every op builds a node holding its parents and a closure mapping the output
gradient to parent gradients. ``backward`` walks the graph in reverse
topological order. Graph construction is skipped entirely when no input
requires a gradient or inside :func:`no_grad`, which keeps frozen-model
evaluation cheap.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from speechllm.errors import ContractError

_state = {"grad": True, "dtype": np.dtype(np.float32)}


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def grad_enabled() -> bool:
    return _state["grad"]


def get_default_dtype() -> np.dtype:
    return _state["dtype"]


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the floating width used for new tensors."""
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = prev


def _as_array(x, dtype=None):
    if isinstance(x, np.ndarray):
        if dtype is not None and x.dtype != dtype:
            return x.astype(dtype)
        if x.dtype.kind != "f":
            return x.astype(dtype or _state["dtype"])
        return x
    return np.asarray(x, dtype=dtype or _state["dtype"])


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

    # -- basic properties -------------------------------------------------
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

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def zero_grad(self):
        self.grad = None

    # -- graph construction ----------------------------------------------
    @staticmethod
    def _make(data, parents, backward):
        out = Tensor(data)
        if _state["grad"] and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    def _lift(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(_as_array(other, self.data.dtype))

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other):
        other = self._lift(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._make(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __sub__(self, other):
        other = self._lift(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._make(a.data - b.data, (a, b), backward)

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        other = self._lift(other)
        a, b = self, other

        def backward(g):
            ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
            return ga, gb

        return Tensor._make(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        a, b = self, other

        def backward(g):
            ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
            return ga, gb

        return Tensor._make(a.data / b.data, (a, b), backward)

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p):
        if isinstance(p, Tensor):
            raise ContractError("only constant exponents are supported")
        x = self

        def backward(g):
            return (g * p * x.data ** (p - 1),)

        return Tensor._make(x.data**p, (x,), backward)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def __rmatmul__(self, other):
        return matmul(self._lift(other), self)

    def __getitem__(self, idx):
        x = self
        out = x.data[idx]
        advanced = _is_advanced(idx)

        def backward(g):
            gx = np.zeros_like(x.data)
            if advanced:
                np.add.at(gx, idx, g)
            else:
                gx[idx] = g
            return (gx,)

        return Tensor._make(out, (x,), backward)

    # -- reductions and shape --------------------------------------------
    def sum(self, axis=None, keepdims=False):
        x = self

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape).copy(),)

        return Tensor._make(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = math.prod(self.shape[a] for a in axes)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        x = self
        return Tensor._make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        x = self
        return Tensor._make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(axes)

    @property
    def T(self):
        return self.transpose()

    # -- elementwise -----------------------------------------------------
    def exp(self):
        x = self
        out = np.exp(x.data)
        return Tensor._make(out, (x,), lambda g: (g * out,))

    def log(self):
        x = self
        return Tensor._make(np.log(x.data), (x,), lambda g: (g / x.data,))

    def tanh(self):
        x = self
        out = np.tanh(x.data)
        return Tensor._make(out, (x,), lambda g: (g * (1.0 - out * out),))

    def relu(self):
        x = self
        mask = x.data > 0
        return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,))

    def gelu(self):
        return gelu(self)

    def softmax(self, axis=-1):
        return softmax(self, axis)

    def log_softmax(self, axis=-1):
        return log_softmax(self, axis)

    # -- differentiation -------------------------------------------------
    def backward(self, grad=None):
        backward(self, grad=grad)


def _is_advanced(idx):
    if isinstance(idx, (np.ndarray, list)):
        return True
    if isinstance(idx, tuple):
        return any(isinstance(i, (np.ndarray, list)) for i in idx)
    return False


def tensor(data, requires_grad=False, dtype=None, name=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def _toposort(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss, inputs=None, grad=None):
    """Reverse-mode sweep from ``loss``.

    Leaf tensors with ``requires_grad`` accumulate into ``.grad``. When
    ``inputs`` is given, their gradients are returned, zero-filled for
    tensors the loss does not depend on.
    """
    if grad is None:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    grads = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    if loss.requires_grad:
        for node in reversed(_toposort(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    if inputs is None:
        return None
    return [np.zeros_like(t.data) if t.grad is None else t.grad for t in inputs]


# ---------------------------------------------------------------------------
# functional ops


def matmul(a, b):
    def backward(g):
        ga = gb = None
        if a.requires_grad:
            if b.ndim == 1:
                ga = _unbroadcast(np.multiply.outer(g, b.data), a.shape)
            else:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            elif b.ndim == 1:
                gb = _unbroadcast((a.data * g[..., None]), a.shape).reshape(-1, b.shape[0]).sum(0)
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor._make(a.data @ b.data, (a, b), backward)


def concat(tensors, axis=0):
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def stack(tensors, axis=0):
    return concat([t.reshape(t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis=axis)


def take_rows(table, ids):
    """Embedding lookup: ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return Tensor._make(out, (table,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """Tanh-approximated GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * (xd * xd * xd))
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return Tensor._make(out, (x,), backward)


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._make(s, (x,), backward)


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalise over the last axis, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data
    n = xd.shape[-1]

    def backward(g):
        gx = ggain = gbias = None
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, n).sum(0)
        if bias.requires_grad:
            gbias = g.reshape(-1, n).sum(0)
        if x.requires_grad:
            gh = g * gain.data
            gx = rstd * (gh - gh.mean(-1, keepdims=True) - xhat * (gh * xhat).mean(-1, keepdims=True))
        return gx, ggain, gbias

    return Tensor._make(out, (x, gain, bias), backward)


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer ``targets`` under row-wise softmax.

    ``logits`` is (M, V), ``targets`` is (M,).
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ContractError(f"cross_entropy shapes {logits.shape} vs {targets.shape}")
    m = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(m)
    loss = -logp[rows, targets].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (p * (g / m),)

    return Tensor._make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def conv1d(x, weight, bias=None, stride=1, padding=0):
    """Temporal convolution over time-major input.

    x: (B, T, C_in), weight: (K, C_in, C_out), bias: (C_out,).
    Returns (B, T_out, C_out) with T_out = floor((T + 2*padding - K)/stride) + 1.
    """
    B, T, cin = x.shape
    K, wcin, cout = weight.shape
    if wcin != cin:
        raise ContractError(f"conv1d expects {wcin} input channels, got {cin}")
    tp = T + 2 * padding
    t_out = (tp - K) // stride + 1
    if t_out < 1:
        raise ContractError(f"conv1d input of length {T} too short for kernel {K}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (0, 0))) if padding else x.data
    s0, s1, s2 = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp, shape=(B, t_out, K, cin), strides=(s0, s1 * stride, s1, s2), writeable=False
    )
    flat = cols.reshape(B * t_out, K * cin)
    w2 = weight.data.reshape(K * cin, cout)
    out = (flat @ w2).reshape(B, t_out, cout)
    parents = (x, weight) if bias is None else (x, weight, bias)
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(B * t_out, cout)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (flat.T @ g2).reshape(K, cin, cout)
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(B, t_out, K, cin)
            gxp = np.zeros((B, tp, cin), dtype=x.dtype)
            end = stride * (t_out - 1) + 1
            for k in range(K):
                gxp[:, k : k + end : stride, :] += gcols[:, :, k, :]
            gx = gxp[:, padding : padding + T, :] if padding else gxp
        if bias is not None and bias.requires_grad:
            gb = g2.sum(0)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return Tensor._make(out, parents, backward)


def custom_op(data, parents, backward_fn):
    """Register an externally computed op whose backward is ``backward_fn(g)``."""
    return Tensor._make(data, tuple(parents), backward_fn)
