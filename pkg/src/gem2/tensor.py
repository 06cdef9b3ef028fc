"""Dense numpy-backed tensors with reverse-mode differentiation.

Every primitive returns a new :class:`Tensor` whose array is read-only. When
any input requires a gradient (and grad mode is on) the output remembers its
parents and a backward rule; :func:`backward` walks that record in reverse
topological order and then releases it, so one forward pass supports exactly
one backward pass.
"""

from __future__ import annotations

import contextlib
import string
import threading

import numpy as np

from .errors import ConfigError, DegenerateSliceError, NumericError, ShapeError, TapeError

LAYER_NORM_EPS = 1e-5

_state = threading.local()


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


def default_dtype():
    return getattr(_state, "dtype", np.float64)


def set_default_dtype(dtype):
    """Select float64 (default) or float32 for tensors created on this thread."""
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ConfigError(f"unsupported dtype {dtype}")
    _state.dtype = dtype.type


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def precision(dtype):
    prev = default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


def _frozen(arr):
    view = arr.view()
    view.flags.writeable = False
    return view


def _check_finite(arr, what):
    # a NaN/Inf anywhere makes the sum non-finite; the exact test rules out overflow of the sum itself
    if not np.isfinite(np.add.reduce(arr, axis=None)) and not np.isfinite(arr).all():
        raise NumericError(f"non-finite value produced by {what}")


class Tensor:
    __slots__ = ("_data", "requires_grad", "grad", "name", "_parents", "_backward", "_released")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        self._data = _frozen(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._released = False

    @property
    def data(self):
        return self._data

    @property
    def shape(self):
        return self._data.shape

    @property
    def ndim(self):
        return self._data.ndim

    @property
    def size(self):
        return self._data.size

    def numpy(self):
        return self._data

    def item(self):
        return float(self._data.reshape(-1)[0]) if self._data.size == 1 else self._data.item()

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"

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
        return mul(self, -1.0)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """A trainable leaf. Its array may be swapped wholesale by an optimizer."""

    __slots__ = ()

    def __init__(self, data, name=None):
        super().__init__(np.array(data, dtype=default_dtype()), requires_grad=True, name=name)

    def assign(self, value):
        value = np.asarray(value, dtype=self._data.dtype)
        if value.shape != self.shape:
            raise ShapeError(f"cannot assign shape {value.shape} to parameter of shape {self.shape}")
        self._data = _frozen(value.copy())


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out, parents, backward_fn, what):
    _check_finite(out, what)
    t = Tensor(out, dtype=out.dtype)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward_fn
    return t


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --- elementwise ---------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), back, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from exc

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), back, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), back, "mul")


def abs_(x):
    out = np.abs(x.data)

    def back(g):
        return (g * np.sign(x.data),)

    return _make(out, (x,), back, "abs")


def tanh(x):
    out = np.tanh(x.data)

    def back(g):
        return (g * (1.0 - out * out),)

    return _make(out, (x,), back, "tanh")


def relu(x):
    out = np.maximum(x.data, 0.0)

    def back(g):
        return (g * (x.data > 0),)

    return _make(out, (x,), back, "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x):
    """Tanh-approximated GELU."""
    v = x.data
    v2 = v * v
    th = np.tanh(_GELU_C * v * (1.0 + 0.044715 * v2))
    out = 0.5 * v * (1.0 + th)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * dinner),)

    return _make(out, (x,), back, "gelu")


def softplus(x):
    v = x.data
    out = np.logaddexp(0.0, v)

    def back(g):
        return (g / (1.0 + np.exp(-v)),)

    return _make(out, (x,), back, "softplus")


def activation(x, kind):
    if kind == "gelu":
        return gelu(x)
    if kind == "relu":
        return relu(x)
    if kind == "tanh":
        return tanh(x)
    raise ConfigError(f"unknown activation {kind!r}")


# --- shape ---------------------------------------------------------------------------

def reshape(x, shape):
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from exc

    def back(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), back, "reshape")


def moveaxis(x, source, destination):
    out = np.moveaxis(x.data, source, destination)

    def back(g):
        return (np.moveaxis(g, destination, source),)

    return _make(out, (x,), back, "moveaxis")


def permute(x, axes):
    axes = tuple(axes)
    out = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def back(g):
        return (np.transpose(g, inverse),)

    return _make(out, (x,), back, "permute")


def expand_dims(x, axis):
    out = np.expand_dims(x.data, axis)

    def back(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), back, "expand_dims")


def sum_(x, axis=None, keepdims=False):
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _make(np.asarray(out), (x,), back, "sum")


def mean(x, axis=None):
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis), 1.0 / n)


# --- contractions --------------------------------------------------------------------

def _parse_einsum(subscripts, operands):
    lhs, out = subscripts.replace(" ", "").split("->")
    ins = lhs.split(",")
    if len(ins) != len(operands):
        raise ShapeError(f"einsum: {len(ins)} subscripts for {len(operands)} operands")
    ell = [op.shape[: op.ndim - (len(s) - 3)] for s, op in zip(ins, operands) if "..." in s]
    if ell and any(e != ell[0] for e in ell):
        raise ShapeError(f"einsum: ellipsis dimensions must agree, got {ell}")
    free = [c for c in string.ascii_letters if c not in subscripts]
    rep = "".join(free[: len(ell[0])]) if ell else ""
    ins = [s.replace("...", rep) for s in ins]
    out = out.replace("...", rep)
    for s in ins + [out]:
        if len(set(s)) != len(s):
            raise ShapeError(f"einsum: repeated index in {s!r} is not supported")
    return ins, out


def einsum(subscripts, *operands):
    """Differentiable ``np.einsum`` (no repeated indices within one operand)."""
    operands = [as_tensor(o) for o in operands]
    ins, outs = _parse_einsum(subscripts, operands)
    spec = ",".join(ins) + "->" + outs
    try:
        out = np.einsum(spec, *[o.data for o in operands])
    except ValueError as exc:
        shapes = [o.shape for o in operands]
        raise ShapeError(f"einsum {subscripts!r}: incompatible shapes {shapes}") from exc

    def back(g):
        grads = []
        for i, (s, op) in enumerate(zip(ins, operands)):
            if not op.requires_grad:
                grads.append(None)
                continue
            others = [(ins[j], operands[j].data) for j in range(len(operands)) if j != i]
            seen = set(outs).union(*[set(t) for t, _ in others]) if others else set(outs)
            kept = "".join(c for c in s if c in seen)
            terms = ",".join([outs] + [t for t, _ in others]) + "->" + kept
            gi = np.einsum(terms, g, *[d for _, d in others])
            if kept != s:
                shape = [op.shape[s.index(c)] if c in kept else 1 for c in s]
                order = [kept.index(c) for c in s if c in kept]
                gi = np.broadcast_to(np.transpose(gi, order).reshape(shape), op.shape)
            grads.append(gi)
        return tuple(grads)

    return _make(out, operands, back, "einsum")


def matmul(a, b):
    """Batched matrix product over the last two axes, with broadcasting batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: batch axes of {a.shape} and {b.shape} do not broadcast") from exc

    def back(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), back, "matmul")


def linear(x, weight, bias=None):
    """``y[..., j] = sum_i x[..., i] * weight[i, j] + bias[j]``."""
    x = as_tensor(x)
    if weight.ndim != 2 or x.shape[-1:] != weight.shape[:1]:
        raise ShapeError(f"linear: input shape {x.shape} incompatible with weight shape {weight.shape}")
    if bias is not None and bias.shape != weight.shape[1:]:
        raise ShapeError(f"linear: bias shape {bias.shape} does not match weight shape {weight.shape}")
    c_in, c_out = weight.shape
    flat = x.data.reshape(-1, c_in)
    out = flat @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(x.shape[:-1] + (c_out,))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        g2 = g.reshape(-1, c_out)
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = flat.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, parents, back, "linear")


# --- normalisation, attention, pooling --------------------------------------------

def layer_norm(x, gain, offset, eps=LAYER_NORM_EPS):
    if x.shape[-1:] != gain.shape or gain.shape != offset.shape:
        raise ShapeError(f"layer_norm: input {x.shape}, gain {gain.shape}, offset {offset.shape}")
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    centered = v - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    out = xhat * gain.data + offset.data

    def back(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gain.data
        gx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gain, offset), back, "layer_norm")


def softmax_axis(x, axis=-1, mask=None):
    """Max-stabilised softmax; entries where ``mask`` is False come out exactly 0."""
    x = as_tensor(x)
    v = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        try:
            full = np.broadcast_to(mask, v.shape)
        except ValueError as exc:
            raise ShapeError(f"softmax_axis: mask {mask.shape} not broadcastable to {v.shape}") from exc
        if not np.all(full.any(axis=axis)):
            raise DegenerateSliceError("softmax_axis: a slice has every entry masked")
        v = np.where(full, v, -np.inf)
    shifted = v - v.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), back, "softmax_axis")


def dropout(x, p, training, rng_seed=0):
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = np.random.default_rng(rng_seed).random(x.shape) >= p
    scale = keep / (1.0 - p)
    out = x.data * scale

    def back(g):
        return (g * scale,)

    return _make(out, (x,), back, "dropout")


def mean_pool_axis(x, axis=0, mask=None):
    """Mean over ``axis`` counting only positions where ``mask`` (1-D, len = x.shape[axis]) is True."""
    x = as_tensor(x)
    axis = axis % x.ndim
    n = x.shape[axis]
    m = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    if m.shape != (n,):
        raise ShapeError(f"mean_pool_axis: mask of length {m.size} for axis of length {n}")
    count = int(m.sum())
    if count == 0:
        raise DegenerateSliceError("mean_pool_axis: no unmasked positions")
    shape = [1] * x.ndim
    shape[axis] = n
    w = (m / count).astype(x.data.dtype).reshape(shape)
    if mask is None:
        out = x.data.mean(axis=axis)
    else:
        out = (x.data * w).sum(axis=axis)

    def back(g):
        return (np.expand_dims(g, axis) * w,)

    return _make(out, (x,), back, "mean_pool_axis")


# --- losses --------------------------------------------------------------------------

def l1_loss(pred, target):
    return mean(abs_(sub(pred, target)))


def bce_with_logits(logit, target):
    """Binary cross entropy on a logit: softplus(z) - y*z, averaged."""
    target = as_tensor(target)
    return mean(sub(softplus(logit), mul(logit, target)))


# --- reverse pass --------------------------------------------------------------------

def _topological(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, inputs=None):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every requires_grad leaf.

    The recorded graph is released afterwards; a second call on the same
    graph raises :class:`TapeError`. When ``inputs`` is given, returns their
    gradients in order (zeros for inputs the loss does not reach).
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._released:
        raise TapeError("backward already ran on this graph; run a new forward pass")
    _check_finite(loss.data, "loss")
    if not loss.requires_grad:
        raise TapeError("loss does not depend on any tensor that requires grad")
    order = _topological(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if node._released:
                raise TapeError("graph was released by an earlier backward call")
            if g is not None and node.requires_grad:
                # non-finite values propagate to the leaves, so checking here is enough
                _check_finite(g, f"backward into {node.name or 'leaf'}")
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._released = True
    loss._released = True
    if inputs is not None:
        return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    return None
