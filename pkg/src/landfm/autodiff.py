"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable op returns a new ``Tensor`` whose ``_grad_fn`` maps the
upstream gradient to one gradient per input.  The graph is implicit in the
``_parents`` links; a ``Tape`` can additionally record execution order so
``backward`` walks exactly the recorded ops in reverse.

Leaf tensors with ``requires_grad`` accumulate into ``.grad`` across calls
until ``zero_grad`` (multi-term losses rely on this).
"""

from __future__ import annotations

import contextlib
import math
from collections import OrderedDict

import numpy as np
from scipy.special import ndtr

_SQRT_2PI = math.sqrt(2.0 * math.pi)

_grad_enabled = True
_tape_stack = []


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_op", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._grad_fn = None
        self._op = None
        self.name = name

    # -- metadata ---------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._grad_fn is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _fail_item(self)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar ---------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _fail_item(t):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


# -- recording ------------------------------------------------------------

class Tape:
    """Ordered record of differentiable ops executed inside ``with tape:``."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def ops(self):
        return [n._op for n in self.nodes]


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


def _result(data, parents, grad_fn, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
        out._op = op
        if _tape_stack:
            _tape_stack[-1].nodes.append(out)
    else:
        out.requires_grad = False
        out._parents = ()
        out._grad_fn = None
        out._op = None
    return out


def _check_finite(data, op):
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    return data


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shapes(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise binary -----------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "add")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), grad_fn, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "sub")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "mul")

    def grad_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), grad_fn, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _check_finite(a.data / b.data, "div")

    def grad_fn(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), grad_fn, "div")


def minimum(a, b):
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "minimum")
    pick_a = a.data <= b.data

    def grad_fn(g):
        return (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                _unbroadcast(np.where(pick_a, 0.0, g), b.shape))

    return _result(np.where(pick_a, a.data, b.data), (a, b), grad_fn, "minimum")


def maximum(a, b):
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "maximum")
    pick_a = a.data >= b.data

    def grad_fn(g):
        return (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                _unbroadcast(np.where(pick_a, 0.0, g), b.shape))

    return _result(np.where(pick_a, a.data, b.data), (a, b), grad_fn, "maximum")


def where(cond, a, b):
    """Select ``a`` where ``cond`` else ``b``; ``cond`` is a constant mask."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    shape = np.broadcast_shapes(cond.shape, a.shape, b.shape)

    def grad_fn(g):
        return (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                _unbroadcast(np.where(cond, 0.0, g), b.shape))

    out = np.where(cond, a.data, b.data)
    if out.shape != shape:
        out = np.broadcast_to(out, shape).copy()
    return _result(out, (a, b), grad_fn, "where")


# -- elementwise unary ------------------------------------------------------

def neg(x):
    x = as_tensor(x)
    return _result(-x.data, (x,), lambda g: (-g,), "neg")


def power(x, exponent):
    x = as_tensor(x)
    p = float(exponent)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _check_finite(np.power(x.data, p), "power")

    def grad_fn(g):
        return (g * p * np.power(x.data, p - 1.0),)

    return _result(out, (x,), grad_fn, "power")


def exp(x):
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = _check_finite(np.exp(x.data), "exp")
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _check_finite(np.log(x.data), "log")
    return _result(out, (x,), lambda g: (g / x.data,), "log")


def sqrt(x):
    x = as_tensor(x)
    with np.errstate(invalid="ignore"):
        out = _check_finite(np.sqrt(x.data), "sqrt")

    def grad_fn(g):
        with np.errstate(divide="ignore"):
            return (_check_finite(g * 0.5 / out, "sqrt backward"),)

    return _result(out, (x,), grad_fn, "sqrt")


def absolute(x):
    x = as_tensor(x)
    return _result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid_np(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x):
    x = as_tensor(x)
    out = _sigmoid_np(x.data)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def softplus(x, scale=1.0):
    """``scale * log(1 + exp(x / scale))``; tends to ``max(x, 0)`` as scale -> 0."""
    x = as_tensor(x)
    s = float(scale)
    z = x.data / s
    out = s * (np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z))))
    slope = _sigmoid_np(z)
    return _result(out, (x,), lambda g: (g * slope,), "softplus")


def gelu(x):
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF."""
    x = as_tensor(x)
    cdf = ndtr(x.data)
    out = x.data * cdf

    def grad_fn(g):
        pdf = np.exp(-0.5 * x.data * x.data) / _SQRT_2PI
        return (g * (cdf + x.data * pdf),)

    return _result(out, (x,), grad_fn, "gelu")


def dropout(x, rate, rng, training=True):
    x = as_tensor(x)
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# -- reductions and shape ops -----------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out, dtype=np.float64), (x,), grad_fn, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    n = 1
    for a in axes:
        n *= x.shape[a]
    return mul(tsum(x, axes, keepdims), 1.0 / n)


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(x, a, b):
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, tuple(axes))


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(x, index):
    x = as_tensor(x)
    out = x.data[index]
    basic = _is_basic_index(index)

    def grad_fn(g):
        full = np.zeros(x.shape)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out, dtype=np.float64), (x,), grad_fn, "slice")


slice_ = getitem


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def grad_fn(g):
        out = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(sl)])
        return tuple(out)

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), grad_fn, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mismatched shapes {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim

    def grad_fn(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return _result(out, tuple(tensors), grad_fn, "stack")


def pad(x, widths):
    """Zero padding; ``widths`` as in ``np.pad``."""
    x = as_tensor(x)
    widths = [tuple(w) for w in widths]
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, x.shape))
    return _result(np.pad(x.data, widths), (x,), lambda g: (g[sl],), "pad")


# -- linear algebra -----------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError(f"matmul: scalar operands not allowed, got {a.shape} and {b.shape}")
    ka = a.shape[-1]
    kb = b.shape[-2] if b.ndim >= 2 else b.shape[0]
    if ka != kb:
        raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}") from None

    def grad_fn(g):
        ad = a.data[None, :] if a.ndim == 1 else a.data
        bd = b.data[:, None] if b.ndim == 1 else b.data
        gg = g
        if a.ndim == 1:
            gg = np.expand_dims(gg, -2)
        if b.ndim == 1:
            gg = np.expand_dims(gg, -1)
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(gg, np.swapaxes(bd, -1, -2))
            ga = _unbroadcast(ga, ad.shape).reshape(a.shape)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(ad, -1, -2), gg)
            gb = _unbroadcast(gb, bd.shape).reshape(b.shape)
        return ga, gb

    return _result(out, (a, b), grad_fn, "matmul")


def einsum(subscripts, *operands):
    """Differentiable einsum for explicit-output subscripts without repeated
    indices inside one operand."""
    operands = [as_tensor(o) for o in operands]
    lhs, rhs = subscripts.replace(" ", "").split("->")
    ins = lhs.split(",")
    if len(ins) != len(operands):
        raise ShapeError(f"einsum: {len(ins)} subscripts for {len(operands)} operands")
    try:
        out = np.einsum(subscripts, *[o.data for o in operands], optimize=True)
    except ValueError as exc:
        shapes = [o.shape for o in operands]
        raise ShapeError(f"einsum {subscripts}: incompatible shapes {shapes}") from exc
    dims = {}
    for sub_, o in zip(ins, operands):
        dims.update(zip(sub_, o.shape))

    def grad_fn(g):
        grads = []
        for i, (sub_, o) in enumerate(zip(ins, operands)):
            if not o.requires_grad:
                grads.append(None)
                continue
            others = [s for j, s in enumerate(ins) if j != i]
            avail = set(rhs).union(*others) if others else set(rhs)
            kept = "".join(c for c in sub_ if c in avail)
            expr = ",".join([rhs] + others) + "->" + kept
            gi = np.einsum(expr, g, *[operands[j].data for j in range(len(operands)) if j != i],
                           optimize=True)
            if kept != sub_:
                # indices summed only inside this operand: gradient is constant along them
                for pos, c in enumerate(sub_):
                    if c not in avail:
                        gi = np.expand_dims(gi, pos)
                gi = np.broadcast_to(gi, o.shape).copy()
            grads.append(gi)
        return tuple(grads)

    return _result(np.asarray(out, dtype=np.float64), tuple(operands), grad_fn, "einsum")


# -- normalisation and attention helpers --------------------------------------

def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), grad_fn, "softmax")


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalise over the last axis with population variance, then scale/shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs last axis {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    if eps == 0.0 and np.any(var == 0.0):
        raise FloatingPointError("layer_norm: zero-variance row with eps=0")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def grad_fn(g):
        gx = gg = gb = None
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, n).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, n).sum(axis=0)
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _result(out, (x, gain, bias), grad_fn, "layer_norm")


def lstm(x, w_ih, w_hh, b, reverse=False):
    """Single-direction LSTM over ``x`` of shape (B, T, I); returns (B, T, H).

    Gate layout along the 4H axis is input, forget, cell, output.  Initial
    hidden and cell states are zero.  Backward is explicit BPTT.
    """
    x, w_ih, w_hh, b = as_tensor(x), as_tensor(w_ih), as_tensor(w_hh), as_tensor(b)
    B, T, I = x.shape
    H = w_hh.shape[0]
    if w_ih.shape != (I, 4 * H) or w_hh.shape != (H, 4 * H) or b.shape != (4 * H,):
        raise ShapeError(f"lstm: input {x.shape}, w_ih {w_ih.shape}, w_hh {w_hh.shape}, b {b.shape}")
    steps = range(T - 1, -1, -1) if reverse else range(T)
    xw = x.data @ w_ih.data + b.data
    hs = np.zeros((B, T, H))
    cache = {}
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    for t in steps:
        z = xw[:, t] + h @ w_hh.data
        i = _sigmoid_np(z[:, :H])
        f = _sigmoid_np(z[:, H:2 * H])
        gg = np.tanh(z[:, 2 * H:3 * H])
        o = _sigmoid_np(z[:, 3 * H:])
        c_prev, h_prev = c, h
        c = f * c_prev + i * gg
        tc = np.tanh(c)
        h = o * tc
        hs[:, t] = h
        cache[t] = (i, f, gg, o, c_prev, h_prev, tc)

    def grad_fn(gout):
        dxw = np.zeros((B, T, 4 * H))
        dw_hh = np.zeros_like(w_hh.data)
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in reversed(list(steps)):
            i, f, gg, o, c_prev, h_prev, tc = cache[t]
            dh = gout[:, t] + dh_next
            do = dh * tc
            dc = dh * o * (1.0 - tc * tc) + dc_next
            di = dc * gg
            dg = dc * i
            df = dc * c_prev
            dz = np.concatenate([di * i * (1 - i), df * f * (1 - f),
                                 dg * (1 - gg * gg), do * o * (1 - o)], axis=1)
            dxw[:, t] = dz
            dw_hh += h_prev.T @ dz
            dh_next = dz @ w_hh.data.T
            dc_next = dc * f
        flat = dxw.reshape(-1, 4 * H)
        gx = (dxw @ w_ih.data.T) if x.requires_grad else None
        gw = (x.data.reshape(-1, I).T @ flat) if w_ih.requires_grad else None
        gb = flat.sum(axis=0) if b.requires_grad else None
        return gx, gw, dw_hh, gb

    return _result(hs, (x, w_ih, w_hh, b), grad_fn, "lstm")


# -- backward -----------------------------------------------------------------

def _topo_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
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
            if p._grad_fn is not None and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, tape=None):
    """Populate ``.grad`` on every leaf that ``loss`` depends on.

    Gradients accumulate into existing ``.grad`` buffers.  With a ``tape`` the
    recorded ops are replayed in reverse; otherwise the graph reachable from
    ``loss`` is sorted topologically.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.data)):
        raise FloatingPointError(f"backward on non-finite loss {float(loss.data.reshape(-1)[0])}")
    if not loss.requires_grad:
        return
    if loss.is_leaf:
        g = np.ones(loss.shape)
        loss.grad = g if loss.grad is None else loss.grad + g
        return
    if tape is not None:
        try:
            end = next(k for k in range(len(tape.nodes) - 1, -1, -1) if tape.nodes[k] is loss)
        except StopIteration:
            raise ValueError("loss was not recorded on the given tape") from None
        order = tape.nodes[: end + 1]
    else:
        order = _topo_order(loss)
    grads = {id(loss): np.ones(loss.shape)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        pgrads = node._grad_fn(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if p._grad_fn is None:
                if pg.shape != p.shape:
                    pg = pg.reshape(p.shape)
                p.grad = pg.copy() if p.grad is None else p.grad + pg
            else:
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


# -- parameter containers and optimisers ---------------------------------------

class ParamStore:
    """Named parameters partitioned into groups (the prefix before the first
    dot) with per-group freeze flags."""

    def __init__(self):
        self._params = OrderedDict()
        self.frozen = set()

    def add(self, name, value):
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.name = name
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params.items())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def tensors(self):
        return list(self._params.values())

    @staticmethod
    def group_of(name):
        return name.split(".", 1)[0]

    def groups(self):
        seen = []
        for n in self._params:
            g = self.group_of(n)
            if g not in seen:
                seen.append(g)
        return seen

    def freeze(self, *groups):
        unknown = set(groups) - set(self.groups())
        if unknown:
            raise KeyError(f"unknown parameter groups {sorted(unknown)}")
        self.frozen.update(groups)

    def unfreeze(self, *groups):
        self.frozen.difference_update(groups)

    def is_frozen(self, name):
        return self.group_of(name) in self.frozen

    def trainable(self):
        return [(n, t) for n, t in self._params.items() if not self.is_frozen(n)]

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def state_dict(self):
        return OrderedDict((n, t.data.copy()) for n, t in self._params.items())

    def load_state_dict(self, state, strict=True):
        if strict:
            missing = set(self._params) - set(state)
            extra = set(state) - set(self._params)
            if missing or extra:
                raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for n, v in state.items():
            if n not in self._params:
                continue
            v = np.asarray(v, dtype=np.float64)
            if v.shape != self._params[n].shape:
                raise ShapeError(f"parameter {n!r}: stored {v.shape} vs model {self._params[n].shape}")
            self._params[n].data = v.copy()

    def group_bytes(self, groups=None):
        """Raw parameter bytes for the given groups (all when None), name-ordered."""
        chunks = []
        for n, t in self._params.items():
            if groups is None or self.group_of(n) in groups:
                chunks.append(n.encode())
                chunks.append(np.ascontiguousarray(t.data).tobytes())
        return b"".join(chunks)


def _as_pairs(params):
    if isinstance(params, ParamStore):
        return params.trainable()
    return [(getattr(t, "name", None) or str(i), t) for i, t in enumerate(params)]


def clip_grad_norm(params, max_norm):
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.  Frozen groups are ignored.
    """
    grads = [t.grad for _, t in _as_pairs(params) if t.grad is not None]
    total = 0.0
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("clip_grad_norm: non-finite gradient")
        total += float(np.sum(g * g))
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


class Optimizer:
    kind = None

    def __init__(self, params, lr):
        self.params = params
        self.lr = float(lr)
        self.step_count = 0
        self.state = {}

    def _pairs(self):
        pairs = _as_pairs(self.params)
        if not any(t.grad is not None for _, t in pairs):
            raise RuntimeError(f"{self.kind}.step called before any backward pass")
        return pairs

    def zero_grad(self):
        for _, t in _as_pairs(self.params):
            t.grad = None
        if isinstance(self.params, ParamStore):
            self.params.zero_grad()

    def step(self):
        pairs = self._pairs()
        self.step_count += 1
        for name, t in pairs:
            if t.grad is not None:
                self._update(name, t)

    def state_dict(self):
        out = {"step": np.array(float(self.step_count))}
        for (name, slot), arr in self.state.items():
            out[f"{slot}/{name}"] = arr.copy()
        return out

    def load_state_dict(self, state):
        self.step_count = int(state["step"])
        self.state = {}
        for key, arr in state.items():
            if key == "step":
                continue
            slot, name = key.split("/", 1)
            self.state[(name, slot)] = np.array(arr, dtype=np.float64)

    def _buf(self, name, slot, like):
        key = (name, slot)
        if key not in self.state:
            self.state[key] = np.zeros_like(like)
        return self.state[key]


class AdamW(Optimizer):
    """Adam with decoupled weight decay and bias-corrected moments."""

    kind = "AdamW"

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        super().__init__(params, lr)
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay

    def _update(self, name, t):
        b1, b2 = self.betas
        g = t.grad
        m = self._buf(name, "m", t.data)
        v = self._buf(name, "v", t.data)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if self.weight_decay:
            t.data = t.data * (1.0 - self.lr * self.weight_decay)
        mhat = m / (1 - b1 ** self.step_count)
        vhat = v / (1 - b2 ** self.step_count)
        t.data = t.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class Adadelta(Optimizer):
    """Adadelta: running averages of squared gradients and squared updates."""

    kind = "Adadelta"

    def __init__(self, params, lr=1.0, rho=0.9, eps=1e-6, weight_decay=0.0):
        super().__init__(params, lr)
        self.rho = rho
        self.eps = eps
        self.weight_decay = weight_decay

    def _update(self, name, t):
        g = t.grad
        if self.weight_decay:
            g = g + self.weight_decay * t.data
        sq = self._buf(name, "sq", t.data)
        acc = self._buf(name, "acc", t.data)
        sq *= self.rho
        sq += (1 - self.rho) * g * g
        delta = np.sqrt(acc + self.eps) / np.sqrt(sq + self.eps) * g
        acc *= self.rho
        acc += (1 - self.rho) * delta * delta
        t.data = t.data - self.lr * delta


def make_optimizer(kind, params, lr, weight_decay=0.0, **kw):
    kind_l = kind.lower()
    if kind_l == "adamw":
        return AdamW(params, lr=lr, weight_decay=weight_decay, **kw)
    if kind_l == "adadelta":
        return Adadelta(params, lr=lr, weight_decay=weight_decay, **kw)
    raise ValueError(f"unknown optimizer {kind!r} (expected AdamW or Adadelta)")


def numerical_grad(f, x, h=1e-6):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``x.data``."""
    x.data = np.ascontiguousarray(x.data)
    grad = np.zeros(x.shape)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = _scalar(f())
        flat[k] = orig - h
        fm = _scalar(f())
        flat[k] = orig
        gflat[k] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic, numeric, floor=1e-4):
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def _scalar(v):
    return v.item() if isinstance(v, Tensor) else float(v)
