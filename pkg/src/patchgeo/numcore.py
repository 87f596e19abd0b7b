"""Minimal reverse-mode autodiff over numpy arrays.

Every differentiable primitive is a ``Primitive`` subclass with a pure
``forward`` and a ``backward`` that maps the output cotangent to input
cotangents.  Calling a primitive on ``Tensor`` arguments records a node; the
nodes reachable from a scalar loss form a ``GradRecord`` that can be replayed
or differentiated.

Arrays are float64 by default.  Any primitive producing a non-finite value
raises ``NonFiniteError`` immediately.
"""

from __future__ import annotations

import math

import numpy as np

LAYER_NORM_EPS = 1e-5
FD_STEP = 1e-5
FD_FLOOR = 1e-8


class NumcoreError(Exception):
    pass


class DimensionError(NumcoreError, ValueError):
    pass


class NonFiniteError(NumcoreError, FloatingPointError):
    pass


class ContractError(NumcoreError, ValueError):
    pass


class Tensor:
    """An immutable array value, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "name", "_node")

    def __init__(self, data, requires_grad=False, name=None, dtype=np.float64):
        arr = np.asarray(data, dtype=dtype)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # operator sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def parameter(data, name):
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("prim", "inputs", "kwargs", "ctx")

    def __init__(self, prim, inputs, kwargs, ctx):
        self.prim = prim
        self.inputs = inputs
        self.kwargs = kwargs
        self.ctx = ctx


class Primitive:
    """Base class; subclasses define ``forward`` and ``backward``.

    ``forward(*arrays, **kw)`` returns ``(out, ctx)``; ``backward(ctx, g,
    *arrays, **kw)`` returns one cotangent (or None) per array input.
    """

    name = "primitive"

    def forward(self, *arrays, **kw):
        raise NotImplementedError

    def backward(self, ctx, g, *arrays, **kw):
        raise NotImplementedError

    def __call__(self, *args, **kw):
        inputs = tuple(as_tensor(a) for a in args)
        out, ctx = self.forward(*(t.data for t in inputs), **kw)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"{self.name} produced a non-finite value")
        result = Tensor.__new__(Tensor)
        result.data = out
        result.name = None
        result.requires_grad = any(t.requires_grad for t in inputs)
        result._node = None
        if result.requires_grad:
            result._node = _Node(self, inputs, kw, ctx)
        return result


PRIMITIVES: dict[str, Primitive] = {}


def _register(cls):
    inst = cls()
    PRIMITIVES[inst.name] = inst
    return inst


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


@_register
class _Add(Primitive):
    name = "add"

    def forward(self, a, b):
        return a + b, None

    def backward(self, ctx, g, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


@_register
class _Sub(Primitive):
    name = "sub"

    def forward(self, a, b):
        return a - b, None

    def backward(self, ctx, g, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


@_register
class _Mul(Primitive):
    name = "mul"

    def forward(self, a, b):
        return a * b, None

    def backward(self, ctx, g, a, b):
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


@_register
class _Div(Primitive):
    name = "div"

    def forward(self, a, b):
        return a / b, None

    def backward(self, ctx, g, a, b):
        ga = g / b
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * a / b, b.shape)


@_register
class _Square(Primitive):
    name = "square"

    def forward(self, a):
        return a * a, None

    def backward(self, ctx, g, a):
        return (2.0 * g * a,)


@_register
class _Sqrt(Primitive):
    name = "sqrt"

    def forward(self, a):
        with np.errstate(invalid="ignore"):
            out = np.sqrt(a)
        return out, out

    def backward(self, ctx, g, a):
        return (g / (2.0 * ctx),)


@_register
class _MatMul(Primitive):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
        return np.matmul(a, b), None

    def backward(self, ctx, g, a, b):
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


@_register
class _Reshape(Primitive):
    name = "reshape"

    def forward(self, a, shape):
        return a.reshape(shape), None

    def backward(self, ctx, g, a, shape):
        return (g.reshape(a.shape),)


@_register
class _Transpose(Primitive):
    name = "transpose"

    def forward(self, a, axes):
        return np.transpose(a, axes), None

    def backward(self, ctx, g, a, axes):
        return (np.transpose(g, np.argsort(axes)),)


def _is_basic(index):
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int)) or i is Ellipsis or i is None for i in parts)


@_register
class _GetItem(Primitive):
    name = "getitem"

    def forward(self, a, index):
        return np.array(a[index], copy=True), None

    def backward(self, ctx, g, a, index):
        out = np.zeros_like(a)
        if _is_basic(index):
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)


@_register
class _Sum(Primitive):
    name = "sum"

    def forward(self, a, axis=None, keepdims=False):
        return np.asarray(a.sum(axis=axis, keepdims=keepdims)), None

    def backward(self, ctx, g, a, axis=None, keepdims=False):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)


@_register
class _Concat(Primitive):
    name = "concat"

    def forward(self, *arrays, axis=0):
        return np.concatenate(arrays, axis=axis), None

    def backward(self, ctx, g, *arrays, axis=0):
        splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return tuple(np.split(g, splits, axis=axis))


@_register
class _Softmax(Primitive):
    """Softmax over the last axis; ``mask`` entries that are False get
    probability exactly zero."""

    name = "softmax"

    def forward(self, x, mask=None):
        if mask is not None:
            x = np.where(mask, x, -np.inf)
        m = x.max(axis=-1, keepdims=True)
        e = np.exp(x - m)
        out = e / e.sum(axis=-1, keepdims=True)
        return out, out

    def backward(self, ctx, g, x, mask=None):
        y = ctx
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


@_register
class _LayerNorm(Primitive):
    name = "layer_norm"

    def forward(self, x, gain, bias, eps=LAYER_NORM_EPS):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        rstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * rstd
        return xhat * gain + bias, (xhat, rstd)

    def backward(self, ctx, g, x, gain, bias, eps=LAYER_NORM_EPS):
        xhat, rstd = ctx
        n = x.shape[-1]
        gg = _unbroadcast(g * xhat, gain.shape)
        gb = _unbroadcast(g, bias.shape)
        dxhat = g * gain
        gx = rstd / n * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return gx, gg, gb


_GELU_C = math.sqrt(2.0 / math.pi)


@_register
class _Gelu(Primitive):
    """tanh-approximated GELU."""

    name = "gelu"

    def forward(self, x):
        u = _GELU_C * (x + 0.044715 * x**3)
        t = np.tanh(u)
        return 0.5 * x * (1.0 + t), t

    def backward(self, ctx, g, x):
        t = ctx
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)


@_register
class _Rotate(Primitive):
    """Rotate channel pairs ``(x[2i], x[2i+1])`` by per-channel ``cos``/``sin``.

    ``cos`` and ``sin`` hold one angle per pair, broadcastable to
    ``x.shape[:-1] + (d/2,)``.
    """

    name = "rotate_pairs"

    def forward(self, x, cos, sin):
        x0 = x[..., 0::2]
        x1 = x[..., 1::2]
        out = np.empty(np.broadcast_shapes(x.shape, cos.shape[:-1] + (x.shape[-1],)))
        out[..., 0::2] = x0 * cos - x1 * sin
        out[..., 1::2] = x0 * sin + x1 * cos
        return out, None

    def backward(self, ctx, g, x, cos, sin):
        g0 = g[..., 0::2]
        g1 = g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = g0 * cos + g1 * sin
        gx[..., 1::2] = -g0 * sin + g1 * cos
        return (_unbroadcast(gx, x.shape),)


UNIT_TOL = 1e-14


def unit_vectors(x, axis=-1, floor=1e-8, fallback=None):
    """``x / |x|`` along ``axis``; returns ``(out, norm used, below-floor mask)``.

    Vectors whose norm is already 1 within ``UNIT_TOL`` are passed through
    untouched, so renormalising unit input is bit-exact.  Vectors shorter
    than ``floor`` take ``fallback`` (or are divided by ``floor``).
    """
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    small = norm < floor
    safe = np.where(small, floor, norm)
    out = np.where(np.abs(norm - 1.0) <= UNIT_TOL, x, x / safe)
    if fallback is not None:
        out = np.where(small, fallback, out)
    return out, safe, small


@_register
class _Normalize(Primitive):
    """Unit-normalise along ``axis``.

    Where the norm is below ``floor`` the output takes ``fallback`` (a
    constant) if given, else the input divided by ``floor``.
    """

    name = "normalize"

    def forward(self, x, axis=-1, floor=1e-8, fallback=None):
        out, safe, small = unit_vectors(x, axis, floor, fallback)
        return out, (out, safe, small)

    def backward(self, ctx, g, x, axis=-1, floor=1e-8, fallback=None):
        y, safe, small = ctx
        proj = (g * y).sum(axis=axis, keepdims=True)
        gx = np.where(small, g / safe, (g - y * proj) / safe)
        if fallback is not None:
            gx = np.where(small, 0.0, gx)
        return (gx,)


add = PRIMITIVES["add"]
sub = PRIMITIVES["sub"]
mul = PRIMITIVES["mul"]
div = PRIMITIVES["div"]
square = PRIMITIVES["square"]
sqrt = PRIMITIVES["sqrt"]
matmul = PRIMITIVES["matmul"]
gelu = PRIMITIVES["gelu"]
rotate_pairs = PRIMITIVES["rotate_pairs"]


def reshape(a, shape):
    return PRIMITIVES["reshape"](a, shape=tuple(shape))


def transpose(a, axes):
    return PRIMITIVES["transpose"](a, axes=tuple(axes))


def getitem(a, index):
    return PRIMITIVES["getitem"](a, index=index)


def tsum(a, axis=None, keepdims=False):
    return PRIMITIVES["sum"](a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def concat(tensors, axis=0):
    return PRIMITIVES["concat"](*tensors, axis=axis)


def softmax_rows(x, mask=None):
    """Row softmax with max subtraction; rows sum to one."""
    return PRIMITIVES["softmax"](x, mask=mask)


def layer_norm(x, gain, bias, eps=LAYER_NORM_EPS):
    x = as_tensor(x)
    if x.shape[-1] < 2:
        raise ContractError("layer_norm needs at least two features per row")
    return PRIMITIVES["layer_norm"](x, gain, bias, eps=eps)


def normalize(x, axis=-1, floor=1e-8, fallback=None):
    return PRIMITIVES["normalize"](x, axis=axis, floor=floor, fallback=fallback)


class GradRecord:
    """Topologically ordered nodes reachable from ``root``."""

    def __init__(self, root: Tensor):
        self.root = root
        order = []
        seen = set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for inp in t._node.inputs:
                    if inp.requires_grad and id(inp) not in seen:
                        stack.append((inp, False))
        self.order = order

    @property
    def parameters(self):
        return [t for t in self.order if t._node is None and t.requires_grad]

    def replay(self):
        """Re-run every recorded forward; returns the recomputed root value."""
        values = {}

        def value(t):
            return values.get(id(t), t.data)

        for t in self.order:
            node = t._node
            if node is None:
                continue
            out, _ = node.prim.forward(*(value(i) for i in node.inputs), **node.kwargs)
            values[id(t)] = out
        return value(self.root)

    def gradients(self):
        grads = {id(self.root): np.ones_like(self.root.data)}
        for t in reversed(self.order):
            g = grads.pop(id(t), None) if t._node is not None else grads.get(id(t))
            node = t._node
            if node is None or g is None:
                continue
            in_grads = node.prim.backward(
                node.ctx, g, *(i.data for i in node.inputs), **node.kwargs
            )
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return grads


def backward(loss: Tensor, params=None, record: GradRecord | None = None):
    """Gradients of a scalar ``loss``.

    Returns ``{name: ndarray}`` for named leaves (or for ``params`` when
    given, keyed by name).  Parameters the loss does not depend on get an
    all-zero gradient.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    record = record or GradRecord(loss)
    raw = record.gradients() if loss.requires_grad else {}
    if params is None:
        params = record.parameters
    elif isinstance(params, dict):
        params = list(params.values())
    out = {}
    for i, p in enumerate(params):
        key = p.name if p.name is not None else i
        g = raw.get(id(p))
        out[key] = np.zeros_like(p.data) if g is None else g
    return out


def finite_difference_check(f, params, h=FD_STEP, floor=FD_FLOOR, max_entries=None, rng=None):
    """Worst elementwise relative error between ``backward`` and central
    differences of ``f()`` with respect to the entries of ``params``.

    ``f`` takes no arguments and must read the parameters' current data.
    With ``max_entries`` only that many randomly chosen entries of each
    parameter are probed (drawn from ``rng``).
    """
    params = list(params.values()) if isinstance(params, dict) else list(params)
    loss = f()
    grads = backward(loss, params)
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for i, p in enumerate(params):
        analytic = grads[p.name if p.name is not None else i]
        flat = p.data.reshape(-1)
        if max_entries is None or max_entries >= flat.size:
            probe = range(flat.size)
        else:
            probe = rng.choice(flat.size, size=max_entries, replace=False)
        for j in probe:
            orig = flat[j]
            flat[j] = orig + h
            fp = float(f().data)
            flat[j] = orig - h
            fm = float(f().data)
            flat[j] = orig
            num = (fp - fm) / (2.0 * h)
            a = float(analytic.reshape(-1)[j])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst
