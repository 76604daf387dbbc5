"""Dense tensors with reverse-mode automatic differentiation.

Every operation records its inputs and a vector-Jacobian closure on the
output node; `backward()` replays the recorded graph in reverse
topological order and accumulates gradients into every requires_grad
node it reaches. Scalars default to float32; gradient-check code runs
under `use_dtype(np.float64)` for tight finite-difference tolerances.

Any op producing NaN/Inf raises immediately (NumericError naming the
op) rather than letting the value propagate.
"""

import contextlib
import math

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True

_GELU_C = math.sqrt(2.0 / math.pi)
_LN_EPS = 1e-5


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported scalar dtype {dtype}")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily switch the default scalar width."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class ShapeError(ValueError):
    """Operand shapes do not conform for an op."""

    def __init__(self, op, shape_a, shape_b=None):
        detail = f"op '{op}': operand shape {tuple(shape_a)}"
        if shape_b is not None:
            detail = f"op '{op}': operand shapes {tuple(shape_a)} and {tuple(shape_b)}"
        super().__init__(f"shape mismatch in {detail}")
        self.op = op


class NumericError(ArithmeticError):
    """An op produced NaN or Inf."""

    def __init__(self, op):
        super().__init__(f"non-finite values produced by op '{op}'")
        self.op = op


class Tensor:
    """Flat numeric buffer plus shape, with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._op = "leaf"

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    # arithmetic sugar; heavy lifting lives in the module-level ops
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, grad={self.requires_grad})"


def _lift(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else _DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    if isinstance(b, Tensor):
        return _lift(a, b), b
    return _lift(a), _lift(b)


def _from_op(op, data, parents, vjp):
    if not np.all(np.isfinite(data)):
        raise NumericError(op)
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._vjp = vjp
    else:
        t.requires_grad = False
        t._parents = ()
        t._vjp = None
    t._op = op
    return t


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    a, b = _pair(a, b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _from_op("add", data, (a, b), vjp)


def sub(a, b):
    a, b = _pair(a, b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError("sub", a.shape, b.shape) from None

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _from_op("sub", data, (a, b), vjp)


def mul(a, b):
    a, b = _pair(a, b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _from_op("mul", data, (a, b), vjp)


def div(a, b):
    a, b = _pair(a, b)
    try:
        with np.errstate(divide="ignore", invalid="ignore"):
            data = a.data / b.data
    except ValueError:
        raise ShapeError("div", a.shape, b.shape) from None

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _from_op("div", data, (a, b), vjp)


def neg(a):
    a = _lift(a)
    return _from_op("neg", -a.data, (a,), lambda g: (-g,))


def pow_scalar(a, p):
    a = _lift(a)
    p = float(p)
    with np.errstate(invalid="ignore"):
        data = a.data ** p

    def vjp(g):
        return (g * p * a.data ** (p - 1.0),)

    return _from_op("pow", data, (a,), vjp)


def texp(a):
    a = _lift(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    return _from_op("exp", data, (a,), lambda g: (g * data,))


def tlog(a):
    a = _lift(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        data = np.log(a.data)
    return _from_op("log", data, (a,), lambda g: (g / a.data,))


def tsqrt(a):
    a = _lift(a)
    with np.errstate(invalid="ignore"):
        data = np.sqrt(a.data)
    return _from_op("sqrt", data, (a,), lambda g: (g * 0.5 / data,))


def tanh(a):
    a = _lift(a)
    data = np.tanh(a.data)
    return _from_op("tanh", data, (a,), lambda g: (g * (1.0 - data * data),))


def gelu(a):
    """GELU activation, tanh form; the backward rule differentiates this
    exact forward so finite-difference checks close to machine precision."""
    a = _lift(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * x2 * x))
    data = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        dx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * dx,)

    return _from_op("gelu", data, (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra and movement ops


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        data = a.data @ b.data
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _from_op("matmul", data, (a, b), vjp)


def transpose(a, axes=None):
    a = _lift(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = np.transpose(a.data, axes)
    return _from_op("transpose", data, (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a, shape):
    a = _lift(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _from_op("reshape", data, (a,), lambda g: (g.reshape(a.shape),))


def tsum(a, axis=None, keepdims=False):
    a = _lift(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _from_op("sum", data, (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    a = _lift(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape),)

    return _from_op("mean", data, (a,), vjp)


def softmax(a):
    """Softmax over the last axis, computed with max subtraction."""
    a = _lift(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        return ((g - dot) * data,)

    return _from_op("softmax", data, (a,), vjp)


def log_softmax(a):
    a = _lift(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse

    def vjp(g):
        return (g - np.exp(data) * g.sum(axis=-1, keepdims=True),)

    return _from_op("log_softmax", data, (a,), vjp)


def layer_norm(x, gain, bias, eps: float = _LN_EPS):
    """Normalize over the last axis, then apply per-feature gain and bias."""
    x, gain, bias = _lift(x), _lift(gain), _lift(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gain.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def vjp(g):
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        dbias = g.reshape(-1, d).sum(axis=0)
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return _from_op("layer_norm", data, (x, gain, bias), vjp)


def gather_rows(a, idx):
    """Select rows of a 2-D tensor; backward scatter-adds into the source."""
    a = _lift(a)
    if a.ndim != 2:
        raise ShapeError("gather_rows", a.shape)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows", idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(
            f"gather_rows: index out of range for {a.shape[0]} rows "
            f"(got min={idx.min()}, max={idx.max()})"
        )
    data = a.data[idx]

    def vjp(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return _from_op("gather_rows", data, (a,), vjp)


def concat_rows(tensors):
    """Concatenate 2-D tensors along axis 0."""
    tensors = [_lift(t) for t in tensors]
    cols = {t.shape[1] for t in tensors if t.ndim == 2}
    if any(t.ndim != 2 for t in tensors) or len(cols) != 1:
        raise ShapeError("concat_rows", [t.shape for t in tensors])
    data = np.concatenate([t.data for t in tensors], axis=0)
    offsets = np.cumsum([0] + [t.shape[0] for t in tensors])

    def vjp(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(tensors)))

    return _from_op("concat_rows", data, tuple(tensors), vjp)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss) -> None:
    """Accumulate d(loss)/d(node) into .grad of every requires_grad node.

    Each call computes a fresh pass in private buffers and adds the
    result into .grad, so repeated calls without zero_grad accumulate.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss)
        raise ValueError(f"backward requires a scalar loss, got {shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
