"""Dense n-dimensional tensors with reverse-mode automatic differentiation.

The graph is dynamic (define-by-run): every operation records its parents
and a backward closure on the output tensor.  `backward()` topologically
sorts the graph from the root, seeds the root gradient with ones, runs the
closures in reverse order exactly once each, and then frees the graph so
intermediates can be collected.  Gradients accumulate additively, so a
tensor feeding several consumers receives the sum of their contributions.

Conventions baked in here (and relied on by tests):
  * binary ops broadcast only scalar-vs-tensor, never general shapes;
  * sign() has zero gradient everywhere;
  * abs() uses the subgradient 0 at the origin;
  * max reductions break ties toward the lowest flat index;
  * l2_norm uses the subgradient 0 at the zero vector.

Float64 is the default dtype; float32 tensors are supported for training
but gradient checking is only meaningful in float64.
"""

import numpy as np

from .errors import ContractError, DomainError, ShapeError

_FLOATS = (np.float32, np.float64)


def _as_array(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in _FLOATS:
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "_op")

    def __init__(self, data, requires_grad=False, dtype=None, _prev=(), _op=""):
        self.data = _as_array(data, dtype)
        self.grad = None
        self._prev = tuple(_prev)
        self._backward = None
        self._op = _op
        if self._prev:
            self.requires_grad = any(p.requires_grad for p in self._prev)
        else:
            self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        """A grad-less leaf sharing this tensor's (immutable) data."""
        return Tensor(self.data, requires_grad=False)

    # ---- construction helpers -------------------------------------------

    @staticmethod
    def zeros(shape, dtype=np.float64, requires_grad=False):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, dtype=np.float64, requires_grad=False):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)

    # ---- operator sugar --------------------------------------------------

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

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        other = _lift(other, like=self)
        return mul(self, power(other, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def abs(self):
        return absolute(self)

    def sign(self):
        return sign(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def max(self, axis=None):
        return reduce_max(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self):
        return transpose(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, op={self._op!r}{flag})"


# ---- graph walking -------------------------------------------------------


def _topo_order(root):
    """Parents-before-children ordering of the graph reachable from root."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._prev:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root):
    """Populate .grad with d(root)/d(tensor) for every reachable tensor.

    The root must be scalar-valued and require grad.  Each node's backward
    closure runs exactly once, in reverse topological order, and the graph
    is freed afterwards: a second backward on the same graph is impossible
    by construction.
    """
    if root.data.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("backward root does not require grad")
    order = _topo_order(root)
    for node in order:
        if node.grad is None:
            node.grad = np.zeros_like(node.data)
    root.grad = root.grad + np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward()
    for node in order:
        if node._prev:
            node._prev = ()
            node._backward = None
        if not node.requires_grad:
            node.grad = None


# ---- op plumbing ---------------------------------------------------------


def _lift(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _check_binary(a, b, op):
    if a.data.shape == b.data.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} are not "
                     "equal and neither is a scalar")


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to a scalar operand's shape."""
    if grad.shape == shape:
        return grad
    return grad.sum().reshape(shape) * np.ones(shape, dtype=grad.dtype)


# ---- elementwise ops -----------------------------------------------------


def add(a, b):
    a = _lift(a, like=b if isinstance(b, Tensor) else None)
    b = _lift(b, like=a)
    _check_binary(a, b, "add")
    out = Tensor(a.data + b.data, _prev=(a, b), _op="add")

    def _bw():
        a.grad += _unbroadcast(out.grad, a.data.shape)
        b.grad += _unbroadcast(out.grad, b.data.shape)

    out._backward = _bw
    return out


def sub(a, b):
    a = _lift(a, like=b if isinstance(b, Tensor) else None)
    b = _lift(b, like=a)
    _check_binary(a, b, "sub")
    out = Tensor(a.data - b.data, _prev=(a, b), _op="sub")

    def _bw():
        a.grad += _unbroadcast(out.grad, a.data.shape)
        b.grad -= _unbroadcast(out.grad, b.data.shape)

    out._backward = _bw
    return out


def mul(a, b):
    a = _lift(a, like=b if isinstance(b, Tensor) else None)
    b = _lift(b, like=a)
    _check_binary(a, b, "mul")
    out = Tensor(a.data * b.data, _prev=(a, b), _op="mul")

    def _bw():
        a.grad += _unbroadcast(out.grad * b.data, a.data.shape)
        b.grad += _unbroadcast(out.grad * a.data, b.data.shape)

    out._backward = _bw
    return out


def neg(a):
    a = _lift(a)
    out = Tensor(-a.data, _prev=(a,), _op="neg")

    def _bw():
        a.grad -= out.grad

    out._backward = _bw
    return out


def absolute(a):
    a = _lift(a)
    out = Tensor(np.abs(a.data), _prev=(a,), _op="abs")

    def _bw():
        a.grad += out.grad * np.sign(a.data)

    out._backward = _bw
    return out


def sign(a):
    # Gradient is zero everywhere (including 0), so no backward closure.
    a = _lift(a)
    return Tensor(np.sign(a.data), _prev=(a,), _op="sign")


def exp(a):
    a = _lift(a)
    out = Tensor(np.exp(a.data), _prev=(a,), _op="exp")

    def _bw():
        a.grad += out.grad * out.data

    out._backward = _bw
    return out


def log(a):
    a = _lift(a)
    if np.any(a.data <= 0):
        raise DomainError("log requires a strictly positive argument")
    out = Tensor(np.log(a.data), _prev=(a,), _op="log")

    def _bw():
        a.grad += out.grad / a.data

    out._backward = _bw
    return out


def relu(a):
    a = _lift(a)
    out = Tensor(np.maximum(a.data, 0.0), _prev=(a,), _op="relu")

    def _bw():
        a.grad += out.grad * (a.data > 0)

    out._backward = _bw
    return out


def power(base, exponent):
    """base ** exponent.

    With a constant (scalar) exponent this follows numpy semantics.  With a
    Tensor exponent the base must be strictly positive so that the exponent
    gradient base**e * ln(base) is defined.
    """
    base = _lift(base)
    if isinstance(exponent, Tensor):
        _check_binary(base, exponent, "power")
        if np.any(base.data <= 0):
            raise DomainError("power with a tensor exponent requires a "
                              "strictly positive base")
        out = Tensor(base.data ** exponent.data, _prev=(base, exponent),
                     _op="power")

        def _bw():
            base.grad += _unbroadcast(
                out.grad * exponent.data * base.data ** (exponent.data - 1),
                base.data.shape)
            exponent.grad += _unbroadcast(
                out.grad * out.data * np.log(base.data),
                exponent.data.shape)

        out._backward = _bw
        return out

    e = float(exponent)
    out = Tensor(base.data ** e, _prev=(base,), _op="power")

    def _bw():
        base.grad += out.grad * e * base.data ** (e - 1)

    out._backward = _bw
    return out


# ---- matmul and reductions ----------------------------------------------


def matmul(a, b):
    a = _lift(a)
    b = _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul requires 2-d operands, got {a.data.shape} "
                         f"and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.data.shape} "
                         f"vs {b.data.shape}")
    out = Tensor(a.data @ b.data, _prev=(a, b), _op="matmul")

    def _bw():
        a.grad += out.grad @ b.data.T
        b.grad += a.data.T @ out.grad

    out._backward = _bw
    return out


def _check_axis(a, axis, op):
    if axis is None:
        return None
    rank = a.data.ndim
    if not -rank <= axis < rank:
        raise ShapeError(f"{op}: axis {axis} out of range for rank {rank}")
    return axis % rank


def _spread(grad, axis, shape):
    """Expand a reduced gradient back over the reduced axis/all axes."""
    if axis is None:
        return np.broadcast_to(grad, shape)
    return np.broadcast_to(np.expand_dims(grad, axis), shape)


def reduce_sum(a, axis=None):
    a = _lift(a)
    axis = _check_axis(a, axis, "sum")
    out = Tensor(a.data.sum(axis=axis), _prev=(a,), _op="sum")

    def _bw():
        a.grad += _spread(out.grad, axis, a.data.shape)

    out._backward = _bw
    return out


def reduce_mean(a, axis=None):
    a = _lift(a)
    axis = _check_axis(a, axis, "mean")
    n = a.data.size if axis is None else a.data.shape[axis]
    out = Tensor(a.data.mean(axis=axis), _prev=(a,), _op="mean")

    def _bw():
        a.grad += _spread(out.grad, axis, a.data.shape) / n

    out._backward = _bw
    return out


def reduce_max(a, axis=None):
    """Max reduction; the gradient routes to the first argmax (lowest flat
    index) so tie-breaking is deterministic."""
    a = _lift(a)
    axis = _check_axis(a, axis, "max")
    if axis is None:
        out = Tensor(a.data.max(), _prev=(a,), _op="max")
        idx = int(np.argmax(a.data))  # first occurrence == lowest flat index

        def _bw():
            flat = a.grad.reshape(-1)
            flat[idx] += out.grad

        out._backward = _bw
        return out

    out = Tensor(a.data.max(axis=axis), _prev=(a,), _op="max")
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)

    def _bw():
        routed = np.zeros_like(a.data)
        np.put_along_axis(routed, idx, np.expand_dims(out.grad, axis), axis)
        a.grad += routed

    out._backward = _bw
    return out


# ---- structural ops ------------------------------------------------------


def reshape(a, shape):
    a = _lift(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise ShapeError(f"cannot reshape {a.data.shape} ({a.data.size} "
                         f"elements) to {shape}")
    out = Tensor(a.data.reshape(shape), _prev=(a,), _op="reshape")

    def _bw():
        a.grad += out.grad.reshape(a.data.shape)

    out._backward = _bw
    return out


def transpose(a):
    a = _lift(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-d tensor, got {a.data.shape}")
    out = Tensor(a.data.T.copy(), _prev=(a,), _op="transpose")

    def _bw():
        a.grad += out.grad.T

    out._backward = _bw
    return out


def l2_norm(a, axis=None, keepdims=False):
    """Euclidean norm, as a primitive so the zero vector gets subgradient 0.

    Composing sqrt(sum(x*x)) produces inf/NaN gradients at exactly-zero
    slices, which zero-padded image windows hit routinely.
    """
    a = _lift(a)
    axis = _check_axis(a, axis, "l2_norm")
    norm = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=keepdims))
    out = Tensor(norm, _prev=(a,), _op="l2_norm")

    def _bw():
        n = norm if keepdims or axis is None else np.expand_dims(norm, axis)
        g = out.grad if keepdims or axis is None else np.expand_dims(out.grad, axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            coeff = np.where(n > 0, g / np.where(n > 0, n, 1.0), 0.0)
        a.grad += a.data * coeff

    out._backward = _bw
    return out


def extract_windows(x, window, stride):
    """im2col over the spatial axes of a channels-last batch.

    x has shape [N, S1, ..., Sk, C] with k = len(window) spatial axes (k is
    2 or 3).  The result has shape [N, O1, ..., Ok, prod(window) * C] where
    Oi = floor((Si - wi) / si) + 1, and the last axis is ordered
    (offset_1, ..., offset_k, channel) row-major to match kernels flattened
    the same way.  Backward scatter-adds gradients onto the input.
    """
    x = _lift(x)
    window = tuple(int(w) for w in window)
    stride = tuple(int(s) for s in stride)
    k = len(window)
    if len(stride) != k:
        raise ShapeError("window and stride ranks differ")
    if x.data.ndim != k + 2:
        raise ShapeError(f"expected rank-{k + 2} input [N, spatial..., C], "
                         f"got {x.data.shape}")
    spatial = x.data.shape[1:1 + k]
    channels = x.data.shape[-1]
    if any(w < 1 for w in window) or any(s < 1 for s in stride):
        raise ShapeError("window and stride entries must be >= 1")
    if any(sp < w for sp, w in zip(spatial, window)):
        raise ShapeError(f"window {window} does not fit input spatial "
                         f"extent {spatial}")
    out_spatial = tuple((sp - w) // s + 1 for sp, w, s in zip(spatial, window, stride))

    view = np.lib.stride_tricks.sliding_window_view(x.data, window, axis=tuple(range(1, 1 + k)))
    # view: [N, F1..Fk, C, w1..wk]; subsample strides, move C behind offsets.
    slicer = (slice(None),) + tuple(slice(None, None, s) for s in stride)
    view = view[slicer]
    view = np.moveaxis(view, 1 + k, -1)
    cols = view.reshape(x.data.shape[:1] + out_spatial + (int(np.prod(window)) * channels,))
    cols = np.ascontiguousarray(cols)

    out = Tensor(cols, _prev=(x,), _op="extract_windows")

    # Flat source index of every column element within one batch item,
    # shared by the whole batch.
    flat_src = _window_source_indices(spatial, channels, window, stride, out_spatial)

    def _bw():
        # bincount is a deterministic scatter-add and much faster than add.at
        per_item = int(np.prod(spatial)) * channels
        gflat = out.grad.reshape(x.data.shape[0], -1)
        tgt = x.grad.reshape(x.data.shape[0], per_item)
        for n in range(x.data.shape[0]):
            tgt[n] += np.bincount(flat_src, weights=gflat[n], minlength=per_item)

    out._backward = _bw
    return out


def _window_source_indices(spatial, channels, window, stride, out_spatial):
    """Flat indices into one [S1..Sk, C] block for each im2col column slot."""
    k = len(window)
    idx = np.arange(int(np.prod(spatial)) * channels).reshape(spatial + (channels,))
    view = np.lib.stride_tricks.sliding_window_view(idx, window, axis=tuple(range(k)))
    slicer = tuple(slice(None, None, s) for s in stride)
    view = view[slicer]
    view = np.moveaxis(view, k, -1)
    return np.ascontiguousarray(view).reshape(-1)


# ---- name-keyed dispatchers ---------------------------------------------

ELEMENTWISE_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "abs": absolute,
    "sign": sign,
    "power": power,
    "exp": exp,
    "log": log,
}

REDUCE_OPS = {
    "sum": reduce_sum,
    "mean": reduce_mean,
    "max": reduce_max,
}


def elementwise(op, a, b=None):
    """Name-based dispatch over the elementwise op table."""
    try:
        fn = ELEMENTWISE_OPS[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    if op in ("neg", "abs", "sign", "exp", "log"):
        if b is not None:
            raise ContractError(f"{op} is unary")
        return fn(a)
    if b is None:
        raise ContractError(f"{op} needs two operands")
    return fn(a, b)


def reduce(op, a, axis=None):
    """Name-based dispatch over the reduction op table."""
    try:
        fn = REDUCE_OPS[op]
    except KeyError:
        raise ContractError(f"unknown reduce op {op!r}") from None
    return fn(a, axis)


# ---- verification oracle -------------------------------------------------


def finite_difference_check(f, x, eps=1e-6):
    """Max relative disagreement between analytic and central-difference
    gradients of a scalar-valued f at x.

    Relative error per coordinate is |analytic - numeric| / max(1, |analytic|).
    x's data is perturbed in place during the sweep and restored afterwards;
    run this in float64 only.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    try:
        out = f(x)
        backward(out)
        analytic = x.grad.reshape(-1).copy()
    finally:
        x.requires_grad = was
        x.grad = None
    flat = x.data.reshape(-1)
    numeric = np.empty_like(analytic)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x).item()
        flat[i] = orig - eps
        fm = f(x).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
