"""Dense tensors with reverse-mode automatic differentiation.

Data lives in contiguous numpy arrays (float32 by default, float64 for
gradient-check runs, see `set_default_dtype`). Every differentiable
operation records its parents and a backward closure; `backward` walks the
recorded graph once in reverse topological order and accumulates gradients
additively across fan-out. Traversal order is fixed by the (deterministic)
construction order, so repeated runs on identical inputs are bit-identical
for a fixed BLAS thread count.

Non-finite values produced by a forward computation are a hard error
(`FiniteError`); view-style ops (reshape, transpose, slicing, concat) skip
the scan since they cannot create new values.
"""

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class FiniteError(FloatingPointError):
    """Raised when a forward computation produces NaN or Inf."""


_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_FINITE_CHECK = True


def set_default_dtype(dtype):
    """Set the scalar width for newly created tensors (np.float32 or np.float64)."""
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


class use_dtype:
    """Context manager pinning the default dtype (used by gradient-check tests)."""

    def __init__(self, dtype):
        self.dtype = dtype

    def __enter__(self):
        self.saved = _DEFAULT_DTYPE
        set_default_dtype(self.dtype)
        return self

    def __exit__(self, *exc):
        set_default_dtype(self.saved)
        return False


class no_grad:
    """Context manager disabling graph recording (inference / benchmarking)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self.saved = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self.saved
        return False


def _check_finite(arr, op):
    if _FINITE_CHECK and not np.isfinite(arr).all():
        raise FiniteError(f"non-finite values produced by {op}")


class Tensor:
    """A dense n-dimensional float array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.ascontiguousarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- construction of op outputs ------------------------------------

    @staticmethod
    def _result(data, parents, backward):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic introspection -------------------------------------------

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

    def item(self):
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------

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

    def __pow__(self, e):
        return pow_scalar(self, e)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), requires_grad=False, dtype=dtype)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise binary ops --------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    _check_finite(out, "add")
    return Tensor._result(out, (a, b), lambda g: (
        _unbroadcast(g, a.data.shape) if a.requires_grad else None,
        _unbroadcast(g, b.data.shape) if b.requires_grad else None,
    ))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    _check_finite(out, "sub")
    return Tensor._result(out, (a, b), lambda g: (
        _unbroadcast(g, a.data.shape) if a.requires_grad else None,
        _unbroadcast(-g, b.data.shape) if b.requires_grad else None,
    ))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    _check_finite(out, "mul")
    return Tensor._result(out, (a, b), lambda g: (
        _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None,
        _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None,
    ))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    _check_finite(out, "div")
    return Tensor._result(out, (a, b), lambda g: (
        _unbroadcast(g / b.data, a.data.shape) if a.requires_grad else None,
        _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape) if b.requires_grad else None,
    ))


def maximum(a, b):
    """Elementwise max; at ties the gradient is split half/half so central
    finite differences agree exactly at kinks."""
    a, b = as_tensor(a), as_tensor(b)
    out = np.maximum(a.data, b.data)
    wa = np.where(a.data > b.data, 1.0, np.where(a.data < b.data, 0.0, 0.5)).astype(out.dtype)
    return Tensor._result(out, (a, b), lambda g: (
        _unbroadcast(g * wa, a.data.shape) if a.requires_grad else None,
        _unbroadcast(g * (1.0 - wa), b.data.shape) if b.requires_grad else None,
    ))


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = np.minimum(a.data, b.data)
    wa = np.where(a.data < b.data, 1.0, np.where(a.data > b.data, 0.0, 0.5)).astype(out.dtype)
    return Tensor._result(out, (a, b), lambda g: (
        _unbroadcast(g * wa, a.data.shape) if a.requires_grad else None,
        _unbroadcast(g * (1.0 - wa), b.data.shape) if b.requires_grad else None,
    ))


# -- elementwise unary ops ---------------------------------------------


def neg(x):
    x = as_tensor(x)
    return Tensor._result(-x.data, (x,), lambda g: (-g,))


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    _check_finite(out, "exp")
    return Tensor._result(out, (x,), lambda g: (g * out,))


def log(x):
    x = as_tensor(x)
    out = np.log(x.data)
    _check_finite(out, "log")
    return Tensor._result(out, (x,), lambda g: (g / x.data,))


def sqrt(x):
    x = as_tensor(x)
    out = np.sqrt(x.data)
    _check_finite(out, "sqrt")
    return Tensor._result(out, (x,), lambda g: (g * 0.5 / out,))


def pow_scalar(x, e):
    x = as_tensor(x)
    e = float(e)
    out = np.power(x.data, e)
    _check_finite(out, "pow")
    return Tensor._result(out, (x,), lambda g: (g * e * np.power(x.data, e - 1.0),))


def abs_(x):
    x = as_tensor(x)
    out = np.abs(x.data)
    return Tensor._result(out, (x,), lambda g: (g * np.sign(x.data),))


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return Tensor._result(out, (x,), lambda g: (g * (1.0 - out * out),))


def _sigmoid_stable(d):
    e = np.exp(-np.abs(d))
    return np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)


def sigmoid(x):
    x = as_tensor(x)
    out = _sigmoid_stable(x.data)
    return Tensor._result(out, (x,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(x):
    """log(sigmoid(x)) computed without overflow for large |x|."""
    x = as_tensor(x)
    d = x.data
    out = -(np.log1p(np.exp(-np.abs(d))) + np.maximum(-d, 0.0))
    # d/dx log sigmoid(x) = 1 - sigmoid(x)
    return Tensor._result(out.astype(d.dtype), (x,),
                          lambda g: (g * (1.0 - _sigmoid_stable(d)),))


def relu(x):
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)
    return Tensor._result(out, (x,), lambda g: (g * (x.data > 0),))


_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def gelu(x):
    """Tanh-approximation GELU: 0.5*x*(1 + tanh(c*(x + a*x^3)))."""
    x = as_tensor(x)
    d = x.data
    inner = _GELU_C * (d + _GELU_A * d ** 3)
    t = np.tanh(inner)
    out = 0.5 * d * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * d * d)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner),)

    return Tensor._result(out.astype(d.dtype), (x,), backward)


# -- matmul -------------------------------------------------------------


def matmul(a, b):
    """Batched matrix product [..., M, K] @ [..., K, P]; batch dims broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as err:
        raise ShapeError(f"matmul batch extents incompatible: {a.shape} @ {b.shape}") from err
    _check_finite(out, "matmul")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)
        return ga, gb

    return Tensor._result(out, (a, b), backward)


# -- reductions ---------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return Tensor._result(np.asarray(out), (x,), backward)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.data.shape) / n,)

    return Tensor._result(np.asarray(out), (x,), backward)


# -- fused neural ops ---------------------------------------------------


def softmax(x, axis=-1):
    """Numerically stabilized softmax along `axis`."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (x,), backward)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(out, (x,), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match feature dim of {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data
    _check_finite(out, "layer_norm")

    def backward(g):
        gx = ggain = gbias = None
        if gain.requires_grad:
            ggain = (g * xhat).sum(axis=tuple(range(g.ndim - 1)))
        if bias.requires_grad:
            gbias = g.sum(axis=tuple(range(g.ndim - 1)))
        if x.requires_grad:
            dxhat = g * gain.data
            gx = (dxhat - dxhat.mean(axis=-1, keepdims=True)
                  - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) * inv
        return gx, ggain, gbias

    return Tensor._result(out, (x, gain, bias), backward)


# -- view / layout ops --------------------------------------------------


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from err
    return Tensor._result(np.ascontiguousarray(out), (x,),
                          lambda g: (g.reshape(x.data.shape),))


def transpose(x, axes):
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return Tensor._result(out, (x,), lambda g: (g.transpose(inv),))


def getitem(x, idx):
    """Basic (slice / integer) indexing with exact gradient scatter."""
    x = as_tensor(x)
    out = np.ascontiguousarray(x.data[idx])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return Tensor._result(out, (x,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        grads = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(int(lo), int(hi))
                grads.append(np.ascontiguousarray(g[tuple(sl)]))
            else:
                grads.append(None)
        return tuple(grads)

    return Tensor._result(out, tuple(tensors), backward)


def pad(x, pad_width):
    """Zero padding; pad_width is a per-axis list of (before, after)."""
    x = as_tensor(x)
    out = np.pad(x.data, pad_width)
    sl = tuple(slice(b, b + s) for (b, _), s in zip(pad_width, x.shape))
    return Tensor._result(out, (x,), lambda g: (np.ascontiguousarray(g[sl]),))


def broadcast_to(x, shape):
    x = as_tensor(x)
    out = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    return Tensor._result(out, (x,), lambda g: (_unbroadcast(g, x.data.shape),))


def upsample2x(x):
    """Nearest-neighbour 2x upsampling of the (-3, -2) axes of [..., H, W, C]."""
    x = as_tensor(x)
    out = np.repeat(np.repeat(x.data, 2, axis=-3), 2, axis=-2)

    def backward(g):
        lead = x.shape[:-3]
        h, w, c = x.shape[-3:]
        return (g.reshape(lead + (h, 2, w, 2, c)).sum(axis=(-4, -2)),)

    return Tensor._result(out, (x,), backward)


# -- backward pass ------------------------------------------------------


def backward(loss):
    """Populate `.grad` for every requires_grad tensor reachable from `loss`.

    `loss` must be scalar. Each graph node is visited exactly once in
    reverse topological order; gradients add across fan-out.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

    # Iterative post-order DFS: deep graphs must not hit the recursion limit.
    topo, visited, stack = [], set(), [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad = node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# -- gradient oracle ----------------------------------------------------


def finite_diff_check(fn, params, h=1e-5, sample=None, rng=None, denom_floor=1e-6):
    """Compare analytic gradients of `fn()` against central finite differences.

    `fn` evaluates a scalar Tensor from the tensors in `params`
    (name -> Tensor). With `sample` set, only that many randomly chosen
    coordinates per parameter are probed. Returns a report with the worst
    relative error; relative error uses max(|analytic|, |numeric|,
    denom_floor) as denominator. Coordinates where both gradients sit
    below the central-difference roundoff scale eps*|f|/(2h) are skipped:
    such gradients are indistinguishable from zero at the probe scale
    (e.g. exactly-zero true gradients measured as FD noise).
    """
    for p in params.values():
        p.zero_grad()
    loss = fn()
    backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}

    if rng is None:
        rng = np.random.default_rng(0)
    eps = float(np.finfo(loss.data.dtype).eps)
    noise = 10.0 * eps * max(1.0, abs(loss.item())) / (2.0 * h)
    report = {"max_rel_err": 0.0, "per_param": {}, "noise_floor": noise}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if sample is not None and flat.size > sample:
            idxs = rng.choice(flat.size, size=sample, replace=False)
        worst = 0.0
        for i in idxs:
            saved = flat[i]
            flat[i] = saved + h
            f_plus = fn().item()
            flat[i] = saved - h
            f_minus = fn().item()
            flat[i] = saved
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = analytic[name].reshape(-1)[i]
            if abs(a) < noise and abs(numeric) < noise:
                continue
            rel = abs(a - numeric) / max(abs(a), abs(numeric), denom_floor)
            worst = max(worst, rel)
        report["per_param"][name] = worst
        report["max_rel_err"] = max(report["max_rel_err"], worst)
    return report
