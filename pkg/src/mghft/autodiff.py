"""Dense-tensor numeric engine with reverse-mode differentiation.

A dynamic tape is recorded during the forward pass and consumed (and freed)
by ``backward``. Only the operations needed by the fusion stack are
implemented; elementwise ops support numpy broadcasting with gradient
reduction over broadcast axes.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float64
LOG_EPS = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(ValueError):
    """Raised when an operation's preconditions are violated."""


def _as_array(x, dtype=DEFAULT_DTYPE):
    return np.asarray(x, dtype=dtype)


class Tensor:
    """N-dimensional float array participating in reverse-mode autodiff.

    ``_parents`` and ``_backward`` form the tape; they are cleared after
    ``backward`` runs so the graph is freed.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in _parents
        )
        self.grad = None
        self._parents = tuple(_parents)
        self._backward = _backward

    # ---- basic introspection -------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # ---- autodiff -------------------------------------------------------

    def backward(self):
        """Accumulate gradients of this scalar into every reachable
        requires_grad tensor, then free the tape."""
        if self.size != 1:
            raise ContractError(
                f"backward() requires a scalar loss, got shape {self.shape}"
            )
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] += pg
                else:
                    grads[id(p)] = pg
        # free the tape
        for node in topo:
            node._parents = ()
            node._backward = None

    # ---- operators ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


@dataclass
class Parameter:
    """Named trainable tensor; names are dotted paths unique per model."""

    name: str
    tensor: Tensor


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---- elementwise -------------------------------------------------------


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(out, _parents=(a, b), _backward=bwd)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor(out, _parents=(a, b), _backward=bwd)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return Tensor(out, _parents=(a, b), _backward=bwd)


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.data / b.data

    def bwd(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return Tensor(out, _parents=(a, b), _backward=bwd)


def square(a):
    return mul(a, a)


def texp(a):
    a = _wrap(a)
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return Tensor(out, _parents=(a,), _backward=bwd)


def tlog(a, eps=LOG_EPS):
    """Natural log with the argument clamped at ``eps``; the clamped
    region is treated as constant (zero derivative)."""
    a = _wrap(a)
    clamped = np.maximum(a.data, eps)
    out = np.log(clamped)

    def bwd(g):
        return (np.where(a.data >= eps, g / clamped, 0.0),)

    return Tensor(out, _parents=(a,), _backward=bwd)


def tsqrt(a):
    a = _wrap(a)
    out = np.sqrt(a.data)

    def bwd(g):
        return (g * 0.5 / out,)

    return Tensor(out, _parents=(a,), _backward=bwd)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a):
    a = _wrap(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out = a.data * cdf

    def bwd(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data * a.data)
        return (g * (cdf + a.data * pdf),)

    return Tensor(out, _parents=(a,), _backward=bwd)


# ---- shape manipulation ------------------------------------------------


def reshape(a, shape):
    a = _wrap(a)
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return Tensor(out, _parents=(a,), _backward=bwd)


def transpose(a, axes=None):
    a = _wrap(a)
    out = a.data.transpose(axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return Tensor(out, _parents=(a,), _backward=bwd)


def swap_last2(a):
    a = _wrap(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def broadcast_to(a, shape):
    a = _wrap(a)
    out = np.broadcast_to(a.data, shape).copy()

    def bwd(g):
        return (_unbroadcast(g, a.shape),)

    return Tensor(out, _parents=(a,), _backward=bwd)


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return Tensor(out, _parents=tuple(tensors), _backward=bwd)


def stack(tensors, axis=0):
    expanded = [
        reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in map(_wrap, tensors)
    ]
    return concat(expanded, axis=axis)


def take(a, key):
    """Indexing with slices and/or integer arrays; gradient scatters back
    with duplicate-index accumulation."""
    a = _wrap(a)
    out = a.data[key]

    def bwd(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, key, g)
        return (grad,)

    return Tensor(out, _parents=(a,), _backward=bwd)


# ---- reductions --------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor(out, _parents=(a,), _backward=bwd)


def tmean(a, axis=None, keepdims=False):
    a = _wrap(a)
    if axis is None:
        n = a.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        n = a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---- linear algebra ----------------------------------------------------


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(
            f"matmul requires >=2-d operands, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.shape} vs {b.shape}"
        )
    out = a.data @ b.data

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor(out, _parents=(a, b), _backward=bwd)


# ---- normalizations and losses ----------------------------------------


def softmax(x, axis=-1):
    """Numerically stabilized softmax along ``axis``."""
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return Tensor(out, _parents=(x,), _backward=bwd)


def log_softmax(x, axis=-1):
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bwd(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor(out, _parents=(x,), _backward=bwd)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then apply an
    affine transform. Composed from primitive ops, so fully differentiable."""
    x = _wrap(x)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match "
            f"feature size {d}"
        )
    mu = tmean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = tmean(square(centered), axis=-1, keepdims=True)
    normed = div(centered, tsqrt(add(var, eps)))
    return add(mul(normed, gain), bias)


def cross_entropy(logits, targets):
    """Mean negative log-softmax at the target index of each row."""
    logits = _wrap(logits)
    targets = np.asarray(targets, dtype=np.int64)
    n, c = logits.shape
    if targets.shape != (n,):
        raise ShapeError(
            f"targets shape {targets.shape} does not match batch size {n}"
        )
    if targets.min(initial=0) < 0 or (n > 0 and targets.max() >= c):
        raise IndexError(
            f"target index out of range for {c} classes: {targets}"
        )
    ls = log_softmax(logits, axis=1)
    picked = take(ls, (np.arange(n), targets))
    return -tmean(picked)


def kl_divergence_rows(p, q, eps=LOG_EPS):
    """Mean over rows of sum p * (log p - log q); q clamped at ``eps``."""
    p, q = _wrap(p), _wrap(q)
    if p.shape != q.shape:
        raise ShapeError(f"KL operands differ in shape: {p.shape} vs {q.shape}")
    terms = mul(p, sub(tlog(p, eps), tlog(q, eps)))
    return tmean(tsum(terms, axis=-1))


def l2_normalize_rows(x):
    """Divide each row by its Euclidean norm; zero rows are rejected."""
    x = _wrap(x)
    norms = np.sqrt((x.data * x.data).sum(axis=-1))
    if np.any(norms == 0.0):
        raise ContractError("cannot L2-normalize a zero row")
    sq = tsum(square(x), axis=-1, keepdims=True)
    return div(x, tsqrt(sq))


# ---- finite-difference oracle -----------------------------------------


def finite_difference_grad(f, x, h=1e-6):
    """Central-difference gradient estimate of scalar-valued ``f`` at ``x``.

    ``f`` takes a Tensor and returns a scalar Tensor; the estimate is
    computed elementwise and returned as a numpy array.
    """
    base = x.data.copy()
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(base)).data)
        flat[i] = orig - h
        fm = float(f(Tensor(base)).data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a, b, floor=1e-6):
    """Norm-based relative discrepancy between two gradient arrays.

    The denominator is floored so that near-zero gradient pairs (where
    central-difference noise dominates) compare on an absolute scale.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), floor)
    return np.linalg.norm(a - b) / denom


# ---- module / parameter registry --------------------------------------


class Module:
    """Minimal parameter container with deterministic dotted naming."""

    def __init__(self):
        self._params = {}
        self._modules = {}

    def param(self, name, data):
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def add_module(self, name, module):
        if name in self._modules:
            raise ValueError(f"duplicate module name {name!r}")
        self._modules[name] = module
        return module

    def named_parameters(self, prefix=""):
        for name, t in self._params.items():
            yield Parameter(prefix + name, t)
        for mname, mod in self._modules.items():
            yield from mod.named_parameters(prefix + mname + ".")

    def parameters(self):
        return [p.tensor for p in self.named_parameters()]

    def zero_grad(self):
        for t in self.parameters():
            t.zero_grad()

    def state_arrays(self):
        return {p.name: p.tensor.data for p in self.named_parameters()}

    def load_state_arrays(self, arrays):
        for p in self.named_parameters():
            if p.name not in arrays:
                raise KeyError(f"checkpoint missing parameter {p.name!r}")
            src = np.asarray(arrays[p.name], dtype=DEFAULT_DTYPE)
            if src.shape != p.tensor.shape:
                raise ShapeError(
                    f"checkpoint shape {src.shape} != model shape "
                    f"{p.tensor.shape} for {p.name!r}"
                )
            p.tensor.data = src.copy()


def trunc_normal(rng, shape, std=0.02, bound=2.0):
    """Truncated-normal init in [-bound*std, bound*std] via redraw."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > bound
    while np.any(bad):
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > bound
    return x * std


class Linear(Module):
    def __init__(self, rng, in_dim, out_dim, zero_init=False):
        super().__init__()
        if zero_init:
            w = np.zeros((in_dim, out_dim))
        else:
            w = trunc_normal(rng, (in_dim, out_dim))
        self.w = self.param("weight", w)
        self.b = self.param("bias", np.zeros(out_dim))

    def __call__(self, x):
        return add(matmul(x, self.w), self.b)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.gain = self.param("gain", np.ones(dim))
        self.bias = self.param("bias", np.zeros(dim))

    def __call__(self, x):
        return layer_norm(x, self.gain, self.bias, self.eps)
