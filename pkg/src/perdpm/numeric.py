"""Dense f64 tensors with a reverse-mode tape, plus the probability primitives.

A :class:`Tensor` wraps a float64 numpy array. Operations record themselves on
the active :class:`Tape` when at least one input requires a gradient; outside
a tape everything runs eagerly with no bookkeeping, which is what evaluation
uses.

Typical use::

    with Tape() as tape:
        loss = (w * x).sum()
    grads = tape.backward(loss, [w])
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

SIGMA_FLOOR = 1e-6
PROB_CLAMP = 1e-7
# smallest standard deviation accepted by the sampler; anything below is a
# degenerate (point-mass) request
MIN_SAMPLE_SIGMA = 1e-100
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")
    # make numpy defer to our reflected operators (ndarray * Tensor -> Tensor)
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of the operations executed while the tape is active.

    Nodes are appended at creation time, so walking the list backwards is a
    reverse topological order and each node is visited exactly once.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    def backward(self, loss: Tensor, params: Sequence[Tensor] = ()) -> list[np.ndarray]:
        """Reverse sweep from ``loss``; returns gradients for ``params``.

        Parameters that do not influence ``loss`` get a zero gradient.
        """
        if loss.size != 1:
            raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
        for p in params:
            p.grad = None
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NonFiniteError(f"backward: non-finite gradient reaching op {node.op!r}")
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                parent.grad = pg if parent.grad is None else parent.grad + pg
        out = []
        for p in params:
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if not np.isfinite(g).all():
                raise NonFiniteError("backward: non-finite parameter gradient")
            out.append(g)
        # drop references so the graph can be collected
        for node in self.nodes:
            node.grad = None
            node.backward_fn = None
            node.parents = ()
        self.nodes = []
        return out


def backward(loss: Tensor, params: Sequence[Tensor], tape: Tape) -> list[np.ndarray]:
    return tape.backward(loss, params)


def _record(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op}: non-finite values in forward result")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = False
    out.parents = ()
    out.backward_fn = None
    if Tape._stack and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
        Tape._stack[-1].nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- binary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _record(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _record(out, (a, b), bw, "div")


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record(ad @ bd, (a, b), bw, "matmul")


# ----------------------------------------------------------------- unary ops


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    if (ad <= 0).any():
        raise NonFiniteError("log: non-positive input")
    return _record(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def grad(g):
        # d sqrt at 0 is infinite; the sweep reports it as a non-finite gradient
        with np.errstate(divide="ignore", invalid="ignore"):
            return (0.5 * g / out,)

    return _record(out, (a,), grad, "sqrt")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record(np.logaddexp(0.0, ad), (a,), lambda g: (g * _sigmoid(ad),), "softplus")


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _record(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,), "clip")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softmax_rows(a) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ShapeError(f"softmax_rows: last axis must be non-empty, got shape {a.shape}")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record(out, (a,), bw, "softmax")


# ------------------------------------------------------------ reductions


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / max(count, 1))


# --------------------------------------------------------------- structural


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return _record(out, (a,), lambda g: (g.reshape(old),), "reshape")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {old} to {tuple(shape)}") from None
    return _record(out, (a,), lambda g: (_unbroadcast(g, old),), "broadcast_to")


def slice_(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    try:
        out = a.data[idx]
    except IndexError as exc:
        raise ShapeError(f"slice: index {idx!r} invalid for shape {shape}: {exc}") from None

    def bw(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _record(np.asarray(out), (a,), bw, "slice")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _record(out, tuple(ts), bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"stack: incompatible shapes {[t.shape for t in ts]}") from None

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _record(out, tuple(ts), bw, "stack")


PRIMITIVES = {
    "matmul": matmul, "add": add, "sub": sub, "mul": mul, "div": div,
    "concat": concat, "stack": stack, "slice": slice_, "sum": sum_, "mean": mean,
    "sigmoid": sigmoid, "tanh": tanh, "relu": relu, "softplus": softplus,
    "exp": exp, "log": log, "sqrt": sqrt, "square": square, "neg": neg,
    "softmax": softmax_rows, "reshape": reshape, "broadcast_to": broadcast_to,
    "clip": clip,
}


def primitive_forward(op: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **kwargs)


# ------------------------------------------------------------------- RNG


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator keyed on ``(seed, *stream)``.

    Distinct stream tuples give statistically independent sequences, so callers
    can derive per-epoch or per-purpose generators without sharing state.
    """
    return np.random.default_rng([int(seed), *map(int, stream)])


# ------------------------------------------------- probability primitives


def _check_sigma(sigma: np.ndarray, op: str, minimum: float = 0.0) -> None:
    if not (sigma > minimum).all():
        raise ValueError(f"{op}: standard deviation must be > {minimum:g}")


def positive_sigma(raw) -> Tensor:
    """Map an unconstrained head to a standard deviation: softplus + floor."""
    return softplus(raw) + SIGMA_FLOOR


def gaussian_sample(mu, sigma, rng: np.random.Generator) -> Tensor:
    """Reparameterized draw ``mu + sigma * eps``."""
    mu, sigma = as_tensor(mu), as_tensor(sigma)
    if mu.shape != sigma.shape:
        raise ShapeError(f"gaussian_sample: mu shape {mu.shape} != sigma shape {sigma.shape}")
    _check_sigma(sigma.data, "gaussian_sample", MIN_SAMPLE_SIGMA)
    eps = rng.standard_normal(mu.shape)
    return mu + sigma * eps


def kl_diag_gaussian_elements(mu_q, sigma_q, mu_p, sigma_p) -> Tensor:
    mu_q, sigma_q, mu_p, sigma_p = map(as_tensor, (mu_q, sigma_q, mu_p, sigma_p))
    _check_sigma(sigma_q.data, "kl_diag_gaussian")
    _check_sigma(sigma_p.data, "kl_diag_gaussian")
    var_p = square(sigma_p)
    return (log(sigma_p) - log(sigma_q)
            + (square(sigma_q) + square(mu_q - mu_p)) / (2.0 * var_p) - 0.5)


def kl_diag_gaussian(mu_q, sigma_q, mu_p, sigma_p) -> Tensor:
    """KL(N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2)) summed over all elements."""
    return kl_diag_gaussian_elements(mu_q, sigma_q, mu_p, sigma_p).sum()


def gaussian_nll_elements(x, mu, sigma) -> Tensor:
    mu, sigma = as_tensor(mu), as_tensor(sigma)
    _check_sigma(sigma.data, "gaussian_nll")
    return HALF_LOG_2PI + log(sigma) + square(as_tensor(x) - mu) / (2.0 * square(sigma))


def gaussian_nll(x, mu, sigma, mask=None) -> Tensor:
    """Gaussian negative log-likelihood summed over elements.

    ``mask`` broadcasts against the leading axes of the element array (e.g. a
    [N, T] validity mask against [N, T, d]); masked entries contribute 0.
    """
    el = gaussian_nll_elements(x, mu, sigma)
    return _masked_sum(el, mask)


def bernoulli_ce_elements(x, p) -> Tensor:
    xd = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if not np.isin(xd, (0.0, 1.0)).all():
        raise ValueError("bernoulli_ce: targets must be 0 or 1")
    p = clip(as_tensor(p), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return neg(xd * log(p) + (1.0 - xd) * log(1.0 - p))


def bernoulli_ce(x, p, mask=None) -> Tensor:
    return _masked_sum(bernoulli_ce_elements(x, p), mask)


def _masked_sum(el: Tensor, mask) -> Tensor:
    if mask is None:
        return el.sum()
    m = np.asarray(mask, dtype=np.float64)
    m = m.reshape(m.shape + (1,) * (el.ndim - m.ndim))
    return (el * m).sum()


def global_norm(arrays: Iterable[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(a, a)) for a in arrays))
