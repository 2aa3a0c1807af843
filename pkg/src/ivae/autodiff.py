"""Tape-based reverse-mode automatic differentiation on numpy float64 arrays.

A :class:`Tape` is opened as a context manager; every differentiable op
executed while it is active appends its output to the tape, so the node list
is already in topological order.  :meth:`Tape.backward` walks it in reverse.

Backward junctions used by impartiality blocks are supported through
*flush hooks*: a hook registered for a group of tensors runs right before
the first tensor of that group is back-propagated, at which point every
consumer of the group has already delivered its gradient.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

_local = threading.local()


class TapeError(RuntimeError):
    """Misuse of a tape (double backward, missing tape, ...)."""


class NonFiniteLossError(FloatingPointError):
    pass


def current_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array with an optional position on the active tape."""

    __slots__ = ("data", "requires_grad", "name", "parents", "backward_fn", "op")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self.backward_fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """Trainable leaf tensor.

    ``group`` is one of ``"shared"``, ``"encoder"``, ``"decoder"`` or
    ``"head"``; an optional ``modality`` index narrows encoder/decoder/head
    parameters to one modality.
    """

    __slots__ = ("group", "modality")

    def __init__(self, data, name: str, group: str = "shared", modality: int | None = None):
        super().__init__(data, requires_grad=True, name=name)
        self.group = group
        self.modality = modality


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Flush:
    __slots__ = ("tensors", "fn", "done")

    def __init__(self, tensors: Sequence[Tensor], fn: Callable):
        self.tensors = tuple(tensors)
        self.fn = fn
        self.done = False


class Tape:
    """Define-by-run record of differentiable operations.

    Parameters
    ----------
    seed : int or numpy Generator, optional
        Source of randomness for reparameterized sampling and dropout.
    training : bool
        Train-mode flag read by dropout and batch-norm.
    """

    def __init__(self, seed=None, training: bool = True):
        self.nodes: list[Tensor] = []
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.training = training
        self._flushes: dict[int, list[_Flush]] = {}
        self._consumed = False

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, out: Tensor) -> None:
        if self._consumed:
            raise TapeError("tape already consumed by backward(); open a new tape")
        self.nodes.append(out)

    def register_flush(self, tensors: Sequence[Tensor], fn: Callable[[dict], None]) -> None:
        """Run ``fn(grads)`` before any of ``tensors`` is back-propagated.

        ``fn`` receives the live gradient dictionary (keyed by ``id``) and may
        add to the entries of ``tensors``.
        """
        flush = _Flush(tensors, fn)
        for t in flush.tensors:
            self._flushes.setdefault(id(t), []).append(flush)

    def _run_flushes(self, key: int, grads: dict, leaves: dict) -> None:
        for flush in self._flushes.pop(key, ()):
            if not flush.done:
                flush.done = True
                flush.fn(grads)
                for t in flush.tensors:
                    if t.backward_fn is None and t.requires_grad and id(t) in grads:
                        leaves[id(t)] = t

    def backward(self, loss: Tensor, params: Iterable[Parameter] | None = None) -> dict[str, np.ndarray]:
        """Back-propagate a scalar ``loss``; return ``{leaf name: gradient}``.

        Every named leaf that received gradient is reported (parameters are
        always named).
        When ``params`` is given every listed parameter appears in the result,
        with zeros for those the loss does not depend on.
        """
        if self._consumed:
            raise TapeError("backward() called twice on the same tape without a new forward pass")
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        if not np.isfinite(loss.data).all():
            raise NonFiniteLossError(f"non-finite loss {float(loss.data)!r}")
        self._consumed = True

        grads: dict[int, np.ndarray] = {}
        leaves: dict[int, Tensor] = {}
        if loss.requires_grad:
            grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            key = id(node)
            if key in self._flushes:
                self._run_flushes(key, grads, leaves)
            g = grads.pop(key, None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pkey = id(parent)
                if parent.backward_fn is None:
                    leaves[pkey] = parent
                prev = grads.get(pkey)
                grads[pkey] = pg if prev is None else prev + pg
        for key in list(self._flushes):
            self._run_flushes(key, grads, leaves)

        out: dict[str, np.ndarray] = {}
        for key, leaf in leaves.items():
            if leaf.name is not None and key in grads:
                out[leaf.name] = grads[key]
        if params is not None:
            for p in params:
                if p.name not in out:
                    out[p.name] = np.zeros_like(p.data)
        self.nodes.clear()
        return out


# ---------------------------------------------------------------------------
# node construction


def _make(data: np.ndarray, parents: tuple, backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.op = op
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
        tape.record(out)
    else:
        out.requires_grad = False
        out.parents = ()
        out.backward_fn = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise binary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _make(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad ** exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),), "pow")


def matmul(a, b) -> Tensor:
    """``a @ b`` with ``a`` of shape (..., n) and ``b`` of shape (n, m)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# elementwise unary ops


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _make(out, (a,), lambda g: (g / ad,), "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _make(out, (a,), lambda g: (g * (out > 0),), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.logaddexp(0.0, ad), (a,), lambda g: (g * expit(ad),), "softplus")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _make(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(sum_(a, axis=axes, keepdims=keepdims), 1.0 / n)


def logsumexp(a, axis=-1, keepdims: bool = False) -> Tensor:
    """Overflow-safe ``log(sum(exp(a)))`` along ``axis``."""
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    ad = a.data
    m = np.max(ad, axis=axes, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out_k = np.log(np.sum(np.exp(ad - m), axis=axes, keepdims=True)) + m
    out = out_k if keepdims else np.squeeze(out_k, axis=axes)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (g * np.exp(ad - out_k),)

    return _make(out, (a,), backward, "logsumexp")


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    """Concatenate along the last axis."""
    tensors = [as_tensor(t) for t in tensors]
    if axis not in (-1, tensors[0].ndim - 1):
        raise ValueError("concat only supports the last axis")
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise ValueError(f"concat: shapes {tensors[0].shape} and {t.shape} differ outside the last axis")
    sizes = np.cumsum([t.shape[-1] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=-1))

    return _make(np.concatenate([t.data for t in tensors], axis=-1), tuple(tensors), backward, "concat")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), backward, "getitem")


def expand(a, k: int) -> Tensor:
    """Prepend a sample axis of length ``k`` (a broadcast view)."""
    a = as_tensor(a)
    return _make(np.broadcast_to(a.data, (k, *a.shape)), (a,), lambda g: (g.sum(axis=0),), "expand")


# ---------------------------------------------------------------------------
# gradient routing


def detach(a) -> Tensor:
    """Same values, no gradient path."""
    a = as_tensor(a)
    return Tensor(a.data)


def scale_grad(a, factor: float) -> Tensor:
    """Identity forward; multiplies the incoming gradient by ``factor``."""
    a = as_tensor(a)
    return _make(a.data, (a,), lambda g: (g * factor,), "scale_grad")


def junction(a, sink: Callable[[np.ndarray], None]) -> Tensor:
    """Identity forward; the backward gradient goes to ``sink`` instead of ``a``.

    The owner of ``sink`` is responsible for routing a (possibly modified)
    gradient back into ``a`` via :meth:`Tape.register_flush`.
    """
    a = as_tensor(a)

    def backward(g):
        sink(g)
        return (None,)

    return _make(a.data, (a,), backward, "junction")


# ---------------------------------------------------------------------------
# stochastic ops


def tape_rng() -> np.random.Generator:
    tape = current_tape()
    if tape is None:
        raise TapeError("stochastic op requires an active Tape (its rng supplies the noise)")
    return tape.rng


def reparam_normal(mu, sigma, k: int = 1, *, allow_degenerate: bool = False) -> Tensor:
    """Draw ``k`` samples ``mu + sigma * eps``; result has shape ``(k, *mu.shape)``."""
    mu, sigma = as_tensor(mu), as_tensor(sigma)
    if k < 1:
        raise ValueError("k must be >= 1")
    bad = sigma.data < 0 if allow_degenerate else sigma.data <= 0
    if np.any(bad):
        raise ValueError("reparam_normal: sigma must be strictly positive")
    shape = np.broadcast_shapes(mu.shape, sigma.shape)
    eps = tape_rng().standard_normal((k, *shape))
    return add(mu, mul(sigma, eps))


def dropout(a, p: float, training: bool | None = None) -> Tensor:
    a = as_tensor(a)
    tape = current_tape()
    if training is None:
        training = tape is not None and tape.training
    if not training or p <= 0.0:
        return a
    keep = (tape_rng().random(a.shape) >= p) / (1.0 - p)
    return _make(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


def batch_norm(a, gamma, beta, eps: float = 1e-5) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalize over all leading axes with batch statistics.

    Returns the output together with the batch mean and (biased) variance
    so callers can maintain running statistics.
    """
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    x = a.data
    axes = tuple(range(x.ndim - 1))
    n = int(np.prod([x.shape[i] for i in axes]))
    mu = x.mean(axis=axes)
    var = x.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    gd = gamma.data

    def backward(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if a.requires_grad:
            gxhat = g * gd
            gx = inv / n * (n * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))
        return gx, gg, gb

    return _make(xhat * gd + beta.data, (a, gamma, beta), backward, "batch_norm"), mu, var


__all__ = [
    "Tensor", "Parameter", "Tape", "TapeError", "NonFiniteLossError", "as_tensor", "current_tape",
    "add", "sub", "mul", "div", "neg", "power", "matmul", "exp", "log", "tanh", "relu", "sigmoid",
    "softplus", "square", "sqrt", "abs_", "sum_", "mean", "logsumexp", "softmax", "log_softmax",
    "concat", "reshape", "getitem", "expand", "detach", "scale_grad", "junction",
    "reparam_normal", "dropout", "batch_norm", "tape_rng",
]
