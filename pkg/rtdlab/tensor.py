"""
Dense tensors over numpy with a reverse-mode gradient tape.

Every op returns a new Tensor; values are never mutated in place by the engine,
so arrays captured for the backward pass stay valid until the tape is dropped.
"""
import contextlib
import logging
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractViolation, NumericFault

logger = logging.getLogger(__name__)

_STATE = {
    'dtype': np.float64,
    'checked': False,
    'grad_enabled': True,
}

LOG_CLAMP = 1e-6


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ContractViolation(f"Unsupported dtype {dtype}; use float64 or float32")
    _STATE['dtype'] = dtype.type


def get_default_dtype():
    return _STATE['dtype']


@contextlib.contextmanager
def checked_mode(flag: bool = True):
    previous = _STATE['checked']
    _STATE['checked'] = bool(flag)
    try:
        yield
    finally:
        _STATE['checked'] = previous


@contextlib.contextmanager
def no_grad():
    """Forward passes inside this block record no tape."""
    previous = _STATE['grad_enabled']
    _STATE['grad_enabled'] = False
    try:
        yield
    finally:
        _STATE['grad_enabled'] = previous


def _as_array(value) -> np.ndarray:
    dtype = _STATE['dtype']
    if isinstance(value, np.ndarray) and value.dtype == dtype:
        return value
    return np.asarray(value, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_finite(array: np.ndarray, op: str) -> None:
    if _STATE['checked'] and not np.all(np.isfinite(array)):
        raise NumericFault(op)


class Tensor:
    __slots__ = ('data', 'requires_grad', 'grad', 'name', 'op', '_parents', '_backward')
    # Makes `ndarray <op> Tensor` defer to the Tensor's reflected method.
    __array_ufunc__ = None
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str = None):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self.op = 'leaf'
        self._parents = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: Sequence['Tensor'], backward: Callable, op: str) -> 'Tensor':
        _check_finite(data, op)
        out = Tensor(data)
        out.op = op
        if _STATE['grad_enabled'] and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @staticmethod
    def lift(value) -> 'Tensor':
        return value if isinstance(value, Tensor) else Tensor(value)

    # -- introspection ----------------------------------------------------------

    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> 'Tensor':
        return Tensor(self.data)

    def __repr__(self):
        label = f" name={self.name}" if self.name else ''
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad}{label})"

    def __len__(self):
        return self.data.shape[0]

    # -- elementwise arithmetic ---------------------------------------------------

    def __add__(self, other):
        other = Tensor.lift(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor._from_op(self.data + other.data, (self, other), backward, 'add')

    __radd__ = __add__

    def __sub__(self, other):
        other = Tensor.lift(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

        return Tensor._from_op(self.data - other.data, (self, other), backward, 'sub')

    def __rsub__(self, other):
        return Tensor.lift(other) - self

    def __mul__(self, other):
        other = Tensor.lift(other)
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor._from_op(a * b, (self, other), backward, 'mul')

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor.lift(other)
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

        return Tensor._from_op(a / b, (self, other), backward, 'div')

    def __rtruediv__(self, other):
        return Tensor.lift(other) / self

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,), 'neg')

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise ContractViolation("pow only supports a constant exponent")
        a = self.data

        def backward(g):
            return (g * exponent * a ** (exponent - 1),)

        return Tensor._from_op(a ** exponent, (self,), backward, 'pow')

    def __matmul__(self, other):
        other = Tensor.lift(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ContractViolation(f"matmul needs ndim >= 2, got {a.shape} @ {b.shape}")

        def backward(g):
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return Tensor._from_op(a @ b, (self, other), backward, 'matmul')

    # -- reductions and shape ---------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor._from_op(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward, 'sum')

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[i] for i in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / max(count, 1))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        return Tensor._from_op(self.data.reshape(shape), (self,), lambda g: (g.reshape(original),), 'reshape')

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor._from_op(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),), 'transpose')

    def __getitem__(self, index):
        shape = self.shape

        def backward(g):
            full = np.zeros(shape, dtype=g.dtype)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._from_op(self.data[index], (self,), backward, 'getitem')

    # -- nonlinearities ------------------------------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return Tensor._from_op(out, (self,), lambda g: (g * out,), 'exp')

    def log(self):
        a = self.data
        return Tensor._from_op(np.log(a), (self,), lambda g: (g / a,), 'log')

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._from_op(out, (self,), lambda g: (g * (1.0 - out * out),), 'tanh')

    def sigmoid(self):
        out = _sigmoid(self.data)
        return Tensor._from_op(out, (self,), lambda g: (g * out * (1.0 - out),), 'sigmoid')

    def relu(self):
        a = self.data
        return Tensor._from_op(np.maximum(a, 0.0), (self,), lambda g: (g * (a > 0),), 'relu')

    def gelu(self):
        # tanh approximation, as in BERT/ELECTRA
        a = self.data
        c = math.sqrt(2.0 / math.pi)
        inner = c * (a + 0.044715 * a ** 3)
        t = np.tanh(inner)
        out = 0.5 * a * (1.0 + t)

        def backward(g):
            d_inner = c * (1.0 + 3 * 0.044715 * a * a)
            return (g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * d_inner),)

        return Tensor._from_op(out, (self,), backward, 'gelu')

    def clamp(self, low: float, high: float):
        a = self.data
        inside = (a >= low) & (a <= high)
        return Tensor._from_op(np.clip(a, low, high), (self,), lambda g: (g * inside,), 'clamp')

    def softmax(self, axis: int = -1):
        out = softmax_array(self.data, axis=axis)

        def backward(g):
            return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

        return Tensor._from_op(out, (self,), backward, 'softmax')

    def log_softmax(self, axis: int = -1):
        out = log_softmax_array(self.data, axis=axis)

        def backward(g):
            return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

        return Tensor._from_op(out, (self,), backward, 'log_softmax')

    def backward(self, params: Iterable['Tensor'] = None):
        return backward(self, params)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    positive = x >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    ex = np.exp(x[~positive])
    out[~positive] = ex / (1.0 + ex)
    return out


def sigmoid_array(x) -> np.ndarray:
    return _sigmoid(np.asarray(x, dtype=_STATE['dtype']))


def softmax_array(x, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=_STATE['dtype'])
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax_array(x, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=_STATE['dtype'])
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


# -- functional ops --------------------------------------------------------------------

def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup; the gradient scatters back into the table."""
    return table[np.asarray(ids, dtype=np.int64)]


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    a = x.data
    mu = a.mean(axis=-1, keepdims=True)
    centered = a - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    w, b = gamma.data, beta.data
    out = xhat * w + b

    def backward(g):
        gx = g * w
        dx = rstd * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        dw = _unbroadcast(g * xhat, w.shape)
        db = _unbroadcast(g, b.shape)
        return dx, dw, db

    return Tensor._from_op(out, (x, gamma, beta), backward, 'layer_norm')


def dropout(x: Tensor, rate: float, rng: np.random.Generator = None) -> Tensor:
    """Inverted dropout. A missing rng or zero rate means eval mode."""
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(_STATE['dtype']) / (1.0 - rate)
    return x * keep


def log_clamped(p: Tensor, floor: float = LOG_CLAMP) -> Tensor:
    """log(p) with p clamped into [floor, 1-floor] first."""
    return p.clamp(floor, 1.0 - floor).log()


# -- tape traversal ------------------------------------------------------------------------

def _topological_order(root: Tensor) -> list:
    order, visited = [], set()
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] = None):
    """
    Populate `.grad` on every leaf reachable from `loss`.

    When `params` is given, their grads are reset to zero first, so parameters
    the loss does not reach end up with an all-zero gradient.
    """
    if loss.data.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    params = list(params) if params is not None else None
    if params is not None:
        for p in params:
            p.grad = np.zeros_like(p.data)
    if not loss.requires_grad:
        return params

    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = np.ascontiguousarray(g)
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            _check_finite(pg, f"{node.op}.backward")
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg
    return params


# -- finite-difference oracle ------------------------------------------------------------------

def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
              floor: float = 1e-6) -> float:
    """
    Compare reverse-mode gradients of `fn(*inputs)` against central differences.

    Returns the maximum relative error over all input elements, where the error of
    one element is |analytic - numeric| / max(|analytic|, |numeric|, floor).
    """
    loss = fn(*inputs)
    backward(loss, inputs)
    analytic = [p.grad.copy() for p in inputs]
    worst = 0.0
    with no_grad():
        for p, grad in zip(inputs, analytic):
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                saved = flat[i]
                flat[i] = saved + eps
                up = fn(*inputs).item()
                flat[i] = saved - eps
                down = fn(*inputs).item()
                flat[i] = saved
                numeric = (up - down) / (2 * eps)
                a = grad.reshape(-1)[i]
                scale = max(abs(a), abs(numeric), floor)
                worst = max(worst, abs(a - numeric) / scale)
    return worst
