# Copyright (c) rprnet contributors

"""Dense-tensor reverse-mode automatic differentiation on numpy arrays.

Every op records its parents and a closure that scatters the output gradient
back into them. `Tensor.backward()` walks the graph in reverse topological
order. Values are 64-bit floats and tensors are rank 1 to 4.
"""

from contextlib import contextmanager
import logging
import threading
from typing import Callable, Iterable, Sequence, Union

import numpy as np
from scipy.special import expit

from rprnet.api import NumericalError, ShapeError

log = logging.getLogger(__name__)

MAX_RANK = 4

_state = threading.local()

def is_grad_enabled() -> bool:
    return getattr(_state, 'grad_enabled', True)

@contextmanager
def no_grad():
    """Disables graph recording for the current thread."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous

def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad

class Tensor:
    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = ''):
        self.data = np.asarray(data, dtype=np.float64)
        if self.data.ndim == 0:
            self.data = self.data.reshape(1)
        if self.data.ndim > MAX_RANK:
            raise ShapeError(f"Tensors are limited to rank {MAX_RANK}", self.data.shape)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents = _parents
        self._op = _op
        self._backward: Callable[[], None] = lambda: None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op='{self._op}', requires_grad={self.requires_grad})"

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.requires_grad:
            self.grad += grad

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self, grad: np.ndarray = None) -> None:
        if grad is None:
            if self.size != 1:
                raise ShapeError("backward() without a seed gradient needs a single-element tensor", self.shape)
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise ShapeError("Seed gradient shape does not match the tensor", grad.shape, self.shape)

        order = []
        visited = set()
        stack = [(self, False)]
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
                if id(parent) not in visited:
                    stack.append((parent, False))

        self._accumulate(grad)
        for node in reversed(order):
            if node.requires_grad:
                node._backward()

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __pow__(self, exponent): return power(self, exponent)
    def __matmul__(self, other): return matmul(self, other)

    def sum(self, axes=None, keepdims: bool = False): return reduce_sum(self, axes, keepdims)
    def mean(self, axes=None, keepdims: bool = False): return reduce_mean(self, axes, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

class Parameter(Tensor):
    """A named leaf tensor owned by a model."""

    def __init__(self, name: str, data, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = trainable

    def __repr__(self) -> str:
        return f"Parameter(name='{self.name}', shape={self.shape}, trainable={self.trainable})"

def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)

def _make(data: np.ndarray, parents: Sequence[Tensor], op: str) -> Tensor:
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=track, _parents=tuple(parents) if track else (), _op=op)

def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"Operands of '{op}' do not broadcast", a.shape, b.shape) from None

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, 'add')
    out = _make(a.data + b.data, (a, b), 'add')

    def _backward():
        a._accumulate(_unbroadcast(out.grad, a.shape))
        b._accumulate(_unbroadcast(out.grad, b.shape))
    out._backward = _backward
    return out

def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, 'sub')
    out = _make(a.data - b.data, (a, b), 'sub')

    def _backward():
        a._accumulate(_unbroadcast(out.grad, a.shape))
        b._accumulate(_unbroadcast(-out.grad, b.shape))
    out._backward = _backward
    return out

def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, 'mul')
    out = _make(a.data * b.data, (a, b), 'mul')

    def _backward():
        a._accumulate(_unbroadcast(out.grad * b.data, a.shape))
        b._accumulate(_unbroadcast(out.grad * a.data, b.shape))
    out._backward = _backward
    return out

def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, 'div')
    out = _make(a.data / b.data, (a, b), 'div')

    def _backward():
        a._accumulate(_unbroadcast(out.grad / b.data, a.shape))
        b._accumulate(_unbroadcast(-out.grad * a.data / b.data ** 2, b.shape))
    out._backward = _backward
    return out

def power(x, exponent: Union[float, Tensor]) -> Tensor:
    """x ** p for a constant or learnable exponent p; d/dp = x^p ln x."""
    x = as_tensor(x)
    p = as_tensor(exponent)
    _broadcast_shape(x, p, 'pow')
    value = np.power(x.data, p.data)
    out = _make(value, (x, p), 'pow')

    def _backward():
        if x.requires_grad:
            x._accumulate(_unbroadcast(out.grad * p.data * np.power(x.data, p.data - 1.0), x.shape))
        if p.requires_grad:
            log_x = np.log(np.where(x.data > 0.0, x.data, 1.0))
            p._accumulate(_unbroadcast(out.grad * value * log_x, p.shape))
    out._backward = _backward
    return out

def sqrt(x) -> Tensor:
    x = as_tensor(x)
    value = np.sqrt(x.data)
    out = _make(value, (x,), 'sqrt')

    def _backward():
        x._accumulate(out.grad * 0.5 / value)
    out._backward = _backward
    return out

def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0.0
    out = _make(np.where(mask, x.data, 0.0), (x,), 'relu')

    def _backward():
        x._accumulate(out.grad * mask)
    out._backward = _backward
    return out

def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    value = expit(x.data)
    out = _make(value, (x,), 'sigmoid')

    def _backward():
        x._accumulate(out.grad * value * (1.0 - value))
    out._backward = _backward
    return out

def clamp_min(x, minimum: float) -> Tensor:
    x = as_tensor(x)
    mask = x.data > minimum
    out = _make(np.where(mask, x.data, minimum), (x,), 'clamp_min')

    def _backward():
        x._accumulate(out.grad * mask)
    out._backward = _backward
    return out

def matmul(x, w) -> Tensor:
    """(..., i) @ (i, j) -> (..., j); the right operand is a 2-D weight."""
    x, w = as_tensor(x), as_tensor(w)
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError("matmul expects (..., i) @ (i, j)", x.shape, w.shape)
    out = _make(x.data @ w.data, (x, w), 'matmul')

    def _backward():
        x._accumulate(out.grad @ w.data.T)
        w._accumulate(x.data.reshape(-1, w.shape[0]).T @ out.grad.reshape(-1, w.shape[1]))
    out._backward = _backward
    return out

def _normalize_axes(axes, ndim: int):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(a % ndim for a in axes)

def reduce_sum(x, axes=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axes, x.data.ndim)
    kept_shape = np.sum(x.data, axis=axes, keepdims=True).shape
    out = _make(np.sum(x.data, axis=axes, keepdims=keepdims), (x,), 'sum')

    def _backward():
        x._accumulate(np.broadcast_to(out.grad.reshape(kept_shape), x.shape))
    out._backward = _backward
    return out

def reduce_mean(x, axes=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axes, x.data.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    return mul(reduce_sum(x, axes, keepdims), 1.0 / count)

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        value = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("Cannot reshape", x.shape, tuple(shape)) from None
    out = _make(value, (x,), 'reshape')

    def _backward():
        x._accumulate(out.grad.reshape(x.shape))
    out._backward = _backward
    return out

def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        value = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("Cannot concatenate", *[t.shape for t in tensors]) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = _make(value, tensors, 'concat')

    def _backward():
        for t, piece in zip(tensors, np.split(out.grad, bounds, axis=axis)):
            t._accumulate(piece)
    out._backward = _backward
    return out

def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis % (len(shape) + 1), 1)
        expanded.append(reshape(t, tuple(shape)))
    return concat(expanded, axis=axis)

def gather(source, index) -> Tensor:
    """Rows of `source` picked by an integer index table; the adjoint scatter-adds."""
    source = as_tensor(source)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < -source.shape[0] or index.max() >= source.shape[0]):
        raise ShapeError("Gather index out of range for source", index.shape, source.shape)
    out = _make(source.data[index], (source,), 'gather')

    def _backward():
        if source.requires_grad:
            np.add.at(source.grad, index, out.grad)
    out._backward = _backward
    return out

def einsum(subscripts: str, *operands) -> Tensor:
    """Contraction over named axes, e.g. 'nkio,nki->no'.

    Every index of an operand must appear in the output or in another operand,
    and no operand may repeat an index.
    """
    operands = [as_tensor(o) for o in operands]
    if '->' not in subscripts or '.' in subscripts:
        raise ShapeError(f"einsum needs explicit output subscripts without ellipsis, got '{subscripts}'")
    inputs, output = subscripts.replace(' ', '').split('->')
    specs = inputs.split(',')
    if len(specs) != len(operands):
        raise ShapeError(f"einsum '{subscripts}' expects {len(specs)} operands", *[o.shape for o in operands])
    for i, spec in enumerate(specs):
        others = set(output).union(*[set(s) for j, s in enumerate(specs) if j != i])
        if len(set(spec)) != len(spec) or not set(spec) <= others:
            raise ShapeError(f"einsum operand '{spec}' is not supported by the reverse pass")
    try:
        value = np.einsum(subscripts, *[o.data for o in operands])
    except ValueError:
        raise ShapeError(f"einsum '{subscripts}' shape mismatch", *[o.shape for o in operands]) from None
    out = _make(value, operands, 'einsum')

    def _backward():
        for i, operand in enumerate(operands):
            if not operand.requires_grad:
                continue
            other_specs = [s for j, s in enumerate(specs) if j != i]
            other_data = [o.data for j, o in enumerate(operands) if j != i]
            grad_subscripts = ','.join([output] + other_specs) + '->' + specs[i]
            operand._accumulate(np.einsum(grad_subscripts, out.grad, *other_data))
    out._backward = _backward
    return out

def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()

def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
               num_samples: int = 200, rng_seed: int = 0) -> float:
    """Max relative error between backprop and central differences.

    Parameters with more than `num_samples` elements are checked on a random
    subsample of that many coordinates.
    """
    rng = np.random.default_rng(rng_seed)
    zero_grad(params)
    loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise NumericalError("Loss is not finite at the evaluation point")
    loss.backward()

    worst = 0.0
    for param in params:
        analytic = param.grad.copy()
        if not np.all(np.isfinite(analytic)):
            raise NumericalError("Backprop gradient is not finite", getattr(param, 'name', None))
        flat = param.data.reshape(-1)
        if flat.size > num_samples:
            coords = rng.choice(flat.size, size=num_samples, replace=False)
        else:
            coords = np.arange(flat.size)
        for c in coords:
            original = flat[c]
            with no_grad():
                flat[c] = original + eps
                upper = float(f().data.reshape(-1)[0])
                flat[c] = original - eps
                lower = float(f().data.reshape(-1)[0])
            flat[c] = original
            if not (np.isfinite(upper) and np.isfinite(lower)):
                raise NumericalError("Finite-difference loss is not finite", getattr(param, 'name', None))
            numeric = (upper - lower) / (2.0 * eps)
            g = float(analytic.reshape(-1)[c])
            error = abs(g - numeric) / max(1.0, abs(g), abs(numeric))
            worst = max(worst, error)
    log.debug(f"grad_check over {len(params)} tensors: max relative error {worst:.3e}")
    return worst

def _away_from_zero(rng: np.random.Generator, shape) -> np.ndarray:
    values = rng.uniform(0.2, 1.5, size=shape)
    return values * rng.choice([-1.0, 1.0], size=shape)

def op_grad_checks(rng_seed: int = 0, eps: float = 1e-5) -> dict:
    """grad_check of every op in isolation; op name -> max relative error.

    Inputs stay clear of the kinks of relu and clamp_min and of the domain
    edges of sqrt, div and power.
    """
    rng = np.random.default_rng(rng_seed)

    def param(name, values):
        return Parameter(name, values)

    def check(build, *params):
        out_shape = build().shape
        weight = rng.normal(size=out_shape)
        return grad_check(lambda: reduce_sum(build() * weight), params, eps=eps, rng_seed=rng_seed)

    a = param('a', rng.normal(size=(3, 4)))
    b = param('b', rng.normal(size=(3, 4)))
    row = param('row', rng.normal(size=(4,)))
    pos = param('pos', rng.uniform(0.5, 2.0, size=(3, 4)))
    p = param('p', np.array([2.5]))
    kinked = param('kinked', _away_from_zero(rng, (3, 4)))
    x3 = param('x3', rng.normal(size=(2, 3, 4)))
    w = param('w', rng.normal(size=(4, 5)))
    k4 = param('k4', rng.normal(size=(2, 3, 4, 5)))
    f3 = param('f3', rng.normal(size=(2, 3, 4)))
    index = np.array([[0, 2], [1, 1], [2, 0]])

    return {
        'add': check(lambda: add(a, row), a, row),
        'sub': check(lambda: sub(a, b), a, b),
        'mul': check(lambda: mul(a, row), a, row),
        'div': check(lambda: div(a, pos), a, pos),
        'power': check(lambda: power(pos, 3.0), pos),
        'power_learnable': check(lambda: power(pos, p), pos, p),
        'sqrt': check(lambda: sqrt(pos), pos),
        'relu': check(lambda: relu(kinked), kinked),
        'sigmoid': check(lambda: sigmoid(a), a),
        'clamp_min': check(lambda: clamp_min(kinked, 0.0), kinked),
        'matmul': check(lambda: matmul(x3, w), x3, w),
        'reduce_sum': check(lambda: reduce_sum(x3, axes=1), x3),
        'reduce_mean': check(lambda: reduce_mean(x3, axes=(0, 2), keepdims=True), x3),
        'reshape': check(lambda: reshape(x3, (6, 4)), x3),
        'concat': check(lambda: concat([a, b], axis=1), a, b),
        'stack': check(lambda: stack([a, b], axis=0), a, b),
        'gather': check(lambda: gather(a, index), a),
        'einsum': check(lambda: einsum('nkio,nki->no', k4, f3), k4, f3),
    }
