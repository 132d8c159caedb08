"""
Automatic differentiation for the small dense networks of the flows.

Reverse mode: a Tape records every operation on Var objects (numpy arrays
underneath) together with a vector-Jacobian closure per parent; gradient()
walks the nodes once in reverse order.

Second order: Dual2 carries a value, the two first-order sensitivities and the
three unique second-order sensitivities with respect to a 2-D input. Its
components may themselves be Vars, so taping a Dual2 computation yields exact
parameter gradients of curvature terms.
"""
import logging
from dataclasses import dataclass, fields, is_dataclass, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from error_handling import PreconditionError, UnsupportedPrimitiveError

logger = logging.getLogger(__name__)


class _Node:
    __slots__ = ('parents',)

    def __init__(self, parents: Tuple[Tuple[int, Callable[[np.ndarray], np.ndarray]], ...]):
        self.parents = parents


class Tape:
    """Append-only record of operations in topological order."""

    def __init__(self):
        self.nodes: List[_Node] = []

    def variable(self, value) -> 'Var':
        """Register a leaf whose gradient will be requested."""
        index = len(self.nodes)
        self.nodes.append(_Node(()))
        return Var(self, np.array(value, dtype=float), index)

    def constant(self, value) -> 'Var':
        return Var(self, np.asarray(value, dtype=float), None)

    def record(self, value: np.ndarray, parents: Sequence[Tuple['Var', Callable]]) -> 'Var':
        live = tuple((p.index, vjp) for p, vjp in parents if p.index is not None)
        if not live:
            return Var(self, value, None)
        index = len(self.nodes)
        self.nodes.append(_Node(live))
        return Var(self, value, index)

    def gradient(self, output: 'Var', wrt: Sequence['Var']) -> List[np.ndarray]:
        """Gradients of a scalar output with respect to leaves."""
        if output.size != 1:
            raise PreconditionError(f"gradient needs a scalar output, got shape {output.shape}")
        if output.index is None:
            return [np.zeros_like(w.value) for w in wrt]
        wanted = {w.index for w in wrt}
        adjoints: Dict[int, np.ndarray] = {output.index: np.ones_like(output.value)}
        for index in range(output.index, -1, -1):
            upstream = adjoints.get(index)
            if upstream is None:
                continue
            for parent, vjp in self.nodes[index].parents:
                contribution = vjp(upstream)
                if parent in adjoints:
                    adjoints[parent] = adjoints[parent] + contribution
                else:
                    adjoints[parent] = contribution
            if index not in wanted:
                del adjoints[index]
        return [adjoints.get(w.index, np.zeros_like(w.value)) for w in wrt]


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back to the operand shape."""
    grad = np.asarray(grad)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Var:
    """Array-valued node on a Tape."""
    __slots__ = ('tape', 'value', 'index')

    def __init__(self, tape: Tape, value: np.ndarray, index: Optional[int]):
        self.tape = tape
        self.value = value
        self.index = index

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def T(self) -> 'Var':
        return transpose(self)

    def __repr__(self) -> str:
        return f"Var(shape={self.shape}, index={self.index})"

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        handler = _UFUNC_HANDLERS.get(ufunc)
        if method != '__call__' or kwargs or handler is None:
            raise UnsupportedPrimitiveError(f"numpy {ufunc.__name__}.{method} is not differentiable here")
        return handler(*inputs)

    def __add__(self, other):
        return NotImplemented if isinstance(other, Dual2) else add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return NotImplemented if isinstance(other, Dual2) else subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return NotImplemented if isinstance(other, Dual2) else multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return NotImplemented if isinstance(other, Dual2) else divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __matmul__(self, other):
        return NotImplemented if isinstance(other, Dual2) else matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return negative(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __abs__(self):
        return absolute(self)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None):
        count = self.size if axis is None else self.shape[axis]
        return reduce_sum(self, axis) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _tape_of(*args) -> Tape:
    for arg in args:
        if isinstance(arg, Var):
            return arg.tape
    raise UnsupportedPrimitiveError("operation needs at least one Var operand")


def _lift(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        return x
    if isinstance(x, Dual2):
        raise UnsupportedPrimitiveError("Dual2 operands must be combined through Dual2 arithmetic")
    return tape.constant(x)


def _binary(a, b) -> Tuple[Tape, Var, Var]:
    tape = _tape_of(a, b)
    return tape, _lift(tape, a), _lift(tape, b)


def add(a, b) -> Var:
    tape, a, b = _binary(a, b)
    return tape.record(a.value + b.value, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ])


def subtract(a, b) -> Var:
    tape, a, b = _binary(a, b)
    return tape.record(a.value - b.value, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: -_unbroadcast(g, b.shape)),
    ])


def multiply(a, b) -> Var:
    tape, a, b = _binary(a, b)
    return tape.record(a.value * b.value, [
        (a, lambda g: _unbroadcast(g * b.value, a.shape)),
        (b, lambda g: _unbroadcast(g * a.value, b.shape)),
    ])


def divide(a, b) -> Var:
    tape, a, b = _binary(a, b)
    return tape.record(a.value / b.value, [
        (a, lambda g: _unbroadcast(g / b.value, a.shape)),
        (b, lambda g: _unbroadcast(-g * a.value / (b.value * b.value), b.shape)),
    ])


def negative(a: Var) -> Var:
    return a.tape.record(-a.value, [(a, lambda g: -g)])


def power(a: Var, exponent) -> Var:
    if isinstance(exponent, Var):
        raise UnsupportedPrimitiveError("variable exponents are not supported")
    p = float(exponent)
    return a.tape.record(a.value ** p, [(a, lambda g: g * p * a.value ** (p - 1.0))])


def matmul(a, b) -> Var:
    tape, a, b = _binary(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise UnsupportedPrimitiveError(f"matmul supports 2-D operands only, got {a.shape} @ {b.shape}")
    return tape.record(a.value @ b.value, [
        (a, lambda g: g @ b.value.T),
        (b, lambda g: a.value.T @ g),
    ])


def transpose(a: Var) -> Var:
    return a.tape.record(a.value.T, [(a, lambda g: g.T)])


def reshape(a: Var, shape) -> Var:
    original = a.shape
    return a.tape.record(a.value.reshape(shape), [(a, lambda g: g.reshape(original))])


def _is_basic_index(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)


def getitem(a: Var, key) -> Var:
    basic = _is_basic_index(key)

    def vjp(g):
        out = np.zeros_like(a.value)
        if basic:
            out[key] += g
        else:
            np.add.at(out, key, g)
        return out
    return a.tape.record(a.value[key], [(a, vjp)])


def reduce_sum(a: Var, axis=None, keepdims=False) -> Var:
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()
    return a.tape.record(np.sum(a.value, axis=axis, keepdims=keepdims), [(a, vjp)])


def _unary(x, fn, derivative_from):
    """Elementwise op; derivative_from(x, y) gives dy/dx from input and output values."""
    y = fn(x.value)
    return x.tape.record(y, [(x, lambda g: g * derivative_from(x.value, y))])


def _stack_vars(items: Sequence, axis: int) -> Var:
    tape = _tape_of(*items)
    lifted = [_lift(tape, item) for item in items]
    value = np.stack([v.value for v in lifted], axis=axis)
    parents = [(v, (lambda i: lambda g: np.take(g, i, axis=axis))(i)) for i, v in enumerate(lifted)]
    return tape.record(value, parents)


# --- dispatching elementwise functions (ndarray, Var or Dual2) ---------------

def value(x) -> np.ndarray:
    """Numeric value of a Var, Dual2 or array."""
    if isinstance(x, Var):
        return x.value
    if isinstance(x, Dual2):
        return value(x.value)
    return np.asarray(x, dtype=float)


def tanh(x):
    if isinstance(x, Dual2):
        t = tanh(x.value)
        d1 = 1.0 - t * t
        return x.chain(t, d1, -2.0 * t * d1)
    if isinstance(x, Var):
        return _unary(x, np.tanh, lambda _, y: 1.0 - y * y)
    return np.tanh(x)


def exp(x):
    if isinstance(x, Dual2):
        e = exp(x.value)
        return x.chain(e, e, e)
    if isinstance(x, Var):
        return _unary(x, np.exp, lambda _, y: y)
    return np.exp(x)


def log(x):
    if isinstance(x, Dual2):
        inv = 1.0 / x.value
        return x.chain(log(x.value), inv, -(inv * inv))
    if isinstance(x, Var):
        return _unary(x, np.log, lambda v, _: 1.0 / v)
    return np.log(x)


def sqrt(x):
    if isinstance(x, Dual2):
        s = sqrt(x.value)
        d1 = 0.5 / s
        return x.chain(s, d1, -0.5 * d1 / x.value)
    if isinstance(x, Var):
        return _unary(x, np.sqrt, lambda _, y: 0.5 / y)
    return np.sqrt(x)


def absolute(x):
    if isinstance(x, Dual2):
        sign = np.sign(value(x.value))
        return x.chain(absolute(x.value), sign, 0.0)
    if isinstance(x, Var):
        return _unary(x, np.abs, lambda v, _: np.sign(v))
    return np.abs(x)


def sigmoid(x):
    if isinstance(x, Dual2):
        s = sigmoid(x.value)
        d1 = s * (1.0 - s)
        return x.chain(s, d1, d1 * (1.0 - 2.0 * s))
    if isinstance(x, Var):
        return _unary(x, expit, lambda _, y: y * (1.0 - y))
    return expit(x)


def softplus(x):
    if isinstance(x, Dual2):
        s = sigmoid(x.value)
        return x.chain(softplus(x.value), s, s * (1.0 - s))
    if isinstance(x, Var):
        return _unary(x, lambda v: np.logaddexp(0.0, v), lambda v, _: expit(v))
    return np.logaddexp(0.0, x)


def stack(items: Sequence, axis: int = 0):
    if any(isinstance(item, Dual2) for item in items):
        return Dual2.stack(items, axis)
    if any(isinstance(item, Var) for item in items):
        return _stack_vars(items, axis)
    return np.stack([np.asarray(item, dtype=float) for item in items], axis=axis)


_UFUNC_HANDLERS = {
    np.add: add,
    np.subtract: subtract,
    np.multiply: multiply,
    np.true_divide: divide,
    np.negative: negative,
    np.matmul: matmul,
    np.power: power,
    np.tanh: tanh,
    np.exp: exp,
    np.log: log,
    np.sqrt: sqrt,
    np.absolute: absolute,
}


# --- second-order duals ------------------------------------------------------

class Dual2:
    """Value with first and second sensitivities to a 2-D input.

    first = (d/du1, d/du2); second = (d2/du1du1, d2/du1du2, d2/du2du2).
    """
    __slots__ = ('value', 'first', 'second')
    __array_ufunc__ = None

    def __init__(self, value, first, second):
        self.value = value
        self.first = tuple(first)
        self.second = tuple(second)

    @staticmethod
    def constant(c) -> 'Dual2':
        return Dual2(c, (0.0, 0.0), (0.0, 0.0, 0.0))

    def chain(self, f, d1, d2) -> 'Dual2':
        """Elementwise chain rule given phi(x), phi'(x), phi''(x)."""
        (a1, a2), (h11, h12, h22) = self.first, self.second
        return Dual2(
            f,
            (d1 * a1, d1 * a2),
            (d2 * a1 * a1 + d1 * h11, d2 * a1 * a2 + d1 * h12, d2 * a2 * a2 + d1 * h22),
        )

    def _coerce(self, other) -> 'Dual2':
        return other if isinstance(other, Dual2) else Dual2.constant(other)

    def __add__(self, other):
        if not isinstance(other, Dual2):
            return Dual2(self.value + other, self.first, self.second)
        return Dual2(self.value + other.value,
                     tuple(p + q for p, q in zip(self.first, other.first)),
                     tuple(p + q for p, q in zip(self.second, other.second)))

    def __radd__(self, other):
        return self.__add__(other)

    def __neg__(self):
        return Dual2(-self.value, tuple(-p for p in self.first), tuple(-p for p in self.second))

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, Dual2):
            return Dual2(self.value * other, tuple(p * other for p in self.first),
                         tuple(p * other for p in self.second))
        a, b = self, other
        (a1, a2), (a11, a12, a22) = a.first, a.second
        (b1, b2), (b11, b12, b22) = b.first, b.second
        return Dual2(
            a.value * b.value,
            (a1 * b.value + a.value * b1, a2 * b.value + a.value * b2),
            (a11 * b.value + 2.0 * (a1 * b1) + a.value * b11,
             a12 * b.value + a1 * b2 + a2 * b1 + a.value * b12,
             a22 * b.value + 2.0 * (a2 * b2) + a.value * b22),
        )

    def __rmul__(self, other):
        return self.__mul__(other)

    def reciprocal(self) -> 'Dual2':
        inv = 1.0 / self.value
        inv2 = inv * inv
        return self.chain(inv, -inv2, 2.0 * inv2 * inv)

    def __truediv__(self, other):
        if not isinstance(other, Dual2):
            return self * (1.0 / other)
        return self * other.reciprocal()

    def __rtruediv__(self, other):
        return self.reciprocal() * other

    def __pow__(self, exponent):
        p = float(exponent)
        if p == 2.0:
            return self * self
        return self.chain(self.value ** p, p * self.value ** (p - 1.0), p * (p - 1.0) * self.value ** (p - 2.0))

    def __matmul__(self, matrix):
        """Right-multiply every component by a constant or taped matrix."""
        return Dual2(self.value @ matrix, tuple(p @ matrix for p in self.first),
                     tuple(p @ matrix for p in self.second))

    def __getitem__(self, key):
        return Dual2(self.value[key], tuple(p[key] for p in self.first), tuple(p[key] for p in self.second))

    def sum(self, axis=None):
        return Dual2(self.value.sum(axis=axis), tuple(p.sum(axis=axis) for p in self.first),
                     tuple(p.sum(axis=axis) for p in self.second))

    @staticmethod
    def stack(items: Sequence, axis: int = 0) -> 'Dual2':
        duals = [item if isinstance(item, Dual2) else Dual2.constant(item) for item in items]
        shape = np.broadcast_shapes(*[np.shape(value(d.value)) for d in duals])

        def full(component):
            return component if isinstance(component, Var) else np.broadcast_to(np.asarray(component, dtype=float), shape)
        return Dual2(
            stack([full(d.value) for d in duals], axis),
            tuple(stack([full(d.first[k]) for d in duals], axis) for k in range(2)),
            tuple(stack([full(d.second[k]) for d in duals], axis) for k in range(3)),
        )

    @property
    def gradient(self) -> np.ndarray:
        shape = np.shape(value(self.value))
        return np.stack([np.broadcast_to(value(p), shape) for p in self.first], axis=-1)

    @property
    def hessian(self) -> np.ndarray:
        shape = np.shape(value(self.value))
        h11, h12, h22 = (np.broadcast_to(value(p), shape) for p in self.second)
        return np.stack([np.stack([h11, h12], axis=-1), np.stack([h12, h22], axis=-1)], axis=-2)


def seed_dual2(u: np.ndarray) -> Dual2:
    """Dual2 for the identity map on points with trailing dimension 2."""
    u = np.asarray(u, dtype=float)
    d1 = np.zeros_like(u)
    d2 = np.zeros_like(u)
    d1[..., 0] = 1.0
    d2[..., 1] = 1.0
    zero = np.zeros_like(u)
    return Dual2(u, (d1, d2), (zero, zero, zero))


def hessian2(fn: Callable[[Dual2], Dual2], u) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Value, gradient and Hessian of a scalar function of u in R^2 by nested duals."""
    result = fn(seed_dual2(u))
    if not isinstance(result, Dual2):
        result = Dual2.constant(result)
    return value(result.value), result.gradient, result.hessian


# --- gradients ---------------------------------------------------------------

def value_and_grad(fn: Callable[..., Var], *params):
    """Evaluate fn on taped copies of params and return (value, gradients)."""
    tape = Tape()
    leaves = [tape.variable(p) for p in params]
    out = fn(*leaves)
    if not isinstance(out, Var):
        out = tape.constant(out)
    grads = [g if np.ndim(g) else float(g) for g in tape.gradient(out, leaves)]
    total = float(out.value.reshape(()))
    return total, (grads[0] if len(grads) == 1 else tuple(grads))


def grad(fn: Callable[..., Var], *params):
    """Gradient of a scalar expression with respect to each parameter."""
    return value_and_grad(fn, *params)[1]


def spectral_norm(W, iters: int = 50) -> float:
    """Largest singular value by power iteration on W^T W from a fixed start vector."""
    if iters < 1:
        raise PreconditionError(f"iters must be >= 1, got {iters}")
    W = np.asarray(W, dtype=float)
    v = np.random.default_rng(0).standard_normal(W.shape[1])
    v /= np.linalg.norm(v)
    for _ in range(iters):
        w = W.T @ (W @ v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
    return float(np.linalg.norm(W @ v))


# --- parameters --------------------------------------------------------------

@dataclass
class MlpParams:
    """Fully-connected network: x -> act(x W1^T + b1) ... -> x Wk^T + bk."""
    weights: List[Any]
    biases: List[Any]

    @property
    def architecture(self) -> Tuple[int, ...]:
        shapes = [value(w).shape for w in self.weights]
        return (shapes[0][1],) + tuple(s[0] for s in shapes)

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise PreconditionError("MlpParams needs one bias per weight matrix")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            ws, bs = np.shape(value(w)), np.shape(value(b))
            if len(ws) != 2 or bs != (ws[0],):
                raise PreconditionError(f"layer {k}: weight {ws} and bias {bs} do not match")
            if k and ws[1] != np.shape(value(self.weights[k - 1]))[0]:
                raise PreconditionError(f"layer {k}: input width {ws[1]} does not match previous output")


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, scale: float = 1.0) -> MlpParams:
    """Gaussian weights with variance scale²/fan_in, zero biases."""
    weights = [rng.standard_normal((fan_out, fan_in)) * scale / np.sqrt(fan_in)
               for fan_in, fan_out in zip(sizes[:-1], sizes[1:])]
    biases = [np.zeros(fan_out) for fan_out in sizes[1:]]
    return MlpParams(weights=weights, biases=biases)


def mlp_forward(params: MlpParams, x, activation: Callable = tanh):
    """Forward pass for arrays, Vars or Dual2 inputs."""
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        x = x @ w.T + b
        if k < last:
            x = activation(x)
    return x


def named_parameters(obj, prefix: str = '') -> Dict[str, Any]:
    """Flatten the array leaves of nested dataclasses and lists into dotted names."""
    if isinstance(obj, (np.ndarray, Var)):
        return {prefix: obj}
    out: Dict[str, Any] = {}
    if is_dataclass(obj):
        for f in fields(obj):
            if f.metadata.get('static'):
                continue
            out.update(named_parameters(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name))
    elif isinstance(obj, (list, tuple)):
        for k, item in enumerate(obj):
            out.update(named_parameters(item, f"{prefix}.{k}" if prefix else str(k)))
    return out


def map_parameters(obj, fn: Callable[[str, Any], Any], prefix: str = ''):
    """Rebuild nested dataclasses with every array leaf replaced by fn(name, leaf)."""
    if isinstance(obj, (np.ndarray, Var)):
        return fn(prefix, obj)
    if is_dataclass(obj):
        changes = {}
        for f in fields(obj):
            if f.metadata.get('static') or not f.init:
                continue
            changes[f.name] = map_parameters(getattr(obj, f.name), fn, f"{prefix}.{f.name}" if prefix else f.name)
        return replace(obj, **changes)
    if isinstance(obj, list):
        return [map_parameters(item, fn, f"{prefix}.{k}" if prefix else str(k)) for k, item in enumerate(obj)]
    if isinstance(obj, tuple):
        return tuple(map_parameters(item, fn, f"{prefix}.{k}" if prefix else str(k)) for k, item in enumerate(obj))
    return obj


def bind(tape: Tape, obj) -> Tuple[Any, Dict[str, Var]]:
    """Copy of obj whose array leaves are tape variables, plus the name -> Var map."""
    leaves: Dict[str, Var] = {}

    def to_var(name, leaf):
        leaves[name] = tape.variable(value(leaf))
        return leaves[name]
    return map_parameters(obj, to_var), leaves


def detach(obj):
    """Copy of obj with plain numpy leaves."""
    return map_parameters(obj, lambda _, leaf: np.array(value(leaf), dtype=float))


def with_parameters(obj, params: Dict[str, np.ndarray]):
    """Copy of obj with leaves taken from a name -> array map."""
    return map_parameters(obj, lambda name, leaf: params[name] if name in params else leaf)
