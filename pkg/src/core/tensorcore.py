"""
Gradus QR v1.0 - Tensor Core
Dense numpy tensors with a reverse-mode gradient tape, sized for a small transformer

Broadcasting is limited to equal shapes, scalars and leading-batch suffixes
(e.g. ``[B, L, d] + [d]``); anything else needs an explicit reshape.
"""

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.core.exceptions import NondeterministicFunction, NotScalar, ShapeError

DEFAULT_DTYPE = np.float64
LAYER_NORM_EPS = 1e-5

_sequence = itertools.count()
_state = threading.local()

ArrayLike = Union[np.ndarray, float, int, Sequence]


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording for the current thread"""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """Dense array with optional gradient tracking"""

    def __init__(self, values: ArrayLike, requires_grad: bool = False, dtype=None, name: str = None):
        if isinstance(values, Tensor):
            values = values.values
        array = np.asarray(values)
        if dtype is not None:
            array = array.astype(dtype, copy=False)
        elif not np.issubdtype(array.dtype, np.floating):
            array = array.astype(DEFAULT_DTYPE)
        self.values: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._seq = next(_sequence)

    # basic properties
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.values, dtype=self.values.dtype)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor division is only supported by a constant")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype or DEFAULT_DTYPE))


def _record(values: np.ndarray, parents: Sequence[Tensor],
            backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    out = Tensor(values, dtype=values.dtype)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


@dataclass
class ComputationTape:
    """Nodes reachable from a loss, in construction (topological) order"""
    nodes: List[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "ComputationTape":
        seen = set()
        nodes: List[Tensor] = []
        stack = [root]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def leaves(self) -> List[Tensor]:
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]


def backward(loss: Tensor, inputs: Optional[Iterable[Tensor]] = None) -> ComputationTape:
    """
    Accumulate dLoss/dLeaf into ``.grad`` of every requires_grad leaf

    Grads accumulate across calls. Leaves listed in ``inputs`` that the loss
    does not reach get a zero-filled grad.
    """
    if loss.size != 1:
        raise NotScalar(f"loss must be scalar, got shape {loss.shape}", shape=list(loss.shape))

    tape = ComputationTape.trace(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg

    if inputs is not None:
        for leaf in inputs:
            if leaf.requires_grad and leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.values)
    return tape


# broadcasting helpers
def _broadcast_ok(a: Tuple[int, ...], b: Tuple[int, ...]) -> bool:
    if a == b:
        return True
    if int(np.prod(a)) == 1 and len(a) <= len(b) or int(np.prod(b)) == 1 and len(b) <= len(a):
        return True
    short, long = (a, b) if len(a) <= len(b) else (b, a)
    return long[len(long) - len(short):] == short


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad.reshape(shape)


def _binary_operands(a, b) -> Tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = as_tensor(a, b.dtype if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = as_tensor(b, a.dtype)
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}", left=list(a.shape), right=list(b.shape))
    return a, b


# elementwise ops
def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.values + b.values, (a, b), _backward)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.values - b.values, (a, b), _backward)


def neg(a: Tensor) -> Tensor:
    return _record(-a.values, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def _backward(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return _record(a.values * b.values, (a, b), _backward)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.values)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),))


def log(a: Tensor) -> Tensor:
    x = a.values
    return _record(np.log(x), (a,), lambda g: (g / x,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.values)
    return _record(y, (a,), lambda g: (g * y,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation"""
    x = a.values
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def _backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _record(y, (a,), _backward)


def dropout(a: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    if rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    return mul(a, Tensor(keep, dtype=a.dtype))


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace positions where ``mask`` is True; mask must broadcast to ``a``"""
    mask = np.asarray(mask, dtype=bool)
    try:
        mask = np.broadcast_to(mask, a.shape)
    except ValueError as e:
        raise ShapeError(f"mask shape {mask.shape} does not broadcast to {a.shape}",
                         left=list(a.shape), right=list(mask.shape)) from e
    y = np.where(mask, np.asarray(value, dtype=a.dtype), a.values)
    return _record(y, (a,), lambda g: (np.where(mask, 0.0, g),))


# reductions and shape ops
def _normalize_axis(axis, ndim) -> Optional[Tuple[int, ...]]:
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axis(axis, a.ndim)
    y = a.values.sum(axis=axes, keepdims=keepdims)

    def _backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(np.asarray(y), (a,), _backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axis(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))
    y = a.values.mean(axis=axes, keepdims=keepdims)

    def _backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape) / count,)

    return _record(np.asarray(y), (a,), _backward)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        y = a.values.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {a.shape} into {tuple(shape)}",
                         left=list(a.shape), right=list(shape)) from e
    return _record(y, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Optional[Tuple[int, ...]] = None) -> Tensor:
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _record(a.values.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def take(a: Tensor, index) -> Tensor:
    """Basic or integer-array indexing with scatter-add gradient"""
    y = a.values[index]

    def _backward(g):
        full = np.zeros_like(a.values)
        np.add.at(full, index, g)
        return (full,)

    return _record(np.array(y, copy=True), (a,), _backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"cannot concat {ref} with {t.shape} on axis {axis}", left=list(ref), right=list(t.shape))
    y = np.concatenate([t.values for t in tensors], axis=ax)
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _record(y, tensors, lambda g: tuple(np.split(g, splits, axis=ax)))


# linear algebra
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul: ``[..., m, k] @ [..., k, n]``; leading dims equal or one operand 2-D"""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}", left=list(a.shape), right=list(b.shape))
    lead_a, lead_b = a.shape[:-2], b.shape[:-2]
    if lead_a and lead_b and lead_a != lead_b:
        raise ShapeError(f"matmul batch mismatch {a.shape} @ {b.shape}", left=list(a.shape), right=list(b.shape))

    def _backward(g):
        ga = np.matmul(g, np.swapaxes(b.values, -1, -2))
        gb = np.matmul(np.swapaxes(a.values, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(np.matmul(a.values, b.values), (a, b), _backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (a,), _backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def _backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _record(y, (a,), _backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis; eps sits inside the square root"""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm params {gamma.shape}/{beta.shape} do not match last dim {d}",
                         left=list(x.shape), right=list(gamma.shape))
    mu = x.values.mean(axis=-1, keepdims=True)
    centered = x.values - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    y = xhat * gamma.values + beta.values

    def _backward(g):
        dxhat = g * gamma.values
        dx = inv_std / d * (d * dxhat - dxhat.sum(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(y, (x, gamma, beta), _backward)


def embedding_lookup(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if weight.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {weight.shape}", left=list(weight.shape))

    def _backward(g):
        full = np.zeros_like(weight.values)
        np.add.at(full, ids, g)
        return (full,)

    return _record(weight.values[ids], (weight,), _backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# gradient checking
@dataclass
class GradCheckReport:
    max_rel_error: Dict[str, float]
    tolerance: float
    step: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def grad_check(f: Callable[[], Tensor], params: Union[Dict[str, Tensor], Sequence[Tensor]],
               step: float = 1e-5, tolerance: float = 1e-4, abs_floor: float = 1e-5) -> GradCheckReport:
    """
    Compare backward grads against central finite differences

    Relative error is ``|a - n| / max(|a|, |n|, abs_floor)``; the floor keeps
    vanishing gradients from being judged on roundoff alone. Parameters with
    requires_grad off are skipped.
    """
    if not isinstance(params, dict):
        params = {(p.name or f"param{i}"): p for i, p in enumerate(params)}
    params = {name: p for name, p in params.items() if p.requires_grad}

    first = f().values.copy()
    second = f().values.copy()
    if not np.array_equal(first, second):
        raise NondeterministicFunction("function returned different values on repeated evaluation")

    for p in params.values():
        p.grad = None
    backward(f(), inputs=params.values())
    analytic = {name: p.grad.copy() for name, p in params.items()}

    report: Dict[str, float] = {}
    with no_grad():
        for name, p in params.items():
            # index in place so strided views are perturbed too
            numeric = np.zeros(p.shape, dtype=np.float64)
            for idx in np.ndindex(*p.shape):
                original = p.values[idx]
                p.values[idx] = original + step
                plus = f().item()
                p.values[idx] = original - step
                minus = f().item()
                p.values[idx] = original
                numeric[idx] = (plus - minus) / (2 * step)
            numeric = numeric.reshape(-1)
            a = analytic[name].reshape(-1)
            denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), abs_floor)
            report[name] = float(np.max(np.abs(a - numeric) / denom)) if numeric.size else 0.0
    return GradCheckReport(max_rel_error=report, tolerance=tolerance, step=step)
