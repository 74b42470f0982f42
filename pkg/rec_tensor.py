"""
Seqinit Tensor Core
Dense float tensors with reverse-mode automatic differentiation and Adam

Every learned weight and activation in the package is a Tensor. Operations
are Function subclasses: forward works on numpy arrays, backward returns
the gradient for each input. Calling backward() on a scalar walks the graph
in reverse topological order and accumulates gradients additively.

Broadcasting is limited to trailing-axis bias addition (b.shape must be a
suffix of a.shape); anything else needs an explicit reshape.
"""

import contextlib
import logging
import threading
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

_DEFAULT_DTYPE = np.float32
# high_precision() override, one per thread
_precision = threading.local()

# Fill value for masked attention logits; finite so that fully masked rows stay finite
MASK_FILL = -1e9


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation."""


class AxisError(ShapeError):
    """Axis index out of range for a tensor."""


def get_dtype():
    return getattr(_precision, 'dtype', _DEFAULT_DTYPE)


@contextlib.contextmanager
def high_precision():
    """Build tensors in float64 inside the block.

    Only used by finite-difference oracles; training always runs in float32.
    The setting is local to the calling thread.
    """
    previous = get_dtype()
    _precision.dtype = np.float64
    try:
        yield
    finally:
        _precision.dtype = previous


ArrayLike = Union[np.ndarray, float, int, Sequence[float]]


class Function:
    """Base class for differentiable operations."""

    def __init__(self, *tensors: "Tensor"):
        self.tensors = tensors

    def forward(self, *args: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError("Forward pass not implemented for this function")

    def backward(self, grad: np.ndarray):
        raise NotImplementedError("Backward pass not implemented for this function")

    @classmethod
    def apply(cls, *tensors: "Tensor", **kwargs: Any) -> "Tensor":
        func = cls(*tensors)
        out_data = func.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = any(t.requires_grad for t in tensors)
        return Tensor(out_data, requires_grad=requires_grad,
                      creator=func if requires_grad else None)


class Tensor:
    """
    Dense n-dimensional float array that participates in the autograd graph.

    Attributes:
        data: numpy array, float32 (float64 inside high_precision())
        requires_grad: whether gradients are accumulated into `grad`
        grad: same-shape numpy buffer or None
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 creator: Optional[Function] = None, name: Optional[str] = None):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=get_dtype()))
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.creator = creator
        self.name = name

    def __repr__(self):
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        g = np.asarray(g, dtype=self.data.dtype)
        if g.shape != self.data.shape:
            raise ShapeError(f"Gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self):
        backward(self)

    # Operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape)

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        return tsum(self, axis)

    def mean(self) -> "Tensor":
        return mean(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise AxisError(f"Axis {axis} is invalid for a tensor with {ndim} dimensions")
    return axis % ndim


# ---------------------------------------------------------------------------
# Elementwise and shape operations
# ---------------------------------------------------------------------------
class Add(Function):
    def forward(self, a, b):
        if b.shape != a.shape and (b.ndim > a.ndim or a.shape[a.ndim - b.ndim:] != b.shape):
            raise ShapeError(f"Cannot add shapes {a.shape} and {b.shape}; only trailing-axis bias addition is broadcast")
        self.lead = a.ndim - b.ndim
        return a + b

    def backward(self, grad):
        gb = grad
        if self.lead:
            gb = grad.reshape((-1,) + grad.shape[self.lead:]).sum(axis=0)
        return grad, gb


class Mul(Function):
    def forward(self, a, b):
        if b.shape != a.shape and (b.ndim > a.ndim or a.shape[a.ndim - b.ndim:] != b.shape):
            raise ShapeError(f"Cannot multiply shapes {a.shape} and {b.shape}")
        self.a, self.b = a, b
        self.lead = a.ndim - b.ndim
        return a * b

    def backward(self, grad):
        ga = grad * self.b
        gb = grad * self.a
        if self.lead:
            gb = gb.reshape((-1,) + gb.shape[self.lead:]).sum(axis=0)
        return ga, gb


class Scale(Function):
    def forward(self, a, factor: float = 1.0):
        self.factor = factor
        return a * np.asarray(factor, dtype=a.dtype)

    def backward(self, grad):
        return (grad * np.asarray(self.factor, dtype=grad.dtype),)


class MatMul(Function):
    """a (..., m, k) @ b (..., k, n) with identical leading axes, or b (k, n) shared."""

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"Cannot matmul shapes {a.shape} and {b.shape}")
        if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f"Batched matmul needs identical leading axes, got {a.shape} and {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        a, b = self.a, self.b
        ga = grad @ np.swapaxes(b, -1, -2)
        if b.ndim == 2:
            gb = a.reshape(-1, a.shape[-1]).T @ grad.reshape(-1, grad.shape[-1])
        else:
            gb = np.swapaxes(a, -1, -2) @ grad
        return ga, gb


class Transpose(Function):
    def forward(self, a, axis1: int = -2, axis2: int = -1):
        self.axes = (_check_axis(axis1, a.ndim), _check_axis(axis2, a.ndim))
        return np.swapaxes(a, *self.axes)

    def backward(self, grad):
        return (np.swapaxes(grad, *self.axes),)


class Reshape(Function):
    def forward(self, a, shape=()):
        self.in_shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError as e:
            raise ShapeError(f"Cannot reshape {a.shape} into {tuple(shape)}") from e

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Index(Function):
    """Basic or integer-array indexing; gradient is scatter-added."""

    def forward(self, a, key=None):
        self.in_shape = a.shape
        self.key = key
        return np.array(a[key])

    def backward(self, grad):
        g = np.zeros(self.in_shape, dtype=grad.dtype)
        np.add.at(g, self.key, grad)
        return (g,)


class Concat(Function):
    def forward(self, *arrays, axis: int = 0):
        axis = _check_axis(axis, arrays[0].ndim)
        self.axis = axis
        self.sizes = [x.shape[axis] for x in arrays]
        try:
            return np.concatenate(arrays, axis=axis)
        except ValueError as e:
            raise ShapeError(f"Cannot concatenate shapes {[x.shape for x in arrays]}") from e

    def backward(self, grad):
        bounds = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, bounds, axis=self.axis))


class Embedding(Function):
    """Row lookup table[ids]; output shape ids.shape + (d,)."""

    def forward(self, table, ids=None):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise ShapeError(f"Embedding ids out of range [0, {table.shape[0]})")
        self.ids = ids
        self.rows = table.shape[0]
        return table[ids]

    def backward(self, grad):
        g = np.zeros((self.rows, grad.shape[-1]), dtype=grad.dtype)
        np.add.at(g, self.ids.reshape(-1), grad.reshape(-1, grad.shape[-1]))
        return (g,)


class Sum(Function):
    def forward(self, a, axis=None):
        self.in_shape = a.shape
        if axis is not None:
            axis = _check_axis(axis, a.ndim)
        self.axis = axis
        return np.asarray(a.sum(axis=axis))

    def backward(self, grad):
        if self.axis is None:
            return (np.broadcast_to(grad, self.in_shape).copy(),)
        return (np.broadcast_to(np.expand_dims(grad, self.axis), self.in_shape).copy(),)


class Relu(Function):
    def forward(self, a):
        self.mask = a > 0
        return a * self.mask

    def backward(self, grad):
        return (grad * self.mask,)


_GELU_C = float(np.sqrt(2.0 / np.pi))


class Gelu(Function):
    """tanh approximation of GELU."""

    def forward(self, a):
        self.a = a
        self.t = np.tanh(_GELU_C * (a + 0.044715 * a ** 3))
        return 0.5 * a * (1.0 + self.t)

    def backward(self, grad):
        a, t = self.a, self.t
        dt = (1.0 - t ** 2) * _GELU_C * (1.0 + 3 * 0.044715 * a ** 2)
        return (grad * (0.5 * (1.0 + t) + 0.5 * a * dt),)


class Dropout(Function):
    def forward(self, a, rate: float = 0.0, rng: Optional[np.random.Generator] = None):
        keep = 1.0 - rate
        self.mask = (rng.random(a.shape) < keep).astype(a.dtype) / np.asarray(keep, dtype=a.dtype)
        return a * self.mask

    def backward(self, grad):
        return (grad * self.mask,)


# ---------------------------------------------------------------------------
# Normalisation and softmax
# ---------------------------------------------------------------------------
class Softmax(Function):
    def forward(self, a, axis: int = -1, mask: Optional[np.ndarray] = None):
        axis = _check_axis(axis, a.ndim)
        if mask is not None:
            a = np.where(mask, a, np.asarray(MASK_FILL, dtype=a.dtype))
        shifted = a - a.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.y = e / e.sum(axis=axis, keepdims=True)
        self.axis = axis
        return self.y

    def backward(self, grad):
        y = self.y
        return (y * (grad - (grad * y).sum(axis=self.axis, keepdims=True)),)


class LayerNorm(Function):
    def forward(self, x, gamma, beta, eps: float = 1e-5):
        n = x.shape[-1]
        if n == 0:
            raise ShapeError("layer_norm over a zero-length axis")
        if gamma.shape != (n,) or beta.shape != (n,):
            raise ShapeError(f"gamma/beta shapes {gamma.shape}/{beta.shape} do not match last axis {n}")
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
        self.xhat = (x - mu) * self.inv_std
        self.gamma = gamma
        return self.xhat * gamma + beta

    def backward(self, grad):
        xhat, inv_std = self.xhat, self.inv_std
        n = xhat.shape[-1]
        dxhat = grad * self.gamma
        dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                              - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        flat = grad.reshape(-1, n)
        dgamma = (flat * xhat.reshape(-1, n)).sum(axis=0)
        dbeta = flat.sum(axis=0)
        return dx, dgamma, dbeta


class L2Normalize(Function):
    """Row-wise x / ||x|| along the last axis."""

    def forward(self, a, eps: float = 1e-12):
        self.norm = np.sqrt((a * a).sum(axis=-1, keepdims=True) + np.asarray(eps, dtype=a.dtype))
        self.y = a / self.norm
        return self.y

    def backward(self, grad):
        y = self.y
        return ((grad - y * (grad * y).sum(axis=-1, keepdims=True)) / self.norm,)


class CrossEntropy(Function):
    """Mean over rows of -log softmax(logits)[target]."""

    def forward(self, logits, targets=None):
        if logits.ndim != 2:
            raise ShapeError(f"cross_entropy_logits expects [B x C] logits, got {logits.shape}")
        targets = np.asarray(targets, dtype=np.int64)
        b, c = logits.shape
        if targets.shape != (b,):
            raise ShapeError(f"Expected {b} targets, got shape {targets.shape}")
        if targets.size and (targets.min() < 0 or targets.max() >= c):
            raise ValueError(f"Target index out of range [0, {c})")
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_p = shifted - log_z
        self.p = np.exp(log_p)
        self.targets = targets
        return np.asarray(-log_p[np.arange(b), targets].mean())

    def backward(self, grad):
        b = self.p.shape[0]
        g = self.p.copy()
        g[np.arange(b), self.targets] -= 1.0
        return (g * (grad / b),)


# ---------------------------------------------------------------------------
# Functional API
# ---------------------------------------------------------------------------
def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def scale(a: Tensor, factor: float) -> Tensor:
    return Scale.apply(a, factor=factor)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def transpose(a: Tensor, axis1: int = -2, axis2: int = -1) -> Tensor:
    return Transpose.apply(a, axis1=axis1, axis2=axis2)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = shape[0]
    return Reshape.apply(a, shape=tuple(shape))


def index(a: Tensor, key) -> Tensor:
    return Index.apply(a, key=key)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def embedding(table: Tensor, ids) -> Tensor:
    return Embedding.apply(table, ids=ids)


def tsum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    return Sum.apply(a, axis=axis)


def mean(a: Tensor) -> Tensor:
    return scale(tsum(a), 1.0 / max(1, a.data.size))


def relu(a: Tensor) -> Tensor:
    return Relu.apply(a)


def gelu(a: Tensor) -> Tensor:
    return Gelu.apply(a)


def dropout(a: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool = True) -> Tensor:
    """Inverted dropout; identity outside training or when rate is 0."""
    if not training or rate <= 0.0 or rng is None:
        return a
    return Dropout.apply(a, rate=rate, rng=rng)


def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Max-subtracted softmax; `mask` (broadcastable bool) keeps True entries."""
    _check_axis(axis, x.ndim)
    return Softmax.apply(x, axis=axis, mask=mask)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    return LayerNorm.apply(x, gamma, beta, eps=eps)


def l2_normalize(x: Tensor) -> Tensor:
    return L2Normalize.apply(x)


def cross_entropy_logits(logits: Tensor, target: Sequence[int]) -> Tensor:
    return CrossEntropy.apply(logits, targets=target)


# ---------------------------------------------------------------------------
# Graph and backward
# ---------------------------------------------------------------------------
@dataclass
class Graph:
    """Topologically ordered nodes reachable from an output (inputs first)."""
    nodes: List[Tensor] = field(default_factory=list)

    def validate(self):
        position = {id(t): i for i, t in enumerate(self.nodes)}
        for i, node in enumerate(self.nodes):
            if node.creator is None:
                continue
            for parent in node.creator.tensors:
                if parent.requires_grad and position.get(id(parent), len(self.nodes)) >= i:
                    raise ValueError("Graph is not topologically ordered")


def build_graph(output: Tensor) -> Graph:
    order: List[Tensor] = []
    visited = set()
    stack = [(output, False)]
    while stack:
        node, children_done = stack.pop()
        if id(node) in visited:
            continue
        if children_done:
            visited.add(id(node))
            order.append(node)
            continue
        stack.append((node, True))
        if node.creator is not None:
            for parent in node.creator.tensors:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return Graph(order)


def backward(loss: Tensor, graph: Optional[Graph] = None):
    """Accumulate d(loss)/d(p) into p.grad for every requires_grad tensor p."""
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = graph or build_graph(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.creator is None:
            node.accumulate_grad(g)
            continue
        input_grads = node.creator.backward(g)
        for parent, pg in zip(node.creator.tensors, input_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=parent.data.dtype)
    for node in graph.nodes:
        node.creator = None


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------
@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, Tensor], state: AdamState,
              grads: Optional[Dict[str, np.ndarray]] = None) -> AdamState:
    """
    Bias-corrected Adam update, in place on `params`.

    Parameters with no gradient are skipped but still count toward t.
    """
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is not None and np.shape(g) != p.shape:
            raise ShapeError(f"Gradient for {name} has shape {np.shape(g)}, parameter has {p.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.t
    correction2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(p.shape, dtype=np.float64)
            v = np.zeros(p.shape, dtype=np.float64)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        p.data[...] = (p.data.astype(np.float64) - update).astype(p.data.dtype)
    return state


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most max_norm; returns the pre-clip norm."""
    params = [p for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params)))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params:
            p.grad = (p.grad * factor).astype(p.data.dtype)
    return total


def numerical_gradient(fn, arrays: Sequence[np.ndarray], wrt: int, h: float = 1e-3) -> np.ndarray:
    """
    Central finite differences of a scalar function, evaluated in float64.

    Args:
        fn: callable taking Tensors (built from `arrays`) and returning a scalar Tensor
        arrays: input arrays
        wrt: index of the array to differentiate against
    """
    with high_precision():
        base = [np.array(a, dtype=np.float64) for a in arrays]
        target = base[wrt]
        grad = np.zeros_like(target)
        flat = target.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn(*[Tensor(a) for a in base]).item()
            flat[i] = orig - h
            down = fn(*[Tensor(a) for a in base]).item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)
