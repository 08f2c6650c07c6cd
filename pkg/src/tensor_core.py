"""
File: tensor_core.py
Purpose: Dense float64 tensors with reverse-mode autodiff and a finite-difference gradient oracle
Version: 1.0.0
Last Updated: 2026-10-16
"""
import itertools
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.config import DEBUG_FINITE
from src.exceptions import ContractError, DimensionError, NonFiniteError

logger = logging.getLogger(__name__)

# GELU tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
GELU_C = float(np.sqrt(2.0 / np.pi))
GELU_A = 0.044715

_node_ids = itertools.count()
_grad_enabled = True
_debug_finite = DEBUG_FINITE

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


def set_debug_finite(enabled: bool) -> None:
    """Turn the NaN/Inf check after every op on or off."""
    global _debug_finite
    _debug_finite = bool(enabled)


class Tensor:
    """A dense float64 array that can take part in a reverse-mode graph.

    Leaves created with ``requires_grad=True`` accumulate gradients in ``grad``;
    op outputs keep their parents and a backward closure while grad mode is on.
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.ascontiguousarray(np.array(data, dtype=np.float64))
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self.node_id = next(_node_ids)
        self._op = "leaf"
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{label})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    # Operators
    def __add__(self, other: Any) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Any) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Any) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Any) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Any) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Any) -> "Tensor":
        if isinstance(other, Tensor):
            raise ContractError("division is only defined by a constant")
        return mul(self, 1.0 / float(other))

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        return take(self, index)

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes: int) -> "Tensor":
        return permute(self, axes)


def as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: Tuple[Tensor, ...], op: str, backward_fn: BackwardFn) -> Tensor:
    out = Tensor(data)
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    if _debug_finite and not np.all(np.isfinite(out.data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(op, a.shape, b.shape) from None


# Elementwise arithmetic

def add(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def _backward(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _make(a.data + b.data, (a, b), "add", _backward)


def sub(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def _backward(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _make(a.data - b.data, (a, b), "sub", _backward)


def mul(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def _backward(g: np.ndarray):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _make(a.data * b.data, (a, b), "mul", _backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batched over any leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError("matmul", a.shape, b.shape) from None

    def _backward(g: np.ndarray):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _make(a.data @ b.data, (a, b), "matmul", _backward)


# Shape manipulation

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError("reshape", old, tuple(shape)) from None

    def _backward(g: np.ndarray):
        return (g.reshape(old),)
    return _make(data, (x,), "reshape", _backward)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def _backward(g: np.ndarray):
        return (np.transpose(g, inverse),)
    return _make(np.transpose(x.data, axes), (x,), "permute", _backward)


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def take(x: Tensor, index: Any) -> Tensor:
    """Basic or integer-array indexing with a scatter-add backward."""
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)

    def _backward(g: np.ndarray):
        full = np.zeros_like(x.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)
    return _make(x.data[index], (x,), "take", _backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` for an integer id array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError("embedding", table.shape, ids.shape)
    return take(table, ids)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError("concat", *[t.shape for t in tensors]) from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _backward(g: np.ndarray):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))
    return _make(data, tensors, "concat", _backward)


# Reductions

def tsum(x: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    def _backward(g: np.ndarray):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else axis
            for ax in sorted(a % x.ndim for a in axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), "sum", _backward)


def mean(x: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# Nonlinearities

def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)

    def _backward(g: np.ndarray):
        return (g * out_data,)
    return _make(out_data, (x,), "exp", _backward)


def log(x: Tensor) -> Tensor:
    def _backward(g: np.ndarray):
        return (g / x.data,)
    return _make(np.log(x.data), (x,), "log", _backward)


def tanh(x: Tensor) -> Tensor:
    out_data = np.tanh(x.data)

    def _backward(g: np.ndarray):
        return (g * (1.0 - out_data ** 2),)
    return _make(out_data, (x,), "tanh", _backward)


def sigmoid(x: Tensor) -> Tensor:
    out_data = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def _backward(g: np.ndarray):
        return (g * out_data * (1.0 - out_data),)
    return _make(out_data, (x,), "sigmoid", _backward)


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), stable for large |x|."""
    out_data = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))

    def _backward(g: np.ndarray):
        return (g * 0.5 * (1.0 + np.tanh(0.5 * x.data)),)
    return _make(out_data, (x,), "softplus", _backward)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation (GELU_C = sqrt(2/pi), GELU_A = 0.044715)."""
    v = x.data
    inner = GELU_C * (v + GELU_A * v ** 3)
    t = np.tanh(inner)
    out_data = 0.5 * v * (1.0 + t)

    def _backward(g: np.ndarray):
        d_inner = GELU_C * (1.0 + 3.0 * GELU_A * v ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t ** 2) * d_inner),)
    return _make(out_data, (x,), "gelu", _backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    if x.ndim < 1 or x.shape[-1] < 1:
        raise DimensionError("softmax_rows", x.shape)
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / np.sum(e, axis=-1, keepdims=True)

    def _backward(g: np.ndarray):
        return (out_data * (g - np.sum(g * out_data, axis=-1, keepdims=True)),)
    return _make(out_data, (x,), "softmax", _backward)


def logsumexp(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """log(sum(exp(x))) over the last axis, restricted to ``mask`` entries when given.

    Every row must keep at least one entry.
    """
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not np.all(mask.any(axis=-1)):
        raise ContractError("logsumexp: a row has no selected entries")
    masked = np.where(mask, x.data, -np.inf)
    row_max = np.max(masked, axis=-1, keepdims=True)
    e = np.where(mask, np.exp(masked - row_max), 0.0)
    total = np.sum(e, axis=-1, keepdims=True)
    out_data = (row_max + np.log(total))[..., 0]
    weights = e / total

    def _backward(g: np.ndarray):
        return (g[..., None] * weights,)
    return _make(out_data, (x,), "logsumexp", _backward)


def layer_norm(x: Tensor, eps: float = 1e-5, weight: Optional[Tensor] = None,
               bias: Optional[Tensor] = None) -> Tensor:
    """Per-token normalization over the last axis, then optional affine."""
    d = x.shape[-1]
    if d < 2:
        raise DimensionError("layer_norm", x.shape)
    mu = np.mean(x.data, axis=-1, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered ** 2, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std

    def _backward(g: np.ndarray):
        g_mean = np.mean(g, axis=-1, keepdims=True)
        gx_mean = np.mean(g * xhat, axis=-1, keepdims=True)
        return (inv_std * (g - g_mean - xhat * gx_mean),)
    out = _make(xhat, (x,), "layer_norm", _backward)
    if weight is not None:
        out = mul(out, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def l2_normalize(x: Tensor, min_norm: float = 1e-12) -> Tensor:
    """Scale the last axis to unit L2 norm; vectors below ``min_norm`` stay (near) zero."""
    norm = np.sqrt(np.sum(x.data ** 2, axis=-1, keepdims=True))
    clamped = norm < min_norm
    denom = np.where(clamped, min_norm, norm)
    out_data = x.data / denom

    def _backward(g: np.ndarray):
        radial = np.where(clamped, 0.0, np.sum(g * out_data, axis=-1, keepdims=True))
        return ((g - out_data * radial) / denom,)
    return _make(out_data, (x,), "l2_normalize", _backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


# Graph and backward

@dataclass
class OpRecord:
    """One recorded op: kind, input ids, output id and its backward closure."""
    op: str
    input_ids: Tuple[int, ...]
    output_id: int
    backward_fn: BackwardFn = field(repr=False)


class Graph:
    """Topologically ordered op records reachable from an output tensor."""

    def __init__(self, output: Tensor):
        self.output_id = output.node_id
        self.nodes: Dict[int, Tensor] = {}
        self.records: List[OpRecord] = []
        self._build(output)

    def _build(self, output: Tensor) -> None:
        # Iterative post-order DFS; each node is emitted once
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes[node.node_id] = node
                if node._backward is not None:
                    self.records.append(OpRecord(
                        op=node._op,
                        input_ids=tuple(p.node_id for p in node._parents),
                        output_id=node.node_id,
                        backward_fn=node._backward,
                    ))
                continue
            if node.node_id in visited:
                continue
            visited.add(node.node_id)
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent.requires_grad and parent.node_id not in visited:
                    stack.append((parent, False))

    @property
    def leaves(self) -> List[Tensor]:
        return [n for n in self.nodes.values() if n.is_leaf and n.requires_grad]

    def __len__(self) -> int:
        return len(self.records)


def backward(loss: Tensor, graph: Optional[Graph] = None,
             params: Optional[Iterable[Tensor]] = None) -> Graph:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf.

    Tensors listed in ``params`` that the loss does not reach get a zero
    gradient buffer.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = graph if graph is not None else Graph(loss)
    if graph.output_id != loss.node_id:
        raise ContractError("graph was not built from this loss")

    pending: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    if loss.is_leaf and loss.requires_grad:
        loss.grad = pending[loss.node_id].copy() if loss.grad is None else loss.grad + 1.0

    for record in reversed(graph.records):
        g = pending.pop(record.output_id, None)
        if g is None:
            continue
        input_grads = record.backward_fn(g)
        for input_id, ig in zip(record.input_ids, input_grads):
            parent = graph.nodes.get(input_id)
            if ig is None or parent is None or not parent.requires_grad:
                continue
            if parent.is_leaf:
                parent.grad = ig.copy() if parent.grad is None else parent.grad + ig
            elif input_id in pending:
                pending[input_id] = pending[input_id] + ig
            else:
                pending[input_id] = ig

    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
    return graph


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-6,
                      floor: float = 1e-12, max_coords: Optional[int] = None,
                      rng: Optional[np.random.Generator] = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` rebuilds the scalar from the current values of ``params``. The error
    per coordinate is |analytic - numeric| / (|numeric| + floor). With
    ``max_coords`` only that many coordinates per tensor are checked.
    """
    if not 0.0 < h <= 1e-3:
        raise ContractError(f"finite difference step must be in (0, 1e-3], got {h}")

    for p in params:
        p.grad = None
    loss = f()
    backward(loss, params=params)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, grad in zip(params, analytic):
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                rng = rng if rng is not None else np.random.default_rng(0)
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for i in coords:
                original = flat[i]
                flat[i] = original + h
                f_plus = f().item()
                flat[i] = original - h
                f_minus = f().item()
                flat[i] = original
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise NonFiniteError(f"non-finite objective while probing {p.name or p.shape}[{i}]")
                numeric = (f_plus - f_minus) / (2.0 * h)
                err = abs(grad.reshape(-1)[i] - numeric) / (abs(numeric) + floor)
                worst = max(worst, err)
    return worst


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int,
              bias: Optional[np.ndarray] = None) -> Tensor:
    """Scaled dot-product attention, heads split from the last axis.

    q is [b, t_q, d], k and v are [b, t_k, d]; ``bias`` is added to the
    [b, heads, t_q, t_k] logits before the softmax.
    """
    b, t_q, d = q.shape
    t_k = k.shape[1]
    if d % n_heads or k.shape[-1] != d or v.shape[-1] != d or v.shape[1] != t_k:
        raise DimensionError("attention", q.shape, k.shape, v.shape)
    d_head = d // n_heads
    qh = permute(reshape(q, (b, t_q, n_heads, d_head)), (0, 2, 1, 3))
    kh = permute(reshape(k, (b, t_k, n_heads, d_head)), (0, 2, 3, 1))
    vh = permute(reshape(v, (b, t_k, n_heads, d_head)), (0, 2, 1, 3))
    scores = mul(matmul(qh, kh), 1.0 / np.sqrt(d_head))
    if bias is not None:
        scores = add(scores, Tensor(bias))
    weights = softmax_rows(scores)
    out = matmul(weights, vh)
    return reshape(permute(out, (0, 2, 1, 3)), (b, t_q, d))
