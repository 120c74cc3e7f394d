"""
Dense float64 tensors with a reverse-mode gradient tape.

Every op checks shapes explicitly and never broadcasts. An op records its
parents and a backward closure only when gradients are enabled and at least
one input requires them, so evaluation under ``no_grad()`` builds no tape.
"""
import hashlib
import itertools
import logging
import math
import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from mowe.errors import ArgumentError, DimensionError

logger = logging.getLogger(__name__)

# tanh-approximation GELU constants
GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715

_node_ids = itertools.count(1)
_grad_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording for the current thread."""
    previous = grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        array = np.array(data, dtype=np.float64)
        if array.ndim == 0:
            array = array.reshape(1)
        self.data = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.node_id: Optional[int] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool = False) -> "Tensor":
        out = cls.__new__(cls)
        out.data = array
        out.grad = None
        out.requires_grad = requires_grad
        out.name = None
        out.node_id = None
        out._parents = ()
        out._backward = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ArgumentError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def _topological_order(self) -> List["Tensor"]:
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
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

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if not self.requires_grad:
            raise ArgumentError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ArgumentError(f"backward() without a seed needs a scalar root, got shape {self.shape}")
            grad = np.ones_like(self.data)
        elif np.shape(grad) != self.shape:
            raise DimensionError("backward", np.shape(grad), self.shape)

        order = self._topological_order()
        for node in order:
            if node._backward is not None:
                node.grad = None
        self.grad = np.array(grad, dtype=np.float64)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _accumulate(t: Tensor, delta: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(delta, dtype=np.float64, copy=True)
    else:
        t.grad += delta


def _result(array: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor._wrap(array, requires_grad=needs)
    if needs:
        out.node_id = next(_node_ids)
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _require_ndim(op: str, t: Tensor, ndim: int) -> None:
    if t.data.ndim != ndim:
        raise DimensionError(op, t.shape, hint=f"expected a {ndim}-D tensor")


# ---------------------------------------------------------------- constructors

def tensor(data, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor._wrap(np.zeros(tuple(shape), dtype=np.float64))


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError("add", a.shape, b.shape)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError("sub", a.shape, b.shape)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g)
        _accumulate(b, -g)

    return _result(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError("mul", a.shape, b.shape)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _result(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * c)

    return _result(a.data * c, (a,), backward)


def add_const(a: Tensor, c: float) -> Tensor:
    def backward(g: np.ndarray) -> None:
        _accumulate(a, g)

    return _result(a.data + c, (a,), backward)


def mask(a: Tensor, keep: np.ndarray) -> Tensor:
    """Multiply by a constant array; gradient flows only where ``keep`` is nonzero."""
    keep = np.asarray(keep, dtype=np.float64)
    if keep.shape != a.shape:
        raise DimensionError("mask", a.shape, keep.shape)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * keep)

    return _result(a.data * keep, (a,), backward)


def mul_scalar(a: Tensor, s: Tensor) -> Tensor:
    """Scale ``a`` by a single-element tensor, differentiable in both."""
    if s.size != 1:
        raise DimensionError("mul_scalar", s.shape, hint="scale factor must have one element")
    factor = float(s.data.reshape(-1)[0])

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * factor)
        _accumulate(s, np.array([np.sum(g * a.data)]).reshape(s.shape))

    return _result(a.data * factor, (a, s), backward)


def gelu(x: Tensor) -> Tensor:
    data = x.data
    inner = GELU_C * (data + GELU_K * data ** 3)
    t = np.tanh(inner)
    out = 0.5 * data * (1.0 + t)

    def backward(g: np.ndarray) -> None:
        dinner = GELU_C * (1.0 + 3.0 * GELU_K * data ** 2)
        local = 0.5 * (1.0 + t) + 0.5 * data * (1.0 - t ** 2) * dinner
        _accumulate(x, g * local)

    return _result(out, (x,), backward)


def xlogx(x: Tensor) -> Tensor:
    """Elementwise x*log(x) with 0*log(0) = 0; the gradient at 0 is taken as 0."""
    data = x.data
    if np.any(data < 0):
        raise ArgumentError("xlogx is undefined for negative entries")
    positive = data > 0
    safe = np.where(positive, data, 1.0)
    out = np.where(positive, data * np.log(safe), 0.0)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * np.where(positive, np.log(safe) + 1.0, 0.0))

    return _result(out, (x,), backward)


# ---------------------------------------------------------------- reductions

def sum_all(a: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> None:
        _accumulate(a, np.full(a.shape, g.reshape(-1)[0]))

    return _result(np.array([a.data.sum()]), (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    if a.size == 0:
        raise ArgumentError("mean_all of an empty tensor")
    return scale(sum_all(a), 1.0 / a.size)


def sum_tensors(items: Sequence[Tensor]) -> Tensor:
    """Sum equally shaped tensors as a single tape node."""
    if not items:
        raise ArgumentError("sum_tensors needs at least one tensor")
    shape = items[0].shape
    for item in items[1:]:
        if item.shape != shape:
            raise DimensionError("sum_tensors", shape, item.shape)

    def backward(g: np.ndarray) -> None:
        for item in items:
            _accumulate(item, g)

    return _result(np.sum([item.data for item in items], axis=0), tuple(items), backward)


def mean_over_sequence(z: Tensor) -> Tensor:
    """Column means of an S x d tensor, returned as 1 x d."""
    _require_ndim("mean_over_sequence", z, 2)
    rows = z.shape[0]
    if rows < 1:
        raise ArgumentError("mean_over_sequence needs at least one row")

    def backward(g: np.ndarray) -> None:
        _accumulate(z, np.repeat(g / rows, rows, axis=0))

    return _result(z.data.mean(axis=0, keepdims=True), (z,), backward)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _result(a.data @ b.data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    _require_ndim("transpose", a, 2)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g.T)

    return _result(a.data.T.copy(), (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError("reshape", a.shape, shape)
    original = a.shape

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g.reshape(original))

    return _result(a.data.reshape(shape).copy(), (a,), backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-d bias to every row of an S x d tensor."""
    _require_ndim("add_bias", x, 2)
    if b.data.ndim != 1 or b.shape[0] != x.shape[1]:
        raise DimensionError("add_bias", x.shape, b.shape)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g)
        _accumulate(b, g.sum(axis=0))

    return _result(x.data + b.data, (x, b), backward)


def scale_cols(x: Tensor, gain: Tensor) -> Tensor:
    """Multiply column j of an S x d tensor by gain[j]."""
    _require_ndim("scale_cols", x, 2)
    if gain.data.ndim != 1 or gain.shape[0] != x.shape[1]:
        raise DimensionError("scale_cols", x.shape, gain.shape)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * gain.data)
        _accumulate(gain, (g * x.data).sum(axis=0))

    return _result(x.data * gain.data, (x, gain), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, weight)
    return add_bias(out, bias) if bias is not None else out


# ---------------------------------------------------------------- softmax family

def softmax(v: Tensor) -> Tensor:
    _require_ndim("softmax", v, 1)
    if v.shape[0] < 1:
        raise ArgumentError("softmax of an empty vector")
    shifted = np.exp(v.data - v.data.max())
    out = shifted / shifted.sum()

    def backward(g: np.ndarray) -> None:
        _accumulate(v, out * (g - np.dot(g, out)))

    return _result(out, (v,), backward)


def softmax_rows(x: Tensor, allowed: Optional[np.ndarray] = None) -> Tensor:
    """Row-wise softmax; entries where ``allowed`` is False get probability 0."""
    _require_ndim("softmax_rows", x, 2)
    data = x.data
    if allowed is not None:
        if allowed.shape != x.shape:
            raise DimensionError("softmax_rows", x.shape, allowed.shape)
        if not np.all(allowed.any(axis=1)):
            raise ArgumentError("softmax_rows: every row needs at least one allowed entry")
        data = np.where(allowed, data, -np.inf)
    shifted = np.exp(data - data.max(axis=1, keepdims=True))
    out = shifted / shifted.sum(axis=1, keepdims=True)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, out * (g - (g * out).sum(axis=1, keepdims=True)))

    return _result(out, (x,), backward)


def cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean next-token cross-entropy of T x V logits against T target ids."""
    _require_ndim("cross_entropy", logits, 2)
    targets = np.asarray(targets, dtype=np.int64)
    rows, vocab = logits.shape
    if targets.shape != (rows,):
        raise DimensionError("cross_entropy", logits.shape, targets.shape)
    if rows == 0:
        raise ArgumentError("cross_entropy needs at least one target position")
    if targets.min() < 0 or targets.max() >= vocab:
        raise ArgumentError(f"cross_entropy: target ids must lie in [0, {vocab})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(rows), targets]
    loss = float(np.mean(log_z - picked))

    def backward(g: np.ndarray) -> None:
        probs = np.exp(shifted - log_z[:, None])
        probs[np.arange(rows), targets] -= 1.0
        _accumulate(logits, probs * (g.reshape(-1)[0] / rows))

    return _result(np.array([loss]), (logits,), backward)


def normalize_rows(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance rows (the parameter-free half of layer norm)."""
    _require_ndim("normalize_rows", x, 2)
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=1, keepdims=True) + eps)
    out = centered * inv_std

    def backward(g: np.ndarray) -> None:
        g_mean = g.mean(axis=1, keepdims=True)
        gy_mean = (g * out).mean(axis=1, keepdims=True)
        _accumulate(x, inv_std * (g - g_mean - out * gy_mean))

    return _result(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    return add_bias(scale_cols(normalize_rows(x, eps), gain), bias)


# ---------------------------------------------------------------- structure

def concat_feature(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate S x d1 and S x d2 along the feature axis."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError("concat_feature", a.shape, b.shape, hint="sequence lengths must match")
    split = a.shape[1]

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g[:, :split])
        _accumulate(b, g[:, split:])

    return _result(np.concatenate([a.data, b.data], axis=1), (a, b), backward)


def concat_sequence(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate S1 x d and S2 x d along the sequence axis."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError("concat_sequence", a.shape, b.shape, hint="feature widths must match")
    split = a.shape[0]

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g[:split])
        _accumulate(b, g[split:])

    return _result(np.concatenate([a.data, b.data], axis=0), (a, b), backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    _require_ndim("slice_cols", a, 2)
    if not 0 <= start <= stop <= a.shape[1]:
        raise DimensionError("slice_cols", a.shape, (start, stop))

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        _accumulate(a, full)

    return _result(a.data[:, start:stop].copy(), (a,), backward)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    _require_ndim("slice_rows", a, 2)
    if not 0 <= start <= stop <= a.shape[0]:
        raise DimensionError("slice_rows", a.shape, (start, stop))

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(a.data)
        full[start:stop] = g
        _accumulate(a, full)

    return _result(a.data[start:stop].copy(), (a,), backward)


def take(v: Tensor, index: int) -> Tensor:
    """Element ``index`` of a 1-D tensor as a one-element tensor."""
    _require_ndim("take", v, 1)
    if not 0 <= index < v.shape[0]:
        raise ArgumentError(f"take: index {index} out of range for length {v.shape[0]}")

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(v.data)
        full[index] = g.reshape(-1)[0]
        _accumulate(v, full)

    return _result(v.data[index:index + 1].copy(), (v,), backward)


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of a V x d table."""
    _require_ndim("embedding", table, 2)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ArgumentError(f"embedding: ids must lie in [0, {table.shape[0]})")

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        _accumulate(table, full)

    return _result(table.data[ids].copy(), (table,), backward)


def unfold_frames(x: Tensor, kernel: int, stride: int, pad_start: int = 0, pad_end: int = 0) -> Tensor:
    """Flatten sliding windows of ``kernel`` rows into T x (kernel*d) with zero padding."""
    _require_ndim("unfold_frames", x, 2)
    if kernel < 1 or stride < 1:
        raise ArgumentError("unfold_frames: kernel and stride must be >= 1")
    rows, width = x.shape
    padded_rows = rows + pad_start + pad_end
    if padded_rows < kernel:
        raise DimensionError("unfold_frames", x.shape, hint=f"padded length {padded_rows} shorter than kernel {kernel}")
    frames = (padded_rows - kernel) // stride + 1
    index = (np.arange(frames)[:, None] * stride + np.arange(kernel)[None, :]).reshape(-1)
    padded = np.zeros((padded_rows, width))
    padded[pad_start:pad_start + rows] = x.data
    out = padded[index].reshape(frames, kernel * width)

    def backward(g: np.ndarray) -> None:
        full = np.zeros((padded_rows, width))
        np.add.at(full, index, g.reshape(frames * kernel, width))
        _accumulate(x, full[pad_start:pad_start + rows])

    return _result(out, (x,), backward)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor, kernel: int, stride: int = 1,
           pad_start: int = 0, pad_end: int = 0) -> Tensor:
    """1-D convolution over the sequence axis; ``weight`` is (kernel*d_in) x d_out."""
    return add_bias(matmul(unfold_frames(x, kernel, stride, pad_start, pad_end), weight), bias)


def interpolation_matrix(d_src: int, d_dst: int) -> np.ndarray:
    """d_src x d_dst matrix mapping a row sampled on d_src points onto d_dst points."""
    if d_src < 1 or d_dst < 1:
        raise ArgumentError("interpolation needs positive widths")
    matrix = np.zeros((d_src, d_dst))
    if d_src == 1:
        matrix[0, :] = 1.0
        return matrix
    positions = np.linspace(0.0, d_src - 1.0, d_dst)
    lower = np.clip(np.floor(positions).astype(np.int64), 0, d_src - 2)
    frac = positions - lower
    matrix[lower, np.arange(d_dst)] += 1.0 - frac
    matrix[lower + 1, np.arange(d_dst)] += frac
    return matrix


def linear_interpolate_features(z: Tensor, d_dst: int) -> Tensor:
    """Resample every row of an S x d_src tensor onto a d_dst-point grid; endpoints preserved."""
    _require_ndim("linear_interpolate_features", z, 2)
    if z.shape[1] == d_dst:
        return z
    matrix = interpolation_matrix(z.shape[1], d_dst)

    def backward(g: np.ndarray) -> None:
        _accumulate(z, g @ matrix.T)

    return _result(z.data @ matrix, (z,), backward)


# ---------------------------------------------------------------- randomness

class Rng:
    """Seeded random stream; identical (seed, label) pairs draw identical sequences."""

    def __init__(self, seed: int, label: str = "root"):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.label = label
        digest = hashlib.sha256(label.encode("utf-8")).digest()
        entropy = [self.seed, int.from_bytes(digest[:8], "little")]
        self.generator = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def child(self, label: str) -> "Rng":
        return Rng(self.seed, f"{self.label}/{label}")

    def normal(self, shape: Sequence[int], std: float = 1.0) -> np.ndarray:
        return self.generator.normal(0.0, std, size=tuple(shape))

    def uniform(self, shape: Sequence[int], low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self.generator.uniform(low, high, size=tuple(shape))

    def integers(self, low: int, high: int, size: Optional[int] = None):
        return self.generator.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


# ---------------------------------------------------------------- gradient oracle

class GradCheckReport(BaseModel):
    max_rel_error: float
    per_param: Dict[str, float] = Field(default_factory=dict)
    coords_checked: int = 0

    def passed(self, tolerance: float = 1e-4) -> bool:
        return bool(self.max_rel_error < tolerance)


def check_gradients(f: Callable[[], Tensor], params: Union[Mapping[str, Tensor], Sequence[Tensor]],
                    eps: float = 1e-5, max_coords: Optional[int] = None, atol: float = 1e-5,
                    rng: Optional[Rng] = None) -> GradCheckReport:
    """
    Compare autodiff gradients of the scalar ``f()`` with central differences.

    Relative error per coordinate is |a - n| / max(|a|, |n|, atol). With
    ``max_coords`` set, a seeded random subset of each tensor is checked.
    """
    if not isinstance(params, Mapping):
        params = {t.name or f"param{i}": t for i, t in enumerate(params)}
    rng = rng or Rng(0, "gradcheck")

    for t in params.values():
        t.zero_grad()
    out = f()
    if out.size != 1:
        raise ArgumentError(f"check_gradients needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in params.items()}

    report = GradCheckReport(max_rel_error=0.0)
    for name, t in params.items():
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.child(name).permutation(flat.size)[:max_coords])
        worst = 0.0
        for i in coords:
            original = flat[i]
            with no_grad():
                flat[i] = original + eps
                plus = f().item()
                flat[i] = original - eps
                minus = f().item()
            flat[i] = original
            numeric = (plus - minus) / (2.0 * eps)
            exact = analytic[name].reshape(-1)[i]
            rel = abs(exact - numeric) / max(abs(exact), abs(numeric), atol)
            worst = max(worst, rel)
        report.per_param[name] = float(worst)
        report.coords_checked += int(len(coords))
        report.max_rel_error = float(max(report.max_rel_error, worst))
    logger.debug("gradient check: max rel error %.3e over %d coords", report.max_rel_error, report.coords_checked)
    return report
