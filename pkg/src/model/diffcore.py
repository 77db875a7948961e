"""
Reverse-mode differentiation over dense float64 numpy tensors.

Every op builds a new `Value` whose backward closure accumulates gradients
into its parents. Node ids come from a single increasing counter, so sorting
the reachable nodes by descending id is a valid reverse topological order
(the tape).
"""

import itertools
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from model.errors import (
    DegenerateBatch,
    EmptyInput,
    NonFinite,
    ShapeMismatch,
    ZeroVector,
)
from utils.logger import setup_logger

logger = setup_logger(__name__)

_node_ids = itertools.count()

ArrayLike = Union[np.ndarray, float, Sequence[float]]
TRAINING = "training"
EVAL = "eval"


class Value:
    """A tensor node on the tape with a same-shape gradient accumulator."""

    __slots__ = ("data", "grad", "id", "requires_grad", "name", "_parents", "_backward")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        parents: Tuple["Value", ...] = (),
        name: Optional[str] = None,
    ):
        self.data = np.array(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data)
        self.id = next(_node_ids)
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name
        self._parents = parents
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Value#{self.id}{label}(shape={self.shape})"

    def backward(self, seed: Optional[np.ndarray] = None) -> None:
        """
        Propagates gradients from this node to every node it depends on.

        Args:
            seed: Upstream gradient. Required unless this node holds a single element.
        """
        if seed is None:
            if self.data.size != 1:
                raise ShapeMismatch(f"backward() needs a seed for non-scalar shape {self.shape}")
            seed = np.ones_like(self.data)
        self.grad += seed

        # Collect reachable nodes; creation order is a topological order.
        seen: Dict[int, Value] = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node.id in seen or not node.requires_grad:
                continue
            seen[node.id] = node
            stack.extend(node._parents)

        for node_id in sorted(seen, reverse=True):
            node = seen[node_id]
            if node._backward is not None:
                node._backward(node.grad)

    # Operator sugar for readable model code
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)


def as_value(x: Union[Value, ArrayLike]) -> Value:
    return x if isinstance(x, Value) else Value(x)


def parameter(data: ArrayLike, name: Optional[str] = None) -> Value:
    return Value(data, requires_grad=True, name=name)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sums a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        logger.error(f"{op}: non-finite input")
        raise NonFinite(f"{op} received NaN or Inf")


# -------------------------------------------------------------------------
# Elementwise arithmetic
# -------------------------------------------------------------------------

def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    out = Value(a.data + b.data, parents=(a, b))

    def _backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g, b.shape)
    out._backward = _backward
    return out


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    out = Value(a.data - b.data, parents=(a, b))

    def _backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.shape)
        if b.requires_grad:
            b.grad -= _unbroadcast(g, b.shape)
    out._backward = _backward
    return out


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    out = Value(a.data * b.data, parents=(a, b))

    def _backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g * b.data, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * a.data, b.shape)
    out._backward = _backward
    return out


def scale(a: Value, factor: float) -> Value:
    out = Value(a.data * factor, parents=(a,))

    def _backward(g):
        a.grad += g * factor
    out._backward = _backward
    return out


def relu(x: Value) -> Value:
    out = Value(np.maximum(x.data, 0.0), parents=(x,))

    def _backward(g):
        x.grad += g * (x.data > 0.0)
    out._backward = _backward
    return out


def sigmoid(x: Value) -> Value:
    # Split by sign so neither branch overflows exp.
    z = x.data
    s = np.empty_like(z)
    pos = z >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    s[~pos] = ez / (1.0 + ez)
    out = Value(s, parents=(x,))

    def _backward(g):
        x.grad += g * s * (1.0 - s)
    out._backward = _backward
    return out


# -------------------------------------------------------------------------
# Shape and reduction ops
# -------------------------------------------------------------------------

def reshape(x: Value, shape: Tuple[int, ...]) -> Value:
    out = Value(x.data.reshape(shape), parents=(x,))

    def _backward(g):
        x.grad += g.reshape(x.shape)
    out._backward = _backward
    return out


def transpose(x: Value, axes: Sequence[int]) -> Value:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Value(np.transpose(x.data, axes), parents=(x,))

    def _backward(g):
        x.grad += np.transpose(g, inverse)
    out._backward = _backward
    return out


def swap_last(x: Value) -> Value:
    axes = list(range(x.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def sum_all(x: Value, axis: Optional[int] = None, keepdims: bool = False) -> Value:
    out = Value(np.sum(x.data, axis=axis, keepdims=keepdims), parents=(x,))

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x.grad += np.broadcast_to(g, x.shape)
    out._backward = _backward
    return out


def concat(values: Sequence[Value], axis: int) -> Value:
    """Concatenates along `axis`; every other axis must agree."""
    if not values:
        raise EmptyInput("concat of zero tensors")
    ref = values[0].shape
    ax = axis % len(ref)
    for v in values[1:]:
        if len(v.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(v.shape, ref)) if i != ax
        ):
            logger.error(f"concat shape mismatch: {ref} vs {v.shape} on axis {axis}")
            raise ShapeMismatch(f"cannot concat {ref} with {v.shape} along axis {axis}")
    out = Value(np.concatenate([v.data for v in values], axis=ax), parents=tuple(values))
    bounds = np.cumsum([0] + [v.shape[ax] for v in values])

    def _backward(g):
        for v, lo, hi in zip(values, bounds[:-1], bounds[1:]):
            if v.requires_grad:
                index = [slice(None)] * g.ndim
                index[ax] = slice(lo, hi)
                v.grad += g[tuple(index)]
    out._backward = _backward
    return out


def concat_nodes(values: Sequence[Value]) -> Value:
    """Stacks node sets along the node axis (second to last)."""
    return concat(values, axis=-2)


def take(x: Value, index: Tuple[np.ndarray, ...]) -> Value:
    """Gathers `x.data[index]`; gradients scatter-add back (repeats accumulate)."""
    out = Value(x.data[index], parents=(x,))

    def _backward(g):
        np.add.at(x.grad, index, g)
    out._backward = _backward
    return out


def take_rows(table: Value, ids: np.ndarray) -> Value:
    """Embedding lookup: rows of `table` selected by integer `ids` of any shape."""
    return take(table, (np.asarray(ids, dtype=np.int64),))


# -------------------------------------------------------------------------
# Linear algebra
# -------------------------------------------------------------------------

def matmul(a, b) -> Value:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_value(a), as_value(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatch(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        logger.error(f"matmul inner dims differ: {a.shape} @ {b.shape}")
        raise ShapeMismatch(f"inner dimensions differ: {a.shape} @ {b.shape}")
    out = Value(np.matmul(a.data, b.data), parents=(a, b))

    def _backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
    out._backward = _backward
    return out


def linear(x: Value, W: Value, b: Optional[Value] = None) -> Value:
    """
    Affine map y = x W (+ b) over the last axis of `x`.

    Args:
        x: Input of shape (*, D_in). A 1-D input is treated as a single row.
        W: Weight of shape (D_in, D_out).
        b: Optional bias of shape (D_out,).

    Raises:
        ShapeMismatch: If dimensions disagree.
    """
    if W.data.ndim != 2 or x.shape[-1] != W.shape[0]:
        logger.error(f"linear: input {x.shape} does not fit weight {W.shape}")
        raise ShapeMismatch(f"linear input {x.shape} incompatible with weight {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise ShapeMismatch(f"bias {b.shape} does not match output width {W.shape[1]}")

    if x.data.ndim == 1:
        y = reshape(matmul(reshape(x, (1, -1)), W), (W.shape[1],))
    else:
        y = matmul(x, W)
    return add(y, b) if b is not None else y


def scaled_dot(q: Value, k: Value, scale_by: float) -> Value:
    """Pairwise logits q k^T / scale_by over the last two axes."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeMismatch(f"scaled_dot feature widths differ: {q.shape} vs {k.shape}")
    return scale(matmul(q, swap_last(k)), 1.0 / scale_by)


# -------------------------------------------------------------------------
# Normalizations
# -------------------------------------------------------------------------

def softmax_rows(x: Value, mask: Optional[np.ndarray] = None) -> Value:
    """
    Softmax over the last axis, stabilized by row-max subtraction.

    Args:
        x: Logits; rows are the last axis.
        mask: Optional boolean array broadcastable to x; False entries are
              excluded and receive exactly zero probability.
    """
    check_finite(x.data, "softmax_rows")
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / np.sum(e, axis=-1, keepdims=True)
    out = Value(s, parents=(x,))

    def _backward(g):
        x.grad += s * (g - np.sum(g * s, axis=-1, keepdims=True))
    out._backward = _backward
    return out


def l2_normalize_rows(x: Value) -> Value:
    norms = np.linalg.norm(x.data, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        logger.error("l2_normalize_rows: zero-norm row")
        raise ZeroVector("cannot normalize a zero vector")
    y = x.data / norms
    out = Value(y, parents=(x,))

    def _backward(g):
        x.grad += (g - y * np.sum(g * y, axis=-1, keepdims=True)) / norms
    out._backward = _backward
    return out


def mean_pool_nodes(x: Value, mask: Optional[np.ndarray] = None) -> Value:
    """
    Mean over the node axis (second to last): (N, D) -> (D,), (B, N, D) -> (B, D).

    Args:
        mask: Optional (N,) or (B, N) boolean array of nodes to include.

    Raises:
        EmptyInput: If some graph has no node to pool.
    """
    if x.data.ndim < 2 or x.shape[-2] == 0:
        raise EmptyInput(f"mean_pool_nodes needs at least one node, got shape {x.shape}")
    if mask is None:
        weights = np.ones(x.shape[:-1])
    else:
        weights = np.broadcast_to(np.asarray(mask, dtype=np.float64), x.shape[:-1])
    counts = weights.sum(axis=-1, keepdims=True)
    if np.any(counts == 0):
        raise EmptyInput("mean_pool_nodes: a graph has no unmasked node")
    coef = (weights / counts)[..., None]
    out = Value(np.sum(x.data * coef, axis=-2), parents=(x,))

    def _backward(g):
        x.grad += np.expand_dims(g, -2) * coef
    out._backward = _backward
    return out


@dataclass
class BatchNormState:
    """Per-channel affine learnables and running statistics for `batchnorm`."""

    gamma: Value
    beta: Value
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5
    mode: str = TRAINING

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, epsilon: float = 1e-5,
               name: str = "bn") -> "BatchNormState":
        if epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {epsilon}")
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {momentum}")
        return cls(
            gamma=parameter(np.ones(channels), name=f"{name}.gamma"),
            beta=parameter(np.zeros(channels), name=f"{name}.beta"),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            momentum=momentum,
            epsilon=epsilon,
        )


def batchnorm(
    x: Value,
    st: BatchNormState,
    mode: Optional[str] = None,
    row_mask: Optional[np.ndarray] = None,
) -> Value:
    """
    Batch normalization per feature channel over every leading axis flattened.

    Args:
        x: Tensor of shape (..., C).
        st: Learnables and running statistics. Training mode updates the
            running statistics in place; eval mode reads them only.
        mode: 'training' or 'eval'; defaults to st.mode.
        row_mask: Optional boolean array of shape x.shape[:-1]. Masked rows are
                  normalized but excluded from the batch statistics.

    Raises:
        DegenerateBatch: Fewer than two counted rows in training mode.
    """
    mode = mode or st.mode
    channels = x.shape[-1]
    if st.gamma.shape != (channels,):
        raise ShapeMismatch(f"batchnorm expects {st.gamma.shape[0]} channels, got {channels}")

    flat = x.data.reshape(-1, channels)
    if row_mask is None:
        w = np.ones((flat.shape[0], 1))
    else:
        w = np.asarray(row_mask, dtype=np.float64).reshape(-1, 1)
    count = float(w.sum())

    if mode == TRAINING:
        if count < 2:
            logger.error(f"batchnorm: {int(count)} row(s) in training mode")
            raise DegenerateBatch(f"training-mode batchnorm needs at least 2 rows, got {int(count)}")
        mean = (w * flat).sum(axis=0) / count
        centered = flat - mean
        var = (w * centered ** 2).sum(axis=0) / count
        m = st.momentum
        st.running_mean = (1.0 - m) * st.running_mean + m * mean
        st.running_var = (1.0 - m) * st.running_var + m * var * count / (count - 1.0)
    elif mode == EVAL:
        mean, var = st.running_mean, st.running_var
        centered = flat - mean
    else:
        raise ValueError(f"unknown batchnorm mode '{mode}'")

    inv_std = 1.0 / np.sqrt(var + st.epsilon)
    xhat = centered * inv_std
    out = Value((xhat * st.gamma.data + st.beta.data).reshape(x.shape),
                parents=(x, st.gamma, st.beta))
    training = mode == TRAINING

    def _backward(g):
        g2 = g.reshape(-1, channels)
        if st.gamma.requires_grad:
            st.gamma.grad += (g2 * xhat).sum(axis=0)
        if st.beta.requires_grad:
            st.beta.grad += g2.sum(axis=0)
        if not x.requires_grad:
            return
        gxhat = g2 * st.gamma.data
        if training:
            s1 = gxhat.sum(axis=0) / count
            s2 = (gxhat * xhat).sum(axis=0) / count
            gx = inv_std * (gxhat - w * s1 - w * xhat * s2)
        else:
            gx = gxhat * inv_std
        x.grad += gx.reshape(x.shape)
    out._backward = _backward
    return out


def faulty_identity(x: Value) -> Value:
    """Identity whose backward doubles the gradient; a gradcheck negative control."""
    out = Value(x.data.copy(), parents=(x,))

    def _backward(g):
        x.grad += 2.0 * g
    out._backward = _backward
    return out


# -------------------------------------------------------------------------
# Finite-difference oracle
# -------------------------------------------------------------------------

@dataclass
class GradcheckReport:
    max_rel_error: float
    passed: bool
    tol: float
    checked: int
    per_param: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, object]:
        return {
            "max_rel_error": self.max_rel_error,
            "passed": self.passed,
            "tol": self.tol,
            "checked": self.checked,
            "per_param": dict(self.per_param),
        }


def _relative_error(exact: float, numeric: float, floor: float) -> float:
    return abs(exact - numeric) / max(abs(exact), abs(numeric), floor)


def gradcheck(
    f: Callable[[], Value],
    params: List[Value],
    step: float = 1e-6,
    tol: float = 1e-4,
    max_entries: Optional[int] = None,
    seed: int = 0,
    floor: float = 1e-4,
) -> GradcheckReport:
    """
    Compares reverse-mode gradients of a scalar function against central differences.

    Args:
        f: Rebuilds the scalar from the current contents of `params`.
        params: Tensors whose entries are perturbed in place and restored.
        step: Finite-difference step.
        tol: Pass threshold on the maximum relative error.
        max_entries: If set, checks at most this many entries per parameter,
                     preferring entries with a nonzero analytic gradient.
        floor: Lower bound on the relative-error denominator.

    Returns:
        GradcheckReport: pass iff max relative error <= tol.
    """
    for p in params:
        p.zero_grad()
    out = f()
    if out.data.size != 1:
        raise ShapeMismatch(f"gradcheck needs a scalar function, got shape {out.shape}")
    check_finite(out.data, "gradcheck")
    out.backward()
    analytic = [p.grad.copy() for p in params]
    f_base = out.item()

    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = 0
    per_param: Dict[str, float] = {}

    for i, (p, a) in enumerate(zip(params, analytic)):
        flat_idx = np.arange(p.data.size)
        if max_entries is not None and p.data.size > max_entries:
            nonzero = np.flatnonzero(a)
            pool = nonzero if nonzero.size >= max_entries else flat_idx
            flat_idx = np.sort(rng.choice(pool, size=max_entries, replace=False))

        param_worst = 0.0
        view = p.data.reshape(-1)
        for j in flat_idx:
            original = view[j]
            view[j] = original + step
            f_plus = f().item()
            view[j] = original - step
            f_minus = f().item()
            view[j] = original
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFinite(f"gradcheck: non-finite value perturbing {p.name or i}[{j}]")
            exact = a.reshape(-1)[j]
            err = _relative_error(exact, (f_plus - f_minus) / (2.0 * step), floor)
            if err > tol:
                # A ReLU or max kink inside [x - step, x + step] spoils the central
                # estimate; the one-sided estimate on the smooth side still holds.
                err = min(err,
                          _relative_error(exact, (f_plus - f_base) / step, floor),
                          _relative_error(exact, (f_base - f_minus) / step, floor))
            param_worst = max(param_worst, err)
            checked += 1
        per_param[p.name or f"param{i}"] = float(param_worst)
        worst = max(worst, param_worst)

    passed = bool(worst <= tol)
    logger.debug(f"gradcheck over {checked} entries: max rel error {worst:.3e} (tol {tol})")
    return GradcheckReport(max_rel_error=float(worst), passed=passed, tol=tol,
                           checked=checked, per_param=per_param)
