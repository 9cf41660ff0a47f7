"""
Dense tensors with tape-based reverse-mode differentiation.

Every differentiable computation in the trainer, the losses and the encoders
is built from the operations in this module. A ``Tensor`` wraps a numpy array
(float32 by default). Operations record onto the
active ``Tape`` only when a tape is open and at least one input requires a
gradient, so evaluation code builds no graph at all.

    with Tape() as tape:
        loss = some_objective(params)
    backward(loss, tape)
"""
import contextvars
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from utils.errors import DegenerateInputError, DimensionError, NonFiniteError, ParameterError, UsageError

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-5
NORM_FLOOR = 1e-12
_GELU_C = float(np.sqrt(2.0 / np.pi))

_ACTIVE_TAPE: contextvars.ContextVar = contextvars.ContextVar("egoprompt_active_tape", default=None)

Scalar = Union[int, float]


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "node_id", "tape", "name")
    __array_ufunc__ = None  # keep ndarray <op> Tensor routed to our reflected operators

    def __init__(self, values, requires_grad: bool = False, dtype=np.float32, name: Optional[str] = None):
        self.values = np.array(values, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self.tape: Optional["Tape"] = None
        self.name = name

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.values = array
        out.requires_grad = False
        out.grad = None
        out.node_id = None
        out.tape = None
        out.name = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        if self.values.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self) -> None:
        self.grad = None

    def grad_or_zeros(self) -> np.ndarray:
        return self.grad if self.grad is not None else np.zeros_like(self.values)

    def accumulate_grad(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=self.values.dtype).reshape(self.values.shape)
        self.grad = g.copy() if self.grad is None else self.grad + g

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.values)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


@dataclass
class Node:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tape:
    """Ordered record of differentiable operations; appended in execution order."""

    def __init__(self):
        self.nodes: List[Node] = []
        self._tokens: List[contextvars.Token] = []

    def record(self, op: str, inputs: Tuple[Tensor, ...], out: Tensor, backward_fn) -> None:
        out.node_id = len(self.nodes)
        out.tape = self
        self.nodes.append(Node(op, inputs, out, backward_fn))

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())


@contextmanager
def no_grad() -> Iterator[None]:
    token = _ACTIVE_TAPE.set(None)
    try:
        yield
    finally:
        _ACTIVE_TAPE.reset(token)


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def parameter(values, name: Optional[str] = None, dtype=np.float32) -> Tensor:
    return Tensor(values, requires_grad=True, dtype=dtype, name=name)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32))


def _result(op: str, data: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor._wrap(data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer)) and not isinstance(x, bool)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    if _is_scalar(b):
        return add_scalar(a, float(b))
    if _is_scalar(a):
        return add_scalar(b, float(a))
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", a.values + b.values, (a, b), bw)


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return add_scalar(a, -float(b))
    if _is_scalar(a):
        return add_scalar(scale(b, -1.0), float(a))
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result("sub", a.values - b.values, (a, b), bw)


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        return scale(a, float(b))
    if _is_scalar(a):
        return scale(b, float(a))
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return _result("mul", a.values * b.values, (a, b), bw)


def div(a, b) -> Tensor:
    if _is_scalar(b):
        return scale(a, 1.0 / float(b))
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g / b.values, a.shape)
        gb = _unbroadcast(-g * a.values / (b.values * b.values), b.shape)
        return ga, gb

    return _result("div", a.values / b.values, (a, b), bw)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    return _result("scale", x.values * c, (x,), lambda g: (g * c,))


def add_scalar(x, c: float) -> Tensor:
    x = as_tensor(x)
    return _result("add_scalar", x.values + c, (x,), lambda g: (g,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.values)
    return _result("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _result("log", np.log(x.values), (x,), lambda g: (g / x.values,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.values)
    return _result("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _result("square", x.values * x.values, (x,), lambda g: (2.0 * g * x.values,))


def tabs(x) -> Tensor:
    x = as_tensor(x)
    return _result("abs", np.abs(x.values), (x,), lambda g: (g * np.sign(x.values),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.values)
    return _result("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def gelu(x) -> Tensor:
    """tanh-approximated GELU."""
    x = as_tensor(x)
    v = x.values
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def bw(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner),)

    return _result("gelu", out, (x,), bw)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _result("reshape", x.values.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result("transpose", x.values.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def swap_last(x) -> Tensor:
    axes = list(range(as_tensor(x).ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    out = np.broadcast_to(x.values, shape)
    return _result("broadcast_to", out, (x,), lambda g: (_unbroadcast(g, x.shape),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise DimensionError(f"concat along axis {axis} failed for shapes {shapes}") from exc
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result("concat", out, tensors, bw)


def _has_array_index(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return any(isinstance(p, (np.ndarray, list)) for p in parts)


def getitem(x, key) -> Tensor:
    x = as_tensor(x)
    out = x.values[key]
    fancy = _has_array_index(key)

    def bw(g):
        z = np.zeros_like(x.values)
        if fancy:
            np.add.at(z, key, g)
        else:
            z[key] = g
        return (z,)

    return _result("getitem", np.array(out), (x,), bw)


def gather(x, indices: np.ndarray, axis: int = -1) -> Tensor:
    """take_along_axis over the last axis; duplicates accumulate in backward."""
    x = as_tensor(x)
    if axis not in (-1, x.ndim - 1):
        raise UsageError("gather only supports the last axis")
    indices = np.asarray(indices, dtype=np.int64)
    if indices.shape[:-1] != x.shape[:-1]:
        raise DimensionError(f"gather index shape {indices.shape} does not match leading shape of {x.shape}")
    out = np.take_along_axis(x.values, indices, axis=-1)

    def bw(g):
        z = np.zeros_like(x.values)
        flat_z = z.reshape(-1, x.shape[-1])
        rows = np.arange(flat_z.shape[0])[:, None]
        np.add.at(flat_z, (rows, indices.reshape(flat_z.shape[0], -1)), g.reshape(flat_z.shape[0], -1))
        return (z,)

    return _result("gather", out, (x,), bw)


# ---------------------------------------------------------------------------
# reductions and linear algebra
# ---------------------------------------------------------------------------

def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.values, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _result("sum", np.asarray(out), (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.values.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.values, -1, -2))
        gb = np.matmul(np.swapaxes(a.values, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result("matmul", np.matmul(a.values, b.values), (a, b), bw)


def linear(x, weight, bias=None) -> Tensor:
    """x @ weight (+ bias) with weight stored as (in, out)."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------------------
# normalisers
# ---------------------------------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.values - np.max(x.values, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _result("softmax", out, (x,), bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.values - np.max(x.values, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        probs = np.exp(out)
        return (g - probs * np.sum(g, axis=axis, keepdims=True),)

    return _result("log_softmax", out, (x,), bw)


def softmax_temp(logits, tau: float) -> Tensor:
    logits = as_tensor(logits)
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    if logits.values.size == 0 or logits.shape[-1] == 0:
        raise DimensionError("softmax over an empty input")
    return softmax(scale(logits, 1.0 / tau), axis=-1)


def layer_norm(x, gamma, beta, eps: float = LAYER_NORM_EPS) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm width mismatch: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.values.mean(axis=-1, keepdims=True)
    centered = x.values - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    out = xhat * gamma.values + beta.values

    def bw(g):
        dxhat = g * gamma.values
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result("layer_norm", out, (x, gamma, beta), bw)


def l2_normalize(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    norm = np.sqrt(np.sum(x.values * x.values, axis=axis, keepdims=True))
    if np.any(norm < NORM_FLOOR):
        raise DegenerateInputError(f"cannot normalise a zero-norm vector (input shape {x.shape})")
    out = x.values / norm

    def bw(g):
        return ((g - out * np.sum(g * out, axis=axis, keepdims=True)) / norm,)

    return _result("l2_normalize", out, (x,), bw)


def cosine_similarity(a, b) -> Tensor:
    """Cosine similarity along the last axis; two d-vectors give a scalar."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"cosine_similarity shape mismatch: {a.shape} vs {b.shape}")
    return tsum(mul(l2_normalize(a), l2_normalize(b)), axis=-1)


def cosine_matrix(a, b) -> Tensor:
    """Pairwise cosines between rows of a (m×d) and rows of b (n×d)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"cosine_matrix width mismatch: {a.shape} vs {b.shape}")
    return matmul(l2_normalize(a), swap_last(l2_normalize(b)))


# ---------------------------------------------------------------------------
# reverse pass and finite-difference oracle
# ---------------------------------------------------------------------------

def backward(root: Tensor, tape: Optional[Tape] = None) -> None:
    """Accumulate d(root)/d(leaf) into every requires_grad leaf reachable from root."""
    if root.values.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {root.shape}")
    if root.node_id is None:
        # root does not depend on any trainable leaf
        return
    tape = tape if tape is not None else root.tape
    if root.tape is not tape:
        raise UsageError("root was recorded on a different tape")

    grads: Dict[int, np.ndarray] = {root.node_id: np.ones_like(root.values)}
    for node_id in range(root.node_id, -1, -1):
        g = grads.pop(node_id, None)
        if g is None:
            continue
        node = tape.nodes[node_id]
        for inp, ig in zip(node.inputs, node.backward(g)):
            if ig is None or not inp.requires_grad:
                continue
            if inp.tape is tape and inp.node_id is not None:
                prev = grads.get(inp.node_id)
                grads[inp.node_id] = ig if prev is None else prev + ig
            else:
                inp.accumulate_grad(ig)


@dataclass
class GradCheckReport:
    errors: Dict[str, float] = field(default_factory=dict)
    tol: float = 1e-3
    h: float = 1e-3
    value: float = 0.0
    checked: int = 0

    @property
    def passed(self) -> bool:
        return all(err <= self.tol for err in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def _evaluate_scalar(f: Callable[[], Tensor]) -> float:
    with no_grad():
        out = f()
    if out.values.size != 1:
        raise UsageError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    return float(out.values.reshape(-1)[0])


def _sample_coordinates(sizes: Sequence[int], max_elements: Optional[int], seed: int) -> List[np.ndarray]:
    """Flat element indices to perturb per leaf; at least one per non-empty leaf."""
    total = int(sum(sizes))
    if max_elements is None or total <= max_elements:
        return [np.arange(s) for s in sizes]
    rng = np.random.default_rng([seed, total])
    picked = np.sort(rng.choice(total, size=max_elements, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    out = []
    for i, size in enumerate(sizes):
        idx = picked[(picked >= offsets[i]) & (picked < offsets[i + 1])] - offsets[i]
        if idx.size == 0 and size > 0:
            idx = rng.integers(0, size, size=1)
        out.append(idx)
    return out


def grad_check(f: Callable[[], Tensor], leaves: Sequence[Tensor], h: float = 1e-3,
               tol: float = 1e-3, names: Optional[Sequence[str]] = None,
               max_elements: Optional[int] = None, seed: int = 0) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences in float64.

    The leaves are promoted to float64 for the duration of the check and
    restored afterwards, together with their gradient buffers.

    Args:
        f: zero-argument closure returning a scalar tensor.
        leaves: tensors to differentiate against.
        h: central-difference step.
        tol: largest relative error accepted per leaf.
        names: labels for the per-leaf errors; defaults to the leaf names.
        max_elements: perturb at most this many elements in total, drawn
            without replacement from ``seed``. ``None`` perturbs every element.
        seed: seed for the element sample.

    Returns:
        A ``GradCheckReport`` with one error per leaf, the reverse-pass value
        and the number of perturbed elements.

    Raises:
        NonFiniteError: ``f`` is not finite at or next to the evaluation point.
    """
    names = list(names) if names is not None else [leaf.name or f"leaf{i}" for i, leaf in enumerate(leaves)]
    saved = [(leaf.values, leaf.grad, leaf.requires_grad) for leaf in leaves]
    report = GradCheckReport(tol=tol, h=h)
    try:
        for leaf in leaves:
            leaf.values = leaf.values.astype(np.float64)
            leaf.grad = None
            leaf.requires_grad = True

        with Tape() as tape:
            out = f()
        if out.values.size != 1:
            raise UsageError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
        report.value = float(out.values.reshape(-1)[0])
        if not np.isfinite(report.value):
            raise NonFiniteError(f"function is not finite at the evaluation point ({report.value})")
        backward(out, tape)
        analytic = [leaf.grad_or_zeros().astype(np.float64) for leaf in leaves]
        coords = _sample_coordinates([leaf.values.size for leaf in leaves], max_elements, seed)

        for name, leaf, a, idx in zip(names, leaves, analytic, coords):
            flat = leaf.values.reshape(-1)
            a_flat = a.reshape(-1)[idx]
            num_flat = np.zeros(idx.size)
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                f_plus = _evaluate_scalar(f)
                flat[i] = orig - h
                f_minus = _evaluate_scalar(f)
                flat[i] = orig
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise NonFiniteError(f"function is not finite near the evaluation point of {name}[{i}]")
                num_flat[j] = (f_plus - f_minus) / (2.0 * h)
            scale_ = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(num_flat), initial=0.0), 1e-8)
            report.errors[name] = float(np.max(np.abs(a_flat - num_flat), initial=0.0) / scale_)
            report.checked += int(idx.size)
            logger.debug("grad_check %s: max relative error %.3e", name, report.errors[name])
    finally:
        for leaf, (values, grad, requires_grad) in zip(leaves, saved):
            leaf.values = values
            leaf.grad = grad
            leaf.requires_grad = requires_grad
    return report
