"""
Unified prompt pool: P query/value pairs shared by the verb and noun branches.

Retrieval picks the k queries closest (cosine) to a component feature and
weights the matching value prompts with a temperature-scaled softmax over the
selected similarities. Selection statistics are kept per component: integer
counters for diagnostics and a differentiable window of attention weights
for the frequency regulariser.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Union

import numpy as np

from utils.encoders import COMPONENTS
from utils.errors import DegenerateInputError, DimensionError, ParameterError, UsageError
from utils.numerics import (
    Tensor,
    as_tensor,
    concat,
    cosine_matrix,
    gather,
    l2_normalize,
    linear,
    parameter,
    reshape,
    softmax_temp,
    tsum,
)

logger = logging.getLogger(__name__)

DEFAULT_POOL_SIZE = 16
DEFAULT_TOP_K = 4
DEFAULT_TAU_POOL = 0.07


@dataclass
class SelectionWindow:
    """Retrievals recorded since the last optimisation step."""

    indices: List[np.ndarray] = field(default_factory=list)
    weights: List[Tensor] = field(default_factory=list)
    retrievals: int = 0


class PromptPool:
    def __init__(self, queries: Tensor, values: Tensor):
        if queries.shape != values.shape or queries.ndim != 2:
            raise DimensionError(f"queries {queries.shape} and values {values.shape} must both be P x d")
        self.queries = queries
        self.values = values
        self.counters: Dict[str, np.ndarray] = {}
        self.soft_freq: Dict[str, np.ndarray] = {}
        self.retrievals: Dict[str, int] = {}
        self.windows: Dict[str, SelectionWindow] = {}
        self.reset_counters()
        self.reset_window()

    @property
    def size(self) -> int:
        return self.queries.shape[0]

    @property
    def width(self) -> int:
        return self.queries.shape[1]

    def parameters(self) -> Dict[str, Tensor]:
        return {"pool.queries": self.queries, "pool.values": self.values}

    def reset_counters(self) -> None:
        for c in COMPONENTS:
            self.counters[c] = np.zeros(self.size, dtype=np.int64)
            self.soft_freq[c] = np.zeros(self.size, dtype=np.float64)
            self.retrievals[c] = 0

    def reset_window(self) -> None:
        self.windows = {c: SelectionWindow() for c in COMPONENTS}


def init_pool(pool_size: int, width: int, seed: int) -> PromptPool:
    if pool_size < 1 or width < 1:
        raise ParameterError(f"pool needs P >= 1 and d >= 1, got P={pool_size}, d={width}")
    rng = np.random.default_rng([seed, 0x9001])
    bound = 1.0 / np.sqrt(width)
    queries = rng.uniform(-bound, bound, size=(pool_size, width))
    values = rng.uniform(-bound, bound, size=(pool_size, width))
    if np.any(np.linalg.norm(queries, axis=1) == 0) or np.any(np.linalg.norm(values, axis=1) == 0):
        raise DegenerateInputError("pool initialisation produced a zero-norm prompt")
    return PromptPool(parameter(queries, name="pool.queries"), parameter(values, name="pool.values"))


@dataclass
class RetrievalResult:
    component: str
    indices: np.ndarray
    weights: Tensor


def retrieve_topk(f_c, pool: PromptPool, k: int = DEFAULT_TOP_K, tau_pool: float = DEFAULT_TAU_POOL,
                  component: str = "verb", fixed_indices: Optional[np.ndarray] = None) -> RetrievalResult:
    """Top-k cosine retrieval; ties go to the lower prompt index.

    ``f_c`` is a d-vector or a (B, d) batch. The selected index set is a
    constant of the graph, so gradients reach the selected queries through the
    softmax weights only. ``fixed_indices`` pins the selection.
    """
    if not 1 <= k <= pool.size:
        raise ParameterError(f"k must lie in [1, {pool.size}], got {k}")
    if not tau_pool > 0:
        raise ParameterError(f"tau_pool must be positive, got {tau_pool}")
    f = as_tensor(f_c)
    single = f.ndim == 1
    if single:
        f = reshape(f, (1, f.shape[0]))
    if f.ndim != 2 or f.shape[1] != pool.width:
        raise DimensionError(f"feature shape {as_tensor(f_c).shape} does not match pool width {pool.width}")

    cos = cosine_matrix(f, pool.queries)
    if fixed_indices is None:
        order = np.argsort(-cos.values, axis=1, kind="stable")[:, :k]
    else:
        order = np.asarray(fixed_indices, dtype=np.int64).reshape(f.shape[0], k)
    weights = softmax_temp(gather(cos, order), tau_pool)
    if single:
        return RetrievalResult(component, order[0], reshape(weights, (k,)))
    return RetrievalResult(component, order, weights)


def fuse_patterns(r: RetrievalResult, pool: PromptPool) -> Tensor:
    """Attention-weighted sum of the selected value prompts."""
    selected = pool.values[r.indices]
    w = reshape(r.weights, r.weights.shape + (1,))
    return tsum(w * selected, axis=-2)


@dataclass
class FusionProjector:
    """Affine map from the concatenated pattern features to f_s.

    ``gate`` holds one scalar per component that mixes f_s back into that
    component's own feature for classification; it starts at zero.
    """

    weight: Tensor
    bias: Tensor
    gate: Optional[Tensor] = None

    def parameters(self) -> Dict[str, Tensor]:
        named = {"projector.weight": self.weight, "projector.bias": self.bias}
        if self.gate is not None:
            named["projector.gate"] = self.gate
        return named


def init_projector(width: int, seed: int) -> FusionProjector:
    rng = np.random.default_rng([seed, 0x9002])
    weight = rng.normal(0.0, 1.0 / np.sqrt(2 * width), size=(2 * width, width))
    return FusionProjector(parameter(weight, name="projector.weight"),
                           parameter(np.zeros(width), name="projector.bias"),
                           parameter(np.zeros(len(COMPONENTS)), name="projector.gate"))


def project_fusion(f_v, f_n, proj: FusionProjector) -> Tensor:
    f_v, f_n = as_tensor(f_v), as_tensor(f_n)
    if f_v.shape != f_n.shape:
        raise DimensionError(f"fusion inputs differ in shape: {f_v.shape} vs {f_n.shape}")
    return l2_normalize(linear(concat([f_v, f_n], axis=-1), proj.weight, proj.bias), axis=-1)



def gated_features(features: Mapping[str, Union[Tensor, np.ndarray]], fused: Tensor,
                   proj: FusionProjector) -> Dict[str, Tensor]:
    """Per-component classification features l2n(f_c + g_c * f_s).

    Args:
        features: component features f_c keyed by component, each shaped like ``fused``.
        fused: the projected fusion feature f_s.
        proj: projector whose ``gate`` supplies g_c. Without a gate every
            component is scored on f_s alone.

    Returns:
        One unit-norm feature per component. A zero gate reproduces the
        direction of f_c, so class scores equal the stage-1 scores.
    """
    fused = as_tensor(fused)
    if proj.gate is None:
        return {c: fused for c in COMPONENTS}
    out = {}
    for i, c in enumerate(COMPONENTS):
        f = as_tensor(features[c])
        if f.shape != fused.shape:
            raise DimensionError(f"{c} feature {f.shape} does not match the fused feature {fused.shape}")
        out[c] = l2_normalize(f + proj.gate[i] * fused, axis=-1)
    return out


def record_selection(r: RetrievalResult, pool: PromptPool) -> None:
    """Update counters, soft frequencies and the step window, in batch order."""
    idx = np.atleast_2d(r.indices)
    w = r.weights.values.reshape(idx.shape)
    counters, soft = pool.counters[r.component], pool.soft_freq[r.component]
    for row_idx, row_w in zip(idx, w):
        counters[row_idx] += 1
        soft[row_idx] += row_w
    window = pool.windows[r.component]
    window.indices.append(idx)
    window.weights.append(reshape(r.weights, idx.shape))
    window.retrievals += idx.shape[0]
    pool.retrievals[r.component] += idx.shape[0]


def selection_entropy(pool: PromptPool, component: str) -> float:
    counts = pool.counters[component].astype(np.float64)
    total = counts.sum()
    if total <= 0:
        raise UsageError(f"no selections recorded for {component}")
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


def mean_pairwise_abs_cos(pool: PromptPool) -> float:
    """Mean off-diagonal |cos| over queries and values, averaged over the two sets."""
    if pool.size < 2:
        return 0.0
    off_diag = ~np.eye(pool.size, dtype=bool)
    scores = []
    for matrix in (pool.queries.values, pool.values.values):
        unit = matrix / np.linalg.norm(matrix, axis=1, keepdims=True)
        scores.append(np.abs(unit @ unit.T)[off_diag].mean())
    return float(np.mean(scores))
