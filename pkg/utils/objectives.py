"""Training losses for both stages and their weighting."""
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, Mapping, Optional, Union

import numpy as np

from utils.encoders import COMPONENTS, ClassEmbeddingTable
from utils.errors import ConfigError, DimensionError, LabelError, ParameterError, UsageError
from utils.numerics import (
    Tensor,
    as_tensor,
    cosine_matrix,
    gather,
    log_softmax,
    matmul,
    mean,
    reshape,
    scale,
    square,
    tabs,
    tsum,
)
from utils.prompt_pool import PromptPool

logger = logging.getLogger(__name__)


@dataclass
class LossWeights:
    lambda_freq: float = 1.0
    lambda_orth: float = 1.0
    lambda_kg: float = 1.0
    tau_cls: float = 0.07
    k_freq: int = 4

    def validate(self, pool_size: Optional[int] = None) -> "LossWeights":
        for key in ("lambda_freq", "lambda_orth", "lambda_kg"):
            if getattr(self, key) < 0:
                raise ConfigError(f"loss.{key}", "must be >= 0")
        if not self.tau_cls > 0:
            raise ConfigError("loss.tau_cls", "must be positive")
        if self.k_freq < 1:
            raise ConfigError("loss.k_freq", "must be >= 1")
        if pool_size is not None and self.k_freq > pool_size:
            raise ConfigError("loss.k_freq", f"k_freq={self.k_freq} exceeds pool size {pool_size}")
        return self

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    total: Tensor
    terms: Dict[str, float] = field(default_factory=dict)


def class_logits(f, table: ClassEmbeddingTable, tau_cls: float) -> Tensor:
    """cos(f, w_j) / tau for every class row; (B, N) or (N,) for a single feature."""
    if not tau_cls > 0:
        raise ParameterError(f"tau_cls must be positive, got {tau_cls}")
    f = as_tensor(f)
    single = f.ndim == 1
    if single:
        f = reshape(f, (1, f.shape[0]))
    logits = scale(cosine_matrix(f, table.embeddings), 1.0 / tau_cls)
    return reshape(logits, (table.size,)) if single else logits


def component_ce_loss(f, table: ClassEmbeddingTable, y, tau_cls: float) -> Tensor:
    """Batch-mean negative log-probability of the true class."""
    labels = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if labels.size and (labels.min() < 0 or labels.max() >= table.size):
        raise LabelError(f"{table.component} label out of range [0, {table.size}): {labels.tolist()}")
    logits = class_logits(f, table, tau_cls)
    if logits.ndim == 1:
        logits = reshape(logits, (1, table.size))
    if logits.shape[0] != labels.size:
        raise DimensionError(f"{logits.shape[0]} features but {labels.size} labels")
    picked = gather(log_softmax(logits, axis=-1), labels[:, None])
    return scale(mean(picked), -1.0)


def kg_loss(learned: ClassEmbeddingTable, frozen: ClassEmbeddingTable) -> Tensor:
    """Mean over classes of the squared distance between learned and template rows."""
    if learned.embeddings.shape != frozen.embeddings.shape or learned.component != frozen.component:
        raise DimensionError(
            f"kg_loss tables differ: {learned.component}{learned.embeddings.shape} "
            f"vs {frozen.component}{frozen.embeddings.shape}"
        )
    diff = learned.embeddings - frozen.embeddings
    return scale(tsum(square(diff)), 1.0 / learned.size)


def window_frequencies(pool: PromptPool, component: str) -> Tensor:
    """Soft selection frequency per prompt for the current window, summing to 1."""
    window = pool.windows[component]
    if window.retrievals == 0:
        raise UsageError(f"selection window for {component} is empty")
    total = None
    for idx, w in zip(window.indices, window.weights):
        onehot = np.zeros((idx.size, pool.size), dtype=np.float32)
        onehot[np.arange(idx.size), idx.reshape(-1)] = 1.0
        part = matmul(reshape(w, (1, idx.size)), as_tensor(onehot))
        total = part if total is None else total + part
    return scale(reshape(total, (pool.size,)), 1.0 / window.retrievals)


def freq_reg_loss(pool: PromptPool, k_freq: int) -> Tensor:
    """Sum over components of (mass of the k most used) - (mass of the k least used)."""
    if not 1 <= k_freq <= pool.size:
        raise ParameterError(f"k_freq must lie in [1, {pool.size}], got {k_freq}")
    loss = None
    for component in COMPONENTS:
        if pool.windows[component].retrievals == 0:
            continue
        s = window_frequencies(pool, component)
        most = np.argsort(-s.values, kind="stable")[:k_freq]
        least = np.argsort(s.values, kind="stable")[:k_freq]
        term = tsum(s[most]) - tsum(s[least])
        loss = term if loss is None else loss + term
    if loss is None:
        raise UsageError("freq_reg_loss called with an empty selection window")
    return loss


def _mean_offdiag_abs_cos(matrix: Tensor) -> Tensor:
    p = matrix.shape[0]
    mask = 1.0 - np.eye(p, dtype=np.float32)
    return scale(tsum(tabs(cosine_matrix(matrix, matrix)) * as_tensor(mask)), 1.0 / (p * (p - 1)))


def orth_loss(pool: PromptPool) -> Tensor:
    if pool.size < 2:
        raise ParameterError(f"orth_loss needs at least two prompts, got P={pool.size}")
    return _mean_offdiag_abs_cos(pool.queries) + _mean_offdiag_abs_cos(pool.values)


def stage1_loss(features: Mapping[str, Tensor], labels: Mapping[str, np.ndarray],
                learned: Mapping[str, ClassEmbeddingTable], frozen: Mapping[str, ClassEmbeddingTable],
                weights: LossWeights) -> LossBreakdown:
    """Component CE for both branches plus the weighted knowledge-guided term."""
    terms: Dict[str, float] = {}
    total = None
    for c in COMPONENTS:
        ce = component_ce_loss(features[c], learned[c], labels[c], weights.tau_cls)
        kg = kg_loss(learned[c], frozen[c])
        terms[f"ce_{c}"] = ce.item()
        terms[f"kg_{c}"] = kg.item()
        part = ce + scale(kg, weights.lambda_kg)
        total = part if total is None else total + part
    terms["total"] = total.item()
    return LossBreakdown(total, terms)


def unified_loss(fused: Union[Tensor, Mapping[str, Tensor]], labels: Mapping[str, np.ndarray],
                 tables: Mapping[str, ClassEmbeddingTable], pool: PromptPool, weights: LossWeights) -> LossBreakdown:
    """Post-pool CE against both class tables plus the two pool regularisers.

    ``fused`` is either a single feature scored against both tables or one
    feature per component.
    """
    terms: Dict[str, float] = {}
    total = None
    for c in COMPONENTS:
        feature = fused[c] if isinstance(fused, Mapping) else fused
        ce = component_ce_loss(feature, tables[c], labels[c], weights.tau_cls)
        terms[f"ce_{c}"] = ce.item()
        total = ce if total is None else total + ce
    if any(pool.windows[c].retrievals for c in COMPONENTS):
        freq = freq_reg_loss(pool, weights.k_freq)
        terms["freq"] = freq.item()
        total = total + scale(freq, weights.lambda_freq)
    if pool.size >= 2:
        orth = orth_loss(pool)
        terms["orth"] = orth.item()
        total = total + scale(orth, weights.lambda_orth)
    terms["total"] = total.item()
    return LossBreakdown(total, terms)
