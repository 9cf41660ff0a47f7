"""
Two-stage prompt training.

Stage 1 learns the verb and noun prompt sets (text prompts and their video
maps) under component cross-entropy plus the knowledge-guided term. Stage 2
freezes them, caches the component features once, and learns the prompt pool
and fusion projector under the unified objective. Every optimisation step is
logged with per-group gradient norms so the freeze contract can be audited.
"""
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from utils.blob_store import write_atomic
from utils.checkpoint import ModelState, save_checkpoint
from utils.config import VARIANTS, RunConfig
from utils.data_synth import Batch, Dataset, SyntheticBenchmark, local_labels, sample_batch
from utils.encoders import (
    COMPONENTS,
    ClassEmbeddingTable,
    encode_handcrafted_classes,
    encode_text_classes,
    encode_video,
    init_frozen_encoders,
    init_prompt_set,
)
from utils.errors import ConfigError, DivergenceError, UsageError
from utils.numerics import Tape, Tensor, backward, no_grad
from utils.objectives import LossBreakdown, stage1_loss, unified_loss
from utils.optimizer import adamw_step, grad_norm, init_optimizer_state, lr_at_step
from utils.prompt_pool import (
    fuse_patterns,
    gated_features,
    init_pool,
    init_projector,
    mean_pairwise_abs_cos,
    project_fusion,
    record_selection,
    retrieve_topk,
    selection_entropy,
)

logger = logging.getLogger(__name__)

LOG_FILE = "train.log.jsonl"
FEATURE_CHUNK = 256
_STAGE_INDEX = {"stage1": 1, "stage2": 2, "joint": 3}


class TrainLog:
    """JSON-lines records, one per step and one per epoch. No wall-clock values."""

    def __init__(self):
        self.records: List[Dict] = []

    def write(self, record: Dict) -> None:
        self.records.append(record)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def save(self, path: Union[str, Path]) -> None:
        write_atomic(path, self.to_jsonl().encode("utf-8"))

    def steps(self, stage: Optional[str] = None) -> List[Dict]:
        return [r for r in self.records if r["event"] == "step" and (stage is None or r["stage"] == stage)]

    def epochs(self, stage: Optional[str] = None) -> List[Dict]:
        return [r for r in self.records if r["event"] == "epoch" and (stage is None or r["stage"] == stage)]


@dataclass
class RunResult:
    state: ModelState
    log: TrainLog
    checkpoints: Dict[str, Path] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)


def build_model(config: RunConfig, bench: SyntheticBenchmark) -> ModelState:
    encoders = init_frozen_encoders(config.train.backbone_seed, config.encoder)
    prompt_sets = {c: init_prompt_set(c, config.encoder, config.train.seed, config.train.template(c))
                   for c in COMPONENTS}
    return ModelState(
        config=config,
        encoders=encoders,
        prompt_sets=prompt_sets,
        label_names={c: list(bench.label_names(c)) for c in COMPONENTS},
        variant=config.train.variant,
    )


def class_names(state: ModelState, component: str, classes: Sequence[int]) -> List[str]:
    return [state.label_names[component][i] for i in classes]


def learned_tables(state: ModelState, classes: Dict[str, Sequence[int]]) -> Dict[str, ClassEmbeddingTable]:
    return {c: encode_text_classes(state.encoders, state.prompt_sets[c], class_names(state, c, classes[c]),
                                   state.config.train.template(c))
            for c in COMPONENTS}


def template_tables(state: ModelState, classes: Dict[str, Sequence[int]]) -> Dict[str, ClassEmbeddingTable]:
    return {c: encode_handcrafted_classes(state.encoders, class_names(state, c, classes[c]),
                                          state.config.train.template(c), c)
            for c in COMPONENTS}


def component_features(state: ModelState, tokens: np.ndarray) -> Dict[str, np.ndarray]:
    """Frozen-graph f_c for every clip, computed in fixed-size chunks."""
    out = {}
    with no_grad():
        for c in COMPONENTS:
            chunks = [encode_video(state.encoders, tokens[i:i + FEATURE_CHUNK], state.prompt_sets[c]).values
                      for i in range(0, tokens.shape[0], FEATURE_CHUNK)]
            out[c] = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, state.config.encoder.width), np.float32)
    return out


def fused_features(state: ModelState, features: Dict[str, Tensor], record: bool = True) -> Tensor:
    """Retrieve, fuse and project both components into f_s."""
    train = state.config.train
    parts = {}
    for c in COMPONENTS:
        r = retrieve_topk(features[c], state.pool, train.k, train.tau_pool, component=c)
        if record:
            record_selection(r, state.pool)
        parts[c] = fuse_patterns(r, state.pool)
    return project_fusion(parts["verb"], parts["noun"], state.projector)


def stage2_features(state: ModelState, features: Dict[str, Tensor], record: bool = True) -> Dict[str, Tensor]:
    """Per-component classification features after the pool: f_c with the gated f_s mixed in."""
    return gated_features(features, fused_features(state, features, record), state.projector)


def _set_trainable(state: ModelState, groups: Sequence[str]) -> Dict[str, Tensor]:
    trainable: Dict[str, Tensor] = {}
    for group, params in state.parameter_groups().items():
        for name, tensor in params.items():
            tensor.requires_grad = group in groups
            tensor.zero_grad()
            if group in groups:
                trainable[name] = tensor
    return trainable


def _finite_or_raise(breakdown: LossBreakdown, stage: str, epoch: int, step: int) -> None:
    if not all(math.isfinite(v) for v in breakdown.terms.values()):
        raise DivergenceError(f"{stage} loss diverged at epoch {epoch}, step {step}: {breakdown.terms}")


def _epoch_seed(seed: int, stage: str, epoch: int) -> int:
    return seed * 1_000_003 + _STAGE_INDEX[stage] * 10_007 + epoch


def _run_epochs(stage: str, state: ModelState, dataset: Dataset, epochs: int, groups: Sequence[str],
                step_fn: Callable[[Batch], LossBreakdown], log: TrainLog) -> None:
    cfg = state.config.train
    trainable = _set_trainable(state, groups)
    all_groups = state.parameter_groups()
    opt = init_optimizer_state(trainable)
    batch_size = min(cfg.batch_size, len(dataset))
    steps_per_epoch = math.ceil(len(dataset) / batch_size)
    step = 0
    for epoch in range(epochs):
        if state.pool is not None:
            state.pool.reset_counters()
        totals = []
        for batch in sample_batch(dataset, batch_size, _epoch_seed(cfg.seed, stage, epoch)):
            for params in all_groups.values():
                for tensor in params.values():
                    tensor.zero_grad()
            lr_t = lr_at_step(step, steps_per_epoch, cfg)
            with Tape() as tape:
                breakdown = step_fn(batch)
            _finite_or_raise(breakdown, stage, epoch, step)
            backward(breakdown.total, tape)
            norms = {group: grad_norm(params) for group, params in all_groups.items()}
            adamw_step(trainable, {n: t.grad_or_zeros() for n, t in trainable.items()}, opt, lr_t, cfg)
            log.write({
                "event": "step", "stage": stage, "epoch": epoch, "step": step, "lr": lr_t,
                "losses": breakdown.terms,
                "grad_norm": norms,
            })
            totals.append(breakdown.terms["total"])
            step += 1
        record = {"event": "epoch", "stage": stage, "epoch": epoch, "mean_loss": float(np.mean(totals))}
        if state.pool is not None and stage != "stage1":
            record["counters"] = {c: state.pool.counters[c].tolist() for c in COMPONENTS}
            record["entropy"] = {c: selection_entropy(state.pool, c) for c in COMPONENTS}
            record["pool_abs_cos"] = mean_pairwise_abs_cos(state.pool)
        log.write(record)
        logger.info("%s epoch %d/%d: mean loss %.4f", stage, epoch + 1, epochs, record["mean_loss"])
    for params in all_groups.values():
        for tensor in params.values():
            tensor.requires_grad = False
            tensor.zero_grad()


def _train_classes(dataset: Dataset) -> Dict[str, List[int]]:
    return {c: list(dataset.classes(c)) for c in COMPONENTS}


def train_stage1(state: ModelState, dataset: Dataset, log: Optional[TrainLog] = None) -> ModelState:
    """Optimise the verb and noun prompt sets; the pool is untouched."""
    log = log if log is not None else TrainLog()
    classes = _train_classes(dataset)
    frozen = template_tables(state, classes)
    weights = state.config.loss

    def step_fn(batch: Batch) -> LossBreakdown:
        features = {c: encode_video(state.encoders, batch.tokens, state.prompt_sets[c]) for c in COMPONENTS}
        labels = {c: local_labels(batch.labels(c), classes[c]) for c in COMPONENTS}
        return stage1_loss(features, labels, learned_tables(state, classes), frozen, weights)

    _run_epochs("stage1", state, dataset, state.config.train.epochs_stage1, ("prompts",), step_fn, log)
    state.stage = "stage1"
    return state


def _ensure_pool(state: ModelState) -> None:
    train, width = state.config.train, state.config.encoder.width
    if state.pool is None:
        state.pool = init_pool(train.pool_size, width, train.seed)
    if state.projector is None:
        state.projector = init_projector(width, train.seed)


def train_stage2(state: ModelState, dataset: Dataset, log: Optional[TrainLog] = None) -> ModelState:
    """Optimise the pool and projector against frozen component features and class tables."""
    log = log if log is not None else TrainLog()
    _ensure_pool(state)
    classes = _train_classes(dataset)
    with no_grad():
        tables = learned_tables(state, classes)
    cached = component_features(state, dataset.tokens)
    weights = state.config.loss

    def step_fn(batch: Batch) -> LossBreakdown:
        state.pool.reset_window()
        features = {c: Tensor(cached[c][batch.indices]) for c in COMPONENTS}
        labels = {c: local_labels(batch.labels(c), classes[c]) for c in COMPONENTS}
        return unified_loss(stage2_features(state, features), labels, tables, state.pool, weights)

    _run_epochs("stage2", state, dataset, state.config.train.epochs_stage2, ("pool", "projector"), step_fn, log)
    state.stage = "stage2"
    return state


def train_joint(state: ModelState, dataset: Dataset, log: Optional[TrainLog] = None) -> ModelState:
    """Prompts, pool and projector together under the stage-1 terms plus the unified objective."""
    log = log if log is not None else TrainLog()
    _ensure_pool(state)
    classes = _train_classes(dataset)
    frozen = template_tables(state, classes)
    weights = state.config.loss
    epochs = state.config.train.epochs_stage1 + state.config.train.epochs_stage2

    def step_fn(batch: Batch) -> LossBreakdown:
        state.pool.reset_window()
        features = {c: encode_video(state.encoders, batch.tokens, state.prompt_sets[c]) for c in COMPONENTS}
        labels = {c: local_labels(batch.labels(c), classes[c]) for c in COMPONENTS}
        tables = learned_tables(state, classes)
        first = stage1_loss(features, labels, tables, frozen, weights)
        second = unified_loss(stage2_features(state, features), labels, tables, state.pool, weights)
        terms = {f"stage1_{k}": v for k, v in first.terms.items()}
        terms.update({f"unified_{k}": v for k, v in second.terms.items()})
        total = first.total + second.total
        terms["total"] = total.item()
        return LossBreakdown(total, terms)

    _run_epochs("joint", state, dataset, epochs, ("prompts", "pool", "projector"), step_fn, log)
    state.stage = "stage2"
    return state


def _pool_diagnostics(state: ModelState) -> Dict:
    if state.pool is None:
        return {}
    entropy = {}
    for c in COMPONENTS:
        entropy[c] = selection_entropy(state.pool, c) if state.pool.counters[c].sum() else 0.0
    return {"entropy": entropy, "pool_abs_cos": mean_pairwise_abs_cos(state.pool)}


def run_two_stage(config: RunConfig, bench: SyntheticBenchmark,
                  out_dir: Optional[Union[str, Path]] = None) -> RunResult:
    """Train one variant end to end on the benchmark's train split.

    Args:
        config: run configuration; ``train.variant`` picks the stages.
        bench: benchmark providing the train split and the label names.
        out_dir: when given, receives ``stage1.ckpt`` and/or ``stage2.ckpt``
            and the JSON-lines training log.

    Returns:
        A ``RunResult`` with the final state, the log, the checkpoint paths
        and per-stage wall times.

    Raises:
        DivergenceError: a loss went non-finite; the message names the last
            checkpoint written.
    """
    variant = config.train.variant
    if variant not in VARIANTS:
        raise ConfigError("train.variant", f"unknown variant {variant!r}")
    state = build_model(config, bench)
    log = TrainLog()
    result = RunResult(state, log)
    dataset = bench.splits["train"]
    if len(dataset) == 0:
        raise UsageError("training split is empty")
    out = Path(out_dir) if out_dir is not None else None

    def checkpoint(name: str) -> None:
        state.extra = _pool_diagnostics(state)
        if out is not None:
            path = out / f"{name}.ckpt"
            save_checkpoint(state, path)
            result.checkpoints[name] = path

    logger.info("training variant=%s seed=%d", variant, config.train.seed)
    try:
        started = time.perf_counter()
        if variant in ("stage1-only", "two-stage"):
            train_stage1(state, dataset, log)
            result.timings["stage1"] = time.perf_counter() - started
            checkpoint("stage1")
        if variant in ("stage2-only", "two-stage"):
            started = time.perf_counter()
            train_stage2(state, dataset, log)
            result.timings["stage2"] = time.perf_counter() - started
            checkpoint("stage2")
        if variant == "joint":
            train_joint(state, dataset, log)
            result.timings["joint"] = time.perf_counter() - started
            checkpoint("stage2")
    except DivergenceError as exc:
        last = ", ".join(str(p) for p in result.checkpoints.values()) or "none"
        raise DivergenceError(f"{exc} (last checkpoint: {last})") from exc
    finally:
        if out is not None:
            log.save(out / LOG_FILE)
    return result
