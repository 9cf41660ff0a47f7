"""
Scoring a trained model on every split of a synthetic benchmark.

Stage-1 mode classifies each component feature against its own class table;
stage-2 mode classifies each component on its feature after the pool, f_c
with the gated fusion feature mixed in. Predictions are
the argmax of cosine scores, ties going to the lower class index.
"""
import logging
from typing import Dict, Optional, Sequence

import numpy as np

from components.metrics import METRICS, MetricsReport, average_accuracy, class_average_accuracy
from utils.checkpoint import ModelState
from utils.data_synth import SPLITS, Dataset, SyntheticBenchmark, local_labels
from utils.encoders import COMPONENTS, encode_text_classes
from utils.errors import UsageError
from utils.numerics import Tensor, no_grad
from utils.trainer import class_names, component_features, stage2_features

logger = logging.getLogger(__name__)

MODES = ("stage1", "stage2")


def default_mode(state: ModelState) -> str:
    return "stage2" if state.has_pool else "stage1"


def _check_mode(state: ModelState, mode: str) -> None:
    if mode not in MODES:
        raise UsageError(f"unknown evaluation mode {mode!r}; expected one of {MODES}")
    if mode == "stage2" and not state.has_pool:
        raise UsageError(f"stage2 evaluation needs a pool and projector; checkpoint is at {state.stage}")
    if mode == "stage1" and state.stage == "init":
        raise UsageError("stage1 evaluation needs trained prompts; checkpoint is untrained")


def cosine_scores(features: np.ndarray, table: np.ndarray) -> np.ndarray:
    f = features / np.linalg.norm(features, axis=-1, keepdims=True)
    w = table / np.linalg.norm(table, axis=-1, keepdims=True)
    return f @ w.T


def predict(state: ModelState, dataset: Dataset, mode: str) -> Dict[str, np.ndarray]:
    """Local class predictions per component, indexed into ``dataset.classes(c)``.

    Components whose class set is empty on this split are left out.
    """
    scored = [c for c in COMPONENTS if dataset.classes(c)]
    feats = component_features(state, dataset.tokens)
    with no_grad():
        tables = {c: encode_text_classes(state.encoders, state.prompt_sets[c],
                                         class_names(state, c, dataset.classes(c)),
                                         state.config.train.template(c)).embeddings.values
                  for c in scored}
        if mode == "stage2":
            mixed = stage2_features(state, {c: Tensor(feats[c]) for c in COMPONENTS}, record=False)
            feats = {c: mixed[c].values for c in COMPONENTS}
    return {c: np.argmax(cosine_scores(feats[c], tables[c]), axis=1) for c in scored}


def evaluate_split(state: ModelState, dataset: Dataset, mode: str, report: MetricsReport,
                   include_action: bool = False) -> None:
    preds = predict(state, dataset, mode)
    truth = {c: local_labels(dataset.labels(c), dataset.classes(c)) for c in COMPONENTS}
    for c in COMPONENTS:
        scored = truth[c] >= 0
        if not scored.any():
            continue
        report.add(c, dataset.name, "average_accuracy", average_accuracy(preds[c][scored], truth[c][scored]))
        report.add(c, dataset.name, "class_average_accuracy",
                   class_average_accuracy(preds[c][scored], truth[c][scored]))
    if include_action:
        scored = (truth["verb"] >= 0) & (truth["noun"] >= 0)
        if scored.any():
            both = (preds["verb"] == truth["verb"]) & (preds["noun"] == truth["noun"])
            report.add("action", dataset.name, "average_accuracy", 100.0 * float(np.mean(both[scored])))


def evaluate_model(state: ModelState, bench: SyntheticBenchmark, mode: Optional[str] = None,
                   splits: Optional[Sequence[str]] = None, include_action: bool = False) -> MetricsReport:
    """Score ``state`` on the selected splits and add the harmonic-mean rows.

    Without ``mode`` a model that has a pool is scored in stage-2 mode, any
    other trained model in stage-1 mode. ``splits`` defaults to every test
    split; empty splits are skipped.
    """
    mode = mode or default_mode(state)
    _check_mode(state, mode)
    report = MetricsReport()
    for name in splits or [s for s in SPLITS if s != "train"]:
        dataset = bench.splits[name]
        if len(dataset) == 0:
            logger.debug("skipping empty split %s", name)
            continue
        evaluate_split(state, dataset, mode, report, include_action)
    report.add_harmonic_means(COMPONENTS)
    logger.info("evaluated %s model (%s mode): %d metric rows", state.variant, mode, len(report.rows))
    return report


def headline(report: MetricsReport, metric: str = "average_accuracy") -> Dict[str, float]:
    """Within/cross hm per component, the number the ablation and sweep tables compare."""
    if metric not in METRICS:
        raise UsageError(f"unknown metric {metric!r}")
    out = {}
    for c in COMPONENTS:
        value = report.value(c, "within/cross", f"hm_{metric}")
        out[c] = value if value is not None else 0.0
    return out
