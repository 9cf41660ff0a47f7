"""
Ablation grid and one-axis sweeps over the desk-scale benchmark.

Every run is a full ``run_two_stage`` on a benchmark generated from the run's
seed, followed by ``evaluate_model``. Runs fan out over a thread pool capped by
``EGOPROMPT_THREADS``; results are collected in submission order so reports do
not depend on the thread count.
"""
import itertools
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from components.evaluation import evaluate_model
from components.metrics import MetricsReport
from utils.config import VARIANTS, RunConfig
from utils.data_synth import make_benchmark
from utils.encoders import COMPONENTS
from utils.errors import ConfigError, UsageError
from utils.trainer import run_two_stage

logger = logging.getLogger(__name__)

THREADS_ENV = "EGOPROMPT_THREADS"
FULL_METHOD = {"variant": "two-stage", "lambdas": "default", "deep_prompting": True}
MODULE_EFFECT_MARGIN = 1.0
SWEEP_AXES = {
    "pool_size": ("train.pool_size",),
    "lambda_freq": ("loss.lambda_freq",),
    "lambda_orth": ("loss.lambda_orth",),
    "k": ("train.k", "loss.k_freq"),
    "template": ("train.verb_template", "train.noun_template"),
    "deep_prompting": ("encoder.deep_prompting",),
}
TEMPLATE_CANDIDATES = ["a photo of [CLASS]", "a photo of a [CLASS] action", "a photo of actioning on [CLASS]"]
ACCURACY_METRICS = [f"hm_within_cross_{c}" for c in COMPONENTS] + [f"hm_base_novel_{c}" for c in COMPONENTS]
DIAGNOSTIC_METRICS = ["entropy_verb", "entropy_noun", "pool_abs_cos"]
CELL_KEYS = ["variant", "lambdas", "deep_prompting", "component", "split", "metric"]
HM_SPLITS = ("within/cross", "base/novel")


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        threads = int(raw)
    except ValueError as exc:
        raise ConfigError(THREADS_ENV, f"expected an integer, got {raw!r}") from exc
    if threads < 1:
        raise ConfigError(THREADS_ENV, "must be >= 1")
    return threads


@dataclass
class RunOutcome:
    seed: int
    variant: str
    metrics: MetricsReport
    summary: Dict[str, float]
    seconds: float = 0.0


def _summarise(report: MetricsReport, extra: Dict) -> Dict[str, float]:
    summary: Dict[str, float] = {}
    for c in COMPONENTS:
        for label, key in (("within/cross", "hm_within_cross"), ("base/novel", "hm_base_novel")):
            value = report.value(c, label, "hm_average_accuracy")
            summary[f"{key}_{c}"] = value if value is not None else float("nan")
    entropy = extra.get("entropy", {})
    for c in COMPONENTS:
        summary[f"entropy_{c}"] = float(entropy.get(c, float("nan")))
    summary["pool_abs_cos"] = float(extra.get("pool_abs_cos", float("nan")))
    return summary


def run_single(config: RunConfig, seed: int) -> RunOutcome:
    """Train and evaluate one configuration on the benchmark drawn from ``seed``."""
    config = config.with_updates({"train.seed": seed})
    started = time.perf_counter()
    bench = make_benchmark(seed, config.benchmark)
    result = run_two_stage(config, bench)
    report = evaluate_model(result.state, bench)
    outcome = RunOutcome(seed, config.train.variant, report, _summarise(report, result.state.extra),
                         time.perf_counter() - started)
    logger.info("run variant=%s seed=%d done in %.1fs", outcome.variant, seed, outcome.seconds)
    return outcome


def _effective_key(config: RunConfig, seed: int) -> str:
    """Configs that train identically share a key; stage1-only never touches the pool."""
    data = config.to_dict()
    if config.train.variant == "stage1-only":
        for key in ("lambda_freq", "lambda_orth"):
            data["loss"].pop(key)
        for key in ("pool_size", "k", "tau_pool"):
            data["train"].pop(key)
    return json.dumps({"config": data, "seed": seed}, sort_keys=True)


def run_many(jobs: Sequence[Tuple[RunConfig, int]], threads: Optional[int] = None) -> List[RunOutcome]:
    """Run every (config, seed) job once per distinct effective config, in submission order."""
    threads = threads or worker_count()
    keys = [_effective_key(cfg, seed) for cfg, seed in jobs]
    unique: Dict[str, Tuple[RunConfig, int]] = {}
    for key, job in zip(keys, jobs):
        unique.setdefault(key, job)
    logger.info("%d runs requested, %d distinct, %d worker thread(s)", len(jobs), len(unique), threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = {key: pool.submit(run_single, cfg, seed) for key, (cfg, seed) in unique.items()}
        done = {key: future.result() for key, future in futures.items()}
    return [done[key] for key in keys]


def _median_iqr(values: Sequence[float]) -> Tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    arr = arr[~np.isnan(arr)]
    if arr.size == 0:
        return float("nan"), float("nan")
    q1, q3 = np.percentile(arr, [25, 75])
    return float(np.median(arr)), float(q3 - q1)


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

@dataclass
class AblationReport:
    """``cells`` has one row per (variant, component, split, metric) with the
    seed median and IQR; ``runs`` holds the per-seed rows behind them."""

    cells: pd.DataFrame
    checks: pd.DataFrame
    runs: pd.DataFrame = field(default_factory=pd.DataFrame)
    outcomes: Dict[Tuple, List[RunOutcome]] = field(default_factory=dict)


def ablation_grid(variants: Sequence[str] = VARIANTS, lambdas: bool = True,
                  deep: bool = True) -> List[Tuple[str, Tuple[str, str], bool]]:
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError("train.variant", f"unknown variant {v!r}")
    lambda_settings = list(itertools.product(("default", "zero"), repeat=2)) if lambdas else [("default", "default")]
    deep_settings = [True, False] if deep else [True]
    return [(v, lam, d) for v in variants for lam in lambda_settings for d in deep_settings]


def _cell_config(config: RunConfig, variant: str, lam: Tuple[str, str], deep_prompting: bool) -> RunConfig:
    return config.with_updates({
        "train.variant": variant,
        "loss.lambda_freq": config.loss.lambda_freq if lam[0] == "default" else 0.0,
        "loss.lambda_orth": config.loss.lambda_orth if lam[1] == "default" else 0.0,
        "encoder.deep_prompting": deep_prompting,
    })


def _lambda_label(lam: Tuple[str, str]) -> str:
    if lam == ("default", "default"):
        return "default"
    return f"freq={lam[0]},orth={lam[1]}"


def _is_full(variant: str, lam: Tuple[str, str], deep_prompting: bool) -> bool:
    return (variant, _lambda_label(lam), deep_prompting) == tuple(FULL_METHOD.values())


def _seed_rows(outcome: RunOutcome) -> List[Dict[str, Any]]:
    """Metric rows of one run plus its pool diagnostics, reported on the train split."""
    rows = outcome.metrics.to_frame().to_dict("records")
    for c in COMPONENTS:
        rows.append({"component": c, "split": "train", "metric": "selection_entropy",
                     "value": outcome.summary[f"entropy_{c}"]})
    rows.append({"component": "pool", "split": "train", "metric": "pool_abs_cos",
                 "value": outcome.summary["pool_abs_cos"]})
    return [r for r in rows if not np.isnan(r["value"])]


def ablation_cells(outcomes: Dict[Tuple, List[RunOutcome]]) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Aggregate per-seed rows into per-cell medians and compare hm rows with the full method.

    Args:
        outcomes: runs per grid cell ``(variant, lambdas, deep_prompting)``,
            one per seed.

    Returns:
        The per-seed long table and the cell table. Harmonic-mean rows of
        every other cell carry Win, Loss or Tie against the full method in
        ``vs_full``; all other rows carry ``-``.
    """
    records = []
    for (variant, lam, deep_prompting), seed_runs in outcomes.items():
        for outcome in seed_runs:
            for row in _seed_rows(outcome):
                records.append({"variant": variant, "lambdas": _lambda_label(lam), "deep_prompting": deep_prompting,
                                "seed": outcome.seed, **row})
    runs = pd.DataFrame(records, columns=CELL_KEYS[:3] + ["seed"] + CELL_KEYS[3:] + ["value"])

    rows = []
    for key, group in runs.groupby(CELL_KEYS, sort=False):
        median, iqr = _median_iqr(group["value"])
        rows.append({**dict(zip(CELL_KEYS, key)), "median": median, "iqr": iqr,
                     "seeds": int(group["seed"].nunique())})
    cells = pd.DataFrame(rows, columns=CELL_KEYS + ["median", "iqr", "seeds"])
    cells.insert(3, "full_method", [
        (v, lam, d) == tuple(FULL_METHOD.values())
        for v, lam, d in zip(cells["variant"], cells["lambdas"], cells["deep_prompting"])
    ])

    full = cells[cells["full_method"]].set_index(["component", "split", "metric"])["median"]
    statuses = []
    for row in cells.itertuples(index=False):
        key = (row.component, row.split, row.metric)
        if row.full_method or row.split not in HM_SPLITS or key not in full.index or np.isnan(row.median):
            statuses.append("-")
            continue
        diff = row.median - full[key]
        statuses.append("Win" if diff > 0 else "Loss" if diff < 0 else "Tie")
    cells["vs_full"] = statuses
    return runs, cells


def run_ablation(config: RunConfig, seeds: Sequence[int], variants: Sequence[str] = VARIANTS,
                 lambdas: bool = True, deep: bool = True, threads: Optional[int] = None) -> AblationReport:
    """Run the variant x lambda x deep-prompting grid over seeds.

    Args:
        config: base configuration; each cell overrides the variant, the two
            regulariser weights and the deep-prompting switch.
        seeds: one run per seed per cell, each on the benchmark drawn from
            that seed.
        variants: training variants to include.
        lambdas: include the zero-weight settings of the two regularisers.
        deep: include runs with deep prompting switched off.
        threads: worker threads; defaults to ``EGOPROMPT_THREADS``.

    Returns:
        An ``AblationReport``. The full method is added to the grid when the
        selection leaves it out.
    """
    if not seeds:
        raise UsageError("run_ablation needs at least one seed")
    grid = ablation_grid(variants, lambdas, deep)
    if not any(_is_full(*cell) for cell in grid):
        grid.append(("two-stage", ("default", "default"), True))
    jobs = [(_cell_config(config, *cell), seed) for cell in grid for seed in seeds]
    results = run_many(jobs, threads)
    outcomes = {cell: results[i * len(seeds):(i + 1) * len(seeds)] for i, cell in enumerate(grid)}
    runs, cells = ablation_cells(outcomes)
    return AblationReport(cells=cells, checks=_direction_checks(outcomes), runs=runs, outcomes=outcomes)


def _direction_checks(outcomes: Dict[Tuple, List[RunOutcome]]) -> pd.DataFrame:
    default, zero = ("default", "default"), ("zero", "zero")
    rows = []
    two_stage, stage1 = outcomes.get(("two-stage", default, True)), outcomes.get(("stage1-only", default, True))
    if two_stage and stage1:
        gains = {}
        for c in COMPONENTS:
            metric = f"hm_within_cross_{c}"
            gains[c] = (_median_iqr([o.summary[metric] for o in two_stage])[0]
                        - _median_iqr([o.summary[metric] for o in stage1])[0])
        best = max(gains.values())
        rows.append({
            "check": "module_effect",
            "detail": ", ".join(f"{c} {g:+.2f}" for c, g in gains.items()),
            "observed": best,
            "threshold": MODULE_EFFECT_MARGIN,
            "status": "Pass" if best >= MODULE_EFFECT_MARGIN else "Fail",
        })
    regular, plain = outcomes.get(("two-stage", default, True)), outcomes.get(("two-stage", zero, True))
    if regular and plain:
        def mean_entropy(o: RunOutcome) -> float:
            return float(np.mean([o.summary[f"entropy_{c}"] for c in COMPONENTS]))

        d_entropy = _median_iqr([mean_entropy(o) for o in regular])[0] - _median_iqr([mean_entropy(o) for o in plain])[0]
        d_cos = (_median_iqr([o.summary["pool_abs_cos"] for o in regular])[0]
                 - _median_iqr([o.summary["pool_abs_cos"] for o in plain])[0])
        rows.append({"check": "diversity_entropy", "detail": "regularised minus unregularised median entropy",
                     "observed": d_entropy, "threshold": 0.0, "status": "Pass" if d_entropy > 0 else "Fail"})
        rows.append({"check": "diversity_abs_cos", "detail": "regularised minus unregularised median |cos|",
                     "observed": d_cos, "threshold": 0.0, "status": "Pass" if d_cos < 0 else "Fail"})
    return pd.DataFrame(rows, columns=["check", "detail", "observed", "threshold", "status"])


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

@dataclass
class SweepReport:
    axis: str
    runs: pd.DataFrame

    def summary(self) -> pd.DataFrame:
        metrics = ACCURACY_METRICS + DIAGNOSTIC_METRICS
        grouped = self.runs.groupby("value", sort=False)[metrics]
        return grouped.median().reset_index()

    def write_plot_files(self, out_dir: Union[str, Path]) -> List[Path]:
        """Two-column ``value median`` files, one per headline metric."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        summary = self.summary()
        paths = []
        for metric in ACCURACY_METRICS + DIAGNOSTIC_METRICS:
            path = out / f"sweep_{self.axis}_{metric}.dat"
            lines = [f"# {self.axis} {metric}"]
            lines += [f"{_plot_value(v)} {m:.6f}" for v, m in zip(summary["value"], summary[metric])]
            path.write_text("\n".join(lines) + "\n", encoding="utf-8")
            paths.append(path)
        return paths


def _plot_value(value: Any) -> str:
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, bool):
        return str(int(value))
    return str(value)


def sweep_configs(config: RunConfig, axis: str, values: Sequence[Any]) -> List[RunConfig]:
    if axis not in SWEEP_AXES:
        raise UsageError(f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_AXES)}")
    if not values:
        raise UsageError(f"sweep over {axis} needs at least one value")
    base = config.with_updates({"train.variant": "two-stage"})
    return [base.with_updates({key: value for key in SWEEP_AXES[axis]}) for value in values]


def run_sweep(config: RunConfig, axis: str, values: Sequence[Any], seeds: Sequence[int],
              threads: Optional[int] = None) -> SweepReport:
    """One two-stage run per value per seed; rows come out value-major."""
    if not seeds:
        raise UsageError("run_sweep needs at least one seed")
    configs = sweep_configs(config, axis, values)
    jobs = [(cfg, seed) for cfg in configs for seed in seeds]
    results = run_many(jobs, threads)
    rows = []
    for (value, _), outcome in zip([(v, s) for v in values for s in seeds], results):
        rows.append({"axis": axis, "value": value, "seed": outcome.seed, **outcome.summary})
    return SweepReport(axis, pd.DataFrame(rows))
