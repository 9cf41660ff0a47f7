from pathlib import Path

import numpy as np
import pytest
from pandas.testing import assert_frame_equal

from components.experiments import (
    ACCURACY_METRICS,
    CELL_KEYS,
    DIAGNOSTIC_METRICS,
    HM_SPLITS,
    THREADS_ENV,
    RunOutcome,
    ablation_cells,
    ablation_grid,
    run_ablation,
    run_many,
    run_sweep,
    sweep_configs,
    worker_count,
)
from components.metrics import MetricsReport
from utils.config import parse_config
from utils.errors import ConfigError, UsageError

DESK_PRESET = Path(__file__).resolve().parents[1] / "configs" / "desk.json"


def test_full_grid_size():
    grid = ablation_grid()
    assert len(grid) == 4 * 4 * 2
    assert len(set(grid)) == len(grid)
    assert grid.count(("two-stage", ("default", "default"), True)) == 1
    assert len(ablation_grid(lambdas=False, deep=False)) == 4
    with pytest.raises(ConfigError):
        ablation_grid(variants=["three-stage"])


def test_worker_count(monkeypatch):
    monkeypatch.delenv(THREADS_ENV, raising=False)
    assert worker_count() == 1
    monkeypatch.setenv(THREADS_ENV, "3")
    assert worker_count() == 3
    for bad in ("0", "many"):
        monkeypatch.setenv(THREADS_ENV, bad)
        with pytest.raises(ConfigError, match=THREADS_ENV):
            worker_count()


def test_run_many_reuses_identical_jobs(config):
    stage1 = config.with_updates({"train.variant": "stage1-only"})
    same_training = stage1.with_updates({"loss.lambda_orth": 0.0, "train.pool_size": 8})
    outcomes = run_many([(stage1, 0), (same_training, 0)], threads=1)
    assert outcomes[0] is outcomes[1]
    assert outcomes[0].variant == "stage1-only"


def _outcome(seed, variant, accuracy, entropy=float("nan")):
    report = MetricsReport()
    for split in ("within-test", "cross-test"):
        report.add("verb", split, "average_accuracy", accuracy)
    report.add_harmonic_means(["verb"])
    summary = {"entropy_verb": entropy, "entropy_noun": entropy, "pool_abs_cos": entropy}
    return RunOutcome(seed, variant, report, summary)


def test_ablation_cells_aggregate_seed_rows():
    full, plain = ("two-stage", ("default", "default"), True), ("stage1-only", ("default", "default"), True)
    outcomes = {
        full: [_outcome(s, "two-stage", a, 0.5) for s, a in zip(range(3), (60.0, 70.0, 80.0))],
        plain: [_outcome(s, "stage1-only", a) for s, a in zip(range(3), (50.0, 55.0, 90.0))],
    }
    runs, cells = ablation_cells(outcomes)
    assert not cells.duplicated(CELL_KEYS).any()
    assert (cells["seeds"] == 3).all()
    assert len(runs) == 3 * 3 + 3 * 6

    hm = cells[(cells["split"] == "within/cross") & (cells["metric"] == "hm_average_accuracy")].set_index("variant")
    assert hm.loc["two-stage", "median"] == pytest.approx(70.0)
    assert hm.loc["two-stage", "iqr"] == pytest.approx(10.0)
    assert hm.loc["stage1-only", "iqr"] == pytest.approx(20.0)
    assert hm.loc["two-stage", "vs_full"] == "-" and hm.loc["stage1-only", "vs_full"] == "Loss"
    assert set(cells.loc[~cells["split"].isin(HM_SPLITS), "vs_full"]) == {"-"}

    diagnostics = cells[cells["metric"].isin(["selection_entropy", "pool_abs_cos"])]
    assert set(diagnostics["variant"]) == {"two-stage"}
    assert sorted(diagnostics["component"]) == ["noun", "pool", "verb"]


def test_small_ablation(config):
    report = run_ablation(config, seeds=[0], variants=["stage1-only", "two-stage"], deep=False, threads=2)
    cells = report.cells
    assert list(cells.columns) == CELL_KEYS[:3] + ["full_method"] + CELL_KEYS[3:] + ["median", "iqr", "seeds", "vs_full"]
    assert not cells.duplicated(CELL_KEYS).any()
    assert len(cells.drop_duplicates(["variant", "lambdas", "deep_prompting"])) == 2 * 4
    full = cells[cells["full_method"]]
    assert len(full.drop_duplicates(["variant", "lambdas", "deep_prompting"])) == 1
    assert set(full["vs_full"]) == {"-"}
    assert set(cells["vs_full"]) <= {"Win", "Loss", "Tie", "-"}
    assert set(cells.loc[cells["vs_full"] != "-", "split"]) <= set(HM_SPLITS)
    assert (cells["seeds"] == 1).all()
    assert len(report.runs) == len(cells)
    assert list(report.checks["check"]) == ["module_effect", "diversity_entropy", "diversity_abs_cos"]
    assert set(report.checks["status"]) <= {"Pass", "Fail"}


def test_ablation_needs_seeds(config):
    with pytest.raises(UsageError):
        run_ablation(config, seeds=[])


def test_sweep_rows_and_thread_independence(config, tmp_path):
    one = run_sweep(config, "pool_size", [2, 4], seeds=[0], threads=1)
    two = run_sweep(config, "pool_size", [2, 4], seeds=[0], threads=2)
    assert len(one.runs) == 2
    assert list(one.runs["value"]) == [2, 4]
    assert_frame_equal(one.runs, two.runs)

    paths = one.write_plot_files(tmp_path)
    assert len(paths) == len(ACCURACY_METRICS + DIAGNOSTIC_METRICS)
    lines = paths[0].read_text().splitlines()
    assert lines[0] == f"# pool_size {ACCURACY_METRICS[0]}"
    assert [line.split()[0] for line in lines[1:]] == ["2", "4"]


def test_sweep_configs():
    base = parse_config()
    configs = sweep_configs(base, "k", [2, 8])
    assert [(c.train.k, c.loss.k_freq) for c in configs] == [(2, 2), (8, 8)]
    assert all(c.train.variant == "two-stage" for c in configs)
    assert len(sweep_configs(base, "lambda_freq", [0.5])) == 1
    with pytest.raises(ConfigError):
        sweep_configs(base, "pool_size", [4, 2])
    with pytest.raises(UsageError):
        sweep_configs(base, "depth", [1])
    with pytest.raises(UsageError):
        sweep_configs(base, "pool_size", [])


@pytest.mark.slow
def test_orthogonality_lowers_pool_similarity(make_config):
    config = make_config({"train.epochs_stage2": 6})
    report = run_ablation(config, seeds=[0, 1, 2], variants=["two-stage"], deep=False)
    checks = report.checks.set_index("check")
    assert list(checks.index) == ["diversity_entropy", "diversity_abs_cos"]
    assert checks.loc["diversity_abs_cos", "status"] == "Pass"
    assert np.isfinite(checks.loc["diversity_entropy", "observed"])


@pytest.mark.slow
def test_desk_preset_direction_checks():
    config = parse_config(DESK_PRESET)
    report = run_ablation(config, seeds=list(range(5)), variants=["stage1-only", "two-stage"], deep=False)
    checks = report.checks.set_index("check")
    for name in ("module_effect", "diversity_entropy", "diversity_abs_cos"):
        assert checks.loc[name, "status"] == "Pass", (name, checks.loc[name, "detail"], checks.loc[name, "observed"])
