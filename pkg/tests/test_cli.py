import json
from pathlib import Path

import app
from app import main
from components.report_display import MANIFEST_FILE, METRICS_FILE


def _error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def _tiny_config_file(tmp_path, config):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(config.to_dict()))
    return str(path)


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--case", "matmul", "--case", "layer_norm"]) == 0
    out = capsys.readouterr().out
    assert "matmul" in out and "layer_norm" in out
    assert out.strip().splitlines()[-1].startswith("PASS: 2/2")


def test_report_on_empty_directory(tmp_path, capsys):
    assert main(["report", "--runs", str(tmp_path), "--format", "csv"]) == 1
    error = _error(capsys)
    assert error["error"] is True and error["command"] == "report"
    assert "no runs found" in error["message"]


def test_usage_errors_exit_2(capsys):
    assert main(["frobnicate"]) == 2
    assert main([]) == 2
    assert main(["gen-data", "--k", "20", "--out", "x.bin"]) == 2
    error = _error(capsys)
    assert error["type"] == "ConfigError" and "train.k" in error["message"]


def test_unexpected_failure_is_an_internal_error(monkeypatch, capsys):
    def crash(args):
        raise RuntimeError("lost the thread")

    monkeypatch.setitem(app.COMMANDS, "gradcheck", crash)
    assert main(["gradcheck"]) == app.INTERNAL_ERROR_CODE == 1
    error = _error(capsys)
    assert error == {"error": True, "type": "InternalError", "message": "lost the thread", "command": "gradcheck"}


def test_gen_data(tmp_path, config, capsys):
    out = tmp_path / "bench.bin"
    assert main(["gen-data", "--config", _tiny_config_file(tmp_path, config), "--data-seed", "4",
                 "--out", str(out)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert out.exists() and summary["splits"]["train"] == 16
    assert summary["label_mutual_information"] >= 0.0


def test_train_eval_report_round_trip(tmp_path, config, capsys):
    runs = tmp_path / "runs"
    cfg = _tiny_config_file(tmp_path, config)
    assert main(["train", "--config", cfg, "--seed", "2", "--runs-dir", str(runs)]) == 0
    run_dir = Path(capsys.readouterr().out.strip().splitlines()[-1])

    manifest = json.loads((run_dir / MANIFEST_FILE).read_text())
    assert manifest["final_checkpoint"] == "stage2.ckpt"
    assert set(manifest["outputs"]) == {"stage1.ckpt", "stage2.ckpt", "train.log.jsonl", METRICS_FILE}
    assert manifest["dataset"]["data_seed"] == 2 and manifest["seed"] == 2

    # re-evaluation from the manifest reproduces the stored metrics
    replay = tmp_path / "replay.csv"
    assert main(["eval", "--run", str(run_dir), "--out", str(replay)]) == 0
    assert replay.read_bytes() == (run_dir / METRICS_FILE).read_bytes()

    assert main(["eval", "--checkpoint", str(run_dir / "stage1.ckpt"), "--mode", "stage1", "--data-seed", "2"]) == 0
    assert capsys.readouterr().out.startswith("component,split,metric,value")

    assert main(["report", "--runs", str(runs), "--format", "json"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary and all(row["seeds"] == 1 for row in summary)

    assert main(["report", "--runs", str(runs), "--format", "xlsx"]) == 2
    capsys.readouterr()
    book = tmp_path / "report.xlsx"
    assert main(["report", "--runs", str(runs), "--format", "xlsx", "--out", str(book)]) == 0
    assert book.stat().st_size > 0


def test_eval_detects_tampered_run(tmp_path, config, capsys):
    runs = tmp_path / "runs"
    assert main(["train", "--config", _tiny_config_file(tmp_path, config), "--variant", "stage1-only",
                 "--runs-dir", str(runs)]) == 0
    run_dir = Path(capsys.readouterr().out.strip().splitlines()[-1])
    assert json.loads((run_dir / MANIFEST_FILE).read_text())["final_checkpoint"] == "stage1.ckpt"
    metrics = run_dir / METRICS_FILE
    metrics.write_text(metrics.read_text() + "verb,within-test,extra,1.0\n")
    assert main(["eval", "--run", str(run_dir)]) == 1
    assert _error(capsys)["type"] == "ReportError"


def test_eval_needs_a_source(capsys):
    assert main(["eval"]) == 2
    assert _error(capsys)["type"] == "UsageError"
