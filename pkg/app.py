"""
Command-line entry point: gen-data, train, eval, gradcheck, ablate, sweep, report.

Diagnostics go to standard error, data to files or standard output. Exit
status is 0 on success, 1 on a domain error or an unexpected failure and 2 on
a usage or config error; failures print a JSON error object on standard error.
"""
import argparse
import json
import logging
import subprocess
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from components.evaluation import MODES, evaluate_model
from components.experiments import (
    SWEEP_AXES,
    TEMPLATE_CANDIDATES,
    run_ablation,
    run_sweep,
)
from components.report_display import (
    FORMATS,
    MANIFEST_FILE,
    METRICS_FILE,
    ablation_summary,
    aggregate_runs,
    frame_to_csv,
    frame_to_json,
    gradcheck_table,
    metrics_table,
    outputs_for,
    render,
    verify_run,
    write_tables,
)
from utils import __version__
from utils.blob_store import write_atomic
from utils.checkpoint import load_checkpoint
from utils.config import VARIANTS, RunConfig, parse_config
from utils.data_synth import (
    SyntheticBenchmark,
    export_dataset,
    hoi_linear_readout_accuracy,
    import_dataset,
    label_mutual_information,
    make_benchmark,
)
from utils.errors import EgoPromptError, UsageError
from utils.gradcheck_suite import CASES, run_suite
from utils.trainer import LOG_FILE, run_two_stage

logger = logging.getLogger("egoprompt")

DESK_PRESET = Path(__file__).resolve().parent / "configs" / "desk.json"
INTERNAL_ERROR_CODE = 1

# flag dest -> dotted config key
CONFIG_FLAGS = {
    "variant": "train.variant",
    "seed": "train.seed",
    "backbone_seed": "train.backbone_seed",
    "pool_size": "train.pool_size",
    "k": "train.k",
    "lr": "train.lr",
    "batch_size": "train.batch_size",
    "epochs_stage1": "train.epochs_stage1",
    "epochs_stage2": "train.epochs_stage2",
    "warmup_epochs": "train.warmup_epochs",
    "lambda_freq": "loss.lambda_freq",
    "lambda_orth": "loss.lambda_orth",
    "lambda_kg": "loss.lambda_kg",
    "deep_prompting": "encoder.deep_prompting",
    "prompt_init": "encoder.prompt_init",
    "samples_per_split": "benchmark.samples_per_split",
}
DEFAULT_SWEEP_VALUES = {
    "pool_size": [4, 8, 16, 32],
    "lambda_freq": [0.0, 0.5, 1.0, 2.0],
    "lambda_orth": [0.0, 0.5, 1.0, 2.0],
    "k": [1, 2, 4, 8],
    "template": TEMPLATE_CANDIDATES,
    "deep_prompting": [False, True],
}


def build_id() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).resolve().parent)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {key: getattr(args, dest) for dest, key in CONFIG_FLAGS.items()
                 if getattr(args, dest, None) is not None}
    return parse_config(getattr(args, "config", None), overrides)


def load_benchmark(config: RunConfig, dataset: Optional[str], data_seed: int) -> Tuple[SyntheticBenchmark, Dict]:
    if dataset:
        bench = import_dataset(dataset)
        source = {"path": str(dataset)}
    else:
        bench = make_benchmark(data_seed, config.benchmark)
        source = {"data_seed": data_seed}
    source["hash"] = bench.content_hash()
    return bench, source


def new_run_dir(runs_dir: str, seed: int) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    base = Path(runs_dir) / f"{stamp}-{seed}"
    run_dir, n = base, 1
    while run_dir.exists():
        run_dir = base.with_name(f"{base.name}.{n}")
        n += 1
    run_dir.mkdir(parents=True)
    return run_dir


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    bench = make_benchmark(args.data_seed, config.benchmark)
    crc = export_dataset(bench, args.out)
    summary = {
        "path": str(args.out),
        "crc32": crc,
        "hash": bench.content_hash(),
        "splits": {name: len(ds) for name, ds in bench.splits.items()},
        "novel_verbs": bench.novel_verbs,
        "novel_nouns": bench.novel_nouns,
        "label_mutual_information": label_mutual_information(bench.splits["train"]),
        "linear_readout_accuracy": hoi_linear_readout_accuracy(bench),
    }
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    seed = config.train.seed
    data_seed = seed if args.data_seed is None else args.data_seed
    run_dir = new_run_dir(args.runs_dir, seed)
    timings: Dict[str, float] = {}

    logger.info("Step 1: preparing benchmark")
    started = time.perf_counter()
    bench, source = load_benchmark(config, args.dataset, data_seed)
    timings["data"] = time.perf_counter() - started

    logger.info("Step 2: training variant %s in %s", config.train.variant, run_dir)
    result = run_two_stage(config, bench, run_dir)
    timings.update(result.timings)

    logger.info("Step 3: evaluating")
    started = time.perf_counter()
    report = evaluate_model(result.state, bench, include_action=args.action)
    write_atomic(run_dir / METRICS_FILE, frame_to_csv(report.to_frame()).encode("utf-8"))
    timings["eval"] = time.perf_counter() - started

    names = [p.name for p in result.checkpoints.values()] + [LOG_FILE, METRICS_FILE]
    manifest = {
        "command": "train",
        "build_id": build_id(),
        "created_at": datetime.now(timezone.utc).isoformat(),
        "seed": seed,
        "config": config.to_dict(),
        "dataset": source,
        "final_checkpoint": names[len(result.checkpoints) - 1],
        "eval": {"mode": "stage2" if result.state.has_pool else "stage1", "action": bool(args.action)},
        "outputs": outputs_for(names, run_dir),
        "timings": timings,
    }
    write_atomic(run_dir / MANIFEST_FILE, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8"))
    print(run_dir)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    if args.run:
        run_dir = Path(args.run)
        manifest = verify_run(run_dir)
        checkpoint = run_dir / manifest["final_checkpoint"]
        dataset = manifest["dataset"].get("path")
        data_seed = manifest["dataset"].get("data_seed", manifest["seed"])
        mode = args.mode or manifest["eval"]["mode"]
        action = args.action or manifest["eval"]["action"]
    elif args.checkpoint:
        checkpoint, dataset, mode, action = Path(args.checkpoint), args.dataset, args.mode, args.action
        data_seed = args.data_seed
    else:
        raise UsageError("eval needs --run DIR or --checkpoint PATH")

    state = load_checkpoint(checkpoint)
    if data_seed is None:
        data_seed = state.config.train.seed
    bench, _ = load_benchmark(state.config, dataset, data_seed)
    report = evaluate_model(state, bench, mode=mode, include_action=action)
    csv_text = frame_to_csv(report.to_frame())
    if args.out:
        write_atomic(args.out, csv_text.encode("utf-8"))
        logger.info("metrics written to %s", args.out)
        print(render(metrics_table(report.to_frame())), file=sys.stderr)
    else:
        sys.stdout.write(csv_text)
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    results = run_suite(seed=args.seed, instances=args.instances, names=args.case, exhaustive=args.exhaustive)
    table, passed = gradcheck_table(results)
    print(render(table))
    print(f"{'PASS' if passed else 'FAIL'}: {int((table['Status'] == 'Pass').sum())}/{len(table)} checks "
          f"in {time.perf_counter() - started:.1f}s")
    return 0 if passed else 1


def cmd_ablate(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    out = Path(args.out)
    report = run_ablation(config, seeds=list(range(args.seeds)), variants=args.variants or VARIANTS,
                          lambdas=not args.no_lambdas, deep=not args.no_deep)
    write_tables({"ablation": report.cells}, out / "ablation.csv", "csv")
    write_tables({"runs": report.runs}, out / "ablation_runs.csv", "csv")
    write_tables({"ablation": report.cells, "checks": report.checks}, out / "ablation.json", "json")
    write_tables({"checks": report.checks}, out / "checks.csv", "csv")
    print(render(report.checks))
    print(ablation_summary(report.cells))
    return 0


def parse_values(raw: Optional[str], axis: str) -> List[Any]:
    if raw is None:
        return list(DEFAULT_SWEEP_VALUES[axis])
    values = []
    for token in raw.split(","):
        token = token.strip()
        try:
            values.append(json.loads(token))
        except ValueError:
            values.append(token)
    return values


def cmd_sweep(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    out = Path(args.out)
    report = run_sweep(config, args.axis, parse_values(args.values, args.axis), seeds=list(range(args.seeds)))
    write_tables({"sweep": report.runs}, out / f"sweep_{args.axis}.csv", "csv")
    report.write_plot_files(out)
    print(render(report.summary()))
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    runs, summary = aggregate_runs(args.runs)
    if args.format == "xlsx" and not args.out:
        raise UsageError("--format xlsx needs --out")
    if args.out:
        tables = {"summary": summary} if args.format == "csv" else {"summary": summary, "runs": runs}
        write_tables(tables, args.out, args.format)
        logger.info("report written to %s", args.out)
    elif args.format == "csv":
        sys.stdout.write(frame_to_csv(summary))
    else:
        sys.stdout.write(frame_to_json(summary))
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (sections: encoder, train, loss, benchmark)")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--seed", type=int)
    p.add_argument("--backbone-seed", type=int)
    p.add_argument("--pool-size", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs-stage1", type=int)
    p.add_argument("--epochs-stage2", type=int)
    p.add_argument("--warmup-epochs", type=int)
    p.add_argument("--lambda-freq", type=float)
    p.add_argument("--lambda-orth", type=float)
    p.add_argument("--lambda-kg", type=float)
    p.add_argument("--deep-prompting", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--prompt-init", choices=("normal", "zeros", "template"))
    p.add_argument("--samples-per-split", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="egoprompt", description=__doc__.strip().splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on standard error")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and export a synthetic benchmark")
    _add_config_flags(p)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train one variant into a new run directory")
    _add_config_flags(p)
    p.add_argument("--dataset", help="exported dataset file; generated from --data-seed otherwise")
    p.add_argument("--data-seed", type=int, help="benchmark seed (default: the training seed)")
    p.add_argument("--runs-dir", default="runs")
    p.add_argument("--action", action="store_true", help="also report verb+noun action accuracy")

    p = sub.add_parser("eval", help="evaluate a checkpoint or a run directory")
    p.add_argument("--run")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--data-seed", type=int)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--action", action="store_true")
    p.add_argument("--out")

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable operation")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=1)
    p.add_argument("--case", action="append", choices=sorted(CASES))
    p.add_argument("--exhaustive", action="store_true", help="perturb every leaf element of every case")

    p = sub.add_parser("ablate", help="variant x lambda x deep-prompting grid over seeds")
    _add_config_flags(p)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--variants", nargs="+", choices=VARIANTS)
    p.add_argument("--no-lambdas", action="store_true")
    p.add_argument("--no-deep", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(config=str(DESK_PRESET))

    p = sub.add_parser("sweep", help="one-axis sweep of the two-stage method")
    _add_config_flags(p)
    p.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    p.add_argument("--values", help="comma-separated values (JSON literals or bare strings)")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(config=str(DESK_PRESET))

    p = sub.add_parser("report", help="aggregate run directories")
    p.add_argument("--runs", required=True)
    p.add_argument("--format", choices=FORMATS, default="csv")
    p.add_argument("--out")
    return parser


def configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    configure_logging(args.verbose)
    try:
        return COMMANDS[args.command](args)
    except EgoPromptError as exc:
        logger.debug("%s failed", args.command, exc_info=True)
        print(json.dumps(exc.to_error_info(args.command)), file=sys.stderr)
        return exc.exit_code
    except Exception as exc:
        logger.error("%s failed unexpectedly: %s", args.command, exc, exc_info=True)
        error = {"error": True, "type": "InternalError", "message": str(exc), "command": args.command}
        print(json.dumps(error), file=sys.stderr)
        return INTERNAL_ERROR_CODE


if __name__ == "__main__":
    sys.exit(main())
