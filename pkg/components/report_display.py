"""Tables for metrics, ablations, sweeps and gradient checks, and their file writers."""
import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from utils.blob_store import file_crc32, write_atomic
from utils.errors import ReportError, UsageError

logger = logging.getLogger(__name__)

FORMATS = ("csv", "json", "xlsx")
MANIFEST_FILE = "manifest.json"
METRICS_FILE = "metrics.csv"
FLOAT_FORMAT = "%.6f"


def frame_to_csv(df: pd.DataFrame) -> str:
    return df.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def frame_to_json(df: pd.DataFrame) -> str:
    records = json.loads(df.to_json(orient="records", double_precision=10))
    return json.dumps(records, indent=2, sort_keys=True) + "\n"


def write_tables(tables: Dict[str, pd.DataFrame], path: Union[str, Path], fmt: str) -> int:
    """Write one or more named tables; returns the CRC32 of the written file.

    CSV and JSON hold a single table (several tables become a JSON object keyed
    by name); xlsx gets one sheet per table.
    """
    if fmt not in FORMATS:
        raise UsageError(f"unknown report format {fmt!r}; expected one of {FORMATS}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "xlsx":
        tmp = path.with_name(path.name + ".tmp")
        with pd.ExcelWriter(tmp, engine="openpyxl") as writer:
            for sheet, df in tables.items():
                df.to_excel(writer, sheet_name=sheet[:31], index=False)
        tmp.replace(path)
        return file_crc32(path)
    if fmt == "csv":
        if len(tables) != 1:
            raise UsageError("csv output holds a single table")
        payload = frame_to_csv(next(iter(tables.values())))
    elif len(tables) == 1:
        payload = frame_to_json(next(iter(tables.values())))
    else:
        payload = json.dumps({name: json.loads(frame_to_json(df)) for name, df in tables.items()},
                             indent=2, sort_keys=True) + "\n"
    data = payload.encode("utf-8")
    write_atomic(path, data)
    logger.debug("wrote %s (%d bytes)", path, len(data))
    return file_crc32(path)


def render(df: pd.DataFrame) -> str:
    if df.empty:
        return "(no rows)"
    return df.to_string(index=False, float_format=lambda v: f"{v:.2f}")


def metrics_table(frame: pd.DataFrame) -> pd.DataFrame:
    """Wide view of a long metrics frame: one row per (component, split)."""
    if frame.empty:
        return frame
    wide = frame.pivot_table(index=["component", "split"], columns="metric", values="value", sort=False)
    return wide.reset_index()


def gradcheck_table(results: Iterable) -> Tuple[pd.DataFrame, bool]:
    rows = [{
        "case": r.name,
        "group": r.group,
        "instance": r.instance,
        "max_rel_error": r.max_error,
        "elements": r.elements,
        "seconds": round(r.seconds, 3),
        "Status": "Pass" if r.passed else "Fail",
    } for r in results]
    df = pd.DataFrame(rows, columns=["case", "group", "instance", "max_rel_error", "elements", "seconds", "Status"])
    return df, bool(rows) and all(df["Status"] == "Pass")


def ablation_summary(cells: pd.DataFrame) -> str:
    compared = cells[cells["vs_full"].isin(["Win", "Loss", "Tie"])]
    counts = compared["vs_full"].value_counts()
    return (f"{len(cells['variant'].unique())} variants, {int(cells['seeds'].max())} seed(s): "
            f"{int(counts.get('Win', 0))} wins, {int(counts.get('Loss', 0))} losses, "
            f"{int(counts.get('Tie', 0))} ties against the full method")


# ---------------------------------------------------------------------------
# run directories
# ---------------------------------------------------------------------------

def _run_dirs(runs_dir: Path) -> List[Path]:
    if not runs_dir.is_dir():
        return []
    return sorted(p.parent for p in runs_dir.glob(f"*/{MANIFEST_FILE}"))


def verify_run(run_dir: Path) -> Dict:
    """Load a run manifest and check every output it names against its CRC32."""
    try:
        manifest = json.loads((run_dir / MANIFEST_FILE).read_text(encoding="utf-8"))
    except ValueError as exc:
        raise ReportError(f"{run_dir / MANIFEST_FILE}: invalid JSON ({exc})") from exc
    for name, info in manifest.get("outputs", {}).items():
        path = run_dir / name
        if not path.exists():
            raise ReportError(f"{run_dir.name}: output {name} is missing")
        if file_crc32(path) != info["crc32"]:
            raise ReportError(f"{run_dir.name}: output {name} does not match its recorded CRC32")
    return manifest


def aggregate_runs(runs_dir: Union[str, Path]) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Collect ``metrics.csv`` from every run directory.

    Returns the long table of all runs and a summary with the median, IQR and
    seed count per (variant, component, split, metric).
    """
    runs_dir = Path(runs_dir)
    frames = []
    for run_dir in _run_dirs(runs_dir):
        manifest = verify_run(run_dir)
        metrics_path = run_dir / METRICS_FILE
        if not metrics_path.exists():
            logger.debug("skipping %s: no %s", run_dir.name, METRICS_FILE)
            continue
        df = pd.read_csv(metrics_path)
        df.insert(0, "run", run_dir.name)
        df.insert(1, "variant", manifest["config"]["train"]["variant"])
        df.insert(2, "seed", manifest["seed"])
        frames.append(df)
    if not frames:
        raise ReportError(f"no runs found in {runs_dir}")
    runs = pd.concat(frames, ignore_index=True)
    keys = ["variant", "component", "split", "metric"]
    rows = []
    for key, group in runs.groupby(keys, sort=True):
        values = group["value"].to_numpy(dtype=np.float64)
        q1, q3 = np.percentile(values, [25, 75])
        rows.append({**dict(zip(keys, key)), "median": float(np.median(values)),
                     "iqr": float(q3 - q1), "seeds": int(group["seed"].nunique())})
    logger.info("aggregated %d run(s) from %s", len(frames), runs_dir)
    return runs, pd.DataFrame(rows, columns=keys + ["median", "iqr", "seeds"])


def outputs_for(names: Sequence[str], run_dir: Path) -> Dict[str, Dict]:
    return {name: {"crc32": file_crc32(run_dir / name), "bytes": (run_dir / name).stat().st_size} for name in names}
