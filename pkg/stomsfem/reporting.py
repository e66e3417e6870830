"""CSV and JSON writers for estimator outputs; byte-identical for identical inputs."""
import csv
import json
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple, Union

import numpy as np

from .models import CostLedger

PathLike = Union[str, Path]


def _fmt(value: float) -> str:
    return "%.17g" % float(value)


def write_field_csv(path: PathLike, coordinates: np.ndarray, values: np.ndarray) -> Path:
    """Header `x,y,value`, one row per node in row-major node order."""
    path = Path(path)
    values = np.asarray(values, dtype=float).ravel()
    if len(values) != len(coordinates):
        raise ValueError(f"{len(values)} values for {len(coordinates)} nodes")
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["x", "y", "value"])
        for (x, y), v in zip(coordinates, values):
            writer.writerow([_fmt(x), _fmt(y), _fmt(v)])
    return path


def read_field_csv(path: PathLike) -> Tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, :2], data[:, 2]


def write_errors_csv(path: PathLike, rows: Iterable[Tuple[str, int, float]]) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["method", "N", "error"])
        for method, n, error in rows:
            writer.writerow([method, int(n), _fmt(error)])
    return path


def write_cost_json(path: PathLike, ledger: CostLedger, predicted_ratio: Optional[float] = None) -> Path:
    path = Path(path)
    payload = ledger.model_dump()
    payload["predicted_online_ratio"] = predicted_ratio
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    return path


def write_cost_table_csv(path: PathLike, table: Iterable[Dict[str, float]]) -> Path:
    """Per refine level: best per-sample online seconds of both methods and their ratio."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["refine", "msfem_direct", "stomsfem_interp", "ratio"])
        for row in table:
            writer.writerow([int(row["refine"]), _fmt(row["msfem_direct"]), _fmt(row["stomsfem_interp"]),
                             _fmt(row["ratio"])])
    return path


def write_summary_json(path: PathLike, summary: Dict[str, Any]) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True, default=str)
    return path


def summarize_directory(path: PathLike) -> Dict[str, Any]:
    """Collects the summary, cost and rate JSON files and the error and cost tables of an output directory."""
    path = Path(path)
    out: Dict[str, Any] = {"directory": str(path)}
    for name in ("summary", "cost", "rates"):
        file = path / f"{name}.json"
        if file.exists():
            with open(file, "r", encoding="utf-8") as f:
                out[name] = json.load(f)
    errors = path / "errors.csv"
    if errors.exists():
        with open(errors, "r", encoding="utf-8") as f:
            out["errors"] = [
                {"method": row["method"], "N": int(row["N"]), "error": float(row["error"])}
                for row in csv.DictReader(f)
            ]
    cost_table = path / "cost_table.csv"
    if cost_table.exists():
        with open(cost_table, "r", encoding="utf-8") as f:
            out["cost_table"] = [{key: float(value) for key, value in row.items()} for row in csv.DictReader(f)]
    for name in ("mean", "std"):
        file = path / f"{name}.csv"
        if file.exists():
            _, values = read_field_csv(file)
            out[f"{name}_max"] = float(np.max(np.abs(values))) if values.size else 0.0
    return out
