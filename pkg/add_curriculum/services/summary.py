from __future__ import annotations

import csv
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from add_curriculum.services.mazes import EnvMetrics

CSV_HEADER = (
    "epoch",
    "method",
    "seed",
    "mean_regret",
    "max_regret",
    "mean_blocks",
    "mean_shortest_path",
    "solvable_frac",
    "mean_return",
    "eval_env",
    "solved_rate",
)

Row = Dict[str, object]


def _mean(values: Sequence[float]) -> Optional[float]:
    return float(np.mean(values)) if len(values) else None


def build_epoch_row(
    *,
    epoch: int,
    method: str,
    seed: int,
    regrets: Sequence[float],
    env_metrics: Sequence[EnvMetrics],
    returns: Sequence[float],
) -> Row:
    """Training row for one epoch; unsolvable envs count only toward ``solvable_frac``."""
    solvable = [m for m in env_metrics if m.solvable]
    return {
        "epoch": int(epoch),
        "method": method,
        "seed": int(seed),
        "mean_regret": _mean(regrets),
        "max_regret": float(np.max(regrets)) if len(regrets) else None,
        "mean_blocks": _mean([m.block_count for m in env_metrics]),
        "mean_shortest_path": _mean([m.shortest_path for m in solvable]),
        "solvable_frac": len(solvable) / len(env_metrics) if env_metrics else None,
        "mean_return": _mean(returns),
        "eval_env": None,
        "solved_rate": None,
    }


def build_eval_rows(base: Row, results: Iterable[object]) -> List[Row]:
    rows: List[Row] = []
    for result in results:
        row = {key: None for key in CSV_HEADER}
        row.update(epoch=base["epoch"], method=base["method"], seed=base["seed"])
        row["eval_env"] = getattr(result, "name")
        row["solved_rate"] = float(getattr(result, "solved_rate"))
        rows.append(row)
    return rows


def _cell(value: object) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def start_metrics(path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        csv.writer(handle).writerow(CSV_HEADER)


def append_rows(path: Path, rows: Iterable[Row]) -> None:
    if not path.exists():
        start_metrics(path)
    with path.open("a", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        for row in rows:
            writer.writerow([_cell(row.get(key)) for key in CSV_HEADER])


def read_metrics(path: Path) -> List[Dict[str, str]]:
    if not path.exists():
        return []
    with path.open(newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))


def truncate_metrics(path: Path, epoch: int) -> None:
    """Drop rows written after ``epoch`` so a resumed run appends the same rows again."""
    if not path.exists():
        start_metrics(path)
        return
    kept = [row for row in read_metrics(path) if int(row["epoch"]) <= epoch]
    start_metrics(path)
    with path.open("a", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        for row in kept:
            writer.writerow([row[key] for key in CSV_HEADER])


def training_rows(rows: Iterable[Dict[str, str]]) -> List[Dict[str, str]]:
    return [row for row in rows if not row.get("eval_env")]


def final_solved_rates(rows: Sequence[Dict[str, str]]) -> Dict[str, float]:
    """Per-test-env solved rate at the last evaluated epoch."""
    evals = [row for row in rows if row.get("eval_env")]
    if not evals:
        return {}
    last = max(int(row["epoch"]) for row in evals)
    return {row["eval_env"]: float(row["solved_rate"]) for row in evals if int(row["epoch"]) == last}


def write_table(path: Path, header: Sequence[str], rows: Iterable[Sequence[object]]) -> None:
    """Small result tables written by eval and ablate."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(value) for value in row])
