from __future__ import annotations

from pathlib import Path
from typing import Union

DATASET_FILE = "dataset.bin"
GENERATOR_FILE = "generator.addc"
CHECKPOINT_FILE = "checkpoint.addc"
METRICS_FILE = "metrics.csv"
CONFIG_FILE = "config.txt"
EVAL_FILE = "eval.csv"
SWEEP_FILE = "sweep.csv"


class ArtifactError(RuntimeError):
    """Raised when a run artifact required by a subcommand is missing."""


def run_directory(out: Union[str, Path], method: str, digest: str, seed: int) -> Path:
    return Path(out) / f"{method}-{digest}-s{seed}"


def generated_file(k: int) -> str:
    return f"generated-k{k}.bin"


def ensure_artifact(path: Union[str, Path], what: str) -> Path:
    """Check that a required file exists before a subcommand starts using it."""
    target = Path(path)
    if not target.is_file():
        raise ArtifactError(f"{what} not found: {target}")
    return target
