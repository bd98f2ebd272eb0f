from pathlib import Path

import numpy as np
import pytest

from add_curriculum.config import RunConfig, parse_config_text
from add_curriculum.services.diffusion import NoiseSchedule, build_schedule

TINY = (
    "env.size=5",
    "env.block_budget=6",
    "diffusion.T=20",
    "diffusion.T_prime=5",
    "diffusion.hidden=16",
    "diffusion.time_embedding=4",
    "diffusion.batch_size=8",
    "diffusion.train_steps=10",
    "diffusion.dataset_size=32",
    "critic.bins=6",
    "critic.hidden=8",
    "critic.time_embedding=4",
    "critic.buffer=16",
    "critic.minibatches=2",
    "critic.epochs=1",
    "ppo.rollout=12",
    "ppo.epochs=1",
    "ppo.hidden=8",
    "run.epochs=3",
    "run.batch_envs=2",
    "run.eval_every=2",
    "verify.sample_steps=10",
    "verify.samples=2000",
    "verify.gradcheck_instances=2",
)


@pytest.fixture
def tiny_config(tmp_path: Path) -> RunConfig:
    """Desk-top sized configuration writing under a temporary directory."""
    return parse_config_text("", TINY + (f"run.out={tmp_path / 'runs'}",))


@pytest.fixture
def schedule() -> NoiseSchedule:
    return build_schedule(1000, 1e-4, 0.02)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cli_args(tmp_path: Path) -> list:
    """The tiny configuration as command-line ``--set`` flags."""
    args = []
    for item in TINY:
        args += ["--set", item]
    return args + ["--out", str(tmp_path / "runs")]
