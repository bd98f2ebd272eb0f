from typing import Optional

import numpy as np

from add_curriculum.config import ConfigError, RunConfig
from add_curriculum.core.rng import component_rng
from add_curriculum.services.diffusion import GuidanceFn, ScoreModel, sample
from add_curriculum.services.generator_interface import EnvGenerator
from add_curriculum.services.guidance import RegretGuidance
from add_curriculum.services.mazes import random_param
from add_curriculum.services.regret_critic import CriticModel, GuidanceConfig

ENV_BOUNDS = (0.0, 1.0)


class DiffusionGenerator(EnvGenerator):
    def __init__(
        self,
        model: ScoreModel,
        size: int,
        T_prime: int,
        guidance: Optional[GuidanceFn] = None,
        workers: int = 1,
    ) -> None:
        self.model = model
        self.size = size
        self.T_prime = T_prime
        self.guidance = guidance
        self.workers = workers

    def generate(self, batch: int, seed: int) -> np.ndarray:
        flat = sample(self.model, self.T_prime, self.guidance, batch, seed, bounds=ENV_BOUNDS, workers=self.workers)
        return flat.reshape(batch, self.size, self.size, 3)

    @property
    def guidance_calls(self) -> int:
        return getattr(self.guidance, "calls", 0)


class RandomGenerator(EnvGenerator):
    """Domain randomisation: fresh random_param draws, no model involved."""

    def __init__(self, size: int, block_budget: int) -> None:
        self.size = size
        self.block_budget = block_budget

    def generate(self, batch: int, seed: int) -> np.ndarray:
        rng = component_rng(seed, "generator/dr")
        draws = [random_param(self.size, self.block_budget, rng) for _ in range(batch)]
        return np.stack(draws) if draws else np.zeros((0, self.size, self.size, 3), np.float32)

    @property
    def guidance_calls(self) -> int:
        return 0


def create_generator(config: RunConfig, model: Optional[ScoreModel], critic: Optional[CriticModel]) -> EnvGenerator:
    """Factory function to create the environment generator named by ``run.method``."""
    method = config.run.method
    size = config.env.size

    if method == "dr":
        return RandomGenerator(size, config.env.block_budget)
    if model is None:
        raise ConfigError("run.method", f"method {method!r} needs a pretrained generator")
    if method == "unguided":
        return DiffusionGenerator(model, size, config.diffusion.T_prime, workers=config.run.workers)
    if method == "add":
        if critic is None:
            raise ConfigError("run.method", "method 'add' needs an environment critic")
        guidance = RegretGuidance(critic, GuidanceConfig(omega=config.guidance.omega, alpha=config.guidance.alpha))
        return DiffusionGenerator(model, size, config.diffusion.T_prime, guidance, workers=config.run.workers)
    raise ConfigError("run.method", f"unknown method {method!r}; valid options are 'add', 'dr' and 'unguided'")
