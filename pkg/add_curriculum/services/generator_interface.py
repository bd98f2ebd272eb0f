from abc import ABC, abstractmethod

import numpy as np


class EnvGenerator(ABC):
    """Abstract interface so the diffusion and random generators share one contract."""

    @abstractmethod
    def generate(self, batch: int, seed: int) -> np.ndarray:
        """Return ``batch`` environment parameters shaped (batch, N, N, 3), values in [0, 1]."""
        pass

    @property
    @abstractmethod
    def guidance_calls(self) -> int:
        """Number of guidance-gradient evaluations made so far."""
        pass
