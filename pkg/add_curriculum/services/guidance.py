"""Guidance signals for the DDIM sampler.

Each class satisfies ``diffusion.GuidanceFn``: it carries ``omega`` and maps a
batch of noised parameters θ_t at time t to the gradient of its guidance scalar.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import truncnorm

from add_curriculum.core.tensor import ContractError
from add_curriculum.services.diffusion import NoiseSchedule
from add_curriculum.services.regret_critic import (
    CriticModel,
    GuidanceConfig,
    difficulty_logprob_grad,
    regret_input_gradient,
)


@dataclass
class _Counted:
    calls: int = field(default=0, init=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, init=False, repr=False)

    def _tick(self) -> None:
        with self._lock:
            self.calls += 1


@dataclass
class RegretGuidance(_Counted):
    critic: CriticModel
    config: GuidanceConfig = field(default_factory=GuidanceConfig)

    @property
    def omega(self) -> float:
        return self.config.omega

    def __call__(self, theta_t: np.ndarray, t: int) -> np.ndarray:
        self._tick()
        return regret_input_gradient(self.critic, theta_t, t, self.config)


@dataclass
class DifficultyGuidance(_Counted):
    critic: CriticModel
    k: int = 1
    omega: float = 5.0

    def __call__(self, theta_t: np.ndarray, t: int) -> np.ndarray:
        self._tick()
        return difficulty_logprob_grad(self.critic, theta_t, t, self.k)


@dataclass
class ConstantGuidance(_Counted):
    """Same gradient at every time: the literal linear reward a·θ_t."""

    direction: np.ndarray
    omega: float = 1.0

    def __call__(self, theta_t: np.ndarray, t: int) -> np.ndarray:
        self._tick()
        return np.broadcast_to(np.asarray(self.direction, dtype=np.float32), np.shape(theta_t)).copy()


@dataclass
class PosteriorLinearGuidance(_Counted):
    """Gradient of E[a·θ0 | θ_t] for data N(μ0, σ0² I).

    Guiding with ω times this gradient turns the exact Gaussian sampler into an
    exact sampler of N(μ0 + ω σ0² a, σ0² I).
    """

    direction: np.ndarray
    schedule: NoiseSchedule
    omega: float = 1.0
    sigma0: float = 1.0

    def __call__(self, theta_t: np.ndarray, t: int) -> np.ndarray:
        self._tick()
        alpha = self.schedule.alpha(t)
        gain = self.sigma0**2 * np.sqrt(alpha) / (alpha * self.sigma0**2 + 1.0 - alpha)
        grad = gain * np.asarray(self.direction, dtype=np.float64)
        return np.broadcast_to(grad.astype(np.float32), np.shape(theta_t)).copy()


def uniform_posterior_mean(theta_t: np.ndarray, alpha: float, shift: float = 0.0) -> np.ndarray:
    """E[θ0 | θ_t] for θ0 ~ Uniform[0, 1], optionally under the tilt e^{shift/s² · θ0}.

    The posterior is N(θ_t/√α, (1 - α)/α) truncated to [0, 1]; a tilt moves its
    centre by ``shift``.
    """
    scale = np.sqrt((1.0 - alpha) / alpha)
    loc = np.asarray(theta_t, dtype=np.float64) / np.sqrt(alpha) + shift
    mean = truncnorm.mean((0.0 - loc) / scale, (1.0 - loc) / scale, loc=loc, scale=scale)
    # far-tail truncations can come back nan; the posterior then sits on the nearer edge
    return np.where(np.isfinite(mean), mean, np.clip(loc, 0.0, 1.0))


@dataclass
class UniformTiltGuidance(_Counted):
    """Exact guidance toward the density ∝ e^{ωθ} on [0, 1] for Uniform[0, 1] data.

    Returns the score difference divided by ω, so that ω·g is exact.
    """

    schedule: NoiseSchedule
    omega: float = 1.0

    def __call__(self, theta_t: np.ndarray, t: int) -> np.ndarray:
        self._tick()
        if self.omega == 0:
            return np.zeros(np.shape(theta_t), dtype=np.float32)
        alpha = self.schedule.alpha(t)
        shift = self.omega * (1.0 - alpha) / alpha
        tilted = uniform_posterior_mean(theta_t, alpha, shift)
        plain = uniform_posterior_mean(theta_t, alpha)
        diff = np.sqrt(alpha) / (1.0 - alpha) * (tilted - plain) / self.omega
        if not np.all(np.isfinite(diff)):
            raise ContractError(f"non-finite tilt guidance at t={t}")
        return diff.astype(np.float32)


@dataclass
class AnalyticUniformModel:
    """Exact ε-predictor for one-dimensional Uniform[0, 1] data."""

    schedule: NoiseSchedule

    @property
    def dim(self) -> int:
        return 1

    def predict(self, theta_t: np.ndarray, t: int) -> np.ndarray:
        alpha = self.schedule.alpha(t)
        posterior = uniform_posterior_mean(theta_t, alpha)
        eps = (np.asarray(theta_t, dtype=np.float64) - np.sqrt(alpha) * posterior) / np.sqrt(1.0 - alpha)
        return eps.astype(np.float32)
