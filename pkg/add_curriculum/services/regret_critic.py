from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, List, Optional, Sequence, Tuple, Union

import numpy as np

from add_curriculum.core import tensor as T
from add_curriculum.core.nn import MlpSpec, Params, init_params, mlp_forward
from add_curriculum.core.optim import OptState, optimizer_step
from add_curriculum.core.tensor import ContractError, Tape, Tensor, grad_of
from add_curriculum.services.diffusion import NoiseSchedule, Steps, forward_marginal

logger = logging.getLogger(__name__)

MODES = ("regret", "difficulty")


@dataclass(frozen=True)
class ReturnSupport:
    M: int
    v_min: float
    v_max: float

    @property
    def z(self) -> np.ndarray:
        return self.v_min + np.arange(self.M, dtype=np.float64) / (self.M - 1) * (self.v_max - self.v_min)

    @property
    def delta(self) -> float:
        return (self.v_max - self.v_min) / self.M


def make_support(M: int, v_min: float, v_max: float) -> ReturnSupport:
    if M < 2:
        raise ContractError(f"support needs at least 2 bins, got {M}")
    if not v_min < v_max:
        raise ContractError(f"need v_min < v_max, got [{v_min}, {v_max}]")
    return ReturnSupport(M=int(M), v_min=float(v_min), v_max=float(v_max))


@dataclass
class ReturnDistribution:
    """Categorical return law; ``p`` is (M,) or a batch (B, M)."""

    support: ReturnSupport
    p: Tensor

    def __post_init__(self) -> None:
        probs = self.p.data
        if probs.shape[-1] != self.support.M:
            raise ContractError(f"distribution has {probs.shape[-1]} bins, support has {self.support.M}")
        if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=-1, dtype=np.float64) - 1.0) > 1e-5):
            raise ContractError("probabilities must be non-negative and sum to 1")

    def mean(self) -> Tensor:
        return T.sum(T.mul(self.p, self.support.z), axis=-1)


@dataclass
class GuidanceConfig:
    omega: float = 5.0
    alpha: float = 0.15
    mode: str = "regret"
    k: Optional[int] = None

    def validate(self, support: ReturnSupport) -> None:
        if self.omega < 0:
            raise ContractError(f"guidance weight must be non-negative, got {self.omega}")
        if not 0.0 < self.alpha <= 1.0:
            raise ContractError(f"CVaR level must lie in (0, 1], got {self.alpha}")
        if self.mode not in MODES:
            raise ContractError(f"unknown guidance mode {self.mode!r}")
        if self.mode == "difficulty" and (self.k is None or not 1 <= self.k <= support.M):
            raise ContractError(f"difficulty level must lie in [1, {support.M}], got {self.k}")


def logits_to_distribution(logits: Union[Tensor, np.ndarray], support: ReturnSupport) -> ReturnDistribution:
    return ReturnDistribution(support=support, p=T.softmax(logits, axis=-1))


def project_returns(returns: Sequence[float], support: ReturnSupport) -> ReturnDistribution:
    """Triangular projection of episodic returns onto the support.

    Returns are clamped into [v_min, v_max]; raw weights are renormalised, and when
    every raw weight is zero each return puts its mass on the nearest support point
    (split evenly between exact midpoint ties).
    """
    values = np.clip(np.asarray(returns, dtype=np.float64).reshape(-1), support.v_min, support.v_max)
    if values.size == 0:
        raise ContractError("cannot project an empty list of returns")
    z = support.z
    distance = np.abs(values[:, None] - z[None, :])
    raw = np.clip(1.0 - distance / support.delta, 0.0, 1.0).mean(axis=0)
    total = raw.sum()
    if total > 0:
        probs = raw / total
    else:
        nearest = np.isclose(distance, distance.min(axis=1, keepdims=True), rtol=0.0, atol=1e-12)
        probs = (nearest / nearest.sum(axis=1, keepdims=True)).mean(axis=0)
    return ReturnDistribution(support=support, p=Tensor(probs))


def cvar(dist: ReturnDistribution, alpha: float) -> Tensor:
    """Upper-tail CVaR: scan bins from the top with budget ``alpha``; w_i = min(p_i, remaining)."""
    if not 0.0 < alpha <= 1.0:
        raise ContractError(f"CVaR level must lie in (0, 1], got {alpha}")
    top_down = T.flip(dist.p, axis=-1)
    z_top_down = dist.support.z[::-1].copy()
    spent_before = T.sub(T.cumsum(top_down, axis=-1), top_down)
    remaining = T.clamp(T.sub(alpha, spent_before), lo=0.0)
    weights = T.minimum(top_down, remaining)
    return T.div(T.sum(T.mul(weights, z_top_down), axis=-1), alpha)


def regret_estimate(dist: ReturnDistribution, alpha: float) -> Tensor:
    """CVaR_alpha minus the mean; zero for point masses."""
    return T.sub(cvar(dist, alpha), dist.mean())


@dataclass
class CriticModel:
    spec: MlpSpec
    params: Params
    support: ReturnSupport
    schedule: NoiseSchedule

    def __post_init__(self) -> None:
        if self.spec.output_width != self.support.M:
            raise ContractError(f"critic emits {self.spec.output_width} logits for {self.support.M} bins")
        if self.spec.time_embedding <= 0:
            raise ContractError("the critic network needs a time embedding")

    @property
    def dim(self) -> int:
        return self.spec.input_width

    def logits(self, theta_t: Union[Tensor, np.ndarray], t: Steps, params: Optional[Params] = None) -> Tensor:
        return mlp_forward(self.spec, self.params if params is None else params, theta_t, t)

    def distribution(self, theta_t: np.ndarray, t: Steps = 1) -> ReturnDistribution:
        return logits_to_distribution(self.logits(theta_t, t), self.support)


def make_critic(spec: MlpSpec, support: ReturnSupport, schedule: NoiseSchedule, rng: np.random.Generator) -> CriticModel:
    """Glorot init with a zero output layer, so a fresh critic predicts the uniform law."""
    params = init_params(spec, rng)
    last = spec.layers - 1
    params[f"w{last}"] = Tensor(np.zeros(params[f"w{last}"].shape), name=f"w{last}")
    return CriticModel(spec=spec, params=params, support=support, schedule=schedule)


def _as_batch(theta_t: np.ndarray, dim: int) -> np.ndarray:
    batch = np.asarray(theta_t, dtype=np.float32)
    if batch.ndim == 1:
        batch = batch[None, :]
    if batch.ndim != 2 or batch.shape[1] != dim:
        raise ContractError(f"critic expects parameters of width {dim}, got shape {np.shape(theta_t)}")
    return batch


def _checked(grad: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(grad)):
        raise ContractError(f"non-finite {what} gradient")
    return grad


def regret_input_gradient(model: CriticModel, theta_t: np.ndarray, t: int, config: GuidanceConfig) -> np.ndarray:
    """∇_θ of the CVaR-minus-mean regret, row by row for a batch of θ_t."""
    batch = _as_batch(theta_t, model.dim)
    tape = Tape()
    x = tape.watch(batch)
    dist = logits_to_distribution(model.logits(x, t), model.support)
    total = T.sum(regret_estimate(dist, config.alpha))
    (grad,) = T.backward(tape, total, [x])
    return _checked(grad, "regret").reshape(np.shape(theta_t))


def difficulty_logprob(model: CriticModel, theta_t: Union[Tensor, np.ndarray], t: int, k: int) -> Tensor:
    if not 1 <= k <= model.support.M:
        raise ContractError(f"difficulty level must lie in [1, {model.support.M}], got {k}")
    logp = T.log_softmax(model.logits(theta_t, t), axis=-1)
    target = np.full(logp.shape[0], model.support.M - k, dtype=np.int64)
    return T.take_along(logp, target, axis=-1)


def difficulty_logprob_grad(model: CriticModel, theta_t: np.ndarray, t: int, k: int) -> np.ndarray:
    """∇_θ log Pr(return bin M - k); k = 1 asks for the highest-return bin."""
    batch = _as_batch(theta_t, model.dim)
    tape = Tape()
    x = tape.watch(batch)
    total = T.sum(difficulty_logprob(model, x, t, k))
    (grad,) = T.backward(tape, total, [x])
    return _checked(grad, "difficulty").reshape(np.shape(theta_t))


def estimate_regret(model: CriticModel, theta0: np.ndarray, alpha: float) -> np.ndarray:
    """Per-environment regret estimate at the least-noised time step."""
    if len(theta0) == 0:
        return np.zeros(0, dtype=np.float32)
    dist = model.distribution(_as_batch(theta0, model.dim), 1)
    return regret_estimate(dist, alpha).data


@dataclass
class CriticBuffer:
    capacity: int
    entries: Deque[Tuple[np.ndarray, np.ndarray]] = field(default_factory=deque)

    def __post_init__(self) -> None:
        if self.capacity <= 0:
            raise ContractError("buffer capacity must be positive")
        self.entries = deque(self.entries, maxlen=self.capacity)

    def __len__(self) -> int:
        return len(self.entries)


def buffer_push(buffer: CriticBuffer, theta0: np.ndarray, returns: Sequence[float], support: ReturnSupport) -> None:
    target = project_returns(returns, support).p.data.astype(np.float32)
    buffer.entries.append((np.asarray(theta0, dtype=np.float32).reshape(-1).copy(), target))


def buffer_sample(buffer: CriticBuffer, n: int, rng: np.random.Generator) -> List[Tuple[np.ndarray, np.ndarray]]:
    if n <= 0:
        return []
    if not buffer.entries:
        raise ContractError("cannot sample from an empty critic buffer")
    picks = rng.integers(0, len(buffer.entries), size=n)
    return [buffer.entries[i] for i in picks]


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    logp = T.log_softmax(logits, axis=-1)
    return T.neg(T.mean(T.sum(T.mul(logp, targets), axis=-1)))


def critic_update(
    model: CriticModel,
    buffer: CriticBuffer,
    minibatch_count: int,
    epochs: int,
    state: OptState,
    rng: np.random.Generator,
) -> Tuple[OptState, List[float]]:
    """Cross-entropy fit of noised buffer entries; updates ``model.params`` in place.

    Each epoch draws ``min(minibatch_count, len(buffer))`` minibatches of
    ``ceil(len(buffer) / count)`` entries through ``buffer_sample``.
    """
    if not buffer.entries:
        raise ContractError("critic update needs a non-empty buffer")
    if minibatch_count < 1:
        raise ContractError(f"critic update needs at least one minibatch, got {minibatch_count}")
    count = min(minibatch_count, len(buffer))
    size = -(-len(buffer) // count)
    losses: List[float] = []
    for _ in range(epochs * count):
        drawn = buffer_sample(buffer, size, rng)
        thetas = np.stack([theta for theta, _ in drawn])
        targets = np.stack([target for _, target in drawn])
        t = rng.integers(1, model.schedule.T + 1, size=size)
        eps = rng.standard_normal(thetas.shape).astype(np.float32)
        noised = forward_marginal(thetas, t, eps, model.schedule)
        tape = Tape()
        watched = tape.watch_params(model.params)
        loss = cross_entropy(model.logits(noised, t, params=watched), targets)
        grads = grad_of(tape, loss, watched)
        model.params, state = optimizer_step(model.params, grads, state)
        losses.append(loss.item())
    if losses:
        logger.debug("critic update: %d steps, final loss %.4f", len(losses), losses[-1])
    return state, losses
