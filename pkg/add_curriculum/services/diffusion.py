from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from add_curriculum.core import tensor as T
from add_curriculum.core.nn import MlpSpec, Params, copy_params, init_params, mlp_forward
from add_curriculum.core.optim import make_opt_state, optimizer_step
from add_curriculum.core.rng import component_rng
from add_curriculum.core.tensor import ContractError, Tape, Tensor, grad_of

logger = logging.getLogger(__name__)

Steps = Union[int, Sequence[int], np.ndarray]
Bounds = Optional[Tuple[float, float]]

SAMPLE_CHUNK = 256


@dataclass(eq=False)
class NoiseSchedule:
    """Linear VP schedule. Times are 1-indexed: ``beta[t - 1]`` is β_t."""

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    def alpha(self, t: int) -> float:
        return float(self.alpha_bar[t - 1])

    def alpha_prev(self, t: int) -> float:
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def beta_at(self, t: int) -> float:
        return float(self.beta[t - 1])


def build_schedule(T_steps: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if T_steps < 2:
        raise ContractError(f"schedule needs T >= 2, got {T_steps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ContractError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T_steps, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    if alpha_bar[-1] >= 0.01:
        logger.warning("terminal alpha_bar %.4g is not below 0.01; final marginal is far from N(0, I)", alpha_bar[-1])
    return NoiseSchedule(T=T_steps, beta=beta, alpha_bar=alpha_bar)


def _check_t(t: Steps, sched: NoiseSchedule, *, lowest: int = 1) -> np.ndarray:
    steps = np.asarray(t, dtype=np.int64)
    if steps.size and (steps.min() < lowest or steps.max() > sched.T):
        raise ContractError(f"diffusion time out of range [{lowest}, {sched.T}]: {t}")
    return steps


def _column(values: np.ndarray, steps: np.ndarray, rows: int) -> np.ndarray:
    """Per-row coefficient shaped to broadcast over (rows, dim)."""
    picked = values[steps - 1]
    return np.broadcast_to(picked.reshape(-1, 1), (rows, 1)).astype(np.float32)


def forward_marginal(theta0: np.ndarray, t: Steps, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    theta0 = np.asarray(theta0, dtype=np.float32)
    steps = _check_t(t, sched)
    if np.shape(eps) != theta0.shape:
        raise ContractError(f"noise shape {np.shape(eps)} does not match {theta0.shape}")
    rows = theta0.shape[0] if theta0.ndim > 1 else 1
    flat = theta0.reshape(rows, -1)
    signal = _column(np.sqrt(sched.alpha_bar), steps, rows)
    noise = _column(np.sqrt(1.0 - sched.alpha_bar), steps, rows)
    out = signal * flat + noise * np.asarray(eps, dtype=np.float32).reshape(rows, -1)
    return out.reshape(theta0.shape)


def forward_step(theta_prev: np.ndarray, t: int, z: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    _check_t(t, sched)
    beta = sched.beta_at(t)
    return (np.sqrt(1.0 - beta) * np.asarray(theta_prev, dtype=np.float32)
            + np.sqrt(beta) * np.asarray(z, dtype=np.float32)).astype(np.float32)


def eps_to_score(eps_hat: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    _check_t(t, sched)
    return (-np.asarray(eps_hat, dtype=np.float32) / float(np.sqrt(1.0 - sched.alpha(t)))).astype(np.float32)


def score_to_eps(score: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    _check_t(t, sched)
    return (-np.asarray(score, dtype=np.float32) * float(np.sqrt(1.0 - sched.alpha(t)))).astype(np.float32)


class EpsModel(Protocol):
    """Anything that predicts the added noise for a batch of noised parameters."""

    schedule: NoiseSchedule

    @property
    def dim(self) -> int: ...

    def predict(self, theta_t: np.ndarray, t: int) -> np.ndarray: ...


class GuidanceFn(Protocol):
    """Gradient of a guidance scalar with respect to θ_t, plus its weight ω."""

    omega: float

    def __call__(self, theta_t: np.ndarray, t: int) -> np.ndarray: ...


@dataclass
class ScoreModel:
    spec: MlpSpec
    params: Params
    schedule: NoiseSchedule
    ema_params: Optional[Params] = None
    loss_log: List[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.spec.time_embedding <= 0:
            raise ContractError("the generator network needs a time embedding")
        if self.spec.input_width != self.spec.output_width:
            raise ContractError("generator output width must equal the flattened parameter width")

    @property
    def dim(self) -> int:
        return self.spec.input_width

    @property
    def sampling_params(self) -> Params:
        return self.ema_params if self.ema_params is not None else self.params

    def predict(self, theta_t: np.ndarray, t: Steps) -> np.ndarray:
        return mlp_forward(self.spec, self.sampling_params, theta_t, t).data


@dataclass
class AnalyticGaussianModel:
    """Exact ε-predictor for data drawn from N(μ0, σ0² I)."""

    schedule: NoiseSchedule
    mu0: np.ndarray
    sigma0: float = 1.0

    @property
    def dim(self) -> int:
        return int(np.size(self.mu0))

    def predict(self, theta_t: np.ndarray, t: int) -> np.ndarray:
        return analytic_gaussian_eps(theta_t, t, self.schedule, self.mu0, self.sigma0)


def analytic_gaussian_eps(
    theta_t: np.ndarray, t: int, sched: NoiseSchedule, mu0: Union[float, np.ndarray], sigma0: float
) -> np.ndarray:
    if sigma0 <= 0:
        raise ContractError("sigma0 must be positive")
    _check_t(t, sched)
    alpha = sched.alpha(t)
    scale = np.sqrt(1.0 - alpha) / (alpha * sigma0**2 + 1.0 - alpha)
    centred = np.asarray(theta_t, dtype=np.float64) - np.sqrt(alpha) * np.asarray(mu0, dtype=np.float64)
    return (centred * scale).astype(np.float32)


def eps_mse(eps: Union[Tensor, np.ndarray], eps_hat: Union[Tensor, np.ndarray]) -> Tensor:
    """Batch mean of the squared error summed over parameter coordinates."""
    diff = T.sub(eps, eps_hat)
    return T.mean(T.sum(T.square(diff), axis=1))


def score_match_loss(
    model: ScoreModel,
    theta0: np.ndarray,
    t: np.ndarray,
    eps: np.ndarray,
    params: Optional[Params] = None,
) -> Tensor:
    theta0 = np.asarray(theta0)
    if theta0.shape != np.shape(eps) or theta0.shape[0] != np.size(t):
        raise ContractError(f"batch shapes disagree: theta {theta0.shape}, eps {np.shape(eps)}, t {np.shape(t)}")
    noised = forward_marginal(theta0, t, eps, model.schedule)
    predicted = mlp_forward(model.spec, model.params if params is None else params, noised, t)
    return eps_mse(eps, predicted)


def ema_update(ema_params: Params, params: Params, rate: float) -> Params:
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"EMA rate must lie in [0, 1), got {rate}")
    return {
        name: Tensor(rate * ema_params[name].data + (1.0 - rate) * value.data, name=name)
        for name, value in params.items()
    }


@dataclass(frozen=True)
class GeneratorHyper:
    lr: float = 5e-4
    weight_decay: float = 0.0
    batch_size: int = 128
    ema_rate: float = 0.0
    log_every: int = 1000


def train_generator(
    dataset: np.ndarray,
    steps: int,
    hyper: GeneratorHyper,
    *,
    spec: MlpSpec,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    bounds: Bounds = None,
    progress: bool = False,
) -> ScoreModel:
    data = np.asarray(dataset, dtype=np.float32)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ContractError("generator training needs a non-empty (count, dim) dataset")
    if bounds is not None and (data.min() < bounds[0] or data.max() > bounds[1]):
        raise ContractError(f"dataset values leave the declared bounds {bounds}")

    model = ScoreModel(spec=spec, params=init_params(spec, rng), schedule=schedule)
    model.ema_params = copy_params(model.params)
    state = make_opt_state(model.params, hyper.lr, weight_decay=hyper.weight_decay)
    for step in tqdm(range(steps), desc="pretrain", disable=not progress):
        index = rng.integers(0, data.shape[0], size=hyper.batch_size)
        t = rng.integers(1, schedule.T + 1, size=hyper.batch_size)
        eps = rng.standard_normal((hyper.batch_size, data.shape[1])).astype(np.float32)
        tape = Tape()
        watched = tape.watch_params(model.params)
        loss = score_match_loss(model, data[index], t, eps, params=watched)
        grads = grad_of(tape, loss, watched)
        model.params, state = optimizer_step(model.params, grads, state)
        model.ema_params = ema_update(model.ema_params, model.params, hyper.ema_rate)
        model.loss_log.append(loss.item())
        if hyper.log_every and (step + 1) % hyper.log_every == 0:
            recent = model.loss_log[-hyper.log_every:]
            logger.info("generator step %d: loss %.4f", step + 1, float(np.mean(recent)))
    return model


def ddim_step(
    theta_t: np.ndarray,
    t: int,
    eps_hat: np.ndarray,
    sched: NoiseSchedule,
    t_prev: Optional[int] = None,
) -> np.ndarray:
    """Deterministic jump from ``t`` to ``t_prev`` (default ``t - 1``)."""
    _check_t(t, sched)
    t_prev = t - 1 if t_prev is None else t_prev
    if not 0 <= t_prev < t:
        raise ContractError(f"t_prev must lie in [0, {t}), got {t_prev}")
    alpha_t, alpha_p = sched.alpha(t), sched.alpha_prev(t_prev)
    if alpha_p > 1.0 + 1e-12:
        raise ContractError(f"schedule invalid at t={t}: previous alpha_bar {alpha_p} exceeds 1")
    ratio = float(np.sqrt(alpha_p / alpha_t))
    eps_coef = float(np.sqrt(1.0 - alpha_t) * ratio - np.sqrt(max(1.0 - alpha_p, 0.0)))
    return (ratio * np.asarray(theta_t, dtype=np.float32) - eps_coef * np.asarray(eps_hat, dtype=np.float32)).astype(
        np.float32
    )


def guided_eps(eps_model: np.ndarray, g: np.ndarray, omega: float, t: int, sched: NoiseSchedule) -> np.ndarray:
    if np.shape(g) != np.shape(eps_model):
        raise ContractError(f"guidance gradient shape {np.shape(g)} does not match {np.shape(eps_model)}")
    if omega == 0 or not np.any(g):
        return eps_model
    _check_t(t, sched)
    correction = float(np.sqrt(1.0 - sched.alpha(t))) * omega * np.asarray(g, dtype=np.float32)
    return (eps_model - correction).astype(np.float32)


def sde_reverse_step(
    theta_t: np.ndarray, t: int, score: np.ndarray, z: np.ndarray, sched: NoiseSchedule
) -> np.ndarray:
    _check_t(t, sched)
    beta = sched.beta_at(t)
    theta = np.asarray(theta_t, dtype=np.float32)
    return (theta + beta * (theta / 2.0 + np.asarray(score, dtype=np.float32))
            + np.sqrt(beta) * np.asarray(z, dtype=np.float32)).astype(np.float32)


@dataclass
class TraceStep:
    t: int
    theta: np.ndarray
    eps: np.ndarray


@dataclass
class SampleTrace:
    seed: int = 0
    steps: List[TraceStep] = field(default_factory=list)


def ddim_timesteps(T_steps: int, T_prime: int) -> List[int]:
    if not 1 <= T_prime <= T_steps:
        raise ContractError(f"T_prime must lie in [1, {T_steps}], got {T_prime}")
    if T_steps % T_prime:
        raise ContractError(f"T_prime={T_prime} does not divide T={T_steps}")
    stride = T_steps // T_prime
    return [T_steps - stride * k for k in range(T_prime)]


def _run_chain(
    model: EpsModel,
    timesteps: List[int],
    guidance: Optional[GuidanceFn],
    theta: np.ndarray,
    record: bool,
) -> Tuple[np.ndarray, List[TraceStep]]:
    sched = model.schedule
    steps: List[TraceStep] = []
    for i, t in enumerate(timesteps):
        t_prev = timesteps[i + 1] if i + 1 < len(timesteps) else 0
        eps = np.asarray(model.predict(theta, t), dtype=np.float32)
        if guidance is not None and guidance.omega != 0:
            eps = guided_eps(eps, guidance(theta, t), guidance.omega, t, sched)
        if record:
            steps.append(TraceStep(t=t, theta=theta.copy(), eps=eps.copy()))
        theta = ddim_step(theta, t, eps, sched, t_prev)
    return theta, steps


def sample(
    model: EpsModel,
    T_prime: int,
    guidance: Optional[GuidanceFn],
    batch: int,
    seed: int,
    *,
    bounds: Bounds = None,
    workers: int = 1,
    trace: Optional[SampleTrace] = None,
    chunk: int = SAMPLE_CHUNK,
) -> np.ndarray:
    """Guided DDIM over the uniform-stride subsequence T, T - s, ..., s, then a final jump to 0.

    Chains are split into fixed-size chunks, each drawing θ_T from its own derived
    seed, so the output does not depend on ``workers``.
    """
    timesteps = ddim_timesteps(model.schedule.T, T_prime)
    if batch <= 0:
        return np.zeros((0, model.dim), dtype=np.float32)
    starts = list(range(0, batch, chunk))

    def run(start: int) -> Tuple[np.ndarray, List[TraceStep]]:
        size = min(chunk, batch - start)
        rng = component_rng(seed, f"sample/chunk/{start // chunk}")
        theta = rng.standard_normal((size, model.dim)).astype(np.float32)
        return _run_chain(model, timesteps, guidance, theta, trace is not None)

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, starts))
    else:
        results = [run(start) for start in starts]

    out = np.concatenate([theta for theta, _ in results], axis=0)
    if trace is not None:
        trace.seed = seed
        for k, t in enumerate(timesteps):
            trace.steps.append(
                TraceStep(
                    t=t,
                    theta=np.concatenate([steps[k].theta for _, steps in results], axis=0),
                    eps=np.concatenate([steps[k].eps for _, steps in results], axis=0),
                )
            )
    if bounds is not None:
        out = np.clip(out, bounds[0], bounds[1])
    return out


def sample_sde(
    model: EpsModel,
    batch: int,
    seed: int,
    guidance: Optional[GuidanceFn] = None,
    bounds: Bounds = None,
) -> np.ndarray:
    """Ancestral Euler-Maruyama sampler over all T steps; cross-check for the DDIM path."""
    sched = model.schedule
    rng = component_rng(seed, "sample/sde")
    theta = rng.standard_normal((batch, model.dim)).astype(np.float32)
    for t in range(sched.T, 0, -1):
        score = eps_to_score(model.predict(theta, t), t, sched)
        if guidance is not None and guidance.omega != 0:
            score = score + guidance.omega * guidance(theta, t)
        z = rng.standard_normal(theta.shape).astype(np.float32) if t > 1 else np.zeros_like(theta)
        theta = sde_reverse_step(theta, t, score, z, sched)
    if bounds is not None:
        theta = np.clip(theta, bounds[0], bounds[1])
    return theta


def serialize_model(model: ScoreModel, prefix: str = "generator") -> Dict[str, np.ndarray]:
    table = {f"{prefix}/{name}": value.data for name, value in model.params.items()}
    if model.ema_params is not None:
        table.update({f"{prefix}_ema/{name}": value.data for name, value in model.ema_params.items()})
    return table


def restore_params(table: Dict[str, np.ndarray], prefix: str) -> Params:
    marker = prefix + "/"
    return {
        name[len(marker):]: Tensor(value, name=name[len(marker):])
        for name, value in table.items()
        if name.startswith(marker)
    }
