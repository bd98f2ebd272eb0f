"""Verification oracles: forward-process law, guided sampling against closed forms,
and central-difference checks of every differentiable loss."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from add_curriculum.config import RunConfig
from add_curriculum.core import tensor as T
from add_curriculum.core.gradcheck import finite_diff_check
from add_curriculum.core.nn import MlpSpec, init_params
from add_curriculum.core.rng import component_rng, derive_seed
from add_curriculum.core.tensor import ContractError, Tensor
from add_curriculum.services.diffusion import (
    AnalyticGaussianModel,
    EpsModel,
    GeneratorHyper,
    NoiseSchedule,
    ScoreModel,
    build_schedule,
    forward_marginal,
    forward_step,
    sample,
    score_match_loss,
    train_generator,
)
from add_curriculum.services.guidance import AnalyticUniformModel, PosteriorLinearGuidance, UniformTiltGuidance
from add_curriculum.services.mazes import ACTION_COUNT
from add_curriculum.services.ppo_agent import PpoHyper, make_agent, ppo_loss
from add_curriculum.services.regret_critic import (
    CriticModel,
    cross_entropy,
    difficulty_logprob,
    logits_to_distribution,
    make_support,
    regret_estimate,
)

logger = logging.getLogger(__name__)

GRADIENT_TOLERANCE = 1e-3
GRADIENT_STEP = 1e-5
MEAN_TOLERANCE = 0.1
VARIANCE_TOLERANCE = 0.15
LEARNED_MEAN_TOLERANCE = 0.2
TV_LIMIT = 0.15
UNIFORM_TV_LIMIT = 0.1
FORWARD_TOLERANCE = 0.05

# small tanh networks keep the finite differences away from kinks
_GRAD_WIDTHS = (3, 6, 3)
_GRAD_EMBEDDING = 4
_GRAD_T = 40


class VerificationError(RuntimeError):
    def __init__(self, message: str, stats: Optional[Dict[str, object]] = None) -> None:
        super().__init__(message)
        self.stats = dict(stats or {})


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    limit: float
    detail: str = ""


@dataclass
class GaussianReport:
    omega: float
    direction: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    target: np.ndarray


@dataclass
class VerifyReport:
    checks: List[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)


def _schedule(config: RunConfig) -> NoiseSchedule:
    diff = config.diffusion
    return build_schedule(diff.T, diff.beta_start, diff.beta_end)


# -- forward process ----------------------------------------------------------


def verify_forward_law(schedule: NoiseSchedule, samples: int, seed: int) -> List[CheckResult]:
    """Closed-form and iterated forward noising both match N(√α_t θ0, 1 - α_t)."""
    theta0 = np.ones((samples, 1), dtype=np.float32)
    rng = component_rng(seed, "verify/forward")
    checkpoints = sorted({max(1, schedule.T // 4), max(1, schedule.T // 2), schedule.T})
    results: List[CheckResult] = []

    iterated = theta0.copy()
    reached = 0
    for t in checkpoints:
        for step in range(reached + 1, t + 1):
            iterated = forward_step(iterated, step, rng.standard_normal(iterated.shape).astype(np.float32), schedule)
        reached = t
        direct = forward_marginal(theta0, t, rng.standard_normal(theta0.shape).astype(np.float32), schedule)
        alpha = schedule.alpha(t)
        mean, var = float(np.sqrt(alpha)), 1.0 - alpha
        for label, draws in (("marginal", direct), ("iterated", iterated)):
            mean_err = abs(float(draws.mean()) - mean) / max(abs(mean), np.sqrt(var))
            var_err = abs(float(draws.var()) - var) / var
            worst = max(mean_err, var_err)
            results.append(
                CheckResult(
                    name=f"forward {label} t={t}",
                    passed=worst <= FORWARD_TOLERANCE,
                    value=worst,
                    limit=FORWARD_TOLERANCE,
                    detail=f"mean {draws.mean():.4f} (want {mean:.4f}), var {draws.var():.4f} (want {var:.4f})",
                )
            )
    return results


# -- guided sampling against closed forms --------------------------------------


def verify_gaussian_guidance(
    omega: float,
    direction: Sequence[float],
    samples: int,
    *,
    schedule: NoiseSchedule,
    sample_steps: int,
    seed: int,
    model: Optional[EpsModel] = None,
    mean_tolerance: float = MEAN_TOLERANCE,
) -> GaussianReport:
    """Guided sampling of N(0, I) data with a linear reward a·θ lands on N(ω a, I).

    ``model`` defaults to the exact ε-predictor; pass a trained generator to check
    the learned path.
    """
    a = np.asarray(direction, dtype=np.float64)
    eps_model = model or AnalyticGaussianModel(schedule=schedule, mu0=np.zeros(a.size))
    guidance = PosteriorLinearGuidance(direction=a, schedule=schedule, omega=omega)
    draws = sample(eps_model, sample_steps, guidance, samples, seed).astype(np.float64)
    mean, variance, target = draws.mean(axis=0), draws.var(axis=0), omega * a
    report = GaussianReport(omega=omega, direction=a, mean=mean, variance=variance, target=target)
    mean_gap = float(np.max(np.abs(mean - target)))
    var_gap = float(np.max(np.abs(variance - 1.0)))
    logger.debug("gaussian guidance omega=%s: mean %s, variance %s", omega, mean, variance)
    if mean_gap > mean_tolerance or var_gap > VARIANCE_TOLERANCE:
        raise VerificationError(
            f"guided Gaussian sample off target at omega={omega}: mean {np.round(mean, 4)} vs {target}, "
            f"variance {np.round(variance, 4)}",
            stats={"mean": mean.tolist(), "variance": variance.tolist(), "target": target.tolist()},
        )
    return report


def train_gaussian_generator(config: RunConfig, dim: int = 2, progress: bool = False) -> ScoreModel:
    verify = config.verify
    rng = component_rng(config.run.seed, "verify/gaussian/data")
    dataset = rng.standard_normal((config.diffusion.dataset_size, dim)).astype(np.float32)
    spec = MlpSpec(widths=(dim, 128, 128, dim), activation="relu", time_embedding=config.diffusion.time_embedding)
    hyper = GeneratorHyper(lr=1e-3, batch_size=config.diffusion.batch_size, ema_rate=config.diffusion.ema_rate)
    return train_generator(
        dataset,
        verify.gaussian_train_steps,
        hyper,
        spec=spec,
        schedule=_schedule(config),
        rng=component_rng(config.run.seed, "verify/gaussian/train"),
        progress=progress,
    )


def tilt_bin_masses(bins: int, omega: float) -> np.ndarray:
    """Mass of each of ``bins`` equal cells of [0, 1] under the density ∝ e^{ωθ}."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    if omega == 0:
        return np.full(bins, 1.0 / bins)
    cdf = np.expm1(omega * edges) / np.expm1(omega)
    return np.diff(cdf)


def total_variation(draws: np.ndarray, masses: np.ndarray) -> float:
    counts, _ = np.histogram(np.clip(draws, 0.0, 1.0), bins=len(masses), range=(0.0, 1.0))
    return 0.5 * float(np.abs(counts / max(counts.sum(), 1) - masses).sum())


def train_uniform_generator(config: RunConfig, progress: bool = False) -> ScoreModel:
    rng = component_rng(config.run.seed, "verify/uniform/data")
    dataset = rng.uniform(0.0, 1.0, size=(config.diffusion.dataset_size, 1)).astype(np.float32)
    spec = MlpSpec(widths=(1, 128, 128, 1), activation="relu", time_embedding=config.diffusion.time_embedding)
    hyper = GeneratorHyper(lr=1e-3, batch_size=config.diffusion.batch_size, ema_rate=config.diffusion.ema_rate)
    return train_generator(
        dataset,
        config.verify.tv_train_steps,
        hyper,
        spec=spec,
        schedule=_schedule(config),
        rng=component_rng(config.run.seed, "verify/uniform/train"),
        bounds=(0.0, 1.0),
        progress=progress,
    )


def verify_tv(
    bins: int,
    omega: float,
    samples: int,
    *,
    config: RunConfig,
    model: Optional[EpsModel] = None,
    progress: bool = False,
) -> float:
    """TV distance between guided samples of Uniform[0, 1] data and the density ∝ e^{ωθ}.

    Without ``model`` a one-dimensional generator is trained first.
    """
    if bins < 10:
        raise ContractError(f"bins must be at least 10, got {bins}")
    eps_model = model if model is not None else train_uniform_generator(config, progress)
    guidance = UniformTiltGuidance(schedule=eps_model.schedule, omega=omega)
    draws = sample(
        eps_model,
        config.verify.sample_steps,
        guidance,
        samples,
        derive_seed(config.run.seed, f"verify/tv/{omega}"),
        bounds=(0.0, 1.0),
        workers=config.run.workers,
    )
    tv = total_variation(draws.reshape(-1), tilt_bin_masses(bins, omega))
    logger.info("tilted uniform omega=%s: TV %.4f over %d bins", omega, tv, bins)
    return tv


# -- gradient oracle ----------------------------------------------------------


def _swap(params: Dict[str, Tensor], name: str, value: Tensor) -> Dict[str, Tensor]:
    swapped = dict(params)
    swapped[name] = value
    return swapped


def _worst_over_params(loss: Callable[[Dict[str, Tensor]], Tensor], params: Dict[str, Tensor]) -> float:
    """Every named parameter is checked; the worst relative error is reported."""
    return max(
        finite_diff_check(lambda w, name=name: loss(_swap(params, name, w)), params[name], GRADIENT_STEP)
        for name in sorted(params)
    )


def _critic(rng: np.random.Generator, bins: int) -> CriticModel:
    spec = MlpSpec(widths=(_GRAD_WIDTHS[0], _GRAD_WIDTHS[1], bins), activation="tanh", time_embedding=_GRAD_EMBEDDING)
    schedule = build_schedule(100, 1e-4, 0.02)
    return CriticModel(spec=spec, params=init_params(spec, rng), support=make_support(bins, 0.0, 1.0), schedule=schedule)


def _score_match_case(rng: np.random.Generator) -> float:
    spec = MlpSpec(widths=_GRAD_WIDTHS, activation="tanh", time_embedding=_GRAD_EMBEDDING)
    model = ScoreModel(spec=spec, params=init_params(spec, rng), schedule=build_schedule(100, 1e-4, 0.02))
    theta0 = rng.uniform(0.0, 1.0, size=(4, spec.input_width))
    t = rng.integers(1, 101, size=4)
    eps = rng.standard_normal(theta0.shape)
    return _worst_over_params(lambda p: score_match_loss(model, theta0, t, eps, params=p), model.params)


def _critic_ce_case(rng: np.random.Generator) -> float:
    critic = _critic(rng, 5)
    theta = rng.uniform(0.0, 1.0, size=(4, critic.dim))
    targets = rng.dirichlet(np.ones(5), size=4)
    return _worst_over_params(lambda p: cross_entropy(critic.logits(theta, _GRAD_T, p), targets), critic.params)


def _cvar_case(rng: np.random.Generator) -> float:
    support = make_support(6, 0.0, 1.0)
    alpha = float(rng.uniform(0.05, 0.95))
    logits = Tensor(rng.standard_normal((3, 6)))
    return finite_diff_check(
        lambda x: T.sum(regret_estimate(logits_to_distribution(x, support), alpha)),
        logits,
        GRADIENT_STEP,
    )


def _difficulty_case(rng: np.random.Generator) -> float:
    critic = _critic(rng, 5)
    k = int(rng.integers(1, 6))
    theta = Tensor(rng.uniform(0.0, 1.0, size=(3, critic.dim)))
    return finite_diff_check(lambda x: T.sum(difficulty_logprob(critic, x, _GRAD_T, k)), theta, GRADIENT_STEP)


def _regret_chain_case(rng: np.random.Generator) -> float:
    critic = _critic(rng, 6)
    alpha = float(rng.uniform(0.05, 0.95))
    theta = Tensor(rng.uniform(0.0, 1.0, size=(3, critic.dim)))
    return finite_diff_check(
        lambda x: T.sum(regret_estimate(logits_to_distribution(critic.logits(x, _GRAD_T), critic.support), alpha)),
        theta,
        GRADIENT_STEP,
    )


def _ppo_case(rng: np.random.Generator) -> float:
    hyper = PpoHyper(entropy_coef=0.5)
    agent = make_agent(5, (6,), "tanh", hyper, rng)
    obs = rng.standard_normal((6, 5))
    actions = rng.integers(0, ACTION_COUNT, size=6)
    logp = agent.policy.log_probs(obs)[np.arange(6), actions]
    old = logp + rng.normal(0.0, 0.3, size=6)
    advantages = rng.standard_normal(6)
    targets = rng.standard_normal(6)
    return _worst_over_params(
        lambda p: ppo_loss(agent, p, obs, actions, old, advantages, targets, hyper)[0], agent.merged()
    )


GRADIENT_CASES: Dict[str, Callable[[np.random.Generator], float]] = {
    "score-matching loss": _score_match_case,
    "critic cross-entropy": _critic_ce_case,
    "CVaR regret": _cvar_case,
    "difficulty log-prob": _difficulty_case,
    "regret input chain": _regret_chain_case,
    "PPO loss": _ppo_case,
}


def gradient_suite(instances: int, seed: int) -> List[CheckResult]:
    results: List[CheckResult] = []
    for name, case in GRADIENT_CASES.items():
        rng = component_rng(seed, f"verify/grad/{name}")
        worst = max(case(rng) for _ in range(instances))
        results.append(
            CheckResult(
                name=f"gradient {name}",
                passed=worst <= GRADIENT_TOLERANCE,
                value=worst,
                limit=GRADIENT_TOLERANCE,
                detail=f"{instances} instances",
            )
        )
    return results


# -- full suite ---------------------------------------------------------------


def _gaussian_check(name: str, run: Callable[[], GaussianReport], limit: float) -> CheckResult:
    try:
        report = run()
    except VerificationError as exc:
        gap = float(np.max(np.abs(np.asarray(exc.stats["mean"]) - np.asarray(exc.stats["target"]))))
        return CheckResult(name=name, passed=False, value=gap, limit=limit, detail=str(exc))
    gap = float(np.max(np.abs(report.mean - report.target)))
    return CheckResult(
        name=name,
        passed=True,
        value=gap,
        limit=limit,
        detail=f"mean {np.round(report.mean, 3)}, variance {np.round(report.variance, 3)}",
    )


def run_verify(config: RunConfig, progress: bool = False, learned: bool = True) -> VerifyReport:
    """Every oracle; raises VerificationError carrying the report when any check fails.

    ``learned=False`` skips the checks that first train a generator.
    """
    verify, seed = config.verify, config.run.seed
    schedule = _schedule(config)
    report = VerifyReport()
    stages = ["gradients", "forward", "gaussian", "tv"] + (["learned"] if learned else [])
    for stage in tqdm(stages, desc="verify", disable=not progress):
        if stage == "gradients":
            report.checks.extend(gradient_suite(verify.gradcheck_instances, seed))
        elif stage == "forward":
            report.checks.extend(verify_forward_law(schedule, verify.samples, seed))
        elif stage == "gaussian":
            for omega, direction in ((0.0, (1.0, -0.5)), (1.0, (1.0, -0.5)), (2.0, (1.0, 0.0))):
                report.checks.append(
                    _gaussian_check(
                        f"gaussian guidance omega={omega:g}",
                        lambda o=omega, d=direction: verify_gaussian_guidance(
                            o, d, verify.samples, schedule=schedule, sample_steps=verify.sample_steps,
                            seed=derive_seed(seed, f"verify/gaussian/{o}"),
                        ),
                        MEAN_TOLERANCE,
                    )
                )
        elif stage == "tv":
            exact = AnalyticUniformModel(schedule)
            for omega, limit in ((0.0, UNIFORM_TV_LIMIT), (2.0, TV_LIMIT)):
                tv = verify_tv(verify.tv_bins, omega, verify.tv_samples, config=config, model=exact)
                report.checks.append(
                    CheckResult(f"tilted uniform omega={omega:g} (exact score)", tv <= limit, tv, limit)
                )
        else:
            model = train_gaussian_generator(config, progress=progress)
            report.checks.append(
                _gaussian_check(
                    "gaussian guidance omega=1 (learned score)",
                    lambda: verify_gaussian_guidance(
                        1.0, (1.0, -0.5), verify.samples, schedule=schedule, sample_steps=verify.sample_steps,
                        seed=seed, model=model, mean_tolerance=LEARNED_MEAN_TOLERANCE,
                    ),
                    LEARNED_MEAN_TOLERANCE,
                )
            )
            tv = verify_tv(verify.tv_bins, 2.0, verify.tv_samples, config=config, progress=progress)
            report.checks.append(CheckResult("tilted uniform omega=2 (learned score)", tv <= TV_LIMIT, tv, TV_LIMIT))

    for check in report.checks:
        log = logger.info if check.passed else logger.error
        log("%s: %s (%.3g, limit %.3g)", check.name, "ok" if check.passed else "FAILED", check.value, check.limit)
    if not report.passed:
        failed = [check.name for check in report.checks if not check.passed]
        raise VerificationError(f"{len(failed)} check(s) failed: {', '.join(failed)}", stats={"report": report})
    return report
