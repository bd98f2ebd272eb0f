from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from add_curriculum.core import tensor as T
from add_curriculum.core.nn import MlpSpec, Params, init_params, mlp_forward
from add_curriculum.core.optim import OptState, clip_grad_norm, make_opt_state, optimizer_step
from add_curriculum.core.tensor import ContractError, Tape, Tensor, grad_of
from add_curriculum.services.mazes import ACTION_COUNT, MazeEnv

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PpoHyper:
    gamma: float = 0.995
    gae_lambda: float = 0.95
    rollout: int = 128
    epochs: int = 5
    minibatches: int = 1
    clip: float = 0.2
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    lr: float = 1e-4
    adam_eps: float = 1e-5
    workers: int = 1

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise ContractError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ContractError(f"GAE lambda must lie in [0, 1], got {self.gae_lambda}")
        if self.clip <= 0:
            raise ContractError(f"clip range must be positive, got {self.clip}")


@dataclass
class PolicyModel:
    spec: MlpSpec
    params: Params

    def __post_init__(self) -> None:
        if self.spec.output_width != ACTION_COUNT:
            raise ContractError(f"policy must emit {ACTION_COUNT} logits, spec emits {self.spec.output_width}")

    def logits(self, obs: np.ndarray, params: Optional[Params] = None) -> Tensor:
        return mlp_forward(self.spec, self.params if params is None else params, obs)

    def log_probs(self, obs: np.ndarray) -> np.ndarray:
        logits = self.logits(obs).data.astype(np.float64)
        return logits - logsumexp(logits, axis=-1, keepdims=True)


@dataclass
class ValueModel:
    spec: MlpSpec
    params: Params

    def __post_init__(self) -> None:
        if self.spec.output_width != 1:
            raise ContractError("value network must emit a single output")

    def values(self, obs: np.ndarray, params: Optional[Params] = None) -> Tensor:
        out = mlp_forward(self.spec, self.params if params is None else params, obs)
        return T.reshape(out, (out.shape[0],))

    def predict(self, obs: np.ndarray) -> np.ndarray:
        return self.values(obs).data


@dataclass
class Agent:
    """Policy and value networks sharing one Adam state (keys ``policy/*`` and ``value/*``)."""

    policy: PolicyModel
    value: ValueModel
    opt: OptState

    def merged(self) -> Params:
        return merge_params(self.policy.params, self.value.params)

    def assign(self, merged: Params) -> None:
        self.policy.params = _split(merged, "policy")
        self.value.params = _split(merged, "value")


def merge_params(policy: Params, value: Params) -> Params:
    params = {f"policy/{k}": v for k, v in policy.items()}
    params.update({f"value/{k}": v for k, v in value.items()})
    return params


def _split(merged: Params, prefix: str) -> Params:
    marker = prefix + "/"
    return {k[len(marker):]: v for k, v in merged.items() if k.startswith(marker)}


def make_agent(
    obs_width: int,
    hidden: Sequence[int],
    activation: str,
    hyper: PpoHyper,
    rng: np.random.Generator,
) -> Agent:
    policy_spec = MlpSpec(widths=(obs_width, *hidden, ACTION_COUNT), activation=activation)
    value_spec = MlpSpec(widths=(obs_width, *hidden, 1), activation=activation)
    policy = PolicyModel(policy_spec, init_params(policy_spec, rng))
    value = ValueModel(value_spec, init_params(value_spec, rng))
    opt = make_opt_state(merge_params(policy.params, value.params), hyper.lr, eps=hyper.adam_eps)
    return Agent(policy=policy, value=value, opt=opt)


@dataclass
class RolloutBatch:
    """Step-major arrays of shape (steps, envs); ``episodes`` holds (env index, episodic return)."""

    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    values: np.ndarray
    last_values: np.ndarray
    episodes: List[Tuple[int, float]] = field(default_factory=list)

    @property
    def size(self) -> int:
        return int(self.actions.size)

    def returns_by_env(self, count: int) -> List[List[float]]:
        grouped: List[List[float]] = [[] for _ in range(count)]
        for env_index, value in self.episodes:
            grouped[env_index].append(value)
        return grouped


def _draw(log_probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(np.exp(log_probs), axis=-1)
    u = rng.random((log_probs.shape[0], 1))
    return np.minimum((u > cdf).sum(axis=-1), log_probs.shape[-1] - 1)


def collect(
    envs: Sequence[MazeEnv],
    policy: PolicyModel,
    value: ValueModel,
    steps: int,
    rng: np.random.Generator,
) -> RolloutBatch:
    """Stochastic rollouts; finished episodes are reset in place and tagged with their env index."""
    count = len(envs)
    obs = np.stack([env.observe() for env in envs]) if count else np.zeros((0, 0), np.float32)
    width = obs.shape[1]
    batch = RolloutBatch(
        obs=np.zeros((steps, count, width), np.float32),
        actions=np.zeros((steps, count), np.int64),
        log_probs=np.zeros((steps, count), np.float32),
        rewards=np.zeros((steps, count), np.float32),
        dones=np.zeros((steps, count), np.float32),
        values=np.zeros((steps, count), np.float32),
        last_values=np.zeros(count, np.float32),
    )
    if steps <= 0 or count == 0:
        return batch
    running = np.zeros(count, dtype=np.float64)
    for n in range(steps):
        log_probs = policy.log_probs(obs)
        actions = _draw(log_probs, rng)
        batch.obs[n] = obs
        batch.actions[n] = actions
        batch.log_probs[n] = log_probs[np.arange(count), actions]
        batch.values[n] = value.predict(obs)
        for i, env in enumerate(envs):
            next_obs, reward, done = env.step(int(actions[i]))
            running[i] += reward
            batch.rewards[n, i] = reward
            if done:
                batch.dones[n, i] = 1.0
                batch.episodes.append((i, float(running[i])))
                running[i] = 0.0
                next_obs = env.reset()
            obs[i] = next_obs
    batch.last_values = value.predict(obs)
    return batch


def gae(batch: RolloutBatch, gamma: float, lam: float, normalize: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Generalised advantage estimates and value targets, both shaped (steps, envs)."""
    rewards = batch.rewards.astype(np.float64)
    values = batch.values.astype(np.float64)
    live = 1.0 - batch.dones.astype(np.float64)
    advantages = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[1:], dtype=np.float64)
    next_values = batch.last_values.astype(np.float64)
    for n in reversed(range(rewards.shape[0])):
        delta = rewards[n] + gamma * next_values * live[n] - values[n]
        running = delta + gamma * lam * live[n] * running
        advantages[n] = running
        next_values = values[n]
    targets = advantages + values
    if normalize and advantages.size:
        advantages = (advantages - advantages.mean()) / (advantages.std() + 1e-8)
    return advantages.astype(np.float32), targets.astype(np.float32)


def ppo_loss(
    agent: Agent,
    params: Params,
    obs: np.ndarray,
    actions: np.ndarray,
    old_log_probs: np.ndarray,
    advantages: np.ndarray,
    targets: np.ndarray,
    hyper: PpoHyper,
) -> Tuple[Tensor, Dict[str, float]]:
    logp_all = T.log_softmax(agent.policy.logits(obs, _split(params, "policy")), axis=-1)
    logp = T.take_along(logp_all, actions, axis=-1)
    ratio = T.exp(T.sub(logp, old_log_probs))
    unclipped = T.mul(ratio, advantages)
    clipped = T.mul(T.clamp(ratio, 1.0 - hyper.clip, 1.0 + hyper.clip), advantages)
    policy_loss = T.neg(T.mean(T.minimum(unclipped, clipped)))
    value_loss = T.mean(T.square(T.sub(agent.value.values(obs, _split(params, "value")), targets)))
    entropy = T.neg(T.mean(T.sum(T.mul(T.exp(logp_all), logp_all), axis=-1)))
    loss = policy_loss + hyper.value_coef * value_loss
    if hyper.entropy_coef:
        loss = loss - hyper.entropy_coef * entropy
    stats = {
        "policy_loss": policy_loss.item(),
        "value_loss": value_loss.item(),
        "entropy": entropy.item(),
        "approx_kl": float(np.mean(old_log_probs - logp.data)),
        "clip_frac": float(np.mean(np.abs(ratio.data - 1.0) > hyper.clip)),
    }
    return loss, stats


def ppo_update(agent: Agent, batch: RolloutBatch, hyper: PpoHyper, rng: np.random.Generator) -> Dict[str, float]:
    if batch.size == 0:
        raise ContractError("PPO update needs a non-empty batch")
    advantages, targets = gae(batch, hyper.gamma, hyper.gae_lambda)
    obs = batch.obs.reshape(batch.size, -1)
    actions = batch.actions.reshape(-1)
    old = batch.log_probs.reshape(-1)
    advantages, targets = advantages.reshape(-1), targets.reshape(-1)

    history: Dict[str, List[float]] = {}
    for _ in range(hyper.epochs):
        order = rng.permutation(batch.size)
        for chunk in np.array_split(order, min(hyper.minibatches, batch.size)):
            tape = Tape()
            watched = tape.watch_params(agent.merged())
            loss, stats = ppo_loss(
                agent, watched, obs[chunk], actions[chunk], old[chunk], advantages[chunk], targets[chunk], hyper
            )
            grads, norm = clip_grad_norm(grad_of(tape, loss, watched), hyper.max_grad_norm)
            merged, agent.opt = optimizer_step(agent.merged(), grads, agent.opt)
            agent.assign(merged)
            stats["loss"] = loss.item()
            stats["grad_norm"] = norm
            for key, value in stats.items():
                history.setdefault(key, []).append(value)
    return {key: float(np.mean(values)) for key, values in history.items()}


@dataclass(frozen=True)
class EvalResult:
    name: str
    solved_rate: float
    mean_return: float


def evaluate(policy: PolicyModel, envs: Sequence[MazeEnv], episodes: int) -> List[EvalResult]:
    """Greedy (argmax) evaluation; solved means a positive-reward episode."""
    if episodes < 1:
        raise ContractError("evaluation needs at least one episode per environment")
    results: List[EvalResult] = []
    for env in envs:
        solved, total = 0, 0.0
        for _ in range(episodes):
            obs = env.reset()
            done, reward = False, 0.0
            while not done:
                action = int(np.argmax(policy.logits(obs[None, :]).data[0]))
                obs, reward, done = env.step(action)
            solved += reward > 0
            total += reward
        results.append(EvalResult(name=env.name, solved_rate=solved / episodes, mean_return=total / episodes))
    return results
