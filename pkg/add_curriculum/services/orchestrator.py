from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp
from scipy.stats import spearmanr
from tqdm import tqdm

from add_curriculum.config import (
    ConfigError,
    RunConfig,
    config_hash,
    config_to_text,
    parse_config_text,
    pretrain_hash,
    with_overrides,
)
from add_curriculum.core.nn import MlpSpec
from add_curriculum.core.optim import OptState, make_opt_state
from add_curriculum.core.rng import component_rng, derive_seed
from add_curriculum.core.tensor import ContractError, Tensor
from add_curriculum.services import mazes
from add_curriculum.services.artifacts import (
    CHECKPOINT_FILE,
    CONFIG_FILE,
    DATASET_FILE,
    EVAL_FILE,
    GENERATOR_FILE,
    METRICS_FILE,
    SWEEP_FILE,
    ArtifactError,
    ensure_artifact,
    generated_file,
    run_directory,
)
from add_curriculum.services.checkpoint import (
    Checkpoint,
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
    tensor_to_text,
    text_to_tensor,
)
from add_curriculum.services.diffusion import (
    GeneratorHyper,
    NoiseSchedule,
    ScoreModel,
    build_schedule,
    restore_params,
    sample,
    serialize_model,
    train_generator,
)
from add_curriculum.services.generator_factory import ENV_BOUNDS, create_generator
from add_curriculum.services.generator_interface import EnvGenerator
from add_curriculum.services.guidance import DifficultyGuidance
from add_curriculum.services.mazes import EnvMetrics, MazeEnv
from add_curriculum.services.ppo_agent import Agent, EvalResult, PpoHyper, collect, evaluate, make_agent, ppo_update
from add_curriculum.services.regret_critic import (
    CriticBuffer,
    CriticModel,
    ReturnSupport,
    buffer_push,
    critic_update,
    estimate_regret,
    make_critic,
    make_support,
)
from add_curriculum.services.summary import (
    Row,
    append_rows,
    build_epoch_row,
    build_eval_rows,
    final_solved_rates,
    read_metrics,
    start_metrics,
    training_rows,
    truncate_metrics,
    write_table,
)

logger = logging.getLogger(__name__)

RESAMPLE_ATTEMPTS = 3


# -- construction from config -------------------------------------------------


def make_schedule(config: RunConfig) -> NoiseSchedule:
    diff = config.diffusion
    return build_schedule(diff.T, diff.beta_start, diff.beta_end)


def generator_spec(config: RunConfig) -> MlpSpec:
    dim = mazes.param_dim(config.env.size)
    diff = config.diffusion
    return MlpSpec(widths=(dim, *diff.hidden, dim), activation=diff.activation, time_embedding=diff.time_embedding)


def critic_spec(config: RunConfig) -> MlpSpec:
    critic = config.critic
    return MlpSpec(
        widths=(mazes.param_dim(config.env.size), *critic.hidden, critic.bins),
        activation=critic.activation,
        time_embedding=critic.time_embedding,
    )


def support_for(config: RunConfig) -> ReturnSupport:
    return make_support(config.critic.bins, config.critic.v_min, config.critic.v_max)


def ppo_hyper(config: RunConfig) -> PpoHyper:
    ppo = config.ppo
    return PpoHyper(
        gamma=ppo.gamma,
        gae_lambda=ppo.gae_lambda,
        rollout=ppo.rollout,
        epochs=ppo.epochs,
        minibatches=ppo.minibatches,
        clip=ppo.clip,
        entropy_coef=ppo.entropy_coef,
        value_coef=ppo.value_coef,
        max_grad_norm=ppo.max_grad_norm,
        lr=ppo.lr,
        adam_eps=ppo.adam_eps,
        workers=config.run.workers,
    )


def run_dir_for(config: RunConfig) -> Path:
    return run_directory(config.run.out, config.run.method, config_hash(config), config.run.seed)


def pretrain_dir_for(config: RunConfig) -> Path:
    return Path(config.run.out) / f"pretrain-{pretrain_hash(config)}-s{config.run.seed}"


def sweep_dir_for(config: RunConfig) -> Path:
    return Path(config.run.out) / f"sweep-{config_hash(config)}-s{config.run.seed}"


def write_config_echo(directory: Path, config: RunConfig) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / CONFIG_FILE
    path.write_text(config_to_text(config), encoding="utf-8")
    return path


# -- pre-training -------------------------------------------------------------


def build_dataset(config: RunConfig) -> np.ndarray:
    rng = component_rng(config.run.seed, "pretrain/dataset")
    env = config.env
    return np.stack([mazes.random_param(env.size, env.block_budget, rng) for _ in range(config.diffusion.dataset_size)])


def pretrain(config: RunConfig, progress: bool = False) -> ScoreModel:
    """Random-maze dataset, then score-matching training; both persisted under the pretrain directory."""
    if config.diffusion.dataset_size < 1:
        raise ContractError("pre-training needs a dataset of at least one environment")
    target = pretrain_dir_for(config)
    write_config_echo(target, config)
    dataset = build_dataset(config)
    mazes.save_dataset(target / DATASET_FILE, dataset)
    logger.info("pretrain: %d environments written to %s", len(dataset), target / DATASET_FILE)

    diff = config.diffusion
    hyper = GeneratorHyper(lr=diff.lr, weight_decay=diff.weight_decay, batch_size=diff.batch_size, ema_rate=diff.ema_rate)
    model = train_generator(
        dataset.reshape(len(dataset), -1),
        diff.train_steps,
        hyper,
        spec=generator_spec(config),
        schedule=make_schedule(config),
        rng=component_rng(config.run.seed, "pretrain/generator"),
        bounds=ENV_BOUNDS,
        progress=progress,
    )
    tensors = {"config": text_to_tensor(config_to_text(config))}
    tensors.update(serialize_model(model))
    save_checkpoint(target / GENERATOR_FILE, Checkpoint(epoch=0, tensors=tensors))
    _write_loss_log(target / "pretrain_loss.csv", model.loss_log, hyper.log_every)
    return model


def _write_loss_log(path: Path, losses: Sequence[float], every: int) -> None:
    lines = ["step,loss"]
    for end in range(every, len(losses) + 1, every):
        lines.append(f"{end},{float(np.mean(losses[end - every:end])):.6f}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _model_from_tensors(config: RunConfig, tensors: Dict[str, np.ndarray]) -> Optional[ScoreModel]:
    params = restore_params(tensors, "generator")
    if not params:
        return None
    ema = restore_params(tensors, "generator_ema") or None
    return ScoreModel(spec=generator_spec(config), params=params, schedule=make_schedule(config), ema_params=ema)


def load_generator(config: RunConfig) -> ScoreModel:
    path = ensure_artifact(pretrain_dir_for(config) / GENERATOR_FILE, "pretrained generator")
    model = _model_from_tensors(config, load_checkpoint(path).tensors)
    if model is None:
        raise CheckpointError(f"{path}: no generator tensors")
    return model


def load_or_pretrain(config: RunConfig, progress: bool = False) -> ScoreModel:
    if (pretrain_dir_for(config) / GENERATOR_FILE).is_file():
        logger.info("reusing pretrained generator from %s", pretrain_dir_for(config))
        return load_generator(config)
    return pretrain(config, progress)


# -- run state and checkpoints ------------------------------------------------


@dataclass
class RunState:
    config: RunConfig
    run_dir: Path
    model: Optional[ScoreModel]
    critic: CriticModel
    critic_opt: OptState
    buffer: CriticBuffer
    agent: Agent
    generator: EnvGenerator = field(init=False)
    epoch: int = 0

    def __post_init__(self) -> None:
        self.generator = create_generator(self.config, self.model, self.critic)


def _critic_opt(config: RunConfig, params) -> OptState:
    return make_opt_state(params, config.critic.lr, weight_decay=config.critic.weight_decay)


def init_state(config: RunConfig, run_dir: Path, model: Optional[ScoreModel]) -> RunState:
    seed = config.run.seed
    critic = make_critic(critic_spec(config), support_for(config), make_schedule(config), component_rng(seed, "init/critic"))
    agent = make_agent(
        mazes.observation_width(config.env.obs_window),
        config.ppo.hidden,
        config.ppo.activation,
        ppo_hyper(config),
        component_rng(seed, "init/agent"),
    )
    return RunState(
        config=config,
        run_dir=run_dir,
        model=model,
        critic=critic,
        critic_opt=_critic_opt(config, critic.params),
        buffer=CriticBuffer(config.critic.buffer),
        agent=agent,
    )


def _opt_tensors(prefix: str, state: OptState) -> Dict[str, np.ndarray]:
    tensors = {f"{prefix}/step": np.asarray(state.step, dtype=np.float32)}
    tensors.update({f"{prefix}/m/{k}": v for k, v in state.m.items()})
    tensors.update({f"{prefix}/v/{k}": v for k, v in state.v.items()})
    return tensors


def _restore_opt(prefix: str, tensors: Dict[str, np.ndarray], template: OptState) -> OptState:
    step_key = f"{prefix}/step"
    if step_key not in tensors:
        raise CheckpointError(f"checkpoint lacks optimizer state {prefix!r}")
    template.step = int(tensors[step_key])
    for name in list(template.m):
        template.m[name] = tensors[f"{prefix}/m/{name}"]
        template.v[name] = tensors[f"{prefix}/v/{name}"]
    return template


def state_to_checkpoint(state: RunState) -> Checkpoint:
    tensors: Dict[str, np.ndarray] = {"config": text_to_tensor(config_to_text(state.config))}
    if state.model is not None:
        tensors.update(serialize_model(state.model))
    tensors.update({f"critic/{k}": v.data for k, v in state.critic.params.items()})
    tensors.update({f"agent/{k}": v.data for k, v in state.agent.merged().items()})
    tensors.update(_opt_tensors("opt/critic", state.critic_opt))
    tensors.update(_opt_tensors("opt/agent", state.agent.opt))
    dim, bins = state.critic.dim, state.critic.support.M
    entries = list(state.buffer.entries)
    tensors["buffer/theta"] = np.stack([t for t, _ in entries]) if entries else np.zeros((0, dim), np.float32)
    tensors["buffer/target"] = np.stack([p for _, p in entries]) if entries else np.zeros((0, bins), np.float32)
    return Checkpoint(epoch=state.epoch, tensors=tensors)


def _params(tensors: Dict[str, np.ndarray], prefix: str, template) -> Dict[str, Tensor]:
    out = {}
    for name in template:
        key = f"{prefix}/{name}"
        if key not in tensors:
            raise CheckpointError(f"checkpoint lacks tensor {key!r}")
        out[name] = Tensor(tensors[key], name=name)
    return out


def restore_state(config: RunConfig, run_dir: Path, checkpoint: Checkpoint, model: Optional[ScoreModel]) -> RunState:
    tensors = checkpoint.tensors
    if "config" not in tensors:
        raise CheckpointError("checkpoint lacks its config echo")
    if config_hash(parse_config_text(tensor_to_text(tensors["config"]))) != config_hash(config):
        raise CheckpointError("checkpoint was written by a different configuration")
    state = init_state(config, run_dir, _model_from_tensors(config, tensors) or model)
    state.critic.params = _params(tensors, "critic", state.critic.params)
    state.agent.assign(_params(tensors, "agent", state.agent.merged()))
    state.critic_opt = _restore_opt("opt/critic", tensors, state.critic_opt)
    state.agent.opt = _restore_opt("opt/agent", tensors, state.agent.opt)
    for theta, target in zip(tensors.get("buffer/theta", []), tensors.get("buffer/target", [])):
        state.buffer.entries.append((theta.copy(), target.copy()))
    state.epoch = checkpoint.epoch
    return state


def load_run_state(config: RunConfig) -> RunState:
    """Latest checkpointed state of the run described by ``config`` (eval and generate)."""
    run_dir = run_dir_for(config)
    checkpoint = load_checkpoint(ensure_artifact(run_dir / CHECKPOINT_FILE, "run checkpoint"))
    return restore_state(config, run_dir, checkpoint, None)


# -- epochs -------------------------------------------------------------------


def _decode_batch(thetas: np.ndarray, config: RunConfig) -> Tuple[List[MazeEnv], List[EnvMetrics]]:
    envs = [mazes.decode(theta, config.env.episode_cap, config.env.obs_window) for theta in thetas]
    return envs, [mazes.metrics(env) for env in envs]


def generate_training_envs(state: RunState, epoch: int) -> Tuple[np.ndarray, List[MazeEnv], List[EnvMetrics]]:
    """Sample a batch, resampling unsolvable envs up to three times before keeping them."""
    config = state.config
    seed = config.run.seed
    thetas = state.generator.generate(config.run.batch_envs, derive_seed(seed, f"epoch/{epoch}/sample"))
    envs, env_metrics = _decode_batch(thetas, config)
    for attempt in range(1, RESAMPLE_ATTEMPTS + 1):
        bad = [i for i, m in enumerate(env_metrics) if not m.solvable]
        if not bad:
            break
        fresh = state.generator.generate(len(bad), derive_seed(seed, f"epoch/{epoch}/resample/{attempt}"))
        fresh_envs, fresh_metrics = _decode_batch(fresh, config)
        for slot, i in enumerate(bad):
            thetas[i], envs[i], env_metrics[i] = fresh[slot], fresh_envs[slot], fresh_metrics[slot]
    return thetas, envs, env_metrics


EPOCH_ERRORS = (ContractError, ConfigError, CheckpointError, ArtifactError, OSError)


def with_epoch(exc: Exception, epoch: int) -> Exception:
    """Same exception type, message prefixed with the failing epoch."""
    if isinstance(exc, ConfigError):
        return ConfigError(exc.key, f"epoch {epoch}: {exc.message}")
    return type(exc)(f"epoch {epoch}: {exc}")


def train_epoch(state: RunState) -> Row:
    config = state.config
    seed, epoch = config.run.seed, state.epoch + 1
    try:
        thetas, envs, env_metrics = generate_training_envs(state, epoch)
        flat = thetas.reshape(len(thetas), -1)
        regrets = estimate_regret(state.critic, flat, config.guidance.alpha)
        for env in envs:
            env.reset()
        batch = collect(
            envs,
            state.agent.policy,
            state.agent.value,
            config.ppo.rollout,
            component_rng(seed, f"epoch/{epoch}/collect"),
        )
        stats = ppo_update(state.agent, batch, ppo_hyper(config), component_rng(seed, f"epoch/{epoch}/ppo"))
        for theta, returns in zip(flat, batch.returns_by_env(len(envs))):
            if returns:
                buffer_push(state.buffer, theta, returns, state.critic.support)
        critic_losses: List[float] = []
        if len(state.buffer):
            state.critic_opt, critic_losses = critic_update(
                state.critic,
                state.buffer,
                config.critic.minibatches,
                config.critic.epochs,
                state.critic_opt,
                component_rng(seed, f"epoch/{epoch}/critic"),
            )
    except EPOCH_ERRORS as exc:
        raise with_epoch(exc, epoch) from exc

    state.epoch = epoch
    row = build_epoch_row(
        epoch=epoch,
        method=config.run.method,
        seed=seed,
        regrets=regrets.tolist(),
        env_metrics=env_metrics,
        returns=[value for _, value in batch.episodes],
    )
    logger.info(
        "epoch %d: regret %.4f, blocks %.2f, solvable %.2f, return %s, policy loss %.4f",
        epoch,
        row["mean_regret"] or 0.0,
        row["mean_blocks"] or 0.0,
        row["solvable_frac"] or 0.0,
        "n/a" if row["mean_return"] is None else f"{row['mean_return']:.4f}",
        stats.get("policy_loss", 0.0),
    )
    logger.debug(
        "epoch %d: guidance calls %d, critic loss %s",
        epoch,
        state.generator.guidance_calls,
        f"{critic_losses[-1]:.4f}" if critic_losses else "n/a",
    )
    return row


def _eval_due(config: RunConfig, epoch: int) -> bool:
    every = config.run.eval_every
    return every > 0 and (epoch % every == 0 or epoch == config.run.epochs)


def run(config: RunConfig, progress: bool = False, stop_after: Optional[int] = None) -> List[Dict[str, str]]:
    """Algorithm loop: pretrain or reuse the generator, then epochs with evaluation and checkpoints.

    ``stop_after`` bounds the number of epochs executed by this call; a later call
    resumes from the last checkpoint.
    """
    run_dir = run_dir_for(config)
    write_config_echo(run_dir, config)
    model = None if config.run.method == "dr" else load_or_pretrain(config, progress)
    if config.run.epochs == 0:
        return []

    metrics_path = run_dir / METRICS_FILE
    checkpoint_path = run_dir / CHECKPOINT_FILE
    if checkpoint_path.is_file():
        state = restore_state(config, run_dir, load_checkpoint(checkpoint_path), model)
        truncate_metrics(metrics_path, state.epoch)
        logger.info("resuming %s from epoch %d", run_dir, state.epoch)
    else:
        state = init_state(config, run_dir, model)
        start_metrics(metrics_path)

    suite = mazes.test_suite(config.env.size, config.env.episode_cap, config.env.obs_window)
    epochs = range(state.epoch + 1, config.run.epochs + 1)
    if stop_after is not None:
        epochs = epochs[:stop_after]
    for epoch in tqdm(epochs, desc=f"{config.run.method} s{config.run.seed}", disable=not progress):
        row = train_epoch(state)
        rows = [row]
        if _eval_due(config, epoch):
            rows.extend(build_eval_rows(row, evaluate(state.agent.policy, suite, config.run.eval_episodes)))
        append_rows(metrics_path, rows)
        if epoch % config.run.checkpoint_every == 0 or epoch == config.run.epochs:
            save_checkpoint(checkpoint_path, state_to_checkpoint(state))

    log = read_metrics(metrics_path)
    trend = curriculum_trend(log)
    if trend is not None:
        logger.info("curriculum trend: spearman rho %.3f (p=%.3g)", trend[0], trend[1])
    return log


# -- analysis and generation --------------------------------------------------


def closed_form_lambda(regrets: Sequence[float], omega: float) -> np.ndarray:
    """Soft-UED environment distribution over a finite set: softmax(ω · regret)."""
    values = np.asarray(regrets, dtype=np.float64)
    if values.size == 0 or not np.all(np.isfinite(values)):
        raise ContractError("closed-form distribution needs a finite, non-empty regret list")
    logits = omega * values
    return np.exp(logits - logsumexp(logits))


def curriculum_trend(rows: Sequence[Dict[str, str]]) -> Optional[Tuple[float, float]]:
    """Spearman correlation of epoch against mean shortest path of solvable generated envs."""
    points = [(int(r["epoch"]), float(r["mean_shortest_path"])) for r in training_rows(rows) if r["mean_shortest_path"]]
    if len(points) < 3:
        return None
    epochs, paths = zip(*points)
    if np.ptp(paths) == 0:
        return None
    result = spearmanr(epochs, paths)
    return float(result[0]), float(result[1])


@dataclass
class GenerateReport:
    k: int
    thetas: np.ndarray
    envs: List[MazeEnv]
    env_metrics: List[EnvMetrics]
    critic_trained: bool

    @property
    def mean_blocks(self) -> Optional[float]:
        return float(np.mean([m.block_count for m in self.env_metrics])) if self.env_metrics else None

    @property
    def mean_shortest_path(self) -> Optional[float]:
        paths = [m.shortest_path for m in self.env_metrics if m.solvable]
        return float(np.mean(paths)) if paths else None

    @property
    def solvable_frac(self) -> Optional[float]:
        return float(np.mean([m.solvable for m in self.env_metrics])) if self.env_metrics else None


def controllable_generate(
    model: ScoreModel,
    critic: CriticModel,
    k: int,
    n: int,
    seed: int,
    config: RunConfig,
    critic_trained: bool = True,
) -> GenerateReport:
    if not 1 <= k <= critic.support.M:
        raise ContractError(f"difficulty level must lie in [1, {critic.support.M}], got {k}")
    if not critic_trained:
        logger.warning("generating with an untrained critic; difficulty guidance is uninformative")
    guidance = DifficultyGuidance(critic, k=k, omega=config.guidance.omega)
    flat = sample(model, config.diffusion.T_prime, guidance, n, seed, bounds=ENV_BOUNDS, workers=config.run.workers)
    size = config.env.size
    thetas = flat.reshape(n, size, size, 3)
    envs, env_metrics = _decode_batch(thetas, config)
    return GenerateReport(k=k, thetas=thetas, envs=envs, env_metrics=env_metrics, critic_trained=critic_trained)


def generate_from_run(config: RunConfig, k: int, n: int) -> GenerateReport:
    state = load_run_state(config)
    if state.model is None:
        raise ArtifactError(f"run {state.run_dir} has no generator in its checkpoint")
    seed = derive_seed(config.run.seed, f"generate/{k}")
    result = controllable_generate(state.model, state.critic, k, n, seed, config, critic_trained=state.epoch > 0)
    write_config_echo(state.run_dir, config)
    mazes.save_dataset(state.run_dir / generated_file(k), result.thetas)
    return result


def evaluate_run(config: RunConfig) -> List[EvalResult]:
    state = load_run_state(config)
    suite = mazes.test_suite(config.env.size, config.env.episode_cap, config.env.obs_window)
    results = evaluate(state.agent.policy, suite, config.run.eval_episodes)
    write_config_echo(state.run_dir, config)
    write_table(
        state.run_dir / EVAL_FILE,
        ("epoch", "eval_env", "solved_rate", "mean_return"),
        [(state.epoch, r.name, r.solved_rate, r.mean_return) for r in results],
    )
    return results


def omega_sweep(config: RunConfig, omegas: Sequence[float], progress: bool = False) -> Dict[float, float]:
    """Final mean solved rate of one ADD run per guidance weight."""
    results: Dict[float, float] = {}
    for omega in omegas:
        variant = with_overrides(config, **{"guidance.omega": float(omega), "run.method": "add"})
        rates = final_solved_rates(run(variant, progress))
        results[float(omega)] = float(np.mean(list(rates.values()))) if rates else float("nan")
        logger.info("omega %.3g: mean solved rate %.3f", omega, results[float(omega)])
    target = sweep_dir_for(config)
    write_config_echo(target, config)
    write_table(target / SWEEP_FILE, ("omega", "mean_solved_rate"), sorted(results.items()))
    return results
