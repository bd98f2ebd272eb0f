import hashlib
import logging
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

from dotenv import load_dotenv

ROOT = Path(__file__).resolve().parent
load_dotenv(ROOT.parent / ".env")

LOG_LEVELS = {
    "error": logging.ERROR,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}

METHODS = ("add", "dr", "unguided")


class ConfigError(ValueError):
    """Raised for unknown keys, unparsable values and invalid combinations."""

    def __init__(self, key: str, message: str) -> None:
        super().__init__(f"{key}: {message}")
        self.key = key
        self.message = message


def get_log_level() -> str:
    """Returns the verbosity named by ADD_LOG: 'error', 'info' or 'debug'."""
    value = os.getenv("ADD_LOG", "info").strip().lower()
    return value if value in LOG_LEVELS else "info"


def get_default_out_dir() -> str:
    return os.getenv("ADD_OUT", "runs").strip() or "runs"


def configure_logging(level: Optional[str] = None) -> None:
    name = level or get_log_level()
    logging.basicConfig(
        level=LOG_LEVELS.get(name, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


@dataclass
class RunSection:
    seed: int = 0
    method: str = "add"
    epochs: int = 200
    batch_envs: int = 8
    eval_every: int = 25
    eval_episodes: int = 1
    checkpoint_every: int = 1
    workers: int = 1
    out: str = field(default_factory=get_default_out_dir)


@dataclass
class EnvSection:
    size: int = 7
    block_budget: int = 20
    # 0 means 8 * size
    max_steps: int = 0
    obs_window: int = 5

    @property
    def episode_cap(self) -> int:
        return self.max_steps or 8 * self.size


@dataclass
class DiffusionSection:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    T_prime: int = 50
    hidden: Tuple[int, ...] = (256, 256, 256)
    activation: str = "relu"
    time_embedding: int = 32
    lr: float = 5e-4
    weight_decay: float = 0.05
    batch_size: int = 128
    train_steps: int = 20000
    dataset_size: int = 10000
    ema_rate: float = 0.999


@dataclass
class CriticSection:
    bins: int = 100
    v_min: float = 0.0
    v_max: float = 1.0
    hidden: Tuple[int, ...] = (128, 128)
    activation: str = "relu"
    time_embedding: int = 32
    lr: float = 3e-4
    weight_decay: float = 0.01
    buffer: int = 1600
    minibatches: int = 8
    epochs: int = 5


@dataclass
class GuidanceSection:
    omega: float = 5.0
    alpha: float = 0.15


@dataclass
class PpoSection:
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
    hidden: Tuple[int, ...] = (64, 64)
    activation: str = "tanh"


@dataclass
class VerifySection:
    samples: int = 10000
    sample_steps: int = 200
    gaussian_train_steps: int = 20000
    tv_bins: int = 50
    tv_samples: int = 100000
    tv_train_steps: int = 5000
    gradcheck_instances: int = 20


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    env: EnvSection = field(default_factory=EnvSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    critic: CriticSection = field(default_factory=CriticSection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    ppo: PpoSection = field(default_factory=PpoSection)
    verify: VerifySection = field(default_factory=VerifySection)


SECTIONS = ("run", "env", "diffusion", "critic", "guidance", "ppo", "verify")
HASH_EXCLUDED = {"run.out", "run.workers", "run.epochs"}


def _defaults() -> Dict[str, Any]:
    config = RunConfig()
    table: Dict[str, Any] = {}
    for section in SECTIONS:
        for item in fields(getattr(config, section)):
            table[f"{section}.{item.name}"] = getattr(getattr(config, section), item.name)
    return table


def _parse_value(key: str, raw: str, default: Any) -> Any:
    text = raw.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in {"true", "1", "yes"}:
                return True
            if text.lower() in {"false", "0", "no"}:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigError(key, f"cannot parse {raw!r}") from exc
    return text


def _format_value(value: Any) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _read_lines(lines: Iterable[str], source: str) -> List[Tuple[str, str]]:
    pairs: List[Tuple[str, str]] = []
    for number, line in enumerate(lines, start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{number}", "expected 'key = value'")
        key, value = stripped.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def parse_config(path: Optional[Path] = None, overrides: Sequence[str] = ()) -> RunConfig:
    """defaults -> file -> ``key=value`` overrides, then validation."""
    text = Path(path).read_text(encoding="utf-8") if path is not None else ""
    return parse_config_text(text, overrides, source=str(path or "<defaults>"))


def parse_config_text(text: str, overrides: Sequence[str] = (), source: str = "<text>") -> RunConfig:
    defaults = _defaults()
    values = dict(defaults)
    pairs: List[Tuple[str, str]] = _read_lines(text.splitlines(), source)
    pairs.extend(_read_lines(overrides, "--set"))
    for key, raw in pairs:
        if key not in defaults:
            raise ConfigError(key, "unknown key")
        values[key] = _parse_value(key, raw, defaults[key])
    config = _build(values)
    validate_config(config)
    return config


def _build(values: Dict[str, Any]) -> RunConfig:
    config = RunConfig()
    for section in SECTIONS:
        updates = {
            key.split(".", 1)[1]: value for key, value in values.items() if key.startswith(section + ".")
        }
        setattr(config, section, replace(getattr(config, section), **updates))
    return config


def with_overrides(config: RunConfig, **values: Any) -> RunConfig:
    """Return a copy with dotted-key overrides, e.g. ``with_overrides(c, **{"run.seed": 3})``."""
    table = dict(config_items(config))
    for key, value in values.items():
        if key not in table:
            raise ConfigError(key, "unknown key")
        table[key] = value
    updated = _build(table)
    validate_config(updated)
    return updated


def config_items(config: RunConfig) -> List[Tuple[str, Any]]:
    items: List[Tuple[str, Any]] = []
    for section in SECTIONS:
        block = getattr(config, section)
        for item in fields(block):
            items.append((f"{section}.{item.name}", getattr(block, item.name)))
    return items


def config_to_text(config: RunConfig) -> str:
    return "".join(f"{key} = {_format_value(value)}\n" for key, value in config_items(config))


def config_hash(config: RunConfig) -> str:
    text = "".join(
        f"{key} = {_format_value(value)}\n" for key, value in config_items(config) if key not in HASH_EXCLUDED
    )
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def _require(condition: bool, key: str, message: str) -> None:
    if not condition:
        raise ConfigError(key, message)


def validate_config(config: RunConfig) -> None:
    run, env, diff = config.run, config.env, config.diffusion
    critic, guide, ppo, verify = config.critic, config.guidance, config.ppo, config.verify

    _require(run.seed >= 0, "run.seed", "must be non-negative")
    _require(run.method in METHODS, "run.method", f"must be one of {', '.join(METHODS)}")
    _require(run.epochs >= 0, "run.epochs", "must be non-negative")
    _require(run.batch_envs >= 1, "run.batch_envs", "must be at least 1")
    _require(run.eval_every >= 0, "run.eval_every", "must be non-negative")
    _require(run.eval_episodes >= 1, "run.eval_episodes", "must be at least 1")
    _require(run.checkpoint_every >= 1, "run.checkpoint_every", "must be at least 1")
    _require(run.workers >= 1, "run.workers", "must be at least 1")

    _require(env.size >= 5, "env.size", "must be at least 5")
    _require(0 <= env.block_budget <= env.size**2 - 2, "env.block_budget", "must lie in [0, size^2 - 2]")
    _require(env.max_steps >= 0, "env.max_steps", "must be non-negative")
    _require(env.obs_window >= 3 and env.obs_window % 2 == 1, "env.obs_window", "must be odd and >= 3")

    _require(diff.T >= 2, "diffusion.T", "must be at least 2")
    _require(0 < diff.beta_start <= diff.beta_end < 1, "diffusion.beta_start", "need 0 < start <= end < 1")
    _require(1 <= diff.T_prime <= diff.T, "diffusion.T_prime", "must lie in [1, T]")
    _require(diff.T % diff.T_prime == 0, "diffusion.T_prime", "must divide T")
    _require(len(diff.hidden) >= 1 and min(diff.hidden) > 0, "diffusion.hidden", "need positive widths")
    _require(diff.activation in {"relu", "tanh"}, "diffusion.activation", "must be relu or tanh")
    _require(diff.time_embedding >= 0 and diff.time_embedding % 2 == 0, "diffusion.time_embedding", "must be even")
    _require(diff.lr > 0, "diffusion.lr", "must be positive")
    _require(diff.weight_decay >= 0, "diffusion.weight_decay", "must be non-negative")
    _require(diff.batch_size >= 1, "diffusion.batch_size", "must be at least 1")
    _require(diff.train_steps >= 0, "diffusion.train_steps", "must be non-negative")
    _require(diff.dataset_size >= 1, "diffusion.dataset_size", "must be at least 1")
    _require(0 <= diff.ema_rate < 1, "diffusion.ema_rate", "must lie in [0, 1)")

    _require(critic.bins >= 2, "critic.bins", "must be at least 2")
    _require(critic.v_min < critic.v_max, "critic.v_min", "must be below critic.v_max")
    _require(len(critic.hidden) >= 1 and min(critic.hidden) > 0, "critic.hidden", "need positive widths")
    _require(critic.activation in {"relu", "tanh"}, "critic.activation", "must be relu or tanh")
    _require(critic.time_embedding >= 0 and critic.time_embedding % 2 == 0, "critic.time_embedding", "must be even")
    _require(critic.lr > 0, "critic.lr", "must be positive")
    _require(critic.buffer >= 1, "critic.buffer", "must be at least 1")
    _require(critic.minibatches >= 1, "critic.minibatches", "must be at least 1")
    _require(critic.epochs >= 0, "critic.epochs", "must be non-negative")

    _require(guide.omega >= 0, "guidance.omega", "must be non-negative")
    _require(0 < guide.alpha <= 1, "guidance.alpha", "must lie in (0, 1]")

    _require(0 < ppo.gamma <= 1, "ppo.gamma", "must lie in (0, 1]")
    _require(0 <= ppo.gae_lambda <= 1, "ppo.gae_lambda", "must lie in [0, 1]")
    _require(ppo.rollout >= 1, "ppo.rollout", "must be at least 1")
    _require(ppo.epochs >= 0, "ppo.epochs", "must be non-negative")
    _require(ppo.minibatches >= 1, "ppo.minibatches", "must be at least 1")
    _require(ppo.clip > 0, "ppo.clip", "must be positive")
    _require(ppo.lr > 0, "ppo.lr", "must be positive")
    _require(len(ppo.hidden) >= 1 and min(ppo.hidden) > 0, "ppo.hidden", "need positive widths")
    _require(ppo.activation in {"relu", "tanh"}, "ppo.activation", "must be relu or tanh")

    _require(verify.samples >= 1, "verify.samples", "must be at least 1")
    _require(1 <= verify.sample_steps <= diff.T and diff.T % verify.sample_steps == 0,
             "verify.sample_steps", "must divide diffusion.T")
    _require(verify.tv_bins >= 10, "verify.tv_bins", "must be at least 10")
    _require(verify.tv_samples >= 1, "verify.tv_samples", "must be at least 1")
    _require(verify.gradcheck_instances >= 1, "verify.gradcheck_instances", "must be at least 1")


def pretrain_hash(config: RunConfig) -> str:
    """Digest of everything the pretrained generator depends on: env, diffusion and the seed."""
    text = "".join(
        f"{key} = {_format_value(value)}\n"
        for key, value in config_items(config)
        if key.split(".", 1)[0] in ("env", "diffusion") or key == "run.seed"
    )
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]
