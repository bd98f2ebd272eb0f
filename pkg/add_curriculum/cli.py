"""Command-line entry point: ``add-curriculum <subcommand> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys
from typing import List, NoReturn, Optional, Sequence

from add_curriculum.config import (
    METHODS,
    ConfigError,
    RunConfig,
    config_hash,
    config_to_text,
    configure_logging,
    get_log_level,
    parse_config,
)
from add_curriculum.core.tensor import ContractError
from add_curriculum.services import orchestrator
from add_curriculum.services.artifacts import ArtifactError
from add_curriculum.services.checkpoint import CheckpointError
from add_curriculum.services.verification import VerificationError, run_verify
from add_curriculum.ui import report

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONTRACT = 1
EXIT_VERIFICATION = 2
EXIT_IO = 3

SUBCOMMANDS = ("pretrain", "train", "eval", "generate", "verify", "ablate")


class CommandParser(argparse.ArgumentParser):
    """Usage errors raise ConfigError instead of exiting with status 2."""

    def error(self, message: str) -> NoReturn:
        raise ConfigError("arguments", message)


def build_parser() -> argparse.ArgumentParser:
    common = CommandParser(add_help=False)
    common.add_argument("--config", help="configuration file of 'key = value' lines")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, help="master seed (run.seed)")
    common.add_argument("--workers", type=int, help="sampler worker threads (run.workers)")
    common.add_argument("--out", help="output directory (run.out)")
    common.add_argument("--method", choices=METHODS, help="environment generator (run.method)")

    parser = CommandParser(prog="add-curriculum", description="Regret-guided environment design.")
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("pretrain", parents=[common], help="build the random-maze dataset and train the generator")
    commands.add_parser("train", parents=[common], help="run the curriculum training loop")
    commands.add_parser("eval", parents=[common], help="evaluate the latest checkpoint on the test suite")
    generate = commands.add_parser("generate", parents=[common], help="difficulty-controlled generation")
    generate.add_argument("--difficulty", type=int, default=1, help="difficulty level k in [1, critic.bins]")
    generate.add_argument("--count", type=int, default=100, help="number of environments")
    generate.add_argument("--show", type=int, default=3, help="mazes to print")
    verify = commands.add_parser("verify", parents=[common], help="run the verification oracles")
    verify.add_argument("--skip-learned", action="store_true", help="skip checks that train a generator first")
    ablate = commands.add_parser("ablate", parents=[common], help="final solved rate across guidance weights")
    ablate.add_argument("--omegas", default="0,1,2,5", help="comma-separated guidance weights")
    return parser


def overrides_from(args: argparse.Namespace) -> List[str]:
    """``--set`` values first, then the dedicated flags, which win."""
    overrides = list(args.set)
    for flag, key in (("seed", "run.seed"), ("workers", "run.workers"), ("out", "run.out"), ("method", "run.method")):
        value = getattr(args, flag)
        if value is not None:
            overrides.append(f"{key}={value}")
    return overrides


def _parse_omegas(text: str) -> List[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigError("--omegas", f"cannot parse {text!r}") from exc


def dispatch(command: str, config: RunConfig, args: argparse.Namespace, progress: bool) -> int:
    if command == "pretrain":
        orchestrator.pretrain(config, progress)
        print(f"pretrained generator written to {orchestrator.pretrain_dir_for(config)}")
    elif command == "train":
        rows = orchestrator.run(config, progress)
        print(report.format_train(rows, orchestrator.curriculum_trend(rows)))
        print(f"run directory: {orchestrator.run_dir_for(config)}")
    elif command == "eval":
        print(report.format_eval(orchestrator.evaluate_run(config)))
    elif command == "generate":
        result = orchestrator.generate_from_run(config, args.difficulty, args.count)
        print(report.format_generate(result, args.show))
    elif command == "verify":
        try:
            outcome = run_verify(config, progress, learned=not args.skip_learned)
        except VerificationError as exc:
            failed = exc.stats.get("report")
            if failed is not None:
                print(report.format_verify(failed.checks))
            raise
        print(report.format_verify(outcome.checks))
    elif command == "ablate":
        print(report.format_sweep(orchestrator.omega_sweep(config, _parse_omegas(args.omegas), progress)))
    else:
        raise ConfigError("command", f"unknown subcommand {command!r}")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    level = get_log_level()
    configure_logging(level)
    progress = level != "error"
    try:
        args = build_parser().parse_args(argv)
        config = parse_config(args.config, overrides_from(args))
        logger.info("config %s (seed %d, method %s)", config_hash(config), config.run.seed, config.run.method)
        logger.info("effective config:\n%s", config_to_text(config).rstrip())
        return dispatch(args.command, config, args, progress)
    except VerificationError as exc:
        logger.error("verification failed: %s", exc)
        return EXIT_VERIFICATION
    except (ArtifactError, CheckpointError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_IO
    except (ConfigError, ContractError, ValueError, RuntimeError) as exc:
        logger.error("%s", exc)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
