import logging

import pytest

from add_curriculum import cli


def test_flags_override_set_values():
    args = cli.build_parser().parse_args(["train", "--set", "run.seed=1", "--seed", "4", "--method", "dr"])
    assert cli.overrides_from(args) == ["run.seed=1", "run.seed=4", "run.method=dr"]


def test_generate_defaults():
    args = cli.build_parser().parse_args(["generate"])
    assert (args.difficulty, args.count, args.show) == (1, 100, 3)


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "--seed", "abc"],
        ["train", "--method", "paired"],
        ["generate", "--count", "x"],
        ["train", "--no-such-flag"],
        ["launch"],
        [],
    ],
)
def test_usage_errors_exit_with_contract_code(argv):
    assert cli.main(argv) == cli.EXIT_CONTRACT


def test_invalid_config_exits_with_contract_code(tmp_path):
    assert cli.main(["train", "--set", "diffusion.T=-5", "--out", str(tmp_path)]) == cli.EXIT_CONTRACT


def test_bad_omega_list(tmp_path):
    assert cli.main(["ablate", "--omegas", "1,x", "--out", str(tmp_path)]) == cli.EXIT_CONTRACT


def test_eval_without_checkpoint_is_an_io_error(tmp_path):
    assert cli.main(["eval", "--out", str(tmp_path)]) == cli.EXIT_IO


def test_effective_config_is_logged(tmp_path, monkeypatch, caplog):
    monkeypatch.setenv("ADD_LOG", "info")
    with caplog.at_level(logging.INFO):
        cli.main(["eval", "--set", "guidance.omega=2.5", "--out", str(tmp_path)])
    assert "effective config" in caplog.text
    assert "guidance.omega = 2.5" in caplog.text


def test_train_then_eval(tiny_cli_args, capsys):
    args = tiny_cli_args
    assert cli.main(["train", *args]) == cli.EXIT_OK
    assert "run directory:" in capsys.readouterr().out
    assert cli.main(["eval", *args]) == cli.EXIT_OK
    assert "mean solved rate" in capsys.readouterr().out
    assert cli.main(["generate", "--count", "2", "--show", "1", *args]) == cli.EXIT_OK
    assert "difficulty k=1, 2 environments" in capsys.readouterr().out
    assert cli.main(["generate", "--difficulty", "99", *args]) == cli.EXIT_CONTRACT
