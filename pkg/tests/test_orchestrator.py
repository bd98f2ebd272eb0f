import numpy as np
import pytest

from add_curriculum.config import ConfigError, parse_config_text, with_overrides
from add_curriculum.core.tensor import ContractError
from add_curriculum.services import orchestrator
from add_curriculum.services.artifacts import (
    CHECKPOINT_FILE,
    CONFIG_FILE,
    DATASET_FILE,
    EVAL_FILE,
    GENERATOR_FILE,
    SWEEP_FILE,
    ArtifactError,
    generated_file,
)
from add_curriculum.services.checkpoint import CheckpointError
from add_curriculum.services.mazes import load_dataset
from add_curriculum.services.regret_critic import buffer_push
from add_curriculum.services.summary import read_metrics, training_rows


def test_pretrain_writes_and_reuses_artifacts(tiny_config):
    model = orchestrator.pretrain(tiny_config)
    target = orchestrator.pretrain_dir_for(tiny_config)
    assert load_dataset(target / DATASET_FILE).shape == (32, 5, 5, 3)
    assert (target / "pretrain_loss.csv").read_text(encoding="utf-8").startswith("step,loss")
    assert len(model.loss_log) == 10
    loaded = orchestrator.load_or_pretrain(tiny_config)
    for name, value in model.params.items():
        np.testing.assert_array_equal(loaded.params[name].data, value.data)
    assert loaded.ema_params is not None
    assert parse_config_text((target / CONFIG_FILE).read_text(encoding="utf-8")) == tiny_config


def test_load_generator_needs_the_artifact(tiny_config):
    with pytest.raises(ArtifactError):
        orchestrator.load_generator(tiny_config)


def test_zero_epochs_pretrains_only(tiny_config):
    config = with_overrides(tiny_config, **{"run.epochs": 0})
    assert orchestrator.run(config) == []
    assert (orchestrator.pretrain_dir_for(config) / GENERATOR_FILE).is_file()
    assert not (orchestrator.run_dir_for(config) / CHECKPOINT_FILE).exists()


def test_full_run_writes_training_and_eval_rows(tiny_config):
    rows = orchestrator.run(tiny_config)
    assert [row["epoch"] for row in training_rows(rows)] == ["1", "2", "3"]
    evals = [row for row in rows if row["eval_env"]]
    assert len(evals) == 10
    assert {row["epoch"] for row in evals} == {"2", "3"}
    assert all(0.0 <= float(row["solved_rate"]) <= 1.0 for row in evals)
    assert all(row["method"] == "add" for row in rows)
    state = orchestrator.load_run_state(tiny_config)
    assert state.epoch == 3
    assert len(state.buffer) <= tiny_config.critic.buffer


def test_resumed_run_matches_uninterrupted_run(tiny_config, tmp_path):
    straight = orchestrator.run(tiny_config)
    config = with_overrides(tiny_config, **{"run.out": str(tmp_path / "resumed")})
    partial = orchestrator.run(config, stop_after=1)
    assert [row["epoch"] for row in partial] == ["1"]
    assert orchestrator.run(config) == straight


def test_finished_run_extends_to_more_epochs(tiny_config, tmp_path):
    straight = orchestrator.run(tiny_config)
    config = with_overrides(tiny_config, **{"run.out": str(tmp_path / "extended")})
    orchestrator.run(with_overrides(config, **{"run.epochs": 2}))
    assert orchestrator.load_run_state(config).epoch == 2
    assert orchestrator.run(config) == straight


def test_domain_randomisation_skips_pretraining(tiny_config):
    config = with_overrides(tiny_config, **{"run.method": "dr", "run.epochs": 2})
    rows = orchestrator.run(config)
    assert len(training_rows(rows)) == 2
    assert not orchestrator.pretrain_dir_for(config).exists()
    state = orchestrator.load_run_state(config)
    assert state.model is None
    assert state.generator.guidance_calls == 0


def test_unguided_run_makes_no_guidance_calls(tiny_config):
    config = with_overrides(tiny_config, **{"run.method": "unguided", "run.epochs": 1})
    state = orchestrator.init_state(config, orchestrator.run_dir_for(config), orchestrator.load_or_pretrain(config))
    orchestrator.train_epoch(state)
    assert state.epoch == 1
    assert state.generator.guidance_calls == 0


def test_guided_epoch_calls_guidance_once_per_step(tiny_config):
    state = orchestrator.init_state(
        tiny_config, orchestrator.run_dir_for(tiny_config), orchestrator.load_or_pretrain(tiny_config)
    )
    orchestrator.train_epoch(state)
    assert state.generator.guidance_calls >= tiny_config.diffusion.T_prime


@pytest.mark.parametrize(
    "error",
    [CheckpointError("disk full"), OSError("no space left"), ContractError("bad shape"), ConfigError("critic.bins", "bad")],
)
def test_epoch_errors_name_the_epoch(tiny_config, monkeypatch, error):
    config = with_overrides(tiny_config, **{"run.method": "dr"})
    state = orchestrator.init_state(config, orchestrator.run_dir_for(config), None)

    def failing_update(*args, **kwargs):
        raise error

    monkeypatch.setattr(orchestrator, "ppo_update", failing_update)
    with pytest.raises(type(error), match="epoch 1") as info:
        orchestrator.train_epoch(state)
    assert info.value.__cause__ is error
    assert state.epoch == 0


def test_checkpoint_round_trip(tiny_config, rng):
    config = with_overrides(tiny_config, **{"run.method": "dr"})
    state = orchestrator.init_state(config, orchestrator.run_dir_for(config), None)
    buffer_push(state.buffer, rng.uniform(size=75), [0.4, 0.9], state.critic.support)
    state.epoch = 6
    restored = orchestrator.restore_state(config, state.run_dir, orchestrator.state_to_checkpoint(state), None)
    assert restored.epoch == 6
    for name, value in state.critic.params.items():
        np.testing.assert_array_equal(restored.critic.params[name].data, value.data)
    np.testing.assert_array_equal(restored.buffer.entries[0][1], state.buffer.entries[0][1])
    assert restored.agent.opt.step == state.agent.opt.step


def test_checkpoint_from_another_config_is_rejected(tiny_config):
    config = with_overrides(tiny_config, **{"run.method": "dr"})
    state = orchestrator.init_state(config, orchestrator.run_dir_for(config), None)
    other = with_overrides(config, **{"run.seed": 5})
    with pytest.raises(CheckpointError):
        orchestrator.restore_state(other, state.run_dir, orchestrator.state_to_checkpoint(state), None)


def test_closed_form_lambda():
    np.testing.assert_allclose(orchestrator.closed_form_lambda([0.2, 0.2], 5.0), [0.5, 0.5])
    np.testing.assert_allclose(orchestrator.closed_form_lambda([3.0, 0.1, 9.0], 0.0), 1 / 3)
    np.testing.assert_allclose(orchestrator.closed_form_lambda([1.0, 0.0], np.log(3.0)), [0.75, 0.25])
    big = orchestrator.closed_form_lambda([1000.0, 0.0], 10.0)
    assert np.all(np.isfinite(big)) and big[0] == pytest.approx(1.0)
    with pytest.raises(ContractError):
        orchestrator.closed_form_lambda([], 1.0)


def test_curriculum_trend():
    rows = [{"epoch": str(e), "eval_env": "", "mean_shortest_path": str(p)} for e, p in [(1, 2.0), (2, 3.5), (3, 6.0)]]
    rho, _ = orchestrator.curriculum_trend(rows)
    assert rho == pytest.approx(1.0)
    assert orchestrator.curriculum_trend(rows[:2]) is None
    flat = [dict(row, mean_shortest_path="4.0") for row in rows]
    assert orchestrator.curriculum_trend(flat) is None


def test_controllable_generation(tiny_config, rng):
    model = orchestrator.load_or_pretrain(tiny_config)
    state = orchestrator.init_state(tiny_config, orchestrator.run_dir_for(tiny_config), model)
    report = orchestrator.controllable_generate(model, state.critic, 2, 4, 11, tiny_config, critic_trained=False)
    assert report.thetas.shape == (4, 5, 5, 3)
    assert len(report.envs) == len(report.env_metrics) == 4
    assert 0.0 <= report.solvable_frac <= 1.0
    empty = orchestrator.controllable_generate(model, state.critic, 1, 0, 11, tiny_config)
    assert empty.envs == []
    assert empty.mean_blocks is None and empty.solvable_frac is None
    with pytest.raises(ContractError):
        orchestrator.controllable_generate(model, state.critic, tiny_config.critic.bins + 1, 1, 0, tiny_config)


def test_eval_and_generate_need_a_checkpoint(tiny_config):
    with pytest.raises(ArtifactError):
        orchestrator.evaluate_run(tiny_config)
    with pytest.raises(ArtifactError):
        orchestrator.generate_from_run(tiny_config, 1, 2)


def test_eval_and_generate_after_training(tiny_config):
    orchestrator.run(with_overrides(tiny_config, **{"run.epochs": 1}))
    config = with_overrides(tiny_config, **{"run.epochs": 1})
    results = orchestrator.evaluate_run(config)
    assert [r.name for r in results] == ["empty", "four_rooms", "labyrinth", "s_corridor", "dense"]
    report = orchestrator.generate_from_run(config, 1, 3)
    assert report.critic_trained
    assert len(report.envs) == 3
    run_dir = orchestrator.run_dir_for(config)
    assert load_dataset(run_dir / generated_file(1)).shape == (3, 5, 5, 3)
    rows = read_metrics(run_dir / EVAL_FILE)
    assert [row["eval_env"] for row in rows] == [r.name for r in results]
    assert {row["epoch"] for row in rows} == {"1"}
    assert (run_dir / CONFIG_FILE).is_file()


@pytest.mark.slow
def test_omega_sweep(tiny_config):
    config = with_overrides(tiny_config, **{"run.epochs": 2, "run.eval_every": 1})
    results = orchestrator.omega_sweep(config, [0.0, 1.0])
    assert sorted(results) == [0.0, 1.0]
    assert all(0.0 <= rate <= 1.0 for rate in results.values())
    target = orchestrator.sweep_dir_for(config)
    assert (target / CONFIG_FILE).is_file()
    assert [row["omega"] for row in read_metrics(target / SWEEP_FILE)] == ["0.000000", "1.000000"]
