import numpy as np
import pytest

from add_curriculum.core.tensor import ContractError, Tensor
from add_curriculum.services.mazes import EAST, MazeEnv, observation_width
from add_curriculum.services.ppo_agent import (
    PpoHyper,
    RolloutBatch,
    collect,
    evaluate,
    gae,
    make_agent,
    ppo_loss,
    ppo_update,
)

OBS = observation_width(5)


def _env(goal=(0, 1), max_steps=4, walls=None, name="near"):
    walls = np.zeros((5, 5), bool) if walls is None else walls
    return MazeEnv(walls=walls, start=(0, 0), start_heading=EAST, goal=goal, max_steps=max_steps, name=name)


def _forward_only(agent):
    for key, value in agent.policy.params.items():
        agent.policy.params[key] = Tensor(np.zeros(value.shape))
    agent.policy.params["b1"] = Tensor(np.array([0.0, 0.0, 5.0]))


def _batch(rewards, dones, values, last_values):
    rewards = np.asarray(rewards, np.float32)
    steps, envs = rewards.shape
    return RolloutBatch(
        obs=np.zeros((steps, envs, 1), np.float32),
        actions=np.zeros((steps, envs), np.int64),
        log_probs=np.zeros((steps, envs), np.float32),
        rewards=rewards,
        dones=np.asarray(dones, np.float32),
        values=np.asarray(values, np.float32),
        last_values=np.asarray(last_values, np.float32),
    )


def test_hyper_validation():
    with pytest.raises(ContractError):
        PpoHyper(gamma=0.0)
    with pytest.raises(ContractError):
        PpoHyper(gae_lambda=1.5)
    with pytest.raises(ContractError):
        PpoHyper(clip=0.0)


def test_fresh_policy_is_a_distribution(rng):
    agent = make_agent(OBS, (8,), "tanh", PpoHyper(), rng)
    obs = np.stack([_env().reset(), _env(goal=(3, 3)).reset()])
    np.testing.assert_allclose(np.exp(agent.policy.log_probs(obs)).sum(axis=1), 1.0, atol=1e-6)
    assert agent.value.predict(obs).shape == (2,)
    assert sorted(agent.opt.m) == sorted(agent.merged())


def test_collect_shapes_and_episodes(rng):
    agent = make_agent(OBS, (8,), "tanh", PpoHyper(), rng)
    envs = [_env(), _env(goal=(4, 4), max_steps=3)]
    for env in envs:
        env.reset()
    batch = collect(envs, agent.policy, agent.value, 12, rng)
    assert batch.actions.shape == (12, 2)
    assert batch.obs.shape == (12, 2, OBS)
    assert batch.size == 24
    assert len(batch.episodes) == int(batch.dones.sum())
    # the far goal needs more than three steps, so that env only ever times out
    grouped = batch.returns_by_env(2)
    assert len(grouped[1]) == 4
    assert all(value == 0.0 for value in grouped[1])
    assert all(0.0 <= value < 1.0 for value in grouped[0])


def test_collect_with_no_steps(rng):
    agent = make_agent(OBS, (8,), "tanh", PpoHyper(), rng)
    env = _env()
    env.reset()
    assert collect([env], agent.policy, agent.value, 0, rng).size == 0


def test_gae_terminal_step():
    adv, targets = gae(_batch([[1.0]], [[1.0]], [[0.0]], [5.0]), 0.9, 0.95, normalize=False)
    np.testing.assert_allclose(adv, [[1.0]])
    np.testing.assert_allclose(targets, [[1.0]])


def test_gae_bootstraps_through_live_steps():
    batch = _batch([[0.0], [1.0]], [[0.0], [0.0]], [[0.0], [0.0]], [0.0])
    adv, targets = gae(batch, 0.5, 1.0, normalize=False)
    np.testing.assert_allclose(adv[:, 0], [0.5, 1.0])
    np.testing.assert_allclose(targets[:, 0], [0.5, 1.0])
    normed, _ = gae(batch, 0.5, 1.0)
    assert normed.mean() == pytest.approx(0.0, abs=1e-6)


def test_ppo_loss_at_the_behaviour_policy(rng):
    hyper = PpoHyper()
    agent = make_agent(OBS, (8,), "tanh", hyper, rng)
    obs = np.stack([_env().reset(), _env(goal=(2, 2)).reset()])
    actions = np.array([0, 2])
    old = agent.policy.log_probs(obs)[np.arange(2), actions].astype(np.float32)
    advantages = np.array([1.0, -3.0], np.float32)
    loss, stats = ppo_loss(agent, agent.merged(), obs, actions, old, advantages, np.zeros(2, np.float32), hyper)
    assert stats["policy_loss"] == pytest.approx(1.0, abs=1e-5)
    assert stats["approx_kl"] == pytest.approx(0.0, abs=1e-6)
    assert stats["clip_frac"] == 0.0
    assert stats["entropy"] > 0
    assert loss.item() == pytest.approx(stats["policy_loss"] + 0.5 * stats["value_loss"], abs=1e-5)


def test_ppo_update_moves_parameters(rng):
    hyper = PpoHyper(epochs=2, minibatches=2, lr=1e-2)
    agent = make_agent(OBS, (8,), "tanh", hyper, rng)
    envs = [_env(), _env(goal=(2, 3), max_steps=8)]
    for env in envs:
        env.reset()
    batch = collect(envs, agent.policy, agent.value, 16, rng)
    before = agent.value.params["b1"].data.copy()
    stats = ppo_update(agent, batch, hyper, rng)
    assert {"loss", "policy_loss", "value_loss", "entropy", "grad_norm"} <= set(stats)
    assert agent.opt.step == 4
    assert not np.array_equal(agent.value.params["b1"].data, before)


def test_ppo_update_rejects_empty_batch(rng):
    agent = make_agent(OBS, (8,), "tanh", PpoHyper(), rng)
    with pytest.raises(ContractError):
        ppo_update(agent, _batch(np.zeros((0, 1)), np.zeros((0, 1)), np.zeros((0, 1)), [0.0]), PpoHyper(), rng)


def test_greedy_evaluation(rng):
    agent = make_agent(OBS, (8,), "relu", PpoHyper(), rng)
    _forward_only(agent)
    walls = np.zeros((5, 5), bool)
    walls[0, 1] = True
    results = evaluate(agent.policy, [_env(max_steps=4), _env(goal=(1, 0), walls=walls, name="blocked")], episodes=2)
    assert [r.name for r in results] == ["near", "blocked"]
    assert results[0].solved_rate == 1.0
    assert results[0].mean_return == pytest.approx(0.75)
    assert results[1].solved_rate == 0.0
    assert results[1].mean_return == 0.0
    with pytest.raises(ContractError):
        evaluate(agent.policy, [_env()], episodes=0)
