import numpy as np
import pytest

from add_curriculum.core.tensor import ContractError
from add_curriculum.services import mazes
from add_curriculum.services.artifacts import ArtifactError
from add_curriculum.services.mazes import (
    EAST,
    FORWARD,
    LEFT,
    NORTH,
    RIGHT,
    MazeEnv,
    decode,
    encode,
    load_dataset,
    metrics,
    observation_width,
    param_dim,
    random_param,
    save_dataset,
    shortest_path,
)


def _empty(size=5, start=(0, 0), heading=EAST, goal=(0, 1), max_steps=10):
    return MazeEnv(walls=np.zeros((size, size), bool), start=start, start_heading=heading, goal=goal, max_steps=max_steps)


def test_decode_all_zero_parameters():
    env = decode(np.zeros((5, 5, 3)), max_steps=20)
    assert env.start == (0, 0)
    assert env.goal == (0, 1)
    assert env.start_heading == EAST
    assert not env.walls.any()


def test_decode_accepts_flat_input_and_clears_agent_and_goal_walls():
    theta = np.ones((5, 5, 3), np.float32)
    theta[..., 1:] = 0.0
    theta[2, 2, 1] = 1.0
    theta[4, 4, 2] = 1.0
    env = decode(theta.reshape(-1), max_steps=20)
    assert env.size == 5
    assert not env.walls[2, 2] and not env.walls[4, 4]
    assert env.walls.sum() == 23


def test_decode_reads_heading_from_runner_up():
    theta = np.zeros((5, 5, 3), np.float32)
    theta[2, 2, 1] = 1.0
    theta[1, 2, 1] = 0.5
    theta[0, 0, 2] = 1.0
    assert decode(theta, 20).start_heading == NORTH
    theta[1, 2, 1] = 0.1
    assert decode(theta, 20).start_heading == EAST


def test_encode_decode_is_a_fixed_point(rng):
    for _ in range(50):
        env = decode(rng.uniform(size=(6, 6, 3)), max_steps=30)
        again = decode(encode(env), max_steps=30)
        np.testing.assert_array_equal(again.walls, env.walls)
        assert (again.start, again.goal, again.start_heading) == (env.start, env.goal, env.start_heading)


def test_random_param_respects_budget_and_seed():
    for seed in range(30):
        theta = random_param(5, 6, np.random.default_rng(seed))
        assert theta.shape == (5, 5, 3)
        assert theta[..., 0].sum() <= 6
        env = decode(theta, 20)
        assert env.start != env.goal
    first = random_param(7, 10, np.random.default_rng(3))
    np.testing.assert_array_equal(first, random_param(7, 10, np.random.default_rng(3)))
    with pytest.raises(ContractError):
        random_param(3, 8, np.random.default_rng(0))


def test_reaching_goal_pays_time_discounted_reward():
    env = _empty(max_steps=10)
    env.reset()
    _, reward, done = env.step(FORWARD)
    assert done
    assert reward == pytest.approx(1.0 - 1 / 10)
    with pytest.raises(ContractError):
        env.step(FORWARD)


def test_timeout_and_border_collision():
    env = _empty(heading=NORTH, goal=(4, 4), max_steps=3)
    env.reset()
    _, reward, done = env.step(FORWARD)
    assert env.pos == (0, 0) and not done and reward == 0.0
    env.step(LEFT)
    assert env.heading == 3
    _, reward, done = env.step(RIGHT)
    assert done and reward == 0.0


def test_walls_block_movement():
    walls = np.zeros((5, 5), bool)
    walls[0, 1] = True
    env = MazeEnv(walls=walls, start=(0, 0), start_heading=EAST, goal=(4, 4), max_steps=10)
    env.reset()
    env.step(FORWARD)
    assert env.pos == (0, 0)


def test_observation_shape_and_heading():
    env = _empty()
    obs = env.reset()
    assert obs.shape == (observation_width(5),)
    np.testing.assert_array_equal(obs[-4:], [0, 1, 0, 0])
    # every window cell is exactly one of wall, empty, goal
    np.testing.assert_array_equal(obs[:-4].reshape(-1, 3).sum(axis=1), 1)


def test_env_validation():
    with pytest.raises(ContractError):
        _empty(goal=(0, 0))
    with pytest.raises(ContractError):
        _empty(goal=(5, 5))
    with pytest.raises(ContractError):
        _empty(max_steps=0)


def test_shortest_path():
    assert shortest_path(np.zeros((5, 5), bool), (0, 0), (4, 4)) == 8
    walls = np.zeros((5, 5), bool)
    walls[0, 1] = walls[1, 0] = True
    assert shortest_path(walls, (4, 4), (0, 0)) is None
    assert shortest_path(walls, (2, 2), (2, 2)) == 0


def test_metrics():
    walls = np.zeros((5, 5), bool)
    walls[1, :4] = True
    env = MazeEnv(walls=walls, start=(0, 0), start_heading=EAST, goal=(2, 0), max_steps=50)
    m = metrics(env)
    assert m.block_count == 4
    assert m.solvable
    assert m.shortest_path == 10


@pytest.mark.parametrize("size", [5, 7, 13])
def test_suite_is_solvable(size):
    envs = mazes.test_suite(size, max_steps=4 * size * size)
    assert [env.name for env in envs] == ["empty", "four_rooms", "labyrinth", "s_corridor", "dense"]
    for env in envs:
        assert metrics(env).solvable
    assert metrics(envs[1]).shortest_path >= 4
    with pytest.raises(ContractError):
        mazes.test_suite(4, 20)


def test_dimensions():
    assert param_dim(13) == 507
    assert observation_width(5) == 79


def test_dataset_round_trip(tmp_path, rng):
    thetas = np.stack([random_param(5, 4, rng) for _ in range(3)])
    path = tmp_path / "data" / "dataset.bin"
    save_dataset(path, thetas)
    np.testing.assert_array_equal(load_dataset(path), thetas)


def test_dataset_errors(tmp_path):
    with pytest.raises(ArtifactError):
        load_dataset(tmp_path / "missing.bin")
    path = tmp_path / "dataset.bin"
    save_dataset(path, np.zeros((2, 5, 5, 3)))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(ArtifactError):
        load_dataset(path)
    with pytest.raises(ContractError):
        save_dataset(path, np.zeros((2, 5, 4, 3)))
