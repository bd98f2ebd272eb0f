import numpy as np
import pytest

from add_curriculum.core import tensor as T
from add_curriculum.core.gradcheck import finite_diff_check
from add_curriculum.core.nn import MlpSpec, init_params
from add_curriculum.core.optim import make_opt_state
from add_curriculum.core.tensor import ContractError, Tensor, precision
from add_curriculum.services import regret_critic
from add_curriculum.services.diffusion import build_schedule
from add_curriculum.services.regret_critic import (
    CriticBuffer,
    CriticModel,
    GuidanceConfig,
    ReturnDistribution,
    buffer_push,
    buffer_sample,
    critic_update,
    cvar,
    difficulty_logprob,
    difficulty_logprob_grad,
    estimate_regret,
    logits_to_distribution,
    make_critic,
    make_support,
    project_returns,
    regret_estimate,
    regret_input_gradient,
)

SCHEDULE = build_schedule(50, 1e-4, 0.05)


def _dist(z_count, probs):
    return ReturnDistribution(support=make_support(z_count, 0.0, 1.0), p=Tensor(np.asarray(probs, dtype=np.float64)))


def _critic(rng, bins=5, dim=4, activation="tanh"):
    spec = MlpSpec(widths=(dim, 8, bins), activation=activation, time_embedding=4)
    return CriticModel(spec=spec, params=init_params(spec, rng), support=make_support(bins, 0.0, 1.0), schedule=SCHEDULE)


def test_support_points_and_spacing():
    four = make_support(4, 0.0, 1.0)
    np.testing.assert_allclose(four.z, [0.0, 1 / 3, 2 / 3, 1.0])
    assert four.delta == pytest.approx(0.25)
    two = make_support(2, 0.0, 1.0)
    np.testing.assert_allclose(two.z, [0.0, 1.0])
    assert two.delta == pytest.approx(0.5)
    assert make_support(100, 0.0, 1.0).z.size == 100
    with pytest.raises(ContractError):
        make_support(1, 0.0, 1.0)
    with pytest.raises(ContractError):
        make_support(4, 1.0, 1.0)


def test_logits_to_distribution():
    support = make_support(5, 0.0, 1.0)
    np.testing.assert_allclose(logits_to_distribution(np.zeros(5), support).p.data, 0.2, rtol=1e-6)
    peaked = logits_to_distribution(np.array([10.0, 0, 0, 0, 0]), support).p.data
    assert peaked[0] > 0.99
    logits = np.array([0.3, -1.0, 2.0, 0.5, 0.0])
    np.testing.assert_allclose(
        logits_to_distribution(logits, support).p.data,
        logits_to_distribution(logits + 7.0, support).p.data,
        atol=1e-6,
    )


def test_project_single_return_at_bottom():
    p = project_returns([0.0], make_support(4, 0.0, 1.0)).p.data
    np.testing.assert_allclose(p, [1.0, 0.0, 0.0, 0.0])


def test_project_renormalises_raw_weights():
    p = project_returns([0.25], make_support(2, 0.0, 1.0)).p.data
    np.testing.assert_allclose(p, [1.0, 0.0])


def test_project_falls_back_to_nearest_point_on_ties():
    p = project_returns([0.5], make_support(2, 0.0, 1.0)).p.data
    np.testing.assert_allclose(p, [0.5, 0.5])


def test_project_clamps_and_rejects_empty():
    support = make_support(4, 0.0, 1.0)
    np.testing.assert_allclose(project_returns([3.0], support).p.data, [0, 0, 0, 1.0])
    with pytest.raises(ContractError):
        project_returns([], support)


def test_cvar_hand_examples():
    dist = _dist(3, [0.2, 0.3, 0.5])
    assert cvar(dist, 0.5).item() == pytest.approx(1.0, abs=1e-6)
    assert cvar(dist, 0.8).item() == pytest.approx(0.8125, abs=1e-6)
    assert cvar(dist, 1.0).item() == pytest.approx(0.65, abs=1e-6)
    with pytest.raises(ContractError):
        cvar(dist, 0.0)


def test_regret_hand_examples():
    assert regret_estimate(_dist(3, [0.2, 0.3, 0.5]), 0.5).item() == pytest.approx(0.35, abs=1e-6)
    assert regret_estimate(_dist(2, [0.5, 0.5]), 0.5).item() == pytest.approx(0.5, abs=1e-6)


@pytest.mark.parametrize("alpha", [0.05, 0.3, 1.0])
def test_point_mass_has_no_regret(alpha):
    for index in range(4):
        probs = np.zeros(4)
        probs[index] = 1.0
        assert regret_estimate(_dist(4, probs), alpha).item() == pytest.approx(0.0, abs=1e-9)


def test_cvar_properties_over_random_distributions(rng):
    support = make_support(8, 0.0, 1.0)
    probs = rng.dirichlet(np.ones(8), size=1000)
    dist = ReturnDistribution(support=support, p=Tensor(probs))
    previous = None
    for alpha in (1.0, 0.7, 0.4, 0.1):
        value = cvar(dist, alpha).data
        if previous is not None:
            assert np.all(value >= previous - 1e-6)
        previous = value
    np.testing.assert_allclose(cvar(dist, 1.0).data, dist.mean().data, atol=1e-6)


def test_distribution_validation():
    with pytest.raises(ContractError):
        _dist(3, [0.5, 0.5, 0.5])
    with pytest.raises(ContractError):
        _dist(3, [0.5, 0.5])


def test_fresh_critic_is_uniform_and_gives_zero_gradient(rng):
    spec = MlpSpec(widths=(4, 8, 5), activation="relu", time_embedding=4)
    critic = make_critic(spec, make_support(5, 0.0, 1.0), SCHEDULE, rng)
    theta = rng.uniform(size=(3, 4))
    np.testing.assert_allclose(critic.distribution(theta, 10).p.data, 0.2, rtol=1e-6)
    np.testing.assert_array_equal(regret_input_gradient(critic, theta, 10, GuidanceConfig()), 0.0)
    np.testing.assert_array_equal(difficulty_logprob_grad(critic, theta, 10, 2), 0.0)


def test_regret_gradient_matches_finite_differences(rng):
    critic = _critic(rng)
    theta = rng.uniform(size=(1, 4))
    config = GuidanceConfig(alpha=0.3)
    analytic = regret_input_gradient(critic, theta, 7, config)
    step = 1e-4
    numeric = np.zeros_like(theta)
    with precision(np.float64):
        for j in range(theta.shape[1]):
            up, down = theta.copy(), theta.copy()
            up[0, j] += step
            down[0, j] -= step
            numeric[0, j] = (
                estimate_at(critic, up, 7, config.alpha) - estimate_at(critic, down, 7, config.alpha)
            ) / (2 * step)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-3, atol=1e-6)


def estimate_at(critic, theta, t, alpha):
    return float(regret_estimate(critic.distribution(theta, t), alpha).data.astype(np.float64).sum())


@pytest.mark.parametrize("scale", [0.1, 1.0, 10.0])
def test_regret_gradient_stays_finite_under_scaling(rng, scale):
    critic = _critic(rng)
    critic.params["w1"] = Tensor(critic.params["w1"].data * scale)
    grad = regret_input_gradient(critic, rng.uniform(size=(2, 4)), 5, GuidanceConfig())
    assert np.all(np.isfinite(grad))


def test_difficulty_logprob_on_uniform_logits(rng):
    spec = MlpSpec(widths=(4, 8, 5), time_embedding=4)
    critic = make_critic(spec, make_support(5, 0.0, 1.0), SCHEDULE, rng)
    logp = difficulty_logprob(critic, rng.uniform(size=(2, 4)), 3, 1)
    np.testing.assert_allclose(logp.data, np.log(1 / 5), rtol=1e-6)
    with pytest.raises(ContractError):
        difficulty_logprob(critic, np.zeros((1, 4)), 3, 6)


def test_difficulty_gradient_in_double_precision(rng):
    critic = _critic(rng)
    theta = Tensor(rng.uniform(size=(2, 4)))
    error = finite_diff_check(lambda x: T.sum(difficulty_logprob(critic, x, 9, 2)), theta, step=1e-5)
    assert error <= 1e-3


def test_estimate_regret_per_environment(rng):
    critic = _critic(rng)
    theta = rng.uniform(size=(3, 4))
    regrets = estimate_regret(critic, theta, 0.2)
    assert regrets.shape == (3,)
    assert np.all(regrets >= -1e-6)
    assert estimate_regret(critic, np.zeros((0, 4)), 0.2).shape == (0,)


def test_buffer_is_fifo_and_samples_uniformly(rng):
    support = make_support(4, 0.0, 1.0)
    buffer = CriticBuffer(3)
    for value in range(5):
        buffer_push(buffer, np.full(2, value), [0.0], support)
    assert len(buffer) == 3
    assert [int(theta[0]) for theta, _ in buffer.entries] == [2, 3, 4]
    assert buffer_sample(buffer, 0, rng) == []
    draws = buffer_sample(buffer, 100_000, rng)
    counts = np.bincount([int(theta[0]) for theta, _ in draws], minlength=5)[2:]
    np.testing.assert_allclose(counts / 100_000, 1 / 3, rtol=0.02)
    with pytest.raises(ContractError):
        buffer_sample(CriticBuffer(2), 1, rng)


def test_critic_update_with_zero_epochs_changes_nothing(rng):
    critic = _critic(rng)
    buffer = CriticBuffer(4)
    buffer_push(buffer, rng.uniform(size=4), [0.5], critic.support)
    before = {k: v.data.copy() for k, v in critic.params.items()}
    state, losses = critic_update(critic, buffer, 2, 0, make_opt_state(critic.params, 1e-3), rng)
    assert losses == []
    for name, value in before.items():
        np.testing.assert_array_equal(critic.params[name].data, value)
    with pytest.raises(ContractError):
        critic_update(critic, CriticBuffer(2), 1, 1, state, rng)


def test_critic_overfits_a_point_mass(rng):
    spec = MlpSpec(widths=(4, 16, 5), activation="relu", time_embedding=4)
    critic = make_critic(spec, make_support(5, 0.0, 1.0), SCHEDULE, rng)
    theta = rng.uniform(size=4)
    buffer = CriticBuffer(8)
    buffer_push(buffer, theta, [0.75], critic.support)
    state = make_opt_state(critic.params, 1e-2)
    state, losses = critic_update(critic, buffer, 1, 300, state, rng)
    assert losses[-1] < losses[0]
    assert int(np.argmax(critic.distribution(theta[None, :], 1).p.data[0])) == 3


def test_critic_minibatches_are_drawn_from_the_buffer(rng, monkeypatch):
    critic = _critic(rng)
    buffer = CriticBuffer(8)
    for _ in range(5):
        buffer_push(buffer, rng.uniform(size=4), [rng.uniform()], critic.support)
    sizes = []

    def recording_sample(buf, n, draw_rng):
        sizes.append(n)
        return buffer_sample(buf, n, draw_rng)

    monkeypatch.setattr(regret_critic, "buffer_sample", recording_sample)
    state, losses = critic_update(critic, buffer, 2, 3, make_opt_state(critic.params, 1e-3), rng)
    assert sizes == [3] * 6
    assert len(losses) == 6
    assert state.step == 6
    with pytest.raises(ContractError):
        critic_update(critic, buffer, 0, 1, state, rng)
