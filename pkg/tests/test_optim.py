import numpy as np
import pytest

from add_curriculum.core.optim import clip_grad_norm, make_opt_state, optimizer_step
from add_curriculum.core.tensor import ContractError, Tensor


def _params(value=1.0):
    return {"p": Tensor(np.full(3, value))}


def test_zero_gradient_without_decay_is_a_fixed_point():
    params = _params()
    state = make_opt_state(params, lr=0.1)
    updated, state = optimizer_step(params, {"p": np.zeros(3, np.float32)}, state)
    np.testing.assert_array_equal(updated["p"].data, params["p"].data)
    assert state.step == 1


def test_first_adam_step_moves_by_lr():
    params = _params()
    state = make_opt_state(params, lr=0.01)
    grads = {"p": np.array([0.5, -3.0, 1e-2], np.float32)}
    updated, _ = optimizer_step(params, grads, state)
    np.testing.assert_allclose(updated["p"].data, 1.0 - 0.01 * np.sign(grads["p"]), atol=1e-5)


def test_weight_decay_is_applied_before_the_moment_update():
    params = _params()
    state = make_opt_state(params, lr=0.1, weight_decay=0.05)
    updated, _ = optimizer_step(params, {"p": np.zeros(3, np.float32)}, state)
    np.testing.assert_allclose(updated["p"].data, 0.995, rtol=1e-6)


def test_bad_gradients_are_rejected():
    params = _params()
    state = make_opt_state(params, lr=0.1)
    with pytest.raises(ContractError):
        optimizer_step(params, {"p": np.array([np.nan, 0.0, 0.0])}, state)
    with pytest.raises(ContractError):
        optimizer_step(params, {"q": np.zeros(3)}, state)


def test_clip_grad_norm_scales_the_union():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = clip_grad_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    total = np.sqrt(sum(float(np.sum(g**2)) for g in clipped.values()))
    assert total == pytest.approx(1.0, abs=1e-5)
    np.testing.assert_allclose(clipped["a"] / clipped["b"], 0.75)


def test_clip_grad_norm_leaves_small_gradients():
    grads = {"a": np.array([0.1])}
    clipped, norm = clip_grad_norm(grads, 1.0)
    assert clipped is grads
    assert norm == pytest.approx(0.1)
