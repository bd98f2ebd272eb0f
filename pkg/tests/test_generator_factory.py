import numpy as np
import pytest

from add_curriculum.config import ConfigError, with_overrides
from add_curriculum.core.nn import init_params
from add_curriculum.services.diffusion import ScoreModel
from add_curriculum.services.generator_factory import DiffusionGenerator, RandomGenerator, create_generator
from add_curriculum.services.generator_interface import EnvGenerator
from add_curriculum.services.guidance import RegretGuidance
from add_curriculum.services.orchestrator import critic_spec, generator_spec, make_schedule, support_for
from add_curriculum.services.regret_critic import make_critic


@pytest.fixture
def parts(tiny_config, rng):
    model = ScoreModel(
        spec=generator_spec(tiny_config),
        params=init_params(generator_spec(tiny_config), rng),
        schedule=make_schedule(tiny_config),
    )
    critic = make_critic(critic_spec(tiny_config), support_for(tiny_config), make_schedule(tiny_config), rng)
    return model, critic


def test_interface_cannot_be_instantiated():
    with pytest.raises(TypeError):
        EnvGenerator()


def test_random_generator_is_seeded(tiny_config, parts):
    config = with_overrides(tiny_config, **{"run.method": "dr"})
    generator = create_generator(config, None, None)
    assert isinstance(generator, RandomGenerator)
    first = generator.generate(4, seed=9)
    assert first.shape == (4, 5, 5, 3)
    np.testing.assert_array_equal(first, generator.generate(4, seed=9))
    assert generator.generate(0, seed=9).shape == (0, 5, 5, 3)
    assert generator.guidance_calls == 0


def test_unguided_generator_never_calls_guidance(tiny_config, parts):
    model, critic = parts
    generator = create_generator(with_overrides(tiny_config, **{"run.method": "unguided"}), model, critic)
    assert isinstance(generator, DiffusionGenerator)
    thetas = generator.generate(3, seed=1)
    assert thetas.shape == (3, 5, 5, 3)
    assert thetas.min() >= 0.0 and thetas.max() <= 1.0
    assert generator.guidance_calls == 0


def test_add_generator_guides_every_step(tiny_config, parts):
    model, critic = parts
    generator = create_generator(tiny_config, model, critic)
    assert isinstance(generator.guidance, RegretGuidance)
    generator.generate(2, seed=1)
    assert generator.guidance_calls == tiny_config.diffusion.T_prime


def test_zero_weight_skips_guidance(tiny_config, parts):
    model, critic = parts
    config = with_overrides(tiny_config, **{"guidance.omega": 0.0})
    generator = create_generator(config, model, critic)
    unguided = create_generator(with_overrides(config, **{"run.method": "unguided"}), model, critic)
    np.testing.assert_array_equal(generator.generate(2, seed=4), unguided.generate(2, seed=4))
    assert generator.guidance_calls == 0


def test_missing_parts_are_config_errors(tiny_config, parts):
    model, _ = parts
    with pytest.raises(ConfigError):
        create_generator(tiny_config, None, None)
    with pytest.raises(ConfigError):
        create_generator(tiny_config, model, None)
