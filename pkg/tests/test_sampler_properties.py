"""Property-based tests for the DDIM sampler and its watermark hooks."""

import numpy as np
import pytest
from hypothesis import given, strategies as st, settings

from latentmark.errors import ConfigError, StateError
from latentmark.prior import make_prior
from latentmark.sampler import SamplerConfig, WatermarkHooks, guidance_profile, sample, sample_corpus
from tests.helpers import DETAIL_STEP, STEPS, single_component_prior, tiny_prior, tiny_sampler, tiny_schedule

seeds = st.integers(min_value=0, max_value=2**32 - 1)


# Feature: sampler, Property 1: Sampling is deterministic
@settings(max_examples=20, deadline=None)
@given(seed=seeds, guidance=st.sampled_from([0.0, 2.0, 7.5]))
def test_sampling_is_deterministic(seed, guidance):
    """
    Property 1: Sampling is deterministic

    For any x_T, two runs with identical inputs give bit-identical outputs.
    """
    prior, schedule = tiny_prior(), tiny_schedule()
    config = tiny_sampler(guidance=guidance)
    x_T = np.random.default_rng(seed).standard_normal(prior.shape)

    first, _ = sample(x_T, config, prior, schedule)
    second, _ = sample(x_T, config, prior, schedule)
    assert np.array_equal(first, second)
    assert np.all(np.isfinite(first))


# Feature: sampler, Property 2: Zero watermarks leave the sample unchanged
@settings(max_examples=20, deadline=None)
@given(seed=seeds)
def test_zero_watermarks_are_transparent(seed):
    """
    Property 2: Zero watermarks leave the sample unchanged

    With w_s = 0, w_d = 0 and sigma_td = 0 the hooked run equals the plain run.
    """
    prior, schedule, config = tiny_prior(), tiny_schedule(), tiny_sampler()
    x_T = np.random.default_rng(seed).standard_normal(prior.shape)
    zeros = np.zeros(prior.shape)
    hooks = WatermarkHooks(structure=zeros, detail=zeros, detail_step=DETAIL_STEP, sigma_td=0.0)

    plain, _ = sample(x_T, config, prior, schedule)
    hooked, _ = sample(x_T, config, prior, schedule, hooks)
    assert np.array_equal(plain, hooked)


def test_trajectory_records_every_state():
    prior, schedule, config = tiny_prior(), tiny_schedule(), tiny_sampler()
    x_T = np.random.default_rng(0).standard_normal(prior.shape)
    x_0, trajectory = sample(x_T, config, prior, schedule, record=True)

    assert len(trajectory.states) == STEPS + 1
    assert trajectory.timesteps == [*config.timesteps, 0]
    assert np.array_equal(trajectory.states[0], x_T)
    assert np.array_equal(trajectory.states[-1], x_0)
    assert trajectory.recorded_buffers == STEPS + 1
    assert sample(x_T, config, prior, schedule)[1] is None


def test_doubling_steps_doubles_recorded_states():
    prior, schedule = tiny_prior(), tiny_schedule()
    x_T = np.zeros(prior.shape)
    _, short = sample(x_T, tiny_sampler(steps=5), prior, schedule, record=True)
    _, long = sample(x_T, tiny_sampler(steps=10), prior, schedule, record=True)
    assert long.recorded_buffers - 1 == 2 * (short.recorded_buffers - 1)


def test_one_step_on_a_point_mass_reaches_the_mean():
    prior = single_component_prior(mean=0.4, variance=1e-12)
    schedule = tiny_schedule()
    config = SamplerConfig((100,))
    x_T = np.random.default_rng(2).standard_normal(prior.shape)
    x_0, _ = sample(x_T, config, prior, schedule)
    assert np.allclose(x_0, 0.4, atol=1e-6)


def test_detail_hook_must_sit_on_the_grid_after_the_first_step():
    prior, schedule, config = tiny_prior(), tiny_schedule(), tiny_sampler()
    x_T = np.zeros(prior.shape)
    w = np.zeros(prior.shape)
    with pytest.raises(ConfigError):
        sample(x_T, config, prior, schedule, WatermarkHooks(detail=w, detail_step=42))
    with pytest.raises(ConfigError):
        sample(x_T, config, prior, schedule, WatermarkHooks(detail=w, detail_step=config.timesteps[0]))
    with pytest.raises(ConfigError):
        sample(x_T, config, prior, schedule, WatermarkHooks(detail=w))


@pytest.mark.parametrize("timesteps", [(), (10, 10), (5, 10), (3, 0)])
def test_invalid_grids_rejected(timesteps):
    with pytest.raises(ConfigError):
        SamplerConfig(timesteps)


def test_grid_navigation():
    config = tiny_sampler()
    assert config.timesteps == (81, 61, 41, 21, 1)
    assert config.previous(0) == 61
    assert config.previous(4) == 0
    assert config.index_of(41) == 2
    assert config.conditional
    assert not config.unconditional().conditional
    with pytest.raises(ConfigError):
        config.index_of(40)


def test_guidance_profile_needs_conditioning():
    prior, schedule = tiny_prior(), tiny_schedule()
    _, trajectory = sample(np.zeros(prior.shape), tiny_sampler(condition=None), prior, schedule, record=True)
    with pytest.raises(StateError):
        guidance_profile(trajectory, 2.0)


@pytest.mark.parametrize("prior_factory,scale", [(lambda: single_component_prior(mean=0.2), 3.0), (tiny_prior, 0.0)])
def test_guidance_profile_vanishes_without_guidance_difference(prior_factory, scale):
    prior, schedule = prior_factory(), tiny_schedule()
    config = tiny_sampler(guidance=scale)
    x_T = np.random.default_rng(1).standard_normal(prior.shape)
    _, trajectory = sample(x_T, config, prior, schedule, record=True)
    profile = guidance_profile(trajectory, scale)
    assert [t for t, _ in profile] == list(config.timesteps)
    assert all(value == pytest.approx(0.0, abs=1e-12) for _, value in profile)


@pytest.mark.slow
def test_guidance_decays_late_in_sampling():
    prior = make_prior((1, 4, 4), components=2, variance=0.05, mean_scale=3.0, labels=["a", "b"], seed=3)
    schedule = tiny_schedule()
    config = SamplerConfig.from_steps(100, 10, 3.0, "a")
    rng = np.random.default_rng(0)
    totals = np.zeros(config.steps)
    for _ in range(20):
        _, trajectory = sample(rng.standard_normal(prior.shape), config, prior, schedule, record=True)
        totals += [value for _, value in guidance_profile(trajectory, 3.0)]
    assert totals[-4:].mean() < totals[:4].mean()


def test_corpus_has_one_sample_per_row():
    prior, schedule = tiny_prior(), tiny_schedule()
    corpus = sample_corpus(6, tiny_sampler(condition=None), prior, schedule, seed=1)
    assert corpus.shape == (6, *prior.shape)
    assert np.array_equal(corpus, sample_corpus(6, tiny_sampler(condition=None), prior, schedule, seed=1))
