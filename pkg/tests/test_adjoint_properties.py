"""Property-based tests for gradients through the sampler."""

import numpy as np
import pytest
from hypothesis import given, strategies as st, settings

from latentmark.adjoint import (
    RetentionMeter,
    adjoint_gradient,
    finite_diff_gradient,
    gradient_agreement,
    initial_state,
    invert_step,
    reference_gradient,
    residual_f,
    step_contexts,
)
from latentmark.errors import ConfigError, DivergenceError, ParameterError, StateError
from latentmark.prior import make_prior
from latentmark.sampler import SamplerConfig, WatermarkHooks, sample
from latentmark.schedule import NoiseSchedule, build_schedule
from latentmark.watermark import init_watermarks
from tests.helpers import DETAIL_STEP, single_component_prior, tiny_prior, tiny_sampler, tiny_schedule

seeds = st.integers(min_value=0, max_value=2**32 - 1)


def setup(seed, steps=5, shape=(1, 4, 4), detail_step=DETAIL_STEP, sigma_td=0.1, guidance=2.0):
    prior, schedule = tiny_prior(shape), tiny_schedule()
    config = tiny_sampler(steps=steps, guidance=guidance)
    rng = np.random.default_rng(seed)
    x_T = rng.standard_normal(shape)
    pair = init_watermarks(shape, 0.01, seed=seed, sigma_td=sigma_td)
    hooks = WatermarkHooks(pair.w_s, pair.w_d, detail_step, sigma_td)
    cotangent = rng.standard_normal(shape)
    return prior, schedule, config, x_T, hooks, cotangent


def linear_loss(x_T, config, prior, schedule, hooks, cotangent):
    """<c, x_0> as a function of (w_s, w_d)."""
    def loss(w_s, w_d):
        moved = WatermarkHooks(w_s, w_d, hooks.detail_step, hooks.sigma_td)
        x_0, _ = sample(x_T, config, prior, schedule, moved)
        return float(np.sum(cotangent * x_0))
    return loss


# Feature: adjoint-gradients, Property 1: Step increments replay the forward sampler
@settings(max_examples=20, deadline=None)
@given(seed=seeds)
def test_residual_replays_forward_states(seed):
    """
    Property 1: Step increments replay the forward sampler

    For any recorded state x_t, x_t + residual_f(x_t, t) equals the next state.
    """
    prior, schedule, config, x_T, hooks, _ = setup(seed)
    _, trajectory = sample(x_T, config, prior, schedule, hooks, record=True)
    for i, t in enumerate(config.timesteps):
        increment = residual_f(trajectory.states[i], t, config, prior, schedule, hooks)
        assert np.allclose(trajectory.states[i] + increment, trajectory.states[i + 1], atol=1e-12)


def test_residual_detail_linearity_and_identity_step():
    prior, schedule, config, x_T, hooks, _ = setup(0)
    bare = WatermarkHooks(detail=np.zeros_like(x_T), detail_step=DETAIL_STEP, sigma_td=hooks.sigma_td)
    delta = residual_f(x_T, DETAIL_STEP, config, prior, schedule, hooks) - residual_f(
        x_T, DETAIL_STEP, config, prior, schedule, bare
    )
    assert np.allclose(delta, hooks.detail, atol=1e-12)

    flat = NoiseSchedule(total_steps=2, betas=np.array([0.5, 0.0]), alpha_bars=np.array([1.0, 0.5, 0.5]))
    identity_config = SamplerConfig((2, 1))
    assert np.all(residual_f(x_T, 2, identity_config, prior, flat) == 0.0)

    with pytest.raises(ConfigError):
        residual_f(x_T, 40, config, prior, schedule)


# Feature: adjoint-gradients, Property 2: Inverting a monotone step recovers its input
@settings(max_examples=20, deadline=None)
@given(seed=seeds, guidance=st.sampled_from([0.0, 0.5, 1.0]))
def test_invert_step_recovers_state(seed, guidance):
    """
    Property 2: Inverting a monotone step recovers its input

    For guidance scales in [0, 1] every step is strictly monotone, so Newton
    inversion of x_{t_prev} returns the recorded x_t.
    """
    prior, schedule, config, x_T, hooks, _ = setup(seed, guidance=guidance)
    _, trajectory = sample(x_T, config, prior, schedule, hooks, record=True)
    for context in step_contexts(config, hooks, schedule):
        recovered = invert_step(
            trajectory.states[context.index + 1], context, config, prior, schedule, hooks, newton_steps=8
        )
        assert np.allclose(recovered, trajectory.states[context.index], atol=1e-8)


# Feature: adjoint-gradients, Property 3: Adjoint sweep agrees with stored-trajectory reverse mode
@settings(max_examples=10, deadline=None)
@given(seed=seeds, steps=st.sampled_from([5, 10, 20]))
def test_adjoint_matches_reference(seed, steps):
    """
    Property 3: Adjoint sweep agrees with stored-trajectory reverse mode

    For any latent, watermarks and cotangent, the two gradients have cosine
    similarity >= 0.999 and relative L2 error <= 1e-3.
    """
    detail_step = SamplerConfig.from_steps(100, steps).timesteps[steps // 2]
    prior, schedule, config, x_T, hooks, cotangent = setup(seed, steps=steps, detail_step=detail_step)
    x_0, trajectory = sample(x_T, config, prior, schedule, hooks, record=True)

    adjoint = adjoint_gradient(x_0, cotangent, config, prior, schedule, hooks, x_T=x_T, init_weight=1.0)
    reference = reference_gradient(trajectory, cotangent, config, prior, schedule, hooks, x_T=x_T, init_weight=1.0)
    cosine, rel_l2 = gradient_agreement(reference.flat(), adjoint.flat())

    assert cosine >= 0.999
    assert rel_l2 <= 1e-3


@pytest.mark.parametrize("seed", [1, 2, 5])
def test_adjoint_matches_reference_when_strong_guidance_has_several_preimages(seed):
    # guidance 2 on five coarse steps: inversion can land on another preimage, so the sweep must replay
    prior, schedule, config, x_T, hooks, cotangent = setup(seed)
    x_0, trajectory = sample(x_T, config, prior, schedule, hooks, record=True)
    adjoint = adjoint_gradient(x_0, cotangent, config, prior, schedule, hooks, x_T=x_T, init_weight=1.0)
    reference = reference_gradient(trajectory, cotangent, config, prior, schedule, hooks, x_T=x_T, init_weight=1.0)
    cosine, rel_l2 = gradient_agreement(reference.flat(), adjoint.flat())
    assert cosine >= 0.999
    assert rel_l2 <= 1e-3


def test_replayed_sweep_reproduces_the_reference():
    prior, schedule, config, x_T, hooks, cotangent = setup(1)
    x_0, trajectory = sample(x_T, config, prior, schedule, hooks, record=True)
    reference = reference_gradient(trajectory, cotangent, config, prior, schedule, hooks, x_T=x_T, init_weight=1.0)

    # no Newton corrections means no step counts as converged
    replayed = adjoint_gradient(
        x_0, cotangent, config, prior, schedule, hooks, x_T=x_T, init_weight=1.0, newton_steps=0
    )
    assert replayed.replayed
    assert np.allclose(replayed.grad_ws, reference.grad_ws, rtol=1e-10, atol=1e-12)
    assert np.allclose(replayed.grad_wd, reference.grad_wd, rtol=1e-10, atol=1e-12)

    with pytest.raises(DivergenceError):
        adjoint_gradient(x_0, cotangent, config, prior, schedule, hooks, newton_steps=0)
    with pytest.raises(ParameterError):
        adjoint_gradient(x_0, cotangent, config, prior, schedule, hooks, x_T=x_T, newton_steps=-1)


def test_initial_state_matches_the_sampled_trajectory():
    prior, schedule, config, x_T, hooks, _ = setup(0)
    _, trajectory = sample(x_T, config, prior, schedule, hooks, record=True)
    assert np.array_equal(initial_state(x_T, hooks), trajectory.states[0])
    assert np.array_equal(initial_state(x_T, WatermarkHooks()), x_T)


# Feature: adjoint-gradients, Property 4: Reference gradient matches finite differences
@settings(max_examples=5, deadline=None)
@given(seed=seeds)
def test_reference_matches_finite_differences(seed):
    """
    Property 4: Reference gradient matches finite differences

    For a linear read-out of x_0 on a 5x5 grid with N = 5, the reference gradient
    agrees with central differences within 1e-4 relative error.
    """
    prior, schedule, config, x_T, hooks, cotangent = setup(seed, shape=(1, 5, 5))
    x_0, trajectory = sample(x_T, config, prior, schedule, hooks, record=True)
    reference = reference_gradient(trajectory, cotangent, config, prior, schedule, hooks, x_T=x_T)

    loss = linear_loss(x_T, config, prior, schedule, hooks, cotangent)
    fd = finite_diff_gradient(loss, hooks.structure, hooks.detail, h=1e-5, coordinates=64, seed=seed)
    ref = np.concatenate([reference.grad_ws.reshape(-1)[fd.sampled_ws], reference.grad_wd.reshape(-1)[fd.sampled_wd]])
    num = np.concatenate([fd.grad_ws.reshape(-1)[fd.sampled_ws], fd.grad_wd.reshape(-1)[fd.sampled_wd]])
    assert np.linalg.norm(num - ref) <= 1e-4 * np.linalg.norm(ref)


def test_adjoint_without_x_T_inverts_structure():
    # guidance 1 keeps every step invertible, so the sweep can run without x_T
    prior, schedule, config, x_T, hooks, cotangent = setup(3, guidance=1.0)
    x_0, _ = sample(x_T, config, prior, schedule, hooks)
    given_x_T = adjoint_gradient(x_0, cotangent, config, prior, schedule, hooks, x_T=x_T, newton_steps=8)
    rebuilt = adjoint_gradient(x_0, cotangent, config, prior, schedule, hooks, newton_steps=8)
    assert not rebuilt.replayed
    assert np.allclose(rebuilt.grad_ws, given_x_T.grad_ws, rtol=1e-5, atol=1e-6)


def test_detail_on_last_step_receives_the_cotangent():
    prior, schedule, config, x_T, hooks, cotangent = setup(4, detail_step=1, sigma_td=0.0)
    x_0, trajectory = sample(x_T, config, prior, schedule, hooks, record=True)
    reference = reference_gradient(trajectory, cotangent, config, prior, schedule, hooks, x_T=x_T)
    adjoint = adjoint_gradient(x_0, cotangent, config, prior, schedule, hooks, x_T=x_T)
    assert np.array_equal(reference.grad_wd, cotangent)
    assert np.array_equal(adjoint.grad_wd, cotangent)


def test_linear_prior_gradient_is_closed_form():
    # eps = sqrt(1 - ab) x for a standard normal prior, so every step is a scalar map
    prior, schedule = single_component_prior(), tiny_schedule()
    config = tiny_sampler(condition=None)
    rng = np.random.default_rng(6)
    x_T = rng.standard_normal(prior.shape)
    w_d = 0.1 * rng.standard_normal(prior.shape)
    cotangent = rng.standard_normal(prior.shape)
    hooks = WatermarkHooks(detail=w_d, detail_step=DETAIL_STEP, sigma_td=0.1)

    gain = 1.0
    for context in step_contexts(config, hooks, schedule):
        if context.index > config.index_of(DETAIL_STEP):
            gain *= context.a + context.b * np.sqrt(1.0 - schedule.alpha_bar(context.t))

    x_0, _ = sample(x_T, config, prior, schedule, hooks)
    result = adjoint_gradient(x_0, cotangent, config, prior, schedule, hooks)
    assert np.allclose(result.grad_wd, gain * cotangent, rtol=1e-10)
    assert np.all(result.grad_ws == 0.0)


def test_zero_cotangent_gives_zero_gradients():
    prior, schedule, config, x_T, hooks, cotangent = setup(5)
    x_0, trajectory = sample(x_T, config, prior, schedule, hooks, record=True)
    zero = np.zeros_like(cotangent)
    for result in (
        adjoint_gradient(x_0, zero, config, prior, schedule, hooks, x_T=x_T),
        reference_gradient(trajectory, zero, config, prior, schedule, hooks, x_T=x_T),
    ):
        assert np.allclose(result.flat(), 0.0)


@pytest.mark.parametrize("steps", [5, 20, 50])
def test_retained_buffers(steps):
    # tracemalloc on a 64x64 grid: the adjoint keeps a fixed handful of grids, the trajectory keeps O(N)
    prior, schedule, config, x_T, hooks, cotangent = setup(11, steps=steps, shape=(1, 64, 64))
    x_0, _ = sample(x_T, config, prior, schedule, hooks)
    with RetentionMeter(x_T.nbytes) as meter:
        adjoint = adjoint_gradient(x_0, cotangent, config, prior, schedule, hooks, x_T=x_T, meter=meter)
    assert 2 <= adjoint.retained_buffers <= 4

    with RetentionMeter(x_T.nbytes) as meter:
        _, trajectory = sample(x_T, config, prior, schedule, hooks, record=True)
        reference = reference_gradient(trajectory, cotangent, config, prior, schedule, hooks, x_T=x_T, meter=meter)
    assert reference.retained_buffers >= steps


def test_reference_needs_a_trajectory():
    prior, schedule, config, x_T, hooks, cotangent = setup(2)
    with pytest.raises(StateError):
        reference_gradient(None, cotangent, config, prior, schedule, hooks)


def test_finite_differences_on_toy_losses():
    rng = np.random.default_rng(0)
    w_s, w_d = rng.standard_normal((2, 1, 3, 3))
    quadratic = finite_diff_gradient(lambda a, b: float(np.sum(a ** 2) + np.sum(b ** 2)), w_s, w_d, h=1e-4)
    assert np.allclose(quadratic.grad_ws, 2 * w_s, atol=1e-8)
    assert np.allclose(quadratic.grad_wd, 2 * w_d, atol=1e-8)
    assert len(quadratic.sampled_ws) == 9

    constant = finite_diff_gradient(lambda a, b: 3.0, w_s, w_d)
    assert np.all(constant.flat() == 0.0)

    with pytest.raises(ParameterError):
        finite_diff_gradient(lambda a, b: 0.0, w_s, w_d, h=0.0)
    with pytest.raises(ParameterError):
        finite_diff_gradient(lambda a, b: 0.0, w_s, w_d, coordinates=0)


def test_gradient_agreement_and_meter():
    v = np.array([1.0, 2.0, 3.0])
    assert gradient_agreement(v, v) == (pytest.approx(1.0), 0.0)
    assert gradient_agreement(np.zeros(3), np.zeros(3)) == (1.0, 0.0)
    cosine, _ = gradient_agreement(v, -v)
    assert cosine == pytest.approx(-1.0)

    with RetentionMeter(8000) as meter:
        kept = [np.ones(1000) for _ in range(3)]
        meter.mark()
    assert meter.buffers == 3
    assert len(kept) == 3
    with pytest.raises(ParameterError):
        RetentionMeter(0)


def test_structure_gradient_needs_structure_hook():
    prior, schedule, config, x_T, hooks, cotangent = setup(8)
    detail_only = WatermarkHooks(detail=hooks.detail, detail_step=DETAIL_STEP, sigma_td=hooks.sigma_td)
    x_0, _ = sample(x_T, config, prior, schedule, detail_only)
    result = adjoint_gradient(x_0, cotangent, config, prior, schedule, detail_only, x_T=x_T)
    assert np.all(result.grad_ws == 0.0)
    assert np.any(result.grad_wd != 0.0)


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(5))
def test_adjoint_matches_reference_on_desk_grid(seed):
    shape = (1, 8, 8)
    prior = make_prior(shape, components=4, variance=0.25, labels=["a", "b", "a", "b"], seed=7)
    schedule = build_schedule(1000)
    config = SamplerConfig.from_steps(1000, 20, 2.0, "a")
    rng = np.random.default_rng(seed)
    x_T = rng.standard_normal(shape)
    pair = init_watermarks(shape, 0.01, seed=seed, sigma_td=0.1)
    hooks = WatermarkHooks(pair.w_s, pair.w_d, 251, 0.1)
    cotangent = rng.standard_normal(shape)

    x_0, trajectory = sample(x_T, config, prior, schedule, hooks, record=True)
    reference = reference_gradient(trajectory, cotangent, config, prior, schedule, hooks, x_T=x_T)
    for known in (x_T, None):
        adjoint = adjoint_gradient(x_0, cotangent, config, prior, schedule, hooks, x_T=known)
        cosine, rel_l2 = gradient_agreement(reference.flat(), adjoint.flat())
        assert cosine >= 0.999
        assert rel_l2 <= 1e-3
