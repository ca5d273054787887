"""Property-based tests for the regularizers and the weighted objective."""

import numpy as np
import pytest
from hypothesis import given, strategies as st, settings

from latentmark.errors import DegenerateInputError, ParameterError, ShapeError
from latentmark.losses import (
    LossWeights,
    kurtosis_loss,
    l_high,
    l_high_grad,
    l_init,
    l_init_grad,
    l_low,
    l_low_grad,
    skewness_loss,
    total_loss,
)

seeds = st.integers(min_value=0, max_value=2**32 - 1)


def central_difference(fn, w, h=1e-6):
    grad = np.zeros(w.size)
    for i in range(w.size):
        bump = np.zeros(w.size)
        bump[i] = h
        bump = bump.reshape(w.shape)
        grad[i] = (fn(w + bump) - fn(w - bump)) / (2.0 * h)
    return grad.reshape(w.shape)


def test_total_loss_examples():
    weights = LossWeights()
    breakdown = total_loss(msg=0.5, init=0.001, low=0.0001, high=0.01, weights=weights)
    assert breakdown.total == pytest.approx(1.25)
    assert total_loss(1.0, 0.0, 0.0, 0.0, weights).total == pytest.approx(0.1)
    assert set(breakdown.as_dict()) == {"msg", "init", "low", "high", "total"}

    with pytest.raises(ParameterError):
        total_loss(-0.1, 0.0, 0.0, 0.0, weights)
    with pytest.raises(ParameterError):
        LossWeights(msg=-1.0)


def test_init_loss_examples():
    assert l_init(np.full((1, 2, 2), 0.3), np.full((1, 2, 2), 0.1)) == pytest.approx(0.04)
    with pytest.raises(ShapeError):
        l_init(np.zeros((1, 2, 2)), np.zeros((1, 3, 3)))


def test_two_point_distribution_moments():
    w = np.array([-1.0, 1.0] * 8).reshape(1, 4, 4)
    assert kurtosis_loss(w) == pytest.approx(4.0)
    assert skewness_loss(w) == pytest.approx(0.0)
    assert l_high(w, w) == pytest.approx(8.0)

    with pytest.raises(DegenerateInputError):
        l_high(np.ones((1, 2, 2)), w[:, :2, :2])


def test_low_loss_is_zero_at_initialization():
    rng = np.random.default_rng(0)
    w_s, w_d = rng.standard_normal((2, 1, 4, 4))
    assert l_low(w_s, w_d, w_s, w_d) == 0.0
    grad_s, grad_d = l_low_grad(w_s, w_d, w_s, w_d)
    assert np.all(grad_s == 0) and np.all(grad_d == 0)


# Feature: losses, Property 1: Regularizer gradients match finite differences
@settings(max_examples=30, deadline=None)
@given(seed=seeds)
def test_regularizer_gradients(seed):
    """
    Property 1: Regularizer gradients match finite differences

    For any watermarks, the analytic gradients of l_init, l_low and l_high
    equal central differences.
    """
    rng = np.random.default_rng(seed)
    w_s, w_d, init_s, init_d, x_T = 0.3 * rng.standard_normal((5, 1, 3, 3))

    assert np.allclose(l_init_grad(w_s, x_T), central_difference(lambda w: l_init(w, x_T), w_s), atol=1e-8)

    low_s, low_d = l_low_grad(w_s, w_d, init_s, init_d)
    assert np.allclose(low_s, central_difference(lambda w: l_low(w, w_d, init_s, init_d), w_s), atol=1e-8)
    assert np.allclose(low_d, central_difference(lambda w: l_low(w_s, w, init_s, init_d), w_d), atol=1e-8)

    high_s, high_d = l_high_grad(w_s, w_d)
    assert np.allclose(high_s, central_difference(lambda w: l_high(w, w_d), w_s), rtol=1e-5, atol=1e-6)
    assert np.allclose(high_d, central_difference(lambda w: l_high(w_s, w), w_d), rtol=1e-5, atol=1e-6)


# Feature: losses, Property 2: High-order statistics ignore location and scale
@settings(max_examples=50, deadline=None)
@given(
    seed=seeds,
    shift=st.floats(min_value=-5.0, max_value=5.0),
    scale=st.floats(min_value=0.1, max_value=10.0),
)
def test_high_loss_is_affine_invariant(seed, shift, scale):
    """
    Property 2: High-order statistics ignore location and scale

    For any watermark, l_high is unchanged by w -> scale * w + shift.
    """
    w = np.random.default_rng(seed).standard_normal((1, 4, 4))
    assert l_high(w, w) == pytest.approx(l_high(scale * w + shift, scale * w + shift), rel=1e-8, abs=1e-10)
