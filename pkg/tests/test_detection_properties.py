"""Property-based tests for bit accuracy and binomial detection thresholds."""

from fractions import Fraction
from math import comb

import numpy as np
import pytest
from hypothesis import given, strategies as st, settings
from scipy.stats import binom

from latentmark.carriers import Message, decode_batch
from latentmark.detection import bit_accuracy, detection_threshold, matched_bits, tail_probability, tpr_at_fpr
from latentmark.errors import ParameterError, ReportError, ShapeError
from latentmark.experiment import build_pipeline
from latentmark.extractor import extract_batch
from latentmark.sampler import sample_corpus
from tests.helpers import desk_config


def brute_force_threshold(k: int, fpr: float) -> int:
    target = Fraction(fpr)
    for tau in range(k + 2):
        if Fraction(sum(comb(k, j) for j in range(tau, k + 1)), 2 ** k) <= target:
            return tau
    return k + 1


@pytest.mark.parametrize("k,fpr,expected", [(48, 1e-6, 41), (1, 0.6, 1), (48, 1e-15, 49)])
def test_known_thresholds(k, fpr, expected):
    assert detection_threshold(k, fpr) == expected


# Feature: detection, Property 1: Threshold equals the brute-force tail search
@settings(max_examples=200, deadline=None)
@given(
    k=st.integers(min_value=1, max_value=64),
    fpr=st.floats(min_value=1e-20, max_value=0.999, exclude_max=True),
)
def test_threshold_matches_brute_force(k, fpr):
    """
    Property 1: Threshold equals the brute-force tail search

    For any k <= 64 and fpr, detection_threshold is the smallest tau whose exact
    binomial tail is at most fpr, or k + 1 when none is.
    """
    tau = detection_threshold(k, fpr)
    assert tau == brute_force_threshold(k, fpr)
    assert tail_probability(k, tau) <= Fraction(fpr)
    if tau >= 1:
        assert tail_probability(k, tau - 1) > Fraction(fpr)


# Feature: detection, Property 2: Threshold is monotone in the false-positive rate
@settings(max_examples=100, deadline=None)
@given(
    k=st.integers(min_value=1, max_value=64),
    low=st.floats(min_value=1e-12, max_value=0.5),
    factor=st.floats(min_value=1.0, max_value=1.9),
)
def test_threshold_monotone_in_fpr(k, low, factor):
    """
    Property 2: Threshold is monotone in the false-positive rate

    For any fpr_1 <= fpr_2, tau(k, fpr_1) >= tau(k, fpr_2).
    """
    assert detection_threshold(k, low) >= detection_threshold(k, low * factor)


def test_threshold_errors():
    for fpr in (0.0, 1.0, -0.1):
        with pytest.raises(ParameterError):
            detection_threshold(8, fpr)
    with pytest.raises(ParameterError):
        detection_threshold(0, 0.1)


def test_tail_probability_edges():
    assert tail_probability(4, 0) == 1
    assert tail_probability(4, 5) == 0
    assert tail_probability(4, 4) == Fraction(1, 16)


def test_tpr_examples():
    assert tpr_at_fpr([48, 48, 48], 48, 1e-6) == 1.0
    assert tpr_at_fpr([24, 24], 48, 1e-6) == 0.0
    assert tpr_at_fpr([48, 40, 42], 48, 1e-6) == pytest.approx(2 / 3)
    with pytest.raises(ReportError):
        tpr_at_fpr([], 48, 1e-6)
    with pytest.raises(ParameterError):
        tpr_at_fpr([49], 48, 1e-6)


def test_bit_accuracy_examples():
    m = Message(np.array([1, -1, 1, 1]))
    assert bit_accuracy(m, m) == 1.0
    assert bit_accuracy(m, Message(-m.bits)) == 0.0
    assert bit_accuracy(m, Message(np.array([1, -1, 1, -1]))) == 0.75
    assert matched_bits(m, np.array([1, 1, 1, 1])) == 3
    with pytest.raises(ShapeError):
        bit_accuracy(m, Message(np.array([1, 1])))


@pytest.mark.parametrize("k,tau", [(16, 12), (48, 41), (32, 0), (8, 9)])
def test_tail_probability_agrees_with_scipy(k, tau):
    assert float(tail_probability(k, tau)) == pytest.approx(binom.sf(tau - 1, k, 0.5), rel=1e-9, abs=1e-15)


@pytest.mark.slow
def test_false_positive_rate_on_unwatermarked_outputs():
    config = desk_config()
    pipeline = build_pipeline(config)
    corpus = sample_corpus(500, pipeline.sampler, pipeline.prior, pipeline.schedule, seed=99)
    decoded = decode_batch(pipeline.carriers.whiten(extract_batch(corpus, pipeline.extractor)), pipeline.carriers)

    tau = detection_threshold(16, 1e-3)
    rng = np.random.default_rng(1)
    messages = rng.choice(np.array([-1, 1], dtype=np.int8), size=(10_000, 16))
    matches = np.sum(messages == decoded[np.arange(10_000) % len(decoded)], axis=1)
    assert np.mean(matches >= tau) <= 2e-3
