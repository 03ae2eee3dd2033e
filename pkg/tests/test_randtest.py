from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from stagger.errors import FirstAdoptionAtBoundary
from stagger.panel import Panel, make_adoption
from stagger.randtest import (
    TestReport,
    WeightVector,
    adopter_weights,
    decide_randomized,
    evaluate,
    p_value,
    run_test,
    uniform_weights,
    weighted_critical_value,
)


def brute_critical(s, w, alpha):
    """Scan the support in increasing order with exact rational arithmetic."""
    for c in sorted(set(s)):
        if sum(wi for si, wi in zip(s, w) if si <= c) >= 1 - alpha:
            return c
    return max(s)


def brute_p(s, w, s_obs):
    return sum(wi for si, wi in zip(s, w) if si >= s_obs)


W3 = WeightVector([0.5, 0.3, 0.2])


def test_critical_value_examples():
    assert weighted_critical_value([1, 2, 3], W3, 0.05) == 3
    assert weighted_critical_value([1, 2, 3], W3, 0.25) == 2
    assert weighted_critical_value([4.0] * 5, uniform_weights(5), 0.01) == 4.0
    assert weighted_critical_value([4.0] * 5, uniform_weights(5), 0.99) == 4.0


def test_p_value_examples():
    assert p_value([1, 2, 3], W3, 3) == pytest.approx(0.2)
    assert p_value([1, 2, 3], W3, 1) == 1.0
    assert p_value([1, 2, 3], uniform_weights(3), 1) == 1.0


def test_uniform_boundary_reaches_one_minus_alpha():
    # nineteen weights of 1/20 must reach 0.95 despite rounding in the sum
    assert weighted_critical_value(np.arange(20.0), uniform_weights(20), 0.05) == 18.0


@st.composite
def weighted_sample(draw):
    n = draw(st.integers(1, 12))
    s = draw(st.lists(st.integers(-5, 5), min_size=n, max_size=n))
    raw = draw(st.lists(st.integers(0, 20), min_size=n, max_size=n))
    assume(sum(raw) > 0)
    denom = sum(raw)
    alpha = Fraction(draw(st.integers(1, 99)), 100)
    return s, [Fraction(r, denom) for r in raw], alpha


@given(weighted_sample())
def test_critical_value_and_p_value_match_brute_force(sample):
    s, w, alpha = sample
    wv = WeightVector([float(x) for x in w])
    assert weighted_critical_value(s, wv, float(alpha)) == brute_critical(s, w, alpha)
    for s_obs in set(s):
        assert p_value(s, wv, s_obs) == pytest.approx(float(brute_p(s, w, s_obs)), abs=1e-12)


@given(weighted_sample(), st.integers(0, 11))
def test_level_properties(sample, k):
    s, w, alpha = sample
    k = k % len(s)
    rep = evaluate(s, WeightVector([float(x) for x in w]), k, float(alpha))
    if rep.reject:
        assert rep.p_value <= float(alpha) + 1e-12
    if rep.p_value < float(alpha) - 1e-12:
        assert rep.reject
    # the randomized test rejects with probability exactly alpha under the weighted law
    size = sum(
        wi * (float(si > rep.critical_value) + rep.randomized_extra_prob * float(si == rep.critical_value))
        for si, wi in zip(s, w)
    )
    assert float(size) == pytest.approx(float(alpha), abs=1e-9)


def _fixture(y_rows, times, t_max=4):
    return Panel(np.array(y_rows, dtype=float), np.zeros(len(y_rows))), make_adoption(times, t_max)


class Const:
    def candidates(self, panel, t1):
        return np.full(panel.n, 7.0)


class Fixed:
    def __init__(self, s):
        self.s = np.asarray(s, dtype=float)

    def candidates(self, panel, t1):
        return self.s


def test_run_test_constant_statistic():
    panel, adoption = _fixture(np.zeros((3, 4)), [1.5, 2.5, 9])
    rep = run_test(panel, adoption, Const(), uniform_weights(3), 0.2)
    assert rep.p_value == 1.0 and not rep.reject


def test_run_test_weighted_fixture():
    panel, adoption = _fixture(np.zeros((3, 4)), [2.5, 3.5, 1.5])
    rep = run_test(panel, adoption, Fixed([1, 2, 3]), W3, 0.05)
    assert rep.s_obs == 3 and rep.critical_value == 3 and not rep.reject
    assert rep.p_value == pytest.approx(0.2)
    # exact randomization: (F(c) - (1 - alpha)) / w(c) = (1 - 0.95) / 0.2
    assert rep.randomized_extra_prob == pytest.approx(0.25)
    rep30 = run_test(panel, adoption, Fixed([1, 2, 3]), W3, 0.30)
    assert rep30.critical_value == 2 and rep30.reject


def test_run_test_plain_callable():
    panel, adoption = _fixture(np.zeros((3, 4)), [2.5, 3.5, 1.5])
    rep = run_test(panel, adoption, lambda p, i, t1: float(i), W3, 0.05)
    assert rep.s_candidates.tolist() == [0.0, 1.0, 2.0] and rep.first_adopter == 2


def test_run_test_boundary():
    panel, adoption = _fixture(np.zeros((2, 3)), [3.0, 5.0], t_max=3)
    with pytest.raises(FirstAdoptionAtBoundary):
        run_test(panel, adoption, Const(), uniform_weights(2))


def _report(s_obs, c, q, reject):
    return TestReport(s_obs, np.array([s_obs]), uniform_weights(1), 0.05, c, 1.0, reject, q, "uniform")


def test_decide_randomized():
    assert decide_randomized(_report(5.0, 1.0, 0.0, True), 0.99)
    assert decide_randomized(_report(3.0, 3.0, 0.15, False), 0.10)
    assert not decide_randomized(_report(3.0, 3.0, 0.15, False), 0.20)
    assert not decide_randomized(_report(2.0, 3.0, 0.15, False), 0.0)


def test_adopter_weights_examples():
    panel = Panel(np.zeros((4, 5)), np.random.default_rng(0).normal(size=(4, 5, 2)))
    assert adopter_weights(panel, 2.2, [0.0, 0.0]).w.tolist() == [0.25] * 4
    p3 = Panel(np.zeros((3, 4)), np.array([np.log(2), 0.0, 0.0]))
    assert np.allclose(adopter_weights(p3, 1.5, [1.0]).w, [0.5, 0.25, 0.25], atol=1e-15)
    with pytest.raises(FirstAdoptionAtBoundary):
        adopter_weights(p3, 4.0, [1.0])


def test_adopter_weights_use_rounded_time():
    x = np.zeros((2, 4, 1))
    x[0, 2, 0] = 1.0  # period 3 only
    panel = Panel(np.zeros((2, 4)), x)
    assert adopter_weights(panel, 2.5, [1.0]).w[0] == pytest.approx(np.e / (np.e + 1))
    assert adopter_weights(panel, 1.5, [1.0]).w[0] == pytest.approx(0.5)


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=10), st.floats(-100, 100), st.floats(-2, 2))
def test_adopter_weights_sum_and_shift(x, c, beta):
    x = np.array(x)
    a = adopter_weights(Panel(np.zeros((len(x), 3)), x), 1.5, [beta]).w
    b = adopter_weights(Panel(np.zeros((len(x), 3)), x + c), 1.5, [beta]).w
    assert abs(a.sum() - 1) <= 1e-12
    assert np.allclose(a, b, atol=1e-9)
