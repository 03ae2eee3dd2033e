import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stagger.cox import (
    fit_cox,
    fit_from_summary,
    fit_summary,
    neg_log_partial_likelihood,
    partial_likelihood_gradient,
    risk_sets,
)
from stagger.errors import Diverged, IncompatibleOption, MaxIterExceeded, NonIdentified
from stagger.panel import AdoptionData, Panel, make_adoption


def literal_nlpl(x, times, censored, beta, t_max):
    """Direct summation over events; covariates of each risk-set member at the event's grid time."""
    total = 0.0
    for i in range(len(times)):
        if censored[i]:
            continue
        col = min(math.ceil(times[i]), t_max) - 1
        own = sum(x[i][col][k] * beta[k] for k in range(len(beta)))
        denom = 0.0
        for j in range(len(times)):
            if times[j] >= times[i]:
                denom += math.exp(sum(x[j][col][k] * beta[k] for k in range(len(beta))))
        total -= own - math.log(denom)
    return total


def literal_grad(x, times, beta):
    """d = 1, no censoring, time-invariant x: -(sum over events of x_i - softmax mean)."""
    g = 0.0
    for i in range(len(times)):
        risk = [j for j in range(len(times)) if times[j] >= times[i]]
        w = [math.exp(beta * x[j]) for j in risk]
        g -= x[i] - sum(wj * x[j] for wj, j in zip(w, risk)) / sum(w)
    return g


def random_fixture(seed, n=7, t_max=5, d=2):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, t_max, d))
    times = rng.uniform(0.1, t_max + 2, n)
    adoption = make_adoption(times, t_max)
    if adoption.censored.all():
        times[0] = 0.5
        adoption = make_adoption(times, t_max)
    return Panel(rng.normal(size=(n, t_max)), x), adoption


def test_zero_covariates_value_is_log_risk_set_sizes():
    panel = Panel(np.zeros((4, 5)), np.zeros(4))
    adoption = make_adoption([1.2, 2.1, 6.0, 4.0], 5)
    expected = math.log(4) + math.log(3) + math.log(2)  # unit 3 at 4.0 sees {3 (4.0), 2 (censored)}
    assert neg_log_partial_likelihood(panel, adoption, [2.0]) == pytest.approx(expected, abs=1e-12)
    assert partial_likelihood_gradient(panel, adoption, [2.0]).tolist() == [0.0]


def test_beta_zero_value_and_gradient():
    panel, adoption = random_fixture(3)
    sizes = risk_sets(panel, adoption).at_risk.sum(axis=1)
    assert neg_log_partial_likelihood(panel, adoption, [0.0, 0.0]) == pytest.approx(np.log(sizes).sum(), abs=1e-12)
    rs = risk_sets(panel, adoption)
    mean_risk = (rs.at_risk[:, :, None] * rs.z).sum(1) / sizes[:, None]
    expected = -(rs.x_event - mean_risk).sum(axis=0)
    assert np.allclose(partial_likelihood_gradient(panel, adoption, [0.0, 0.0]), expected, atol=1e-12)


def test_four_unit_literal_value():
    panel = Panel(np.zeros((4, 5)), np.array([1.0, 0.0, 1.0, 0.0]))
    adoption = make_adoption([1.2, 2.1, 3.4, 4.0], 5)
    value = neg_log_partial_likelihood(panel, adoption, [0.5])
    assert value == pytest.approx(2.9356779183378015, abs=1e-12)
    x = panel.covariates.tolist()
    assert value == pytest.approx(literal_nlpl(x, [1.2, 2.1, 3.4, 4.0], [0] * 4, [0.5], 5), abs=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_literal_oracle_with_time_varying_covariates(seed):
    panel, adoption = random_fixture(seed)
    beta = np.random.default_rng(seed + 100).normal(size=2)
    oracle = literal_nlpl(panel.covariates.tolist(), adoption.times.tolist(), adoption.censored.tolist(), beta, 5)
    assert neg_log_partial_likelihood(panel, adoption, beta) == pytest.approx(oracle, rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_gradient_matches_finite_differences(seed):
    panel, adoption = random_fixture(seed)
    beta = np.random.default_rng(seed + 200).normal(size=2)
    h = 1e-5
    fd = np.array(
        [
            (neg_log_partial_likelihood(panel, adoption, beta + h * e) - neg_log_partial_likelihood(panel, adoption, beta - h * e)) / (2 * h)
            for e in np.eye(2)
        ]
    )
    g = partial_likelihood_gradient(panel, adoption, beta)
    assert np.linalg.norm(g - fd) <= 1e-6 * max(np.linalg.norm(g), 1.0)


SIX_X = [0.3, -1.2, 1.5, 0.2, -0.4, 0.9]
SIX_T = [0.5, 1.1, 1.9, 2.6, 3.3, 4.7]


def grid_oracle():
    """Grid search on [-5, 5] step 1e-3, refined by bisection on the literal gradient."""
    grid = np.arange(-5000, 5001) / 1000.0
    vals = [literal_nlpl([[[v]] * 6 for v in SIX_X], SIX_T, [0] * 6, [b], 6) for b in grid]
    b0 = grid[int(np.argmin(vals))]
    lo, hi = b0 - 1e-3, b0 + 1e-3
    for _ in range(60):
        mid = (lo + hi) / 2
        if literal_grad(SIX_X, SIX_T, mid) > 0:
            hi = mid
        else:
            lo = mid
    return (lo + hi) / 2


def test_fit_matches_grid_search():
    panel = Panel(np.zeros((6, 6)), np.array(SIX_X))
    adoption = make_adoption(SIX_T, 6)
    fit = fit_cox(panel, adoption)
    assert fit.converged and fit.gradient_norm <= 1e-8
    assert abs(fit.beta_hat[0] - grid_oracle()) <= 1e-4


def test_constant_covariate_is_non_identified():
    panel = Panel(np.zeros((4, 3)), np.full(4, 2.5))
    with pytest.raises(NonIdentified, match="non-identified"):
        fit_cox(panel, make_adoption([1.2, 2.5, 9, 9], 3))


def test_two_unit_monotone_likelihood_diverges():
    panel = Panel(np.zeros((2, 3)), np.array([1.0, 0.0]))
    with pytest.raises(Diverged):
        fit_cox(panel, make_adoption([1.0, 2.0], 3))


def test_ridge_tames_monotone_likelihood():
    panel = Panel(np.zeros((2, 3)), np.array([1.0, 0.0]))
    fit = fit_cox(panel, make_adoption([1.0, 2.0], 3), ridge=0.1)
    assert fit.converged and fit.ridge == 0.1 and 0 < fit.beta_hat[0] < 50


def test_max_iter():
    panel = Panel(np.zeros((6, 6)), np.array(SIX_X))
    with pytest.raises(MaxIterExceeded):
        fit_cox(panel, make_adoption(SIX_T, 6), max_iter=1)


def test_own_time_denominator():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(5, 4, 1))
    panel = Panel(np.zeros((5, 4)), x)
    censored = make_adoption([0.5, 1.5, 2.5, 3.5, 9.0], 4)
    with pytest.raises(IncompatibleOption):
        neg_log_partial_likelihood(panel, censored, [0.3], own_time=True)
    adoption = make_adoption([0.5, 1.5, 2.5, 3.5, 3.9], 4)
    # literal form: every risk-set member at its own adoption period
    own = [x[j, min(math.ceil(t), 4) - 1, 0] for j, t in enumerate(adoption.times)]
    expected = 0.0
    for i, ti in enumerate(adoption.times):
        risk = [j for j, tj in enumerate(adoption.times) if tj >= ti]
        expected -= 0.3 * own[i] - math.log(sum(math.exp(0.3 * own[j]) for j in risk))
    assert neg_log_partial_likelihood(panel, adoption, [0.3], own_time=True) == pytest.approx(expected, abs=1e-12)
    static = Panel(np.zeros((5, 4)), rng.normal(size=5))
    assert neg_log_partial_likelihood(static, adoption, [0.7], own_time=True) == pytest.approx(
        neg_log_partial_likelihood(static, adoption, [0.7]), abs=1e-12
    )


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.floats(-3, 3), min_size=4, max_size=4))
def test_convexity(seed, b):
    panel, adoption = random_fixture(seed)
    b1, b2 = np.array(b[:2]), np.array(b[2:])
    f = lambda v: neg_log_partial_likelihood(panel, adoption, v)
    assert f((b1 + b2) / 2) <= (f(b1) + f(b2)) / 2 + 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_translation_invariance(seed, c):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=12)
    times = rng.uniform(0.1, 8, 12)
    adoption = make_adoption(times, 6)
    if adoption.censored.sum() > 10:
        return
    try:
        base = fit_cox(Panel(np.zeros((12, 6)), x), adoption)
    except (Diverged, NonIdentified):
        return
    shifted = fit_cox(Panel(np.zeros((12, 6)), x + c), adoption)
    assert shifted.beta_hat[0] == pytest.approx(base.beta_hat[0], abs=1e-6)


def test_fit_is_deterministic():
    panel, adoption = random_fixture(11, n=15)
    a, b = fit_cox(panel, adoption), fit_cox(panel, adoption)
    assert a.beta_hat.tobytes() == b.beta_hat.tobytes() and a.neg_log_pl == b.neg_log_pl


def test_summary_roundtrip_and_status():
    panel = Panel(np.zeros((6, 6)), np.array(SIX_X))
    fit = fit_cox(panel, make_adoption(SIX_T, 6))
    record = json.loads(json.dumps(fit_summary(fit)))
    assert record["converged"] is True and record["status"] == "converged"
    back = fit_from_summary(record)
    assert back.beta_hat.tolist() == fit.beta_hat.tolist()
    assert fit_summary(back) == fit_summary(fit)
    try:
        fit_cox(Panel(np.zeros((2, 3)), np.array([1.0, 0.0])), make_adoption([1.0, 2.0], 3))
    except Diverged as exc:
        record = fit_summary(exc)
    assert record["status"] == "diverged" and record["converged"] is False


def test_censored_units_are_at_risk_throughout():
    panel = Panel(np.zeros((3, 4)), np.array([0.0, 1.0, 2.0]))
    rs = risk_sets(panel, AdoptionData([3.9, 2.0, 7.0], [False, False, True], 4))
    assert rs.event_units.tolist() == [1, 0]
    assert rs.at_risk.tolist() == [[True, True, True], [True, False, True]]
