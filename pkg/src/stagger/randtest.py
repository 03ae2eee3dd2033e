"""Randomization test over the identity of the first adopter.

Under the null the observed statistic is one draw from the candidate
statistics s_i, where unit i is drawn with probability w_i (the conditional
probability that i adopts first given the first adoption time and the
covariates). The critical value is the weighted (1 - alpha) quantile.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DataError, FirstAdoptionAtBoundary
from .panel import AdoptionData, Panel, first_adopter

# Slack when comparing cumulative weights with 1 - alpha, so that e.g. nineteen
# weights of 1/20 reach 0.95 despite floating-point summation error.
CDF_SLACK = 1e-12
WEIGHT_MODES = ("uniform", "feasible", "infeasible", "custom")


@dataclass(frozen=True, eq=False)
class WeightVector:
    w: np.ndarray

    def __post_init__(self):
        w = np.array(self.w, dtype=float)
        if w.ndim != 1 or not np.all(np.isfinite(w)) or np.any(w < 0):
            raise DataError("weights must be a finite non-negative vector")
        if abs(w.sum() - 1.0) > 1e-12:
            raise DataError(f"weights sum to {w.sum()!r}, not 1")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    def __len__(self):
        return self.w.shape[0]

    @classmethod
    def normalized(cls, raw) -> "WeightVector":
        raw = np.asarray(raw, dtype=float)
        return cls(raw / raw.sum())


def uniform_weights(n: int) -> WeightVector:
    return WeightVector(np.full(n, 1.0 / n))


def softmax(eta) -> np.ndarray:
    eta = np.asarray(eta, dtype=float)
    e = np.exp(eta - eta.max())
    return e / e.sum()


def adopter_weights(panel: Panel, t1: float, beta) -> WeightVector:
    """Conditional first-adopter probabilities under a proportional-hazards model."""
    if t1 >= panel.t_max:
        raise FirstAdoptionAtBoundary(f"first adoption {t1} is not before t_max={panel.t_max}")
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    return WeightVector(softmax(panel.covariates_at(t1) @ beta))


def _weighted_cdf(s, w):
    values, inverse = np.unique(np.asarray(s, dtype=float), return_inverse=True)
    mass = np.bincount(inverse.ravel(), weights=np.asarray(w, dtype=float), minlength=values.size)
    return values, mass, np.cumsum(mass)


def weighted_critical_value(s, w, alpha: float) -> float:
    """Smallest candidate value whose weighted CDF reaches 1 - alpha."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    w = w.w if isinstance(w, WeightVector) else w
    values, _, cdf = _weighted_cdf(s, w)
    hit = np.flatnonzero(cdf >= 1 - alpha - CDF_SLACK)
    return float(values[hit[0]] if hit.size else values[-1])


def p_value(s, w, s_obs: float) -> float:
    w = w.w if isinstance(w, WeightVector) else np.asarray(w, dtype=float)
    return float(min(1.0, np.sum(w[np.asarray(s) >= s_obs])))


def randomized_extra_prob(s, w, alpha: float, critical_value: float) -> float:
    """Probability of rejecting when the observed statistic sits exactly on the critical value.

    Chosen so the randomized test has rejection probability exactly alpha
    under the weighted reference distribution.
    """
    w = w.w if isinstance(w, WeightVector) else np.asarray(w, dtype=float)
    s = np.asarray(s, dtype=float)
    at = s == critical_value
    atom = float(w[at].sum())
    if atom <= 0:
        return 0.0
    cdf = float(w[s <= critical_value].sum())
    return float(np.clip((cdf - (1 - alpha)) / atom, 0.0, 1.0))


@dataclass
class TestReport:
    s_obs: float
    s_candidates: np.ndarray
    weights: WeightVector
    alpha: float
    critical_value: float
    p_value: float
    reject: bool
    randomized_extra_prob: float
    weight_mode: str
    first_adopter: int = -1
    first_adoption_time: float = float("nan")
    unit_labels: tuple = ()
    statistic: str = ""
    notes: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    __test__ = False

    @property
    def on_boundary(self) -> bool:
        return self.s_obs == self.critical_value

    def rejection_probability(self) -> float:
        """Rejection probability of the randomized test given the data."""
        if self.reject:
            return 1.0
        return self.randomized_extra_prob if self.on_boundary else 0.0

    def to_dict(self) -> dict:
        return {
            "s_obs": _num(self.s_obs),
            "s_candidates": [_num(v) for v in self.s_candidates],
            "weights": [float(v) for v in self.weights.w],
            "alpha": float(self.alpha),
            "critical_value": _num(self.critical_value),
            "p_value": float(self.p_value),
            "reject": bool(self.reject),
            "randomized_extra_prob": float(self.randomized_extra_prob),
            "weight_mode": self.weight_mode,
            "first_adopter": self.unit_labels[self.first_adopter] if self.unit_labels else int(self.first_adopter),
            "first_adoption_time": float(self.first_adoption_time),
            "unit_labels": list(self.unit_labels),
            "statistic": self.statistic,
            "notes": list(self.notes),
            "config": self.config,
        }

    def candidate_rows(self):
        labels = self.unit_labels or tuple(str(i + 1) for i in range(len(self.s_candidates)))
        return [(u, _num(s), float(w)) for u, s, w in zip(labels, self.s_candidates, self.weights.w)]


def _num(v):
    """JSON has no infinity; the +inf sentinel is written as the string "inf"."""
    v = float(v)
    if np.isfinite(v):
        return v
    return "inf" if v > 0 else "-inf"


def evaluate(s, weights: WeightVector, observed: int, alpha: float, weight_mode: str = "custom") -> TestReport:
    """Decision and p-value from precomputed candidate statistics."""
    if weight_mode not in WEIGHT_MODES:
        raise ValueError(f"unknown weight mode {weight_mode!r}")
    s = np.asarray(s, dtype=float)
    if len(weights) != s.shape[0]:
        raise DataError("weights and candidate statistics differ in length")
    s_obs = float(s[observed])
    c = weighted_critical_value(s, weights, alpha)
    return TestReport(
        s_obs=s_obs,
        s_candidates=s,
        weights=weights,
        alpha=alpha,
        critical_value=c,
        p_value=p_value(s, weights, s_obs),
        reject=bool(s_obs > c),
        randomized_extra_prob=randomized_extra_prob(s, weights, alpha, c),
        weight_mode=weight_mode,
        first_adopter=int(observed),
    )


def run_test(
    panel: Panel,
    adoption: AdoptionData,
    statistic: Callable,
    weights: WeightVector,
    alpha: float = 0.05,
    weight_mode: str = "custom",
) -> TestReport:
    """Evaluate the statistic with every unit placed in the first-adopter role.

    ``statistic`` is a plugin from :mod:`stagger.stats` (anything exposing
    ``candidates(panel, t1)`` returning one value per unit), or a plain
    callable ``f(panel, i, t1)``.
    """
    i1, t1 = first_adopter(adoption)
    if t1 >= panel.t_max:
        raise FirstAdoptionAtBoundary(f"first adoption {t1} is not before t_max={panel.t_max}")
    if hasattr(statistic, "candidates"):
        s = np.asarray(statistic.candidates(panel, t1), dtype=float)
    else:
        s = np.array([statistic(panel, i, t1) for i in range(panel.n)], dtype=float)
    report = evaluate(s, weights, i1, alpha, weight_mode)
    report.first_adoption_time = t1
    report.unit_labels = panel.unit_labels
    report.statistic = getattr(statistic, "kind", getattr(statistic, "__name__", ""))
    report.notes.extend(getattr(statistic, "last_notes", []))
    return report


def decide_randomized(report: TestReport, u: float) -> bool:
    if report.reject:
        return True
    return bool(report.on_boundary and u < report.randomized_extra_prob)
