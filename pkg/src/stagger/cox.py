"""Cox partial likelihood for adoption times with right-censoring at t_max."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AllCensored, Diverged, IncompatibleOption, MaxIterExceeded, NonFinite, NonIdentified, StaggerError
from .panel import AdoptionData, Panel, round_time

# An optimum whose curvature has shrunk below this fraction of the curvature
# at beta = 0 sits at infinity along some direction (monotone likelihood).
CURVATURE_COLLAPSE = 1e-6
IDENTIFICATION_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class RiskSetIndex:
    """Event units sorted by time, at-risk masks and the covariates each event sees.

    ``at_risk[e, j]`` is true when unit j has T_j >= T_e; censored units count
    as at risk through t_max. ``z[e, j]`` is the covariate of unit j used in the
    denominator for event e; ``x_event[e]`` the event unit's own covariate.
    """

    event_units: np.ndarray
    event_times: np.ndarray
    at_risk: np.ndarray
    z: np.ndarray
    x_event: np.ndarray


def risk_sets(panel: Panel, adoption: AdoptionData, own_time: bool = False) -> RiskSetIndex:
    """Build risk sets.

    ``own_time`` evaluates denominator covariates at each unit's own adoption
    time rather than at the event time. That form is undefined for censored
    units, so it refuses data with any censoring.
    """
    t = adoption.times
    events = np.flatnonzero(~adoption.censored)
    events = events[np.argsort(t[events], kind="stable")]
    at_risk = t[None, :] >= t[events][:, None]
    x = panel.covariates
    x_event = np.stack([x[i, round_time(t[i], panel.t_max) - 1] for i in events]) if len(events) else np.zeros((0, panel.d))
    if own_time:
        if adoption.censored.any():
            raise IncompatibleOption("own-time denominator is undefined for censored units")
        own = np.stack([x[j, round_time(t[j], panel.t_max) - 1] for j in range(panel.n)])
        z = np.broadcast_to(own, (len(events),) + own.shape)
    else:
        cols = np.array([round_time(v, panel.t_max) - 1 for v in t[events]], dtype=int)
        z = np.transpose(x[:, cols, :], (1, 0, 2))
    return RiskSetIndex(events, t[events], at_risk, z, x_event)


def _terms(rs: RiskSetIndex, beta: np.ndarray, order: int):
    eta = rs.z @ beta
    eta = np.where(rs.at_risk, eta, -np.inf)
    m = eta.max(axis=1, keepdims=True)
    e = np.exp(eta - m)
    s = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(s))[:, 0]
    value = float(np.sum(lse - rs.x_event @ beta))
    if not np.isfinite(value):
        raise NonFinite("partial likelihood overflowed")
    if order == 0:
        return value, None, None
    p = e / s
    mu = np.einsum("ej,ejk->ek", p, rs.z)
    grad = (mu - rs.x_event).sum(axis=0)
    if order == 1:
        return value, grad, None
    second = np.einsum("ej,ejk,ejl->kl", p, rs.z, rs.z)
    hess = second - mu.T @ mu
    return value, grad, hess


def neg_log_partial_likelihood(panel: Panel, adoption: AdoptionData, beta, own_time: bool = False) -> float:
    """Negative log partial likelihood at beta."""
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    return _terms(risk_sets(panel, adoption, own_time), beta, 0)[0]


def partial_likelihood_gradient(panel: Panel, adoption: AdoptionData, beta, own_time: bool = False) -> np.ndarray:
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    return _terms(risk_sets(panel, adoption, own_time), beta, 1)[1]


@dataclass(frozen=True)
class CoxFit:
    beta_hat: np.ndarray
    neg_log_pl: float
    iterations: int
    gradient_norm: float
    converged: bool
    ridge: float = 0.0
    own_time: bool = False


def fit_cox(
    panel: Panel,
    adoption: AdoptionData,
    tol: float = 1e-8,
    max_iter: int = 100,
    ridge: float = 0.0,
    bound: float = 50.0,
    own_time: bool = False,
    index: RiskSetIndex | None = None,
) -> CoxFit:
    """Newton-Raphson with step halving on the (optionally ridge-penalized) objective.

    Raises NonIdentified when the information at beta = 0 is singular,
    Diverged when the iterates leave the ball of radius ``bound`` or settle
    where the curvature has collapsed (an infinite maximizer), and
    MaxIterExceeded otherwise when the gradient never drops below ``tol``.
    """
    rs = index if index is not None else risk_sets(panel, adoption, own_time=own_time)
    d = panel.d
    if len(rs.event_units) == 0:
        raise AllCensored("no uncensored adoption")
    if d == 0:
        v = _terms(rs, np.zeros(0), 0)[0]
        return CoxFit(np.zeros(0), v, 0, 0.0, True, ridge, own_time)

    def objective(b, order):
        v, g, h = _terms(rs, b, order)
        v += ridge * float(b @ b)
        if g is not None:
            g = g + 2 * ridge * b
        if h is not None:
            h = h + 2 * ridge * np.eye(d)
        return v, g, h

    beta = np.zeros(d)
    value, grad, hess = objective(beta, 2)
    base_scale = float(np.einsum("ej,ejk,ejk->", rs.at_risk / rs.at_risk.sum(1, keepdims=True), rs.z, rs.z))
    h0_min = float(np.linalg.eigvalsh(hess)[0])
    if ridge == 0 and (base_scale == 0 or h0_min <= IDENTIFICATION_TOL * base_scale):
        raise NonIdentified("non-identified: no within-risk-set covariate variation in some direction")

    for it in range(1, max_iter + 1):
        if np.max(np.abs(grad)) <= tol:
            return _finish(beta, value, it - 1, grad, hess, h0_min, ridge, own_time)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = grad
        t = 1.0
        slack = 1e-13 * max(1.0, abs(value))
        for _ in range(60):
            cand = beta - t * step
            v = objective(cand, 0)[0]
            if v <= value + slack:
                break
            t *= 0.5
        else:
            raise MaxIterExceeded("line search stalled before the gradient tolerance was met")
        beta = cand
        if np.linalg.norm(beta) > bound:
            raise Diverged(f"|beta| exceeded {bound}: monotone likelihood")
        value, grad, hess = objective(beta, 2)
    if np.max(np.abs(grad)) <= tol:
        return _finish(beta, value, max_iter, grad, hess, h0_min, ridge, own_time)
    raise MaxIterExceeded(f"no convergence in {max_iter} iterations")


def _finish(beta, value, iterations, grad, hess, h0_min, ridge, own_time):
    gnorm = float(np.max(np.abs(grad)))
    if ridge == 0 and float(np.linalg.eigvalsh(hess)[0]) <= CURVATURE_COLLAPSE * h0_min:
        raise Diverged("curvature vanished at the optimum: monotone likelihood")
    return CoxFit(beta.copy(), float(value), int(iterations), gnorm, True, float(ridge), own_time)


def _status(exc: BaseException) -> str:
    return {
        "NonIdentified": "non_identified",
        "Diverged": "diverged",
        "MaxIterExceeded": "max_iter_exceeded",
    }.get(type(exc).__name__, "error")


def fit_summary(fit: CoxFit | StaggerError) -> dict:
    """JSON-ready record of a fit, or of the error that stopped it."""
    if isinstance(fit, BaseException):
        return {
            "status": _status(fit),
            "converged": False,
            "message": str(fit),
            "beta_hat": None,
            "neg_log_pl": None,
            "iterations": None,
            "gradient_norm": None,
            "ridge": None,
            "own_time_denominator": None,
        }
    return {
        "status": "converged" if fit.converged else "not_converged",
        "converged": bool(fit.converged),
        "message": "",
        "beta_hat": [float(b) for b in fit.beta_hat],
        "neg_log_pl": float(fit.neg_log_pl),
        "iterations": int(fit.iterations),
        "gradient_norm": float(fit.gradient_norm),
        "ridge": float(fit.ridge),
        "own_time_denominator": bool(fit.own_time),
    }


def fit_from_summary(record: dict) -> CoxFit:
    if record.get("beta_hat") is None:
        raise ValueError(f"record has no fit: status {record.get('status')}")
    return CoxFit(
        np.asarray(record["beta_hat"], dtype=float),
        float(record["neg_log_pl"]),
        int(record["iterations"]),
        float(record["gradient_norm"]),
        bool(record["converged"]),
        float(record["ridge"]),
        bool(record["own_time_denominator"]),
    )
