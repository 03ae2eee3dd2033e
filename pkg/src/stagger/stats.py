"""Test statistics evaluated with each unit in turn cast as the first adopter.

Every plugin exposes ``candidates(panel, t1)`` returning one value per unit
and ``__call__(panel, i, t1)`` for a single unit. Window conventions, with t
ranging over the integer grid 1..t_max:

* difference-in-differences: post window t > T1, pre window 1 <= t <= T1,
  each averaged over its own terms;
* synthetic control: post t >= T1, pre t < T1;
* AR(1) correction windows: rho_plus over t > T1 (mean), rho_minus over
  1 <= t < T1 divided by floor(T1).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateRegressor, EmptyPrePeriod, EmptyWindow
from .panel import AdoptionData, Panel, first_adopter


def _grid(t_max: int) -> np.ndarray:
    return np.arange(1, t_max + 1)


def _integer_note(t1: float) -> list[str]:
    if float(t1).is_integer():
        return [f"first adoption time {t1} is an integer: the pre window includes it, rho_minus excludes it"]
    return []


def did_windows(t1: float, t_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Boolean masks over 1..t_max for the post (t > T1) and pre (t <= T1) windows."""
    if math.floor(t1) < 1 or math.ceil(t1) >= t_max:
        raise EmptyWindow(f"T1={t1} leaves an empty window on 1..{t_max}")
    t = _grid(t_max)
    return t > t1, (t >= 1) & (t <= t1)


def did_candidates(panel: Panel, t1: float) -> np.ndarray:
    post, pre = did_windows(t1, panel.t_max)
    y = panel.outcomes
    n = panel.n
    contrast = y - (y.sum(axis=0, keepdims=True) - y) / (n - 1)
    return contrast[:, post].mean(axis=1) - contrast[:, pre].mean(axis=1)


def did_statistic(panel: Panel, candidate: int, t1: float) -> float:
    """Post-minus-pre change in the candidate's gap to the mean of the other units."""
    post, pre = did_windows(t1, panel.t_max)
    y = panel.outcomes
    others = np.delete(y, candidate, axis=0).mean(axis=0)
    gap = y[candidate] - others
    return float(gap[post].mean() - gap[pre].mean())


# ---------------------------------------------------------------- synthetic control


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    r = np.flatnonzero(u - css / k > 0)[-1]
    return np.maximum(v - css[r] / (r + 1), 0.0)


# How often the solver tries an exact solve on the current support.
POLISH_EVERY = 25


@dataclass
class SimplexLSResult:
    w: np.ndarray
    objective: float
    gap: float
    iterations: int
    trace: list = field(default_factory=list)


def _gap(grad, w):
    return float(grad @ w - grad.min())


def simplex_least_squares(a: np.ndarray, y: np.ndarray, tol: float = 1e-10, max_iter: int = 10_000) -> SimplexLSResult:
    """min ||y - a w||^2 over the probability simplex.

    Monotone accelerated projected gradient from the barycentre, stopped on
    the Frank-Wolfe duality gap (relative to max(1, ||y||^2)), followed by an
    exact solve of the equality-constrained problem on the detected support.
    """
    m = a.shape[1]
    if m == 1:
        r = y - a[:, 0]
        return SimplexLSResult(np.ones(1), float(r @ r), 0.0, 0, [float(r @ r)])
    gram = a.T @ a
    aty = a.T @ y
    yy = float(y @ y)
    scale = max(1.0, yy)
    lip = 2.0 * max(np.linalg.eigvalsh(gram)[-1], 1e-300)

    def f(w):
        return float(w @ gram @ w - 2 * aty @ w + yy)

    def grad(w):
        return 2.0 * (gram @ w - aty)

    x = np.full(m, 1.0 / m)
    fx = f(x)
    trace = [fx]
    yk = x.copy()
    tk = 1.0
    it = 0
    g = grad(x)
    while it < max_iter and _gap(g, x) > tol * scale:
        it += 1
        z = project_simplex(yk - grad(yk) / lip)
        fz = f(z)
        x_prev = x
        if fz <= fx:
            x, fx = z, fz
        t_next = (1 + math.sqrt(1 + 4 * tk * tk)) / 2
        yk = x + (tk / t_next) * (z - x) + ((tk - 1) / t_next) * (x - x_prev)
        tk = t_next
        trace.append(fx)
        g = grad(x)
        if it % POLISH_EVERY == 0:
            xp, fp = _polish(gram, aty, yy, x, fx)
            if fp < fx and _gap(grad(xp), xp) <= tol * scale:
                x, fx = xp, fp
                trace.append(fx)
                return SimplexLSResult(x, max(fx, 0.0), _gap(grad(x), x), it, trace)
    x, fx = _polish(gram, aty, yy, x, fx)
    if fx < trace[-1]:
        trace.append(fx)
    g = grad(x)
    return SimplexLSResult(x, max(fx, 0.0), _gap(g, x), it, trace)


def _polish(gram, aty, yy, x, fx):
    """Solve the KKT system on the support of x; keep it only if feasible and no worse."""
    support = np.flatnonzero(x > 1e-9)
    k = support.size
    kkt = np.zeros((k + 1, k + 1))
    kkt[:k, :k] = 2 * gram[np.ix_(support, support)]
    kkt[:k, k] = 1.0
    kkt[k, :k] = 1.0
    rhs = np.append(2 * aty[support], 1.0)
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        return x, fx
    if not np.all(np.isfinite(sol)) or np.any(sol[:k] < 0):
        return x, fx
    w = np.zeros_like(x)
    w[support] = sol[:k]
    w /= w.sum()
    fw = float(w @ gram @ w - 2 * aty @ w + yy)
    if fw <= fx:
        return w, fw
    return x, fx


@dataclass
class SynthWeights:
    w: np.ndarray
    pre_fit_sse: float
    gap: float = 0.0
    iterations: int = 0
    objective_trace: list = field(default_factory=list)


def pre_period(t1: float, t_max: int) -> np.ndarray:
    return _grid(t_max) < t1


def synth_weights(panel: Panel, candidate: int, t1: float, tol: float = 1e-10, max_iter: int = 10_000) -> SynthWeights:
    """Convex donor weights matching the candidate's pre-period outcome path."""
    pre = pre_period(t1, panel.t_max)
    if not pre.any():
        raise EmptyPrePeriod(f"no grid time before T1={t1}")
    if panel.n < 2:
        raise EmptyPrePeriod("synthetic control needs at least one donor")
    donors = np.delete(np.arange(panel.n), candidate)
    y = panel.outcomes[candidate, pre]
    a = panel.outcomes[np.ix_(donors, np.flatnonzero(pre))].T
    res = simplex_least_squares(a, y, tol, max_iter)
    w = np.zeros(panel.n)
    w[donors] = res.w
    return SynthWeights(w, res.objective, res.gap, res.iterations, res.trace)


def synth_statistic(panel: Panel, candidate: int, t1: float, tol: float = 1e-10, max_iter: int = 10_000) -> float:
    """Post-period over pre-period sum of squared synthetic-control residuals.

    A perfect pre-period fit with nonzero post residuals returns +inf.
    """
    pre = pre_period(t1, panel.t_max)
    post = _grid(panel.t_max) >= t1
    if not post.any():
        raise EmptyWindow(f"no grid time at or after T1={t1}")
    sw = synth_weights(panel, candidate, t1, tol, max_iter)
    resid = panel.outcomes[candidate] - sw.w @ panel.outcomes
    num = float(resid[post] @ resid[post])
    den = float(resid[pre] @ resid[pre])
    if num == 0.0:
        return 0.0
    if den <= 1e-20 * max(float(panel.outcomes[candidate, pre] @ panel.outcomes[candidate, pre]), 1e-300):
        return math.inf
    return num / den


# ---------------------------------------------------------------- robust statistics


def rho_windows(rho: float, t1: float, t_max: int) -> tuple[float, float]:
    """Average AR(1) loadings rho^t / (1 - rho) after and before the first adoption."""
    if abs(rho) >= 1:
        raise ValueError("|rho| must be below 1")
    if math.floor(t1) < 1 or math.ceil(t1) >= t_max:
        raise EmptyWindow(f"T1={t1} leaves an empty window on 1..{t_max}")
    t = _grid(t_max)
    load = rho ** t.astype(float) / (1 - rho)
    plus = float(load[t > t1].mean())
    minus = float(load[(t >= 1) & (t < t1)].sum() / math.floor(t1))
    return plus, minus


def _scalar_x(panel: Panel) -> np.ndarray:
    return panel.scalar_static_covariate()


def estimate_gamma(panel: Panel, adoption: AdoptionData | None = None) -> float:
    """Covariate slope from the first period, differenced against unit 1 and GLS-weighted."""
    x0 = _scalar_x(panel)
    y = panel.outcomes[:, 0] - panel.outcomes[0, 0]
    x = x0 - x0[0]
    n = panel.n
    cy = y - y.sum() / (n + 1)
    cx = x - x.sum() / (n + 1)
    den = float(cx @ cx)
    if den <= 0.0:
        raise DegenerateRegressor("covariate has no variation across units")
    return float(cx @ cy) / den


def _rho_sums(y: np.ndarray, x: np.ndarray, gamma: float, n: int):
    """Per-dropped-unit numerator and denominator of the stacked AR slope.

    For each unit i the rows without i are transformed by I - U/n within each
    column; the sums use totals minus row i and the identity
    sum_r (a_r - A/n)(b_r - B/n) = sum_r a_r b_r - A B (n + 1) / n^2
    over the n - 1 remaining rows.
    """
    resp = y[:, 1:] - gamma * x[:, None]
    lag = y[:, :-1]
    k = (n + 1) / n**2
    s_r = resp.sum(axis=0) - resp
    s_z = lag.sum(axis=0) - lag
    rz = (resp * lag).sum(axis=0) - resp * lag
    zz = (lag * lag).sum(axis=0) - lag * lag
    num = (rz - k * s_r * s_z).sum(axis=1)
    den = (zz - k * s_z * s_z).sum(axis=1)
    return num, den


def estimate_rho(panel: Panel, adoption: AdoptionData | None, gamma_hat: float, drop: int | None = None) -> float:
    """AR(1) coefficient from all unit-period pairs except the dropped unit.

    ``drop`` defaults to the first adopter.
    """
    if panel.n < 3:
        raise DegenerateRegressor("need at least three units")
    if drop is None:
        drop = first_adopter(adoption)[0]
    num, den = _rho_sums(panel.outcomes, _scalar_x(panel), gamma_hat, panel.n)
    if den[drop] <= 0.0:
        raise DegenerateRegressor("lagged outcomes carry no variation")
    return float(num[drop] / den[drop])


@dataclass(frozen=True)
class RobustPlugins:
    gamma_hat: float
    rho_hat: float
    rho_plus: float
    rho_minus: float


def plugins_from(gamma: float, rho: float, t1: float, t_max: int) -> RobustPlugins:
    plus, minus = rho_windows(rho, t1, t_max)
    return RobustPlugins(float(gamma), float(rho), plus, minus)


def estimate_plugins(panel: Panel, t1: float, drop: int) -> RobustPlugins:
    g = estimate_gamma(panel)
    r = estimate_rho(panel, None, g, drop=drop)
    return plugins_from(g, r, t1, panel.t_max)


def _correction(panel: Panel, x: np.ndarray, p: RobustPlugins):
    n = panel.n
    return n / (n - 1) * p.gamma_hat * (p.rho_plus - p.rho_minus) * (x.mean() - x)


def robust_statistic(
    panel: Panel, candidate: int, t1: float, plugins: RobustPlugins | None = None, feasible: bool = False
) -> float:
    """Difference-in-differences net of the AR(1) covariate drift.

    With ``feasible`` and no plugins, gamma and rho are estimated from the
    data with the candidate in the first-adopter role.
    """
    x = _scalar_x(panel)
    if plugins is None:
        if not feasible:
            raise ValueError("oracle robust statistic needs plugins")
        plugins = estimate_plugins(panel, t1, candidate)
    return did_statistic(panel, candidate, t1) - float(_correction(panel, x, plugins)[candidate])


# ---------------------------------------------------------------- plugins


class DidStatistic:
    kind = "did"

    def __init__(self):
        self.last_notes: list[str] = []

    def params(self) -> dict:
        return {}

    def __call__(self, panel, i, t1):
        return did_statistic(panel, i, t1)

    def candidates(self, panel, t1):
        self.last_notes = _integer_note(t1)
        return did_candidates(panel, t1)


class SynthStatistic:
    kind = "synth"

    def __init__(self, tol: float = 1e-10, max_iter: int = 10_000):
        self.tol = tol
        self.max_iter = max_iter
        self.last_notes: list[str] = []

    def params(self) -> dict:
        return {"tol": self.tol, "max_iter": self.max_iter}

    def __call__(self, panel, i, t1):
        return synth_statistic(panel, i, t1, self.tol, self.max_iter)

    def candidates(self, panel, t1):
        s = np.array([self(panel, i, t1) for i in range(panel.n)])
        self.last_notes = [
            f"unit {panel.unit_labels[i]}: perfect pre-period fit, statistic set to +inf"
            for i in np.flatnonzero(np.isinf(s))
        ]
        return s


class RobustOracleStatistic:
    kind = "robust_oracle"

    def __init__(self, gamma: float, rho: float):
        self.gamma = float(gamma)
        self.rho = float(rho)
        self.last_notes: list[str] = []

    def params(self) -> dict:
        return {"gamma": self.gamma, "rho": self.rho}

    def __call__(self, panel, i, t1):
        return robust_statistic(panel, i, t1, plugins_from(self.gamma, self.rho, t1, panel.t_max))

    def candidates(self, panel, t1):
        self.last_notes = _integer_note(t1)
        x = _scalar_x(panel)
        p = plugins_from(self.gamma, self.rho, t1, panel.t_max)
        return did_candidates(panel, t1) - _correction(panel, x, p)


class RobustFeasibleStatistic:
    """Robust statistic with gamma and rho estimated per candidate.

    Gamma does not depend on the first adopter; rho drops the candidate's row.
    """

    kind = "robust_feasible"

    def __init__(self):
        self.last_notes: list[str] = []
        self.last_gamma = float("nan")

    def params(self) -> dict:
        return {}

    def __call__(self, panel, i, t1):
        return robust_statistic(panel, i, t1, feasible=True)

    def candidates(self, panel, t1):
        self.last_notes = _integer_note(t1)
        x = _scalar_x(panel)
        n = panel.n
        if n < 3:
            raise DegenerateRegressor("need at least three units")
        g = estimate_gamma(panel)
        num, den = _rho_sums(panel.outcomes, x, g, n)
        if np.any(den <= 0.0):
            raise DegenerateRegressor("lagged outcomes carry no variation")
        rho = num / den
        if np.any(np.abs(rho) >= 1):
            raise DegenerateRegressor("estimated AR coefficient outside (-1, 1)")
        post, pre = did_windows(t1, panel.t_max)
        t = _grid(panel.t_max).astype(float)
        load = rho[:, None] ** t[None, :] / (1 - rho[:, None])
        plus = load[:, post].mean(axis=1)
        minus = load[:, (t < t1)].sum(axis=1) / math.floor(t1)
        self.last_gamma = g
        corr = n / (n - 1) * g * (plus - minus) * (x.mean() - x)
        return did_candidates(panel, t1) - corr


STATISTICS = {
    "did": DidStatistic,
    "synth": SynthStatistic,
    "robust_oracle": RobustOracleStatistic,
    "robust_feasible": RobustFeasibleStatistic,
}


def make_statistic(kind: str, **params):
    try:
        cls = STATISTICS[kind]
    except KeyError:
        raise ValueError(f"unknown statistic {kind!r}; choose from {sorted(STATISTICS)}") from None
    return cls(**params)
