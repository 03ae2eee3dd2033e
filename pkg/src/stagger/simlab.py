"""Data-generating processes and the Monte Carlo driver.

Two adoption laws share one outcome model. Covariates are X_i ~ U(-10, 10);
untreated outcomes follow the AR(1) recursion

    Y0[i, t] = rho * Y0[i, t-1] + delta * sqrt(t) + gamma * X_i + eps[i, t],  Y0[i, 0] = 0,

and observed outcomes add tau once a unit has adopted. Adoption is either
exponential with rate exp(beta * X_i) (proportional hazards) or log-normal with
location -m(X_i) (accelerated failure time, misspecified for a Cox fit).

Natural adoption times are tiny compared with a unit time grid (15% of units
adopt before roughly 5e-4 under the exponential law), so the Monte Carlo
driver rescales time: the continuous horizon at which 15% of units have
adopted is mapped onto ``periods`` grid steps.
"""
from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy import optimize, signal, special, stats

from .cox import fit_cox
from .errors import NoRoot, NumericalUnderflow, StaggerError
from .panel import AdoptionData, Panel
from .randtest import WeightVector, adopter_weights, evaluate, uniform_weights
from .stats import DidStatistic, RobustFeasibleStatistic, RobustOracleStatistic

QUADRATURE_NODES = 10_000
ALPHA = 0.05
TARGET_ADOPTION = 0.15


@dataclass(frozen=True)
class Dgp51Config:
    n: int
    rho: float = 0.2
    sigma: float = 0.2
    gamma: float = 0.0
    delta: float = 0.0
    beta: float = 1.0
    tau: float = 0.0
    rep_seed: int = 0
    x_low: float = -10.0
    x_high: float = 10.0

    def __post_init__(self):
        if abs(self.rho) >= 1 or self.sigma < 0 or self.n < 2:
            raise ValueError("need |rho| < 1, sigma >= 0 and n >= 2")


@dataclass(frozen=True)
class Dgp52Config:
    n: int
    rho: float = 0.2
    sigma: float = 0.2
    gamma: float = 0.0
    tau: float = 0.0
    k1: float = 0.0
    k2: float = 0.0
    theta: float = 8.0
    zeta_sd: float = 0.4
    rep_seed: int = 0
    delta: float = 0.0
    x_low: float = -10.0
    x_high: float = 10.0

    def __post_init__(self):
        if abs(self.rho) >= 1 or self.sigma < 0 or self.n < 2:
            raise ValueError("need |rho| < 1, sigma >= 0 and n >= 2")
        if self.k1 < 0 or self.k2 < 0 or self.theta < 0 or self.zeta_sd <= 0:
            raise ValueError("need k1, k2, theta >= 0 and zeta_sd > 0")


def aft_location(x, k1: float, k2: float, theta: float):
    """m(x) = 1 - logistic(2 k1 (x + theta)) + logistic(2 k2 (x - theta))."""
    x = np.asarray(x, dtype=float)
    return 1.0 - special.expit(2 * k1 * (x + theta)) + special.expit(2 * k2 * (x - theta))


# ---------------------------------------------------------------- calibration


def adoption_cdf(config, t: float) -> float:
    """P(T <= t) marginal over X, by midpoint quadrature on the covariate range."""
    if t <= 0:
        return 0.0
    if config.x_high == config.x_low:
        x = np.array([config.x_low])
    else:
        h = (config.x_high - config.x_low) / QUADRATURE_NODES
        x = config.x_low + h * (np.arange(QUADRATURE_NODES) + 0.5)
    if isinstance(config, Dgp51Config):
        p = -np.expm1(-t * np.exp(config.beta * x))
    else:
        loc = -aft_location(x, config.k1, config.k2, config.theta)
        p = special.ndtr((math.log(t) - loc) / config.zeta_sd)
    return float(p.mean())


def adoption_horizon(config, target_prob: float = TARGET_ADOPTION) -> float:
    """Continuous time at which a fraction ``target_prob`` of units has adopted."""
    if not 0 < target_prob < 1:
        raise ValueError("target_prob must lie in (0, 1)")
    g = lambda u: adoption_cdf(config, math.exp(u)) - target_prob
    lo, hi = -60.0, 60.0
    if g(lo) > 0 or g(hi) < 0:
        raise NoRoot("adoption CDF does not cross the target")
    return math.exp(optimize.brentq(g, lo, hi, xtol=1e-14, rtol=1e-14))


def calibrate_tmax(config, target_prob: float = TARGET_ADOPTION) -> int:
    """Smallest integer horizon (at least 2) with adoption probability >= target."""
    return max(2, math.ceil(adoption_horizon(config, target_prob)))


# ---------------------------------------------------------------- simulation


def _rng(config, rng):
    return rng if rng is not None else np.random.default_rng(config.rep_seed)


def draw_outcomes(rng, x, adoption_grid, t_max, rho, sigma, gamma, delta, tau) -> np.ndarray:
    n = x.shape[0]
    t = np.arange(1, t_max + 1)
    shocks = gamma * x[:, None] + delta * np.sqrt(t)[None, :]
    if sigma > 0:
        shocks = shocks + sigma * rng.standard_normal((n, t_max))
    y0 = signal.lfilter([1.0], [1.0, -rho], shocks, axis=1)
    return y0 + tau * (adoption_grid[:, None] <= t[None, :])


def _assemble(rng, config, x, times, t_max, time_scale):
    grid_times = times * time_scale
    y = draw_outcomes(rng, x, grid_times, t_max, config.rho, config.sigma, config.gamma, config.delta, config.tau)
    panel = Panel(y, x, time_invariant=(True,))
    return panel, AdoptionData(grid_times, grid_times > t_max, t_max)


def draw_adoption_51(rng, config: Dgp51Config):
    x = rng.uniform(config.x_low, config.x_high, config.n)
    return x, rng.exponential(1.0, config.n) / np.exp(config.beta * x)


def draw_adoption_52(rng, config: Dgp52Config):
    x = rng.uniform(config.x_low, config.x_high, config.n)
    zeta = config.zeta_sd * rng.standard_normal(config.n)
    return x, np.exp(-aft_location(x, config.k1, config.k2, config.theta) + zeta)


def simulate_51(config: Dgp51Config, t_max: int, rng=None, time_scale: float = 1.0):
    """One proportional-hazards panel; returns (panel, adoption, true beta)."""
    rng = _rng(config, rng)
    x, times = draw_adoption_51(rng, config)
    panel, adoption = _assemble(rng, config, x, times, t_max, time_scale)
    return panel, adoption, np.array([config.beta])


def simulate_52(config: Dgp52Config, t_max: int, rng=None, time_scale: float = 1.0):
    """One accelerated-failure-time panel."""
    rng = _rng(config, rng)
    x, times = draw_adoption_52(rng, config)
    return _assemble(rng, config, x, times, t_max, time_scale)


def aft_adopter_weights(config: Dgp52Config, x, t1: float) -> WeightVector:
    """First-adopter probabilities from the true log-normal hazards at natural time t1."""
    if t1 <= 0:
        raise ValueError("t1 must be positive")
    z = (math.log(t1) + aft_location(x, config.k1, config.k2, config.theta)) / config.zeta_sd
    log_h = stats.norm.logpdf(z) - stats.norm.logsf(z)
    if not np.all(np.isfinite(log_h)):
        raise NumericalUnderflow("log hazard not finite")
    e = np.exp(log_h - log_h.max())
    return WeightVector(e / e.sum())


# ---------------------------------------------------------------- Monte Carlo


@dataclass(frozen=True)
class McDesign:
    """One table cell. ``periods`` is the grid length the 15% horizon maps onto."""

    table: int
    n: int
    gamma: float = 0.0
    tau: float = 0.0
    k1: float = 0.0
    k2: float = 0.0
    theta: float = 8.0
    rho: float = 0.2
    sigma: float = 0.2
    delta: float = 0.0
    beta: float = 1.0
    replications: int = 10_000
    base_seed: int = 0
    periods: int = 100
    weights: tuple = ("uniform", "feasible", "infeasible")

    def __post_init__(self):
        if self.table not in (1, 2, 3, 4):
            raise ValueError("table must be 1, 2, 3 or 4")
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if self.periods < 3:
            raise ValueError("periods must be at least 3")
        object.__setattr__(self, "weights", tuple(self.weights))
        if not set(self.weights) <= {"uniform", "feasible", "infeasible"}:
            raise ValueError("weights must be drawn from uniform, feasible, infeasible")

    @classmethod
    def from_dict(cls, d: dict) -> "McDesign":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown design keys {sorted(unknown)}")
        return cls(**d)

    @property
    def statistics(self) -> tuple:
        return ("robust_feasible", "robust_oracle") if self.table == 4 else ("did",)

    def dgp(self):
        if self.table in (1, 2):
            return Dgp51Config(self.n, self.rho, self.sigma, self.gamma, self.delta, self.beta, self.tau)
        return Dgp52Config(self.n, self.rho, self.sigma, self.gamma, self.tau, self.k1, self.k2, self.theta, delta=self.delta)

    def variants(self) -> list[str]:
        return [f"{s}/{w}" for s in self.statistics for w in self.weights]


@dataclass
class McResult:
    design: McDesign
    horizon: float
    time_scale: float
    replications: int
    rejection_rate: dict
    nonrandomized_rate: dict
    mc_std_err: dict
    evaluated: dict
    excluded_reps: int
    redraws: int

    def rows(self) -> list[dict]:
        out = []
        d = self.design
        for s in d.statistics:
            row = {
                "table": d.table, "n": d.n, "gamma": d.gamma, "tau": d.tau,
                "k1": d.k1, "k2": d.k2, "statistic": s, "t_max": d.periods,
            }
            for w in d.weights:
                row[w] = self.rejection_rate[f"{s}/{w}"]
            for w in d.weights:
                row[f"{w}_nonrandomized"] = self.nonrandomized_rate[f"{s}/{w}"]
            for w in d.weights:
                row[f"mc_std_err_{w}"] = self.mc_std_err[f"{s}/{w}"]
            row["mc_std_err"] = max(self.mc_std_err[f"{s}/{w}"] for w in d.weights)
            row["replications"] = self.replications
            row["excluded_reps"] = self.excluded_reps
            row["redraws"] = self.redraws
            out.append(row)
        return out

    def to_csv(self) -> str:
        return results_csv([self])


def results_csv(results) -> str:
    rows = [r for res in results for r in res.rows()]
    buf = io.StringIO()
    fields = list(dict.fromkeys(k for r in rows for k in r))
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def replication_rng(base_seed: int, r: int) -> np.random.Generator:
    """Independent stream for replication r, split from base_seed by index."""
    return np.random.default_rng(np.random.SeedSequence(entropy=base_seed, spawn_key=(r,)))


MAX_REDRAWS = 100_000


def _valid_first(times, t_max) -> bool:
    t1 = times.min()
    return t1 >= 1.0 and math.ceil(t1) < t_max


def _replicate(design: McDesign, dgp, time_scale: float, r: int):
    """Decisions for one replication: {variant: (nonrandomized, randomized) or None}, redraw count."""
    rng = replication_rng(design.base_seed, r)
    draw = draw_adoption_51 if design.table in (1, 2) else draw_adoption_52
    t_max = design.periods
    for redraws in range(MAX_REDRAWS):
        x, times = draw(rng, dgp)
        if _valid_first(times * time_scale, t_max):
            break
    else:
        raise StaggerError("could not draw a first adoption inside the grid")
    panel, adoption = _assemble(rng, dgp, x, times, t_max, time_scale)
    u = rng.random()
    i1 = int(np.argmin(adoption.times))
    t1 = float(adoption.times[i1])

    weights = {}
    if "uniform" in design.weights:
        weights["uniform"] = uniform_weights(dgp.n)
    if "infeasible" in design.weights:
        if design.table in (1, 2):
            weights["infeasible"] = adopter_weights(panel, t1, [dgp.beta])
        else:
            weights["infeasible"] = aft_adopter_weights(dgp, x, t1 / time_scale)
    if "feasible" in design.weights:
        try:
            fit = fit_cox(panel, adoption)
            weights["feasible"] = adopter_weights(panel, t1, fit.beta_hat)
        except StaggerError:
            weights["feasible"] = None

    out = {}
    for s in design.statistics:
        if s == "did":
            stat = DidStatistic()
        elif s == "robust_oracle":
            stat = RobustOracleStatistic(dgp.gamma, dgp.rho)
        else:
            stat = RobustFeasibleStatistic()
        cand = stat.candidates(panel, t1)
        for w in design.weights:
            if weights[w] is None:
                out[f"{s}/{w}"] = None
                continue
            rep = evaluate(cand, weights[w], i1, ALPHA, w)
            out[f"{s}/{w}"] = (rep.reject, rep.reject or (rep.on_boundary and u < rep.randomized_extra_prob))
    return out, redraws


def _run_chunk(args):
    design, dgp, time_scale, start, stop = args
    return [_replicate(design, dgp, time_scale, r) for r in range(start, stop)]


def worker_count() -> int:
    cap = os.environ.get("STAGGER_THREADS")
    cpus = os.cpu_count() or 1
    if cap is None:
        return cpus
    return max(1, min(int(cap), cpus))


def run_monte_carlo(design: McDesign, replications: int | None = None, base_seed: int | None = None, workers: int | None = None) -> McResult:
    """Rejection rates (%) of each test variant over independent replications.

    Replication r always uses the stream split from (base_seed, r), and
    results are combined in replication order, so output does not depend on
    the worker count.
    """
    if replications is not None:
        design = replace(design, replications=replications)
    if base_seed is not None:
        design = replace(design, base_seed=base_seed)
    dgp = design.dgp()
    horizon = adoption_horizon(dgp)
    time_scale = design.periods / horizon
    reps = design.replications
    workers = workers or worker_count()
    if workers <= 1 or reps < 2 * workers:
        per_rep = _run_chunk((design, dgp, time_scale, 0, reps))
    else:
        bounds = np.linspace(0, reps, min(reps, 4 * workers) + 1).astype(int)
        jobs = [(design, dgp, time_scale, int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_rep = [x for chunk in pool.map(_run_chunk, jobs) for x in chunk]

    variants = design.variants()
    hits = {v: 0 for v in variants}
    hits_rand = {v: 0 for v in variants}
    count = {v: 0 for v in variants}
    excluded = 0
    redraws = 0
    for out, rd in per_rep:
        redraws += rd
        if any(out[v] is None for v in variants):
            excluded += 1
        for v in variants:
            if out[v] is None:
                continue
            count[v] += 1
            hits[v] += out[v][0]
            hits_rand[v] += out[v][1]

    def pct(h, c):
        return 100.0 * h / c if c else float("nan")

    rate = {v: pct(hits_rand[v], count[v]) for v in variants}
    nonrand = {v: pct(hits[v], count[v]) for v in variants}
    se = {v: mc_std_err(rate[v] / 100, count[v]) for v in variants}
    return McResult(design, horizon, time_scale, reps, rate, nonrand, se, count, excluded, redraws)


def mc_std_err(p: float, reps: int) -> float:
    """Standard error of a rejection proportion, in percentage points."""
    if reps <= 0 or not np.isfinite(p):
        return float("nan")
    return 100.0 * math.sqrt(p * (1 - p) / reps)
