"""Panel data model, the time-rounding map and CSV ingestion.

Units are indexed from 0 in first-appearance order. Times on the observation
grid run 1..t_max; adoption times are real-valued and may exceed t_max, in
which case the unit is censored.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import (
    AllCensored,
    DataError,
    DuplicateCell,
    MissingCell,
    NonFiniteValue,
    TiedAdoption,
)


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def round_time(t: float, t_max: int) -> int:
    """Map a real time to the observation grid: ceil(t) up to t_max, else t_max."""
    if t < 0:
        raise ValueError("time must be non-negative")
    if t > t_max:
        return int(t_max)
    return max(int(math.ceil(t)), 1) if t > 0 else 1


@dataclass(frozen=True)
class TimeIndex:
    value: float

    def rounded(self, t_max: int) -> int:
        return round_time(self.value, t_max)


@dataclass(frozen=True, eq=False)
class Panel:
    """Outcomes Y[i, t-1] and covariates X[i, t-1, :] on a balanced grid."""

    outcomes: np.ndarray
    covariates: np.ndarray
    unit_labels: tuple = ()
    covariate_names: tuple = ()
    time_invariant: tuple = ()

    def __post_init__(self):
        y = _frozen(self.outcomes)
        if y.ndim != 2:
            raise DataError("outcomes must be an n x t_max matrix")
        n, t_max = y.shape
        x = np.array(self.covariates, dtype=float)
        if x.ndim == 1 and x.size == n:
            x = np.repeat(x[:, None, None], t_max, axis=1)
        elif x.ndim == 2 and x.shape[0] == n and x.shape[1] != t_max:
            x = np.repeat(x[:, None, :], t_max, axis=1)
        elif x.ndim == 2 and x.shape == (n, t_max):
            x = x[:, :, None]
        elif x.ndim == 1 and x.size == 0:
            x = np.zeros((n, t_max, 0))
        if x.shape[:2] != (n, t_max) or x.ndim != 3:
            raise DataError(f"covariates of shape {x.shape} do not match {n}x{t_max}")
        if n < 1:
            raise DataError("panel needs at least one unit")
        if t_max < 2:
            raise DataError("t_max must be at least 2")
        if not np.all(np.isfinite(y)) or not np.all(np.isfinite(x)):
            raise NonFiniteValue("panel contains non-finite values")
        object.__setattr__(self, "outcomes", y)
        object.__setattr__(self, "covariates", _frozen(x))
        labels = tuple(str(u) for u in self.unit_labels) or tuple(str(i + 1) for i in range(n))
        if len(labels) != n:
            raise DataError("unit_labels length differs from n")
        object.__setattr__(self, "unit_labels", labels)
        d = x.shape[2]
        names = tuple(self.covariate_names) or tuple(f"x{k + 1}" for k in range(d))
        object.__setattr__(self, "covariate_names", names)
        inv = tuple(bool(v) for v in self.time_invariant) or tuple(
            bool(np.all(x[:, :, k] == x[:, :1, k])) for k in range(d)
        )
        object.__setattr__(self, "time_invariant", inv)

    @property
    def n(self) -> int:
        return self.outcomes.shape[0]

    @property
    def t_max(self) -> int:
        return self.outcomes.shape[1]

    @property
    def d(self) -> int:
        return self.covariates.shape[2]

    def covariates_at(self, t: float) -> np.ndarray:
        """All units' covariates at real time t, shape (n, d)."""
        return self.covariates[:, round_time(t, self.t_max) - 1, :]

    def scalar_static_covariate(self) -> np.ndarray:
        from .errors import RequiresScalarTimeInvariantCovariate

        if self.d != 1 or not np.all(self.covariates == self.covariates[:, :1, :]):
            raise RequiresScalarTimeInvariantCovariate(
                "statistic needs exactly one time-invariant covariate"
            )
        return self.covariates[:, 0, 0]

    def __eq__(self, other):
        if not isinstance(other, Panel):
            return NotImplemented
        return (
            np.array_equal(self.outcomes, other.outcomes)
            and np.array_equal(self.covariates, other.covariates)
            and self.unit_labels == other.unit_labels
            and self.covariate_names == other.covariate_names
        )


@dataclass(frozen=True, eq=False)
class AdoptionData:
    """Adoption times with explicit censoring flags (censored iff T > t_max)."""

    times: np.ndarray
    censored: np.ndarray
    t_max: int

    def __post_init__(self):
        t = _frozen(self.times)
        c = np.array(self.censored, dtype=bool)
        c.setflags(write=False)
        if t.shape != c.shape or t.ndim != 1:
            raise DataError("times and censored must be vectors of equal length")
        if not np.all(np.isfinite(t)):
            raise NonFiniteValue("adoption times must be finite")
        if np.any(t <= 0):
            raise DataError("adoption times must be strictly positive")
        if np.any(c != (t > self.t_max)):
            raise DataError("censoring flags disagree with times relative to t_max")
        obs = np.sort(t[~c])
        if obs.size > 1 and np.any(np.diff(obs) == 0):
            raise TiedAdoption("two uncensored adoption times are equal")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "censored", c)
        object.__setattr__(self, "t_max", int(self.t_max))

    @property
    def n(self) -> int:
        return self.times.shape[0]

    def __eq__(self, other):
        if not isinstance(other, AdoptionData):
            return NotImplemented
        return (
            self.t_max == other.t_max
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.censored, other.censored)
        )


def make_adoption(times, t_max: int) -> AdoptionData:
    times = np.asarray(times, dtype=float)
    return AdoptionData(times, times > t_max, t_max)


def covariate_at(panel: Panel, i: int, t: float) -> np.ndarray:
    return panel.covariates[i, round_time(t, panel.t_max) - 1, :]


def first_adopter(adoption: AdoptionData) -> tuple[int, float]:
    """Index and time of the earliest uncensored adoption."""
    if np.all(adoption.censored):
        raise AllCensored("every unit is censored")
    t = np.where(adoption.censored, np.inf, adoption.times)
    i = int(np.argmin(t))
    return i, float(t[i])


@dataclass(frozen=True)
class PanelSchema:
    unit: str = "unit"
    time: str = "time"
    outcome: str = "outcome"
    covariates: Sequence[str] | None = None
    time_invariant: Sequence[str] = field(default_factory=tuple)
    adoption_time: str = "adoption_time"
    censored: str = "censored"


def _read_adoption(df: pd.DataFrame, schema: PanelSchema, labels: list, t_max: int) -> AdoptionData:
    df = df.copy()
    df[schema.unit] = df[schema.unit].astype(str)
    if df[schema.unit].duplicated().any():
        raise DuplicateCell("duplicate unit in adoption data")
    by_unit = df.set_index(schema.unit)
    missing = [u for u in labels if u not in by_unit.index]
    if missing:
        raise MissingCell(f"no adoption record for units {missing}")
    cens = by_unit.loc[labels, schema.censored].astype(int).to_numpy()
    if not set(np.unique(cens)) <= {0, 1}:
        raise DataError("censored must be 0 or 1")
    raw = pd.to_numeric(by_unit.loc[labels, schema.adoption_time], errors="coerce").to_numpy(float)
    blank = np.isnan(raw)
    if np.any(blank & (cens == 0)):
        raise MissingCell("uncensored unit without an adoption time")
    times = np.where(blank, t_max + 1.0, raw)
    c = cens.astype(bool)
    if np.any(c != (times > t_max)):
        raise DataError("censored flag inconsistent with adoption_time and t_max")
    return AdoptionData(times, c, t_max)


def load_panel(
    path, schema: PanelSchema | None = None, adoption_path=None
) -> tuple[Panel, AdoptionData]:
    """Read a long-format panel CSV and its adoption table.

    If ``adoption_path`` is None the adoption columns must appear in the panel
    file, constant within each unit.
    """
    schema = schema or PanelSchema()
    df = pd.read_csv(path, dtype={schema.unit: str}, keep_default_na=False, na_values=[""], float_precision="round_trip")
    for col in (schema.unit, schema.time, schema.outcome):
        if col not in df.columns:
            raise DataError(f"missing column {col!r}")
    adoption_cols = {schema.adoption_time, schema.censored}
    covs = list(schema.covariates) if schema.covariates is not None else [
        c for c in df.columns if c not in {schema.unit, schema.time, schema.outcome} | adoption_cols
    ]
    labels = list(dict.fromkeys(df[schema.unit]))
    if df[schema.time].isna().any():
        raise MissingCell("blank time cell")
    times = df[schema.time].to_numpy(float)
    if np.any(times != np.round(times)) or np.any(times < 1):
        raise DataError("time column must hold positive integers")
    t_max = int(times.max())
    if df.duplicated([schema.unit, schema.time]).any():
        raise DuplicateCell("repeated (unit, time) pair")
    if len(df) != len(labels) * t_max:
        raise MissingCell("panel is not a complete unit x time grid")
    order = {u: k for k, u in enumerate(labels)}
    rows = df[schema.unit].map(order).to_numpy()
    cols = times.astype(int) - 1
    values = df[[schema.outcome] + covs].apply(pd.to_numeric, errors="coerce").to_numpy(float)
    if np.isnan(values).any():
        raise NonFiniteValue("blank or non-numeric value in panel")
    y = np.empty((len(labels), t_max))
    x = np.empty((len(labels), t_max, len(covs)))
    y[rows, cols] = values[:, 0]
    x[rows, cols, :] = values[:, 1:]
    inv = []
    for k, name in enumerate(covs):
        static = bool(np.all(x[:, :, k] == x[:, :1, k]))
        if name in schema.time_invariant and not static:
            raise DataError(f"covariate {name!r} declared time-invariant but varies")
        inv.append(static or name in schema.time_invariant)
    panel = Panel(y, x, tuple(labels), tuple(covs), tuple(inv))

    if adoption_path is not None:
        adf = pd.read_csv(adoption_path, dtype={schema.unit: str}, keep_default_na=False, na_values=[""], float_precision="round_trip")
        adoption = _read_adoption(adf, schema, labels, t_max)
    else:
        if not adoption_cols <= set(df.columns):
            raise DataError("adoption columns absent and no adoption file given")
        sub = df[[schema.unit, schema.adoption_time, schema.censored]]
        per_unit = sub.drop_duplicates()
        if per_unit[schema.unit].duplicated().any():
            raise DataError("adoption columns vary within a unit")
        adoption = _read_adoption(per_unit, schema, labels, t_max)
    return panel, adoption


def write_panel(panel: Panel, adoption: AdoptionData | None, path, adoption_path=None) -> None:
    """Write the long-format CSV (and adoption CSV) that load_panel reads back."""
    n, t_max = panel.n, panel.t_max
    data = {
        "unit": np.repeat(panel.unit_labels, t_max),
        "time": np.tile(np.arange(1, t_max + 1), n),
        "outcome": [repr(float(v)) for v in panel.outcomes.ravel()],
    }
    for k, name in enumerate(panel.covariate_names):
        data[name] = [repr(float(v)) for v in panel.covariates[:, :, k].ravel()]
    pd.DataFrame(data).to_csv(path, index=False)
    if adoption is not None and adoption_path is not None:
        pd.DataFrame(
            {
                "unit": panel.unit_labels,
                "adoption_time": [repr(float(v)) for v in adoption.times],
                "censored": adoption.censored.astype(int),
            }
        ).to_csv(adoption_path, index=False)


def detrend_covariates(panel: Panel) -> Panel:
    """Remove a common linear time trend from each covariate.

    The trend is fitted by pooled least squares of X[:, t, k] on (1, t) across
    all units; the fitted slope times centred time is subtracted so covariate
    levels are kept.
    """
    if panel.d == 0:
        return panel
    t = np.arange(1, panel.t_max + 1, dtype=float)
    tc = t - t.mean()
    x = np.array(panel.covariates)
    for k in range(panel.d):
        slope = (x[:, :, k] * tc).sum() / (panel.n * (tc**2).sum())
        x[:, :, k] -= slope * tc
    return Panel(panel.outcomes, x, panel.unit_labels, panel.covariate_names)
