"""Experiment tables, indicator expansion, CSV ingestion, synthetic data.

Digital-experiment covariates are heavily zero-inflated counts, so the
regression design is built from cheap binary facts about each raw
variable: an activity indicator (value > 0) plus indicators of clearing
each nonzero-quintile threshold. ``build_expansion`` learns the
thresholds from data, ``apply_expansion`` materializes the binary
matrix. Thresholds use the empirical order statistic at ceil(k*m/100)
(1-based) among the m nonzero values, duplicates collapse, and the
activity indicator collapses into the first quintile indicator when the
20th percentile already equals the smallest nonzero value.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .dgp import SeedSpec
from .errors import DataError


@dataclass(frozen=True)
class ExperimentTable:
    """Aligned response, binary treatment, and covariate matrix.

    A feature column named ``intercept`` must be identically 1. ``q`` is
    the design probability of assignment to treatment.
    """

    y: np.ndarray
    d: np.ndarray
    X: np.ndarray
    feature_names: tuple[str, ...]
    q: float

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64)
        d = np.asarray(self.d)
        X = np.asarray(self.X, dtype=np.float64)
        if y.ndim != 1 or y.size == 0:
            raise DataError("y must be a nonempty 1-d array")
        if X.ndim != 2:
            raise DataError("X must be 2-d")
        n = y.size
        if d.shape != (n,) or X.shape[0] != n:
            raise DataError(
                f"misaligned table: y has {n} rows, d has {d.shape}, X has {X.shape}"
            )
        if X.shape[1] == 0:
            raise DataError("X must have at least one column")
        dvals = np.unique(d)
        if not np.all(np.isin(dvals, (0, 1))):
            raise DataError(f"treatment must be coded 0/1, saw values {dvals!r}")
        if len(dvals) < 2:
            raise DataError("both treatment arms must be present")
        d = d.astype(np.int8)
        names = tuple(str(s) for s in self.feature_names)
        if len(names) != X.shape[1]:
            raise DataError(
                f"{len(names)} feature names for {X.shape[1]} columns"
            )
        if len(set(names)) != len(names):
            raise DataError("feature names must be unique")
        if not (0.0 < float(self.q) < 1.0):
            raise DataError(f"q must lie in (0, 1), got {self.q}")
        if not np.all(np.isfinite(y)):
            raise DataError("y contains non-finite values")
        if not np.all(np.isfinite(X)):
            raise DataError("X contains non-finite values")
        if "intercept" in names:
            j = names.index("intercept")
            if not np.all(X[:, j] == 1.0):
                raise DataError("column named 'intercept' must be identically 1")
        for arr in (y, d, X):
            arr.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "q", float(self.q))

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @cached_property
    def mask_treated(self) -> np.ndarray:
        m = self.d == 1
        m.setflags(write=False)
        return m

    @cached_property
    def mask_control(self) -> np.ndarray:
        m = self.d == 0
        m.setflags(write=False)
        return m

    @property
    def n_treated(self) -> int:
        return int(np.sum(self.mask_treated))

    @property
    def n_control(self) -> int:
        return int(np.sum(self.mask_control))

    def arm(self, d: int) -> tuple[np.ndarray, np.ndarray]:
        """(X_d, y_d) for one treatment arm."""
        mask = self.mask_treated if d == 1 else self.mask_control
        return self.X[mask], self.y[mask]


# ---------------------------------------------------------------------------
# Indicator expansion


@dataclass(frozen=True)
class Indicator:
    """One binary column: raw value ``op`` threshold (op is '>' or '>=')."""

    op: str
    threshold: float

    def __post_init__(self):
        if self.op not in (">", ">="):
            raise ValueError(f"op must be '>' or '>=', got {self.op!r}")

    def label(self, name: str) -> str:
        return f"{name}{self.op}{self.threshold:g}"

    def apply(self, col: np.ndarray) -> np.ndarray:
        if self.op == ">":
            return (col > self.threshold).astype(np.float64)
        return (col >= self.threshold).astype(np.float64)


@dataclass(frozen=True)
class VariablePlan:
    name: str
    indicators: tuple[Indicator, ...]


@dataclass(frozen=True)
class ExpansionPlan:
    variables: tuple[VariablePlan, ...]

    def column_names(self, with_intercept: bool = True) -> tuple[str, ...]:
        names = ["intercept"] if with_intercept else []
        for var in self.variables:
            names.extend(ind.label(var.name) for ind in var.indicators)
        return tuple(names)

    def to_dict(self) -> dict:
        return {
            "variables": [
                {
                    "name": var.name,
                    "indicators": [
                        {"op": ind.op, "threshold": ind.threshold, "label": ind.label(var.name)}
                        for ind in var.indicators
                    ],
                }
                for var in self.variables
            ]
        }

    @staticmethod
    def from_dict(d: dict) -> "ExpansionPlan":
        variables = tuple(
            VariablePlan(
                name=v["name"],
                indicators=tuple(
                    Indicator(op=i["op"], threshold=float(i["threshold"]))
                    for i in v["indicators"]
                ),
            )
            for v in d["variables"]
        )
        return ExpansionPlan(variables)


def _order_statistic(sorted_vals: np.ndarray, k: int) -> float:
    """k-th percentile as the 1-based order statistic at ceil(k*m/100)."""
    m = sorted_vals.size
    idx = math.ceil(k * m / 100)
    return float(sorted_vals[max(idx, 1) - 1])


_QUINTILES = (20, 40, 60, 80)


def build_expansion(X_raw: np.ndarray, feature_names: Sequence[str] | None = None) -> ExpansionPlan:
    """Learn per-variable indicator thresholds from a raw covariate matrix."""
    X_raw = np.asarray(X_raw, dtype=np.float64)
    if X_raw.ndim != 2:
        raise DataError("X_raw must be 2-d")
    if not np.all(np.isfinite(X_raw)):
        raise DataError("X_raw contains non-finite values")
    m = X_raw.shape[1]
    if feature_names is None:
        feature_names = tuple(f"x{j + 1}" for j in range(m))
    if len(feature_names) != m:
        raise DataError(f"{len(feature_names)} names for {m} raw columns")

    variables = []
    for j, name in enumerate(feature_names):
        col = X_raw[:, j]
        nonzero = np.sort(col[col > 0.0])
        if nonzero.size == 0:
            variables.append(VariablePlan(name=str(name), indicators=()))
            continue
        thresholds: list[float] = []
        for k in _QUINTILES:
            t = _order_statistic(nonzero, k)
            if not thresholds or t > thresholds[-1]:
                thresholds.append(t)
        indicators = [Indicator(">=", t) for t in thresholds]
        # The activity indicator is redundant exactly when the first
        # quintile threshold already sits at the smallest nonzero value.
        if thresholds[0] > float(nonzero[0]):
            indicators.insert(0, Indicator(">", 0.0))
        variables.append(VariablePlan(name=str(name), indicators=tuple(indicators)))
    return ExpansionPlan(tuple(variables))


def apply_expansion(
    X_raw: np.ndarray, plan: ExpansionPlan, with_intercept: bool = True
) -> np.ndarray:
    """Materialize the binary design described by ``plan``.

    Columns appear in ``plan.column_names(with_intercept)`` order.
    """
    X_raw = np.asarray(X_raw, dtype=np.float64)
    if X_raw.ndim != 2:
        raise DataError("X_raw must be 2-d")
    if X_raw.shape[1] != len(plan.variables):
        raise DataError(
            f"plan covers {len(plan.variables)} variables but X_raw has {X_raw.shape[1]} columns"
        )
    n = X_raw.shape[0]
    cols: list[np.ndarray] = []
    if with_intercept:
        cols.append(np.ones(n))
    for j, var in enumerate(plan.variables):
        raw = X_raw[:, j]
        cols.extend(ind.apply(raw) for ind in var.indicators)
    if not cols:
        raise DataError("expansion produced no columns")
    return np.column_stack(cols)


# ---------------------------------------------------------------------------
# CSV ingestion


@dataclass(frozen=True)
class ColumnSchema:
    """Role mapping for a CSV file.

    ``features=None`` takes every column that is not the response or the
    treatment, in header order. ``q=None`` falls back to the observed
    treated fraction. ``treated_value``/``control_value`` pin the 0/1
    coding when the treatment column is not already numeric 0/1;
    otherwise the two distinct values map to 0/1 in sorted order.
    """

    response: str
    treatment: str
    features: tuple[str, ...] | None = None
    q: float | None = None
    treated_value: str | None = None
    control_value: str | None = None


def _read_csv(path: str) -> tuple[list[str], list[list[str]]]:
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            rows = list(reader)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise DataError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if r]
    if len(set(header)) != len(header):
        raise DataError(f"{path} has duplicate column names")
    for i, row in enumerate(body):
        if len(row) != len(header):
            raise DataError(
                f"{path} row {i + 2}: expected {len(header)} fields, got {len(row)}"
            )
    return header, body


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """RFC-4180 writer paired with ``_read_csv``; floats keep full precision."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _parse_float_column(name: str, values: list[str], path: str) -> np.ndarray:
    out = np.empty(len(values))
    for i, s in enumerate(values):
        try:
            out[i] = float(s)
        except ValueError as exc:
            raise DataError(
                f"{path} row {i + 2}, column {name!r}: cannot parse {s!r} as a number"
            ) from exc
    return out


def load_csv(path: str, schema: ColumnSchema) -> ExperimentTable:
    """Read an experiment CSV into a validated table."""
    header, body = _read_csv(path)
    index = {name: j for j, name in enumerate(header)}
    for role, name in (("response", schema.response), ("treatment", schema.treatment)):
        if name not in index:
            raise DataError(f"{path}: {role} column {name!r} not found")
    feature_names = schema.features
    if feature_names is None:
        feature_names = tuple(
            h for h in header if h not in (schema.response, schema.treatment)
        )
    for name in feature_names:
        if name not in index:
            raise DataError(f"{path}: feature column {name!r} not found")
    if not feature_names:
        raise DataError(f"{path}: no feature columns")

    y = _parse_float_column(schema.response, [r[index[schema.response]] for r in body], path)

    d_raw = [r[index[schema.treatment]].strip() for r in body]
    levels = sorted(set(d_raw))
    if len(levels) != 2:
        raise DataError(
            f"{path}: treatment column must take exactly two values, saw {levels!r}"
        )
    if schema.treated_value is not None or schema.control_value is not None:
        treated = schema.treated_value
        control = schema.control_value
        if treated is None:
            treated = next(v for v in levels if v != control)
        if control is None:
            control = next(v for v in levels if v != treated)
        if sorted((control, treated)) != levels:
            raise DataError(
                f"{path}: treatment values {levels!r} do not match "
                f"control={control!r}, treated={treated!r}"
            )
    else:
        control, treated = levels
    d = np.fromiter((1 if v == treated else 0 for v in d_raw), dtype=np.int8, count=len(d_raw))

    X = np.column_stack(
        [_parse_float_column(name, [r[index[name]] for r in body], path) for name in feature_names]
    )
    q = schema.q if schema.q is not None else float(np.mean(d))
    return ExperimentTable(y=y, d=d, X=X, feature_names=tuple(feature_names), q=q)


# ---------------------------------------------------------------------------
# Synthetic experiments


@dataclass(frozen=True)
class SynthConfig:
    """Zero-inflated spike-and-tail response with activity-driven effects.

    The control response mixes a point mass at zero, discrete spikes, and
    a lognormal tail. Active rows (anything off the zero branch) also
    report lognormal activity covariates correlated with the response
    through a shared factor; each covariate is observed independently
    with probability ``covariate_activity`` so the covariates' zero
    patterns differ from each other. The unit-level effect is linear in
    the covariates, so treatment shifts scale with activity, and rows on
    the zero branch have zero covariates and zero effect.
    """

    n: int
    q: float = 0.5
    zero_mass: float = 0.6
    spikes: tuple[tuple[float, float], ...] = ((1.0, 0.1),)
    tail_log_mean: float = 1.0
    tail_log_sd: float = 1.0
    effect_coefficients: tuple[float, ...] = (0.5, 0.25)
    factor_loading: float = 0.5
    covariate_log_sd: float = 1.0
    covariate_activity: float = 0.8
    seed: SeedSpec = field(default_factory=lambda: SeedSpec(0))

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be positive")
        if not (0.0 < self.q < 1.0):
            raise ValueError("q must lie in (0, 1)")
        masses = [self.zero_mass] + [m for _, m in self.spikes]
        if any(m < 0.0 for m in masses):
            raise ValueError("mixture masses must be nonnegative")
        if sum(masses) > 1.0 + 1e-12:
            raise ValueError("mixture masses exceed 1")
        if self.tail_log_sd <= 0.0 or self.covariate_log_sd <= 0.0:
            raise ValueError("scale parameters must be positive")
        if not -1.0 <= self.factor_loading <= 1.0:
            raise ValueError("factor_loading must lie in [-1, 1]")
        if not 0.0 < self.covariate_activity <= 1.0:
            raise ValueError("covariate_activity must lie in (0, 1]")


@dataclass(frozen=True)
class SyntheticExperiment:
    """A generated table plus the ground truth behind it."""

    table: ExperimentTable
    control_outcome: np.ndarray
    treated_outcome: np.ndarray
    cate: np.ndarray
    true_ate: float


def generate_synthetic(cfg: SynthConfig) -> SyntheticExperiment:
    """Draw one experiment with known potential outcomes."""
    rng = cfg.seed.generator()
    n = cfg.n
    k = len(cfg.effect_coefficients)

    u = rng.random(n)
    factor = rng.standard_normal(n)
    eps_y = rng.standard_normal(n)
    eps_z = rng.standard_normal((n, k)) if k else np.zeros((n, 0))
    u_z = rng.random((n, k)) if k else np.zeros((n, 0))
    d = (rng.random(n) < cfg.q).astype(np.int8)

    edges = np.cumsum([cfg.zero_mass] + [m for _, m in cfg.spikes])
    branch = np.searchsorted(edges, u, side="right")  # 0=zero, 1..s=spikes, s+1=tail
    tail = branch == len(edges)

    rho = cfg.factor_loading
    resid = math.sqrt(1.0 - rho * rho)
    y0 = np.zeros(n)
    for s, (value, _) in enumerate(cfg.spikes, start=1):
        y0[branch == s] = value
    y0[tail] = np.exp(
        cfg.tail_log_mean + cfg.tail_log_sd * (rho * factor[tail] + resid * eps_y[tail])
    )

    Z = np.zeros((n, k))
    if k:
        observed = (branch > 0)[:, None] & (u_z < cfg.covariate_activity)
        values = np.exp(cfg.covariate_log_sd * (rho * factor[:, None] + resid * eps_z))
        Z = np.where(observed, values, 0.0)
    coeffs = np.asarray(cfg.effect_coefficients, dtype=np.float64)
    cate = Z @ coeffs if k else np.zeros(n)
    y1 = y0 + cate
    y = np.where(d == 1, y1, y0)

    # Degenerate assignment draws happen on tiny n; force one row over so
    # the table stays valid.
    if d.min() == d.max():
        flip = 0
        d = d.copy()
        d[flip] = 1 - d[flip]
        y[flip] = y1[flip] if d[flip] == 1 else y0[flip]

    X = np.column_stack([np.ones(n), Z]) if k else np.ones((n, 1))
    names = ("intercept",) + tuple(f"z{j + 1}" for j in range(k))
    table = ExperimentTable(y=y, d=d, X=X, feature_names=names, q=cfg.q)
    for arr in (y0, y1, cate):
        arr.setflags(write=False)
    return SyntheticExperiment(
        table=table,
        control_outcome=y0,
        treated_outcome=y1,
        cate=cate,
        true_ate=float(np.mean(cate)),
    )
