"""Average treatment effects under reweighted-sample posteriors.

The unadjusted effect contrasts the two arms' weighted response means;
its exact posterior variance is s^2_y / (n (n + 1)) per arm. The
regression-adjusted effect projects each arm onto the covariates and
evaluates both projections at the pooled covariate mean,

    ate_adj = xbar' (beta_t - beta_c),

which de-noises the contrast without changing its target. Its
first-order posterior variance is xbar' (Sigma_t + Sigma_c) xbar with
Sigma_d the arm's sandwich covariance, and when each arm's design spans
an intercept that quadratic form decomposes, per arm, into

    s^2_y/n^2  -  R^2 s^2_y/n^2  +  shift' Sigma shift  +  2 xbar_d' Sigma shift

with shift = xbar - xbar_d: the diff-in-means ceiling, the fit-quality
reduction, and two covariate-imbalance corrections that vanish as the
arm mean approaches the pooled mean. The exact-sampling alternative
(``adjusted_ate_bootstrap``) redraws one full-length weight vector per
replicate and reuses it for the pooled mean and both arm fits.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import ExperimentTable
from .dgp import (
    STREAM_BASE,
    PosteriorMoments,
    SeedSpec,
    dgp_mean_moments,
    posterior_mean_weights,
    sample_weights,
)
from .errors import DataError, ReplicateError
from .linproj import OlsFit, _PreparedDesign, weighted_ols
from ._parallel import run_indexed


def unadjusted_ate(table: ExperimentTable) -> PosteriorMoments:
    """Difference of arm response means with exact posterior moments."""
    m_t = dgp_mean_moments(table.y[table.mask_treated])
    m_c = dgp_mean_moments(table.y[table.mask_control])
    return PosteriorMoments(mean=m_t.mean - m_c.mean, variance=m_t.variance + m_c.variance)


def intercept_in_span(X: np.ndarray) -> bool:
    """True when the constant vector lies in the design's column space."""
    ones = np.ones(X.shape[0])
    coef, *_ = np.linalg.lstsq(X, ones, rcond=None)
    return float(np.max(np.abs(ones - X @ coef))) <= 1e-8


def _require_intercept_span(X: np.ndarray, label: str) -> None:
    if not intercept_in_span(X):
        raise DataError(
            f"{label} design must span an intercept for the adjusted contrast"
        )


@dataclass(frozen=True)
class ArmVarianceTerms:
    """One arm's share of the adjusted variance, split into named pieces.

    ``group_mean`` is s^2_y/n^2, ``r2_reduction`` is -R^2 s^2_y/n^2,
    ``mean_shift`` is the quadratic in (xbar - xbar_d), and ``cross`` is
    the covariance between the arm-level fit and that shift. The four
    sum to xbar' Sigma_d xbar exactly.
    """

    group_mean: float
    r2_reduction: float
    mean_shift: float
    cross: float

    @property
    def total(self) -> float:
        return self.group_mean + self.r2_reduction + self.mean_shift + self.cross


@dataclass(frozen=True)
class AdjustedVarianceDecomposition:
    treated: ArmVarianceTerms
    control: ArmVarianceTerms

    @property
    def total(self) -> float:
        return self.treated.total + self.control.total

    @property
    def without_cross(self) -> float:
        """The three headline terms only; differs from ``total`` by the
        two cross covariances."""
        return self.total - self.treated.cross - self.control.cross


@dataclass(frozen=True)
class AdjustedTaylorResult:
    """First-order posterior summary of the adjusted contrast."""

    moments: PosteriorMoments
    decomposition: AdjustedVarianceDecomposition
    rough_variance: float
    fit_treated: OlsFit
    fit_control: OlsFit


def _arm_terms(
    X: np.ndarray, y: np.ndarray, fit: OlsFit, xbar_pooled: np.ndarray
) -> ArmVarianceTerms:
    n = y.size
    s2 = float(np.sum((y - float(np.mean(y))) ** 2))
    xbar_arm = X.mean(axis=0)
    shift = xbar_pooled - xbar_arm
    sigma = fit.sandwich_cov
    return ArmVarianceTerms(
        group_mean=s2 / n**2,
        r2_reduction=-fit.r2 * s2 / n**2,
        mean_shift=float(shift @ sigma @ shift),
        cross=2.0 * float(xbar_arm @ sigma @ shift),
    )


def adjusted_ate_taylor(table: ExperimentTable) -> AdjustedTaylorResult:
    """Adjusted contrast at theta = 1 with its exact expansion variance.

    Requires each arm's design to span an intercept; without that the
    projection at the pooled mean loses its mean interpretation and the
    variance decomposition identity fails.
    """
    X_t, y_t = table.arm(1)
    X_c, y_c = table.arm(0)
    _require_intercept_span(X_t, "treated")
    _require_intercept_span(X_c, "control")

    fit_t = weighted_ols(X_t, y_t, posterior_mean_weights(table.n_treated), group=1)
    fit_c = weighted_ols(X_c, y_c, posterior_mean_weights(table.n_control), group=0)
    xbar = table.X.mean(axis=0)

    mean = float(xbar @ (fit_t.beta - fit_c.beta))
    sigma_sum = fit_t.sandwich_cov + fit_c.sandwich_cov
    variance = max(0.0, float(xbar @ sigma_sum @ xbar))

    terms_t = _arm_terms(X_t, y_t, fit_t, xbar)
    terms_c = _arm_terms(X_c, y_c, fit_c, xbar)
    unadj = unadjusted_ate(table)
    rough = unadj.variance - (-terms_t.r2_reduction - terms_c.r2_reduction)

    return AdjustedTaylorResult(
        moments=PosteriorMoments(mean=mean, variance=variance),
        decomposition=AdjustedVarianceDecomposition(treated=terms_t, control=terms_c),
        rough_variance=rough,
        fit_treated=fit_t,
        fit_control=fit_c,
    )


@dataclass(frozen=True)
class AdjustedBootstrapResult:
    """Posterior sample of the adjusted contrast."""

    moments: PosteriorMoments
    draws: np.ndarray
    redraw_count: int
    replaced: tuple[int, ...]

    def __post_init__(self):
        d = np.asarray(self.draws, dtype=np.float64)
        d.setflags(write=False)
        object.__setattr__(self, "draws", d)


def adjusted_ate_bootstrap(
    table: ExperimentTable,
    B: int,
    seed: SeedSpec,
    threads: int | None = None,
    max_redraw_fraction: float = 0.01,
) -> AdjustedBootstrapResult:
    """Exact posterior sampling of the adjusted contrast.

    Replicate b draws one weight vector over all n rows; the pooled
    covariate mean and both arm fits reuse the same draw, so covariate
    -mean uncertainty is carried rather than linearized away. A replicate
    whose weighted solve degenerates is replaced from fresh replicate
    indices B, B+1, ..., up to ``max_redraw_fraction`` of B.
    """
    if B < 2:
        raise ValueError("B must be at least 2")
    X_t, y_t = table.arm(1)
    X_c, y_c = table.arm(0)
    _require_intercept_span(X_t, "treated")
    _require_intercept_span(X_c, "control")
    prep_t = _PreparedDesign(X_t, y_t)
    prep_c = _PreparedDesign(X_c, y_c)
    mask_t = table.mask_treated
    mask_c = table.mask_control
    X = table.X
    n = table.n

    def one(b: int) -> float:
        theta = sample_weights(n, seed.replicate(b), stream=STREAM_BASE).values
        beta_t = prep_t.solve(theta[mask_t])
        beta_c = prep_c.solve(theta[mask_c])
        mu_x = (X.T @ theta) / float(np.sum(theta))
        return float(mu_x @ (beta_t - beta_c))

    def attempt(b: int) -> float | Exception:
        try:
            return one(b)
        except Exception as exc:
            return exc

    results = run_indexed(attempt, B, threads)
    budget = max(1, math.ceil(max_redraw_fraction * B))
    next_index = B
    replaced: list[int] = []
    for i in range(B):
        while isinstance(results[i], Exception):
            if len(replaced) >= budget:
                raise ReplicateError(
                    i, f"replicate {i} failed and the redraw budget ({budget}) is spent"
                ) from results[i]
            replaced.append(i)
            results[i] = attempt(next_index)
            next_index += 1

    draws = np.asarray(results, dtype=np.float64)
    return AdjustedBootstrapResult(
        moments=PosteriorMoments(
            mean=float(np.mean(draws)), variance=float(np.var(draws, ddof=1))
        ),
        draws=draws,
        redraw_count=len(replaced),
        replaced=tuple(replaced),
    )


@dataclass(frozen=True)
class VarianceReduction:
    """Realized and predicted gain from covariate adjustment."""

    unadjusted_variance: float
    adjusted_variance: float
    absolute: float
    relative: float
    predicted_absolute: float
    predicted_relative: float


def variance_reduction(table: ExperimentTable) -> VarianceReduction:
    """Compare unadjusted and adjusted posterior variances.

    The predicted reduction is the sum of the two R^2 terms from the
    adjusted-variance decomposition, the part explained by fit quality
    alone.
    """
    unadj = unadjusted_ate(table)
    taylor = adjusted_ate_taylor(table)
    if unadj.variance <= 0.0:
        raise ValueError("unadjusted variance is zero; reduction is undefined")
    dec = taylor.decomposition
    absolute = unadj.variance - taylor.moments.variance
    predicted = -dec.treated.r2_reduction - dec.control.r2_reduction
    return VarianceReduction(
        unadjusted_variance=unadj.variance,
        adjusted_variance=taylor.moments.variance,
        absolute=absolute,
        relative=absolute / unadj.variance,
        predicted_absolute=predicted,
        predicted_relative=predicted / unadj.variance,
    )


@dataclass(frozen=True)
class AteReport:
    """Everything the ate command prints: both estimators side by side."""

    unadjusted: PosteriorMoments
    adjusted_taylor: AdjustedTaylorResult
    adjusted_bootstrap: AdjustedBootstrapResult | None
    reduction: VarianceReduction


def compute_ate_report(
    table: ExperimentTable,
    B: int = 0,
    seed: SeedSpec | None = None,
    threads: int | None = None,
) -> AteReport:
    """Assemble the standard effect report; ``B > 0`` adds the sampled path."""
    boot = None
    if B > 0:
        if seed is None:
            raise ValueError("sampling the adjusted contrast requires a seed")
        boot = adjusted_ate_bootstrap(table, B, seed, threads=threads)
    return AteReport(
        unadjusted=unadjusted_ate(table),
        adjusted_taylor=adjusted_ate_taylor(table),
        adjusted_bootstrap=boot,
        reduction=variance_reduction(table),
    )
