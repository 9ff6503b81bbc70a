"""Posterior analysis of linear projections of the data distribution.

For a weighted data model with masses theta on the observed rows, the
population regression of y on X is

    beta(theta) = (X' Theta X)^{-1} X' Theta y,

a functional of the data distribution rather than a parametric model.
Its posterior can be sampled by redrawing theta, or summarized by a
first-order expansion around the posterior-mean model theta = 1:

    d beta / d theta_i = (X'X)^{-1} x_i r_i,   r = y - X beta,

so with independent Exp(1) masses the expansion has exact covariance
(X'X)^{-1} X' diag(r^2) X (X'X)^{-1}, the HC0 sandwich. Within a
stratum whose coefficient is a plain subgroup mean, the exact posterior
variance is the sandwich entry deflated by n_s/(n_s + 1).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from .data import ExperimentTable
from .dgp import (
    STREAM_CONTROL,
    STREAM_TREATED,
    PosteriorMoments,
    SeedSpec,
    WeightKind,
    WeightVector,
    dgp_mean_moments,
    posterior_mean_weights,
    sample_weights,
)
from .errors import DataError, RankDeficiencyError, ReplicateError
from ._parallel import run_indexed

# Relative pivot tolerance below which a column counts as dependent.
RANK_RTOL = 1e-12


@dataclass(frozen=True)
class OlsFit:
    """A fitted projection under one weighting of the rows."""

    beta: np.ndarray
    residuals: np.ndarray
    sandwich_cov: np.ndarray
    r2: float
    n_obs: int
    group: int | str | None = None
    at_unit_weights: bool = False

    def __post_init__(self):
        for name in ("beta", "residuals", "sandwich_cov"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        p = self.beta.size
        if self.sandwich_cov.shape != (p, p):
            raise ValueError("sandwich_cov shape does not match beta")
        if self.residuals.size != self.n_obs:
            raise ValueError("residuals length does not match n_obs")


def _pivoted_qr_rank(Xw: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """Economy QR with column pivoting plus the numerical rank."""
    Q, R, piv = scipy.linalg.qr(Xw, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0.0:
        rank = 0
    else:
        rank = int(np.sum(diag > RANK_RTOL * diag[0]))
    return Q, R, piv, rank


def _check_full_rank(Xw: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    Q, R, piv, rank = _pivoted_qr_rank(Xw)
    p = Xw.shape[1]
    if rank < p:
        offender = int(piv[rank]) if rank < piv.size else int(piv[-1])
        raise RankDeficiencyError(
            f"design is rank deficient (rank {rank} of {p}); "
            f"column {offender} is dependent on the others",
            column=offender,
        )
    return Q, R, piv


def weighted_ols(
    X: np.ndarray,
    y: np.ndarray,
    w: WeightVector,
    group: int | str | None = None,
) -> OlsFit:
    """Projection coefficients under the data model weighted by ``w``.

    Solved by pivoted QR on the sqrt-weighted design; rank decisions use
    a relative pivot tolerance of ``RANK_RTOL``. ``r2`` compares
    unweighted residual and response sums of squares.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.size:
        raise ValueError(f"incompatible shapes X {X.shape}, y {y.shape}")
    n, p = X.shape
    if len(w) != n:
        raise ValueError(f"length mismatch: {n} rows, {len(w)} weights")
    if n < 1 or p < 1:
        raise ValueError("need at least one row and one column")

    sw = np.sqrt(w.values)
    Xw = X * sw[:, None]
    yw = y * sw
    Q, R, piv = _check_full_rank(Xw)
    beta_piv = scipy.linalg.solve_triangular(R[:p], Q.T[:p] @ yw)
    beta = np.empty(p)
    beta[piv] = beta_piv

    r = y - X @ beta
    # Gradient of beta in the row masses, columns scaled by residuals.
    M = Xw.T @ Xw
    G = np.linalg.solve(M, X.T * r)
    cov = G @ G.T

    ybar = float(np.mean(y))
    s2y = float(np.sum((y - ybar) ** 2))
    s2r = float(np.sum((r - float(np.mean(r))) ** 2))
    r2 = 1.0 - s2r / s2y if s2y > 0.0 else 0.0

    return OlsFit(
        beta=beta,
        residuals=r,
        sandwich_cov=cov,
        r2=r2,
        n_obs=n,
        group=group,
        at_unit_weights=w.kind is WeightKind.POSTERIOR_MEAN,
    )


def ols_gradient(X: np.ndarray, fit: OlsFit) -> np.ndarray:
    """p x n gradient of the coefficients in the row masses at theta = 1.

    Column i is (X'X)^{-1} x_i r_i.
    """
    if not fit.at_unit_weights:
        raise ValueError("gradient is defined at the posterior-mean fit (theta = 1)")
    X = np.asarray(X, dtype=np.float64)
    if X.shape != (fit.n_obs, fit.beta.size):
        raise ValueError(f"X shape {X.shape} does not match the fit")
    return np.linalg.solve(X.T @ X, X.T * fit.residuals)


def taylor_cov(X: np.ndarray, fit: OlsFit) -> np.ndarray:
    """Exact covariance of the first-order expansion of beta(theta).

    Equals the HC0 sandwich (X'X)^{-1} X' diag(r^2) X (X'X)^{-1}.
    """
    G = ols_gradient(X, fit)
    return G @ G.T


# ---------------------------------------------------------------------------
# Fast replicate refits


class _PreparedDesign:
    """One arm's design, rank-checked once so replicate refits can use
    plain normal equations."""

    def __init__(self, X: np.ndarray, y: np.ndarray):
        self.X = X
        self.y = y
        _check_full_rank(X)

    def solve(self, wvals: np.ndarray) -> np.ndarray:
        Xw = self.X * wvals[:, None]
        A = Xw.T @ self.X
        b = Xw.T @ self.y
        try:
            beta = np.linalg.solve(A, b)
        except np.linalg.LinAlgError as exc:
            raise RankDeficiencyError(f"weighted design became singular: {exc}") from exc
        if not np.all(np.isfinite(beta)):
            raise RankDeficiencyError("weighted solve produced non-finite coefficients")
        return beta


# ---------------------------------------------------------------------------
# Treatment-effect heterogeneity, linear form


@dataclass(frozen=True)
class HteLinearSummary:
    """Posterior of the per-arm projection contrast beta_t - beta_c."""

    feature_names: tuple[str, ...]
    fit_treated: OlsFit
    fit_control: OlsFit
    delta_mean: np.ndarray
    delta_cov: np.ndarray
    draws: np.ndarray | None

    def __post_init__(self):
        for name in ("delta_mean", "delta_cov"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.draws is not None:
            d = np.asarray(self.draws, dtype=np.float64)
            d.setflags(write=False)
            object.__setattr__(self, "draws", d)


def hte_linear(
    table: ExperimentTable,
    B: int,
    seed: SeedSpec,
    seed_control: SeedSpec | None = None,
    threads: int | None = None,
) -> HteLinearSummary:
    """Arm-wise projections with expansion moments and posterior draws.

    The two arms are independent data models, so draw b reweights each
    arm from its own substream; passing ``seed_control`` moves only the
    control draws. ``B = 0`` skips sampling and returns the analytic
    summary alone.
    """
    if B < 0:
        raise ValueError("B must be nonnegative")
    X_t, y_t = table.arm(1)
    X_c, y_c = table.arm(0)
    fit_t = weighted_ols(X_t, y_t, posterior_mean_weights(table.n_treated), group=1)
    fit_c = weighted_ols(X_c, y_c, posterior_mean_weights(table.n_control), group=0)
    delta_mean = fit_t.beta - fit_c.beta
    delta_cov = fit_t.sandwich_cov + fit_c.sandwich_cov

    draws = None
    if B > 0:
        seed_c = seed_control if seed_control is not None else seed
        prep_t = _PreparedDesign(X_t, y_t)
        prep_c = _PreparedDesign(X_c, y_c)
        n_t, n_c = table.n_treated, table.n_control

        def one(b: int) -> np.ndarray:
            try:
                w_t = sample_weights(n_t, seed.replicate(b), stream=STREAM_TREATED)
                w_c = sample_weights(n_c, seed_c.replicate(b), stream=STREAM_CONTROL)
                return prep_t.solve(w_t.values) - prep_c.solve(w_c.values)
            except ReplicateError:
                raise
            except Exception as exc:
                raise ReplicateError(b, f"projection replicate {b} failed: {exc}") from exc

        draws = np.vstack(run_indexed(one, B, threads))

    return HteLinearSummary(
        feature_names=table.feature_names,
        fit_treated=fit_t,
        fit_control=fit_c,
        delta_mean=delta_mean,
        delta_cov=delta_cov,
        draws=draws,
    )


# ---------------------------------------------------------------------------
# Stratified designs


@dataclass(frozen=True)
class StratumEffect:
    """Exact posterior moments for one stratum's arm means and contrast."""

    name: str
    column: int
    n_treated: int
    n_control: int
    treated: PosteriorMoments
    control: PosteriorMoments
    effect: PosteriorMoments


def stratified_moments(
    table: ExperimentTable, strata: Sequence[int | str]
) -> tuple[StratumEffect, ...]:
    """Exact per-stratum moments when the named columns partition the rows.

    In a saturated indicator design each coefficient is the weighted mean
    of its stratum's responses, so the posterior is available in closed
    form with variance s^2 / (n_s (n_s + 1)) per arm.
    """
    if not strata:
        raise ValueError("need at least one stratum column")
    cols: list[int] = []
    for s in strata:
        if isinstance(s, str):
            if s not in table.feature_names:
                raise DataError(f"stratum column {s!r} not found")
            cols.append(table.feature_names.index(s))
        else:
            if not 0 <= int(s) < table.p:
                raise DataError(f"stratum column index {s} out of range")
            cols.append(int(s))
    S = table.X[:, cols]
    if not np.all((S == 0.0) | (S == 1.0)):
        raise DataError("stratum columns must be binary indicators")
    if not np.all(S.sum(axis=1) == 1.0):
        raise DataError("stratum columns must partition the rows (each row in exactly one)")

    out = []
    for j, col in enumerate(cols):
        in_stratum = S[:, j] == 1.0
        y_t = table.y[in_stratum & table.mask_treated]
        y_c = table.y[in_stratum & table.mask_control]
        name = table.feature_names[col]
        if y_t.size == 0 or y_c.size == 0:
            raise DataError(f"stratum {name!r} has an empty treatment arm")
        m_t = dgp_mean_moments(y_t)
        m_c = dgp_mean_moments(y_c)
        out.append(
            StratumEffect(
                name=name,
                column=col,
                n_treated=y_t.size,
                n_control=y_c.size,
                treated=m_t,
                control=m_c,
                effect=PosteriorMoments(
                    mean=m_t.mean - m_c.mean, variance=m_t.variance + m_c.variance
                ),
            )
        )
    return tuple(out)
