"""Forests of population trees for treatment-effect heterogeneity.

Tree b of a forest is the partition a greedy tree builds under weight
draw b, so the ensemble is a posterior sample over partitions, not a
variance-reduction device: summaries are posteriors over functionals of
the fitted trees. Draw b of every summary combines tree pair b with
weight draw b, keeping the posterior coupling between what the trees
fitted and how rows are averaged:

  * split probabilities: fraction of trees splitting feature j at or
    above a given depth,
  * per-query effect draws: difference of the arm trees' predictions,
  * variable effects and the forest ATE: reweighted averages of
    per-row prediction differences over selected rows, using a pooled
    averaging weight draw from its own substream.

``MULTINOMIAL`` weights (counts from a uniform resample) reproduce the
classical bagged ensemble and are provided as a comparison oracle;
``EXPONENTIAL`` is the posterior-draw default. ``posterior_mean`` fits
every tree at theta = 1, collapsing the forest to the sample tree.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .cart import TreeConfig, TreeModel, fit_tree, predict_matrix, tot_transform, tree_to_dict, tree_from_dict
from .data import ExperimentTable
from .dgp import (
    STREAM_AVERAGING,
    STREAM_BASE,
    STREAM_CONTROL,
    STREAM_TREATED,
    PosteriorMoments,
    SeedSpec,
    sample_weights,
)
from .errors import DataError, ReplicateError
from ._parallel import run_indexed


class WeightScheme(Enum):
    EXPONENTIAL = "exponential"
    MULTINOMIAL = "multinomial"


@dataclass(frozen=True)
class ForestModel:
    """B trees fit to the same rows under independent weight draws.

    Tree b is reproducible in isolation from (seed, b, weight_stream).
    """

    trees: tuple[TreeModel, ...]
    config: TreeConfig
    seed: SeedSpec
    weight_stream: int
    weights_kind: WeightScheme
    posterior_mean: bool
    n_rows: int

    @property
    def B(self) -> int:
        return len(self.trees)


def _tree_weights(
    n: int, b: int, seed: SeedSpec, stream: int, kind: WeightScheme, posterior_mean: bool
) -> np.ndarray:
    if posterior_mean:
        return np.ones(n)
    if kind is WeightScheme.EXPONENTIAL:
        return sample_weights(n, seed.replicate(b), stream=stream).values
    rng = seed.replicate(b).generator(stream)
    return rng.multinomial(n, np.full(n, 1.0 / n)).astype(np.float64)


def fit_forest(
    X: np.ndarray,
    y: np.ndarray,
    B: int,
    cfg: TreeConfig,
    seed: SeedSpec,
    weights_kind: WeightScheme = WeightScheme.EXPONENTIAL,
    weight_stream: int = STREAM_BASE,
    posterior_mean: bool = False,
    threads: int | None = None,
) -> ForestModel:
    """Fit ``B`` trees; tree b uses weight draw b and its own mtry streams."""
    if B < 1:
        raise ValueError("B must be positive")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = y.size

    def one(b: int) -> TreeModel:
        try:
            w = _tree_weights(n, b, seed, weight_stream, weights_kind, posterior_mean)
            return fit_tree(X, y, w, cfg, mtry_seed=seed.replicate(b), mtry_stream=weight_stream)
        except Exception as exc:
            raise ReplicateError(b, f"tree {b} failed: {exc}") from exc

    trees = tuple(run_indexed(one, B, threads))
    return ForestModel(
        trees=trees,
        config=cfg,
        seed=seed,
        weight_stream=weight_stream,
        weights_kind=weights_kind,
        posterior_mean=posterior_mean,
        n_rows=n,
    )


def fit_group_forests(
    table: ExperimentTable,
    B: int,
    cfg: TreeConfig,
    seed: SeedSpec,
    weights_kind: WeightScheme = WeightScheme.EXPONENTIAL,
    posterior_mean: bool = False,
    threads: int | None = None,
) -> tuple[ForestModel, ForestModel]:
    """(treated, control) forests on the arm slices, one substream each."""
    X_t, y_t = table.arm(1)
    X_c, y_c = table.arm(0)
    f_t = fit_forest(
        X_t, y_t, B, cfg, seed,
        weights_kind=weights_kind, weight_stream=STREAM_TREATED,
        posterior_mean=posterior_mean, threads=threads,
    )
    f_c = fit_forest(
        X_c, y_c, B, cfg, seed,
        weights_kind=weights_kind, weight_stream=STREAM_CONTROL,
        posterior_mean=posterior_mean, threads=threads,
    )
    return f_t, f_c


def fit_tot_forest(
    table: ExperimentTable,
    B: int,
    cfg: TreeConfig,
    seed: SeedSpec,
    weights_kind: WeightScheme = WeightScheme.EXPONENTIAL,
    posterior_mean: bool = False,
    threads: int | None = None,
) -> ForestModel:
    """Forest on the effect-transformed response over all rows."""
    ts = tot_transform(table.y, table.d, table.q)
    return fit_forest(
        table.X, ts.y_star, B, cfg, seed,
        weights_kind=weights_kind, weight_stream=STREAM_BASE,
        posterior_mean=posterior_mean, threads=threads,
    )


# ---------------------------------------------------------------------------
# Split probabilities


@dataclass(frozen=True)
class SplitProbabilityTable:
    """P(feature j splits at depth <= d), estimated over the forest.

    Rows cover the features that split in at least one tree; entries are
    nondecreasing in depth by construction.
    """

    max_depth: int
    n_trees: int
    features: tuple[int, ...]
    probs: np.ndarray  # (len(features), max_depth)

    def __post_init__(self):
        arr = np.asarray(self.probs, dtype=np.float64)
        arr.setflags(write=False)
        object.__setattr__(self, "probs", arr)

    def prob(self, feature: int, depth: int) -> float:
        if not 1 <= depth <= self.max_depth:
            raise ValueError(f"depth must lie in [1, {self.max_depth}]")
        if feature not in self.features:
            return 0.0
        return float(self.probs[self.features.index(feature), depth - 1])

    @property
    def root_split_fraction(self) -> float:
        """Fraction of trees whose root splits; the depth-1 column sums
        to exactly this."""
        if self.probs.shape[0] == 0:
            return 0.0
        return float(np.sum(self.probs[:, 0]))


def split_probabilities(forest: ForestModel, max_depth: int | None = None) -> SplitProbabilityTable:
    depth_cap = max_depth if max_depth is not None else forest.config.max_depth
    if depth_cap < 1:
        raise ValueError("max_depth must be at least 1")
    first: dict[int, np.ndarray] = {}
    for t, tree in enumerate(forest.trees):
        for nd in tree.nodes:
            if nd.is_leaf or nd.depth > depth_cap:
                continue
            row = first.setdefault(nd.feature, np.full(forest.B, depth_cap + 1, dtype=np.int64))
            if nd.depth < row[t]:
                row[t] = nd.depth
    features = tuple(sorted(first))
    probs = np.zeros((len(features), depth_cap))
    depths = np.arange(1, depth_cap + 1)
    for i, j in enumerate(features):
        probs[i] = np.mean(first[j][:, None] <= depths[None, :], axis=0)
    return SplitProbabilityTable(
        max_depth=depth_cap, n_trees=forest.B, features=features, probs=probs
    )


# ---------------------------------------------------------------------------
# Posterior effect summaries


def _check_pair(forest_t: ForestModel, forest_c: ForestModel) -> None:
    if forest_t.B != forest_c.B:
        raise ValueError("arm forests must have the same number of trees")
    if forest_t.seed != forest_c.seed:
        raise ValueError("arm forests must share a master seed for coupled draws")
    if forest_t.posterior_mean != forest_c.posterior_mean:
        raise ValueError("arm forests must agree on posterior_mean")


def _averaging_weights(forest_t: ForestModel, n: int, b: int) -> np.ndarray:
    if forest_t.posterior_mean:
        return np.ones(n)
    return sample_weights(n, forest_t.seed.replicate(b), stream=STREAM_AVERAGING).values


def hte_predict(
    forest_t: ForestModel, forest_c: ForestModel, x: np.ndarray
) -> np.ndarray:
    """Posterior effect draws at query covariates.

    Returns (B,) for a single vector, (B, m) for m rows.
    """
    _check_pair(forest_t, forest_c)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    Xq = x[None, :] if single else x
    out = np.empty((forest_t.B, Xq.shape[0]))
    for b in range(forest_t.B):
        out[b] = predict_matrix(forest_t.trees[b], Xq) - predict_matrix(forest_c.trees[b], Xq)
    return out[:, 0] if single else out


@dataclass(frozen=True)
class EffectSelector:
    """Rows over which a variable effect is averaged: one feature and
    either an explicit value set or a closed interval."""

    feature: int | str
    values: tuple[float, ...] | None = None
    interval: tuple[float, float] | None = None

    def __post_init__(self):
        if (self.values is None) == (self.interval is None):
            raise ValueError("exactly one of values/interval must be given")
        if self.interval is not None and self.interval[0] > self.interval[1]:
            raise ValueError("interval must be (lo, hi) with lo <= hi")

    def resolve(self, table: ExperimentTable) -> int:
        if isinstance(self.feature, str):
            if self.feature not in table.feature_names:
                raise DataError(f"feature {self.feature!r} not found")
            return table.feature_names.index(self.feature)
        if not 0 <= int(self.feature) < table.p:
            raise DataError(f"feature index {self.feature} out of range")
        return int(self.feature)

    def mask(self, table: ExperimentTable) -> np.ndarray:
        col = table.X[:, self.resolve(table)]
        if self.values is not None:
            return np.isin(col, np.asarray(self.values, dtype=np.float64))
        lo, hi = self.interval
        return (col >= lo) & (col <= hi)

    def label(self, table: ExperimentTable) -> str:
        name = table.feature_names[self.resolve(table)]
        if self.values is not None:
            return f"{name} in {{{', '.join(f'{v:g}' for v in self.values)}}}"
        return f"{name} in [{self.interval[0]:g}, {self.interval[1]:g}]"


@dataclass(frozen=True)
class VariableEffectResult:
    label: str
    feature: int
    n_rows: int
    draws: np.ndarray
    moments: PosteriorMoments

    def __post_init__(self):
        d = np.asarray(self.draws, dtype=np.float64)
        d.setflags(write=False)
        object.__setattr__(self, "draws", d)


@dataclass(frozen=True)
class ForestAteResult:
    draws: np.ndarray
    moments: PosteriorMoments

    def __post_init__(self):
        d = np.asarray(self.draws, dtype=np.float64)
        d.setflags(write=False)
        object.__setattr__(self, "draws", d)


@dataclass(frozen=True)
class HteForestSummary:
    """Joint posterior summaries from one pass over the tree pairs."""

    ate: ForestAteResult
    effects: tuple[VariableEffectResult, ...]
    query_draws: np.ndarray | None  # (B, n_query)

    def __post_init__(self):
        if self.query_draws is not None:
            d = np.asarray(self.query_draws, dtype=np.float64)
            d.setflags(write=False)
            object.__setattr__(self, "query_draws", d)


def _draw_moments(draws: np.ndarray) -> PosteriorMoments:
    var = float(np.var(draws, ddof=1)) if draws.size > 1 else 0.0
    return PosteriorMoments(mean=float(np.mean(draws)), variance=var)


def hte_summary(
    table: ExperimentTable,
    forest_t: ForestModel,
    forest_c: ForestModel,
    effects: tuple[EffectSelector, ...] = (),
    query: np.ndarray | None = None,
) -> HteForestSummary:
    """Forest ATE, variable effects, and query draws, consistently coupled.

    Draw b evaluates tree pair b on every row, then averages the per-row
    differences under pooled averaging-weight draw b (theta = 1 for
    posterior-mean forests). Query draws are raw prediction differences
    at the given covariate rows.
    """
    _check_pair(forest_t, forest_c)
    X = table.X
    n, B = table.n, forest_t.B
    masks = []
    for sel in effects:
        m = sel.mask(table)
        if not m.any():
            raise DataError(f"selector {sel.label(table)!r} matches no rows")
        masks.append(m)

    Xq = None
    if query is not None:
        Xq = np.asarray(query, dtype=np.float64)
        if Xq.ndim != 2 or Xq.shape[1] != table.p:
            raise ValueError(f"query must be (m, {table.p})")

    ate_draws = np.empty(B)
    eff_draws = np.zeros((len(effects), B))
    query_draws = np.empty((B, Xq.shape[0])) if Xq is not None else None
    for b in range(B):
        diff = predict_matrix(forest_t.trees[b], X) - predict_matrix(forest_c.trees[b], X)
        theta = _averaging_weights(forest_t, n, b)
        ate_draws[b] = float(np.dot(theta, diff) / np.sum(theta))
        for e, m in enumerate(masks):
            eff_draws[e, b] = float(np.dot(theta[m], diff[m]) / np.sum(theta[m]))
        if query_draws is not None:
            query_draws[b] = predict_matrix(forest_t.trees[b], Xq) - predict_matrix(
                forest_c.trees[b], Xq
            )

    results = tuple(
        VariableEffectResult(
            label=sel.label(table),
            feature=sel.resolve(table),
            n_rows=int(np.sum(m)),
            draws=eff_draws[e],
            moments=_draw_moments(eff_draws[e]),
        )
        for e, (sel, m) in enumerate(zip(effects, masks))
    )
    return HteForestSummary(
        ate=ForestAteResult(draws=ate_draws, moments=_draw_moments(ate_draws)),
        effects=results,
        query_draws=query_draws,
    )


def forest_ate(
    table: ExperimentTable, forest_t: ForestModel, forest_c: ForestModel
) -> ForestAteResult:
    """Posterior of the full-sample average prediction difference."""
    return hte_summary(table, forest_t, forest_c).ate


def variable_effect(
    table: ExperimentTable,
    forest_t: ForestModel,
    forest_c: ForestModel,
    selector: EffectSelector,
) -> VariableEffectResult:
    """Posterior of the average effect over the selector's rows."""
    return hte_summary(table, forest_t, forest_c, effects=(selector,)).effects[0]


# ---------------------------------------------------------------------------
# Serialization


def forest_to_dict(forest: ForestModel) -> dict:
    return {
        "config": forest.config.to_dict(),
        "seed": forest.seed.to_dict(),
        "weight_stream": forest.weight_stream,
        "weights_kind": forest.weights_kind.value,
        "posterior_mean": forest.posterior_mean,
        "n_rows": forest.n_rows,
        "trees": [tree_to_dict(t) for t in forest.trees],
    }


def forest_from_dict(d: dict) -> ForestModel:
    return ForestModel(
        trees=tuple(tree_from_dict(t) for t in d["trees"]),
        config=TreeConfig.from_dict(d["config"]),
        seed=SeedSpec.from_dict(d["seed"]),
        weight_stream=int(d["weight_stream"]),
        weights_kind=WeightScheme(d["weights_kind"]),
        posterior_mean=bool(d["posterior_mean"]),
        n_rows=int(d["n_rows"]),
    )
