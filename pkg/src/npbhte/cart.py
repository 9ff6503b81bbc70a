"""Greedy partitioning of the weighted data model (population CART).

A tree is fit to the reweighted sample: node impurity is the weighted
sum of squares sum_i theta_i (y_i - mu_s)^2 with mu_s the weighted node
mean, candidate thresholds are the observed values of each feature in
the node, and rows with x_ij <= threshold go left. A node splits only
if the best candidate strictly reduces impurity and both children keep
``min_leaf`` rows (an unweighted count) and positive weight mass.
Trees are deterministic given (data, weights, config): tied splits
resolve to the lowest feature index, then the lowest threshold, and
``mtry`` candidate subsets come from a node-addressed substream keyed by
the node's heap path, so subsetting is reproducible node by node.

``tot_transform`` rescales responses by the treatment offset,
y* = y (d - q) / (q (1 - q)), whose data-model mean is the treatment
effect; trees fit to y* partition directly on effect heterogeneity.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dgp import STREAM_MTRY, SeedSpec, WeightVector
from .errors import DataError

_HEAP_ROOT = 1


@dataclass(frozen=True)
class TreeConfig:
    """Stopping and subsetting rules shared by every tree of a forest.

    Defaults mirror the large-scale recipe (depth 5, leaves of 100k
    rows); small tables want explicit values. ``seed`` only feeds the
    per-node candidate subsets and is unused when ``mtry`` is None.
    """

    max_depth: int = 5
    min_leaf: int = 100_000
    mtry: int | None = None
    seed: SeedSpec = field(default_factory=lambda: SeedSpec(0))

    def __post_init__(self):
        if self.max_depth < 0:
            raise ValueError("max_depth must be nonnegative")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be at least 1")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError("mtry must be positive when set")

    def to_dict(self) -> dict:
        return {
            "max_depth": self.max_depth,
            "min_leaf": self.min_leaf,
            "mtry": self.mtry,
            "seed": self.seed.to_dict(),
        }

    @staticmethod
    def from_dict(d: dict) -> "TreeConfig":
        return TreeConfig(
            max_depth=int(d["max_depth"]),
            min_leaf=int(d["min_leaf"]),
            mtry=None if d.get("mtry") is None else int(d["mtry"]),
            seed=SeedSpec.from_dict(d["seed"]),
        )


@dataclass(frozen=True)
class Node:
    """One tree node; ``feature`` is None on leaves."""

    id: int
    depth: int
    count: int
    mass: float
    mean: float
    feature: int | None = None
    threshold: float | None = None
    left: int | None = None
    right: int | None = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None


@dataclass(frozen=True)
class TreeModel:
    """Nodes in preorder; node ids index into ``nodes`` and the root is 0."""

    nodes: tuple[Node, ...]
    config: TreeConfig
    n_rows: int

    @property
    def root(self) -> Node:
        return self.nodes[0]

    def leaves(self) -> tuple[Node, ...]:
        return tuple(nd for nd in self.nodes if nd.is_leaf)

    def internal(self) -> tuple[Node, ...]:
        return tuple(nd for nd in self.nodes if not nd.is_leaf)

    @property
    def depth(self) -> int:
        """Deepest internal level; 0 when the tree is a single leaf."""
        internal = [nd.depth for nd in self.nodes if not nd.is_leaf]
        return max(internal) if internal else 0


@dataclass(frozen=True)
class SplitChoice:
    feature: int
    threshold: float
    children_sse: float
    parent_sse: float

    @property
    def gain(self) -> float:
        return self.parent_sse - self.children_sse


def _weight_values(w: WeightVector | np.ndarray, n: int) -> np.ndarray:
    vals = w.values if isinstance(w, WeightVector) else np.asarray(w, dtype=np.float64)
    if vals.shape != (n,):
        raise ValueError(f"weights shape {vals.shape} does not match {n} rows")
    if np.any(vals < 0.0) or not np.all(np.isfinite(vals)):
        raise ValueError("weights must be finite and nonnegative")
    if float(np.sum(vals)) <= 0.0:
        raise ValueError("weights must have positive total mass")
    return vals


def best_split(
    X: np.ndarray,
    y: np.ndarray,
    w: WeightVector | np.ndarray,
    rows: np.ndarray | None = None,
    features: Sequence[int] | None = None,
    min_leaf: int = 1,
) -> SplitChoice | None:
    """Exhaustive scan for the impurity-minimizing (feature, threshold).

    Returns None when no candidate strictly beats the parent. Ties
    resolve to the lowest feature index, then the lowest threshold.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    wvals = _weight_values(w, y.size)
    if rows is None:
        rows = np.arange(y.size)
    if features is None:
        features = range(X.shape[1])

    y_node = y[rows]
    w_node = wvals[rows]
    mass = float(np.sum(w_node))
    if mass <= 0.0 or rows.size < 2 * min_leaf:
        return None
    # A constant response cannot be improved; skip before arithmetic
    # noise can manufacture a spurious positive gain.
    if np.all(y_node == y_node[0]):
        return None
    mu = float(np.dot(w_node, y_node)) / mass
    yc = y_node - mu  # shift for conditioning; SSE is shift-invariant

    best: SplitChoice | None = None
    parent_sse = None
    for j in features:
        xv = X[rows, j]
        order = np.argsort(xv, kind="stable")
        xs = xv[order]
        if xs[0] == xs[-1]:
            continue
        wo = w_node[order]
        wy = wo * yc[order]
        wy2 = wy * yc[order]

        cw = np.cumsum(wo)
        cwy = np.cumsum(wy)
        cwy2 = np.cumsum(wy2)
        # Suffix sums accumulated directly; total-minus-prefix would
        # cancel on large nodes.
        sw = np.cumsum(wo[::-1])[::-1]
        swy = np.cumsum(wy[::-1])[::-1]
        swy2 = np.cumsum(wy2[::-1])[::-1]

        if parent_sse is None:
            parent_sse = float(cwy2[-1] - cwy[-1] ** 2 / cw[-1])

        m = xs.size
        counts = np.arange(1, m)
        valid = (
            (xs[:-1] != xs[1:])
            & (counts >= min_leaf)
            & ((m - counts) >= min_leaf)
            & (cw[:-1] > 0.0)
            & (sw[1:] > 0.0)
        )
        if not valid.any():
            continue
        lw = np.where(valid, cw[:-1], 1.0)
        rw = np.where(valid, sw[1:], 1.0)
        sse = (cwy2[:-1] - cwy[:-1] ** 2 / lw) + (swy2[1:] - swy[1:] ** 2 / rw)
        sse[~valid] = np.inf
        k = int(np.argmin(sse))  # first minimum: lowest threshold wins ties
        if best is None or float(sse[k]) < best.children_sse:
            best = SplitChoice(
                feature=int(j),
                threshold=float(xs[k]),
                children_sse=float(sse[k]),
                parent_sse=parent_sse,
            )

    if best is None or parent_sse is None:
        return None
    if not best.gain > 0.0:
        return None
    return best


def fit_tree(
    X: np.ndarray,
    y: np.ndarray,
    w: WeightVector | np.ndarray,
    cfg: TreeConfig,
    mtry_seed: SeedSpec | None = None,
    mtry_stream: int = 0,
) -> TreeModel:
    """Grow one tree on the weighted rows. Single-threaded per tree.

    ``mtry_seed`` overrides ``cfg.seed`` for the candidate-subset
    substreams; forests pass a per-tree seed here so all trees can share
    one config.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.size:
        raise ValueError(f"incompatible shapes X {X.shape}, y {y.shape}")
    n, p = X.shape
    wvals = _weight_values(w, n)
    if cfg.mtry is not None and cfg.mtry > p:
        raise ValueError(f"mtry={cfg.mtry} exceeds {p} features")
    seed = mtry_seed if mtry_seed is not None else cfg.seed

    nodes: list[Node | None] = []

    def candidate_features(heap: int) -> Sequence[int] | None:
        if cfg.mtry is None:
            return None
        rng = seed.generator(STREAM_MTRY, mtry_stream, heap)
        return np.sort(rng.choice(p, size=cfg.mtry, replace=False))

    def build(rows: np.ndarray, depth: int, heap: int) -> int:
        nid = len(nodes)
        nodes.append(None)
        w_node = wvals[rows]
        mass = float(np.sum(w_node))
        mean = float(np.dot(w_node, y[rows])) / mass
        choice = None
        if depth <= cfg.max_depth and rows.size >= 2 * cfg.min_leaf:
            choice = best_split(
                X, y, wvals, rows=rows, features=candidate_features(heap), min_leaf=cfg.min_leaf
            )
        if choice is None:
            nodes[nid] = Node(id=nid, depth=depth, count=rows.size, mass=mass, mean=mean)
            return nid
        go_left = X[rows, choice.feature] <= choice.threshold
        left = build(rows[go_left], depth + 1, 2 * heap)
        right = build(rows[~go_left], depth + 1, 2 * heap + 1)
        nodes[nid] = Node(
            id=nid,
            depth=depth,
            count=rows.size,
            mass=mass,
            mean=mean,
            feature=choice.feature,
            threshold=choice.threshold,
            left=left,
            right=right,
        )
        return nid

    build(np.arange(n), 1, _HEAP_ROOT)
    return TreeModel(nodes=tuple(nodes), config=cfg, n_rows=n)


def predict(tree: TreeModel, x: np.ndarray) -> float:
    """Leaf mean for a single covariate vector; x <= threshold goes left."""
    x = np.asarray(x, dtype=np.float64)
    node = tree.root
    while not node.is_leaf:
        node = tree.nodes[node.left if x[node.feature] <= node.threshold else node.right]
    return node.mean


def predict_matrix(tree: TreeModel, X: np.ndarray) -> np.ndarray:
    """Vectorized ``predict`` over the rows of X."""
    X = np.asarray(X, dtype=np.float64)
    out = np.empty(X.shape[0])
    stack: list[tuple[int, np.ndarray]] = [(0, np.arange(X.shape[0]))]
    while stack:
        nid, idx = stack.pop()
        node = tree.nodes[nid]
        if node.is_leaf:
            out[idx] = node.mean
            continue
        go_left = X[idx, node.feature] <= node.threshold
        stack.append((node.left, idx[go_left]))
        stack.append((node.right, idx[~go_left]))
    return out


# ---------------------------------------------------------------------------
# Effect-transformed responses


@dataclass(frozen=True)
class TotSample:
    """Responses rescaled so their data-model mean is the treatment effect.

    y* = y (d - q) / (q (1 - q)); zero responses stay exactly zero.
    """

    y_star: np.ndarray
    q: float

    def __post_init__(self):
        arr = np.asarray(self.y_star, dtype=np.float64)
        arr.setflags(write=False)
        object.__setattr__(self, "y_star", arr)


def tot_transform(y: np.ndarray, d: np.ndarray, q: float) -> TotSample:
    y = np.asarray(y, dtype=np.float64)
    d = np.asarray(d)
    if y.shape != d.shape or y.ndim != 1:
        raise ValueError("y and d must be aligned 1-d arrays")
    if not np.all(np.isin(np.unique(d), (0, 1))):
        raise DataError("treatment must be coded 0/1")
    if not 0.0 < q < 1.0:
        raise ValueError(f"q must lie in (0, 1), got {q}")
    y_star = y * (d.astype(np.float64) - q) / (q * (1.0 - q))
    return TotSample(y_star=y_star, q=q)


# ---------------------------------------------------------------------------
# Serialization


def tree_to_dict(tree: TreeModel) -> dict:
    return {
        "n_rows": tree.n_rows,
        "config": tree.config.to_dict(),
        "nodes": [
            {
                "id": nd.id,
                "depth": nd.depth,
                "count": nd.count,
                "mass": nd.mass,
                "mean": nd.mean,
                "feature": nd.feature,
                "threshold": nd.threshold,
                "left": nd.left,
                "right": nd.right,
            }
            for nd in tree.nodes
        ],
    }


def tree_from_dict(d: dict) -> TreeModel:
    nodes = tuple(
        Node(
            id=int(nd["id"]),
            depth=int(nd["depth"]),
            count=int(nd["count"]),
            mass=float(nd["mass"]),
            mean=float(nd["mean"]),
            feature=None if nd["feature"] is None else int(nd["feature"]),
            threshold=None if nd["threshold"] is None else float(nd["threshold"]),
            left=None if nd["left"] is None else int(nd["left"]),
            right=None if nd["right"] is None else int(nd["right"]),
        )
        for nd in d["nodes"]
    )
    return TreeModel(nodes=nodes, config=TreeConfig.from_dict(d["config"]), n_rows=int(d["n_rows"]))
