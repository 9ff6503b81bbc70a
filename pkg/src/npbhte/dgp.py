"""Posterior sampling and exact moments for reweighted-sample data models.

The observed rows are treated as the support of an unknown discrete data
distribution whose point masses are themselves uncertain. Under a flat
Dirichlet-multinomial model the posterior on the mass of row ``i`` is, in
the noninformative limit, proportional to an independent Exp(1) draw
``theta_i``, and the posterior mean model puts equal mass on every row
(``theta = 1``). Any statistic of the data distribution then becomes a
random variable: sampling ``theta`` and recomputing the statistic yields
posterior draws (``bootstrap_statistic``), while weighted means admit
closed-form moments,

    E[mu_v] = vbar,    var(mu_v) = (1/(n+1)) * (v'v/n - vbar^2),

implemented in ``dgp_mean_moments`` via the algebraically equal centered
form so the variance is never negative in floating point.

Randomness is counter-addressed: a ``SeedSpec`` names a stream by
``(master_seed, replicate_index, stream_tag)`` and hands out independent
Philox generators, so replicate b of any procedure is reproducible in
isolation and results do not depend on worker-thread count.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np

from .errors import ReplicateError
from ._parallel import run_indexed

# Stream tags. Every consumer of weight draws pulls from its own substream
# so that, e.g., swapping the control-arm seed leaves treated-arm draws
# untouched and pooled averaging weights are independent of both arms.
STREAM_BASE = 0
STREAM_TREATED = 1
STREAM_CONTROL = 2
STREAM_AVERAGING = 3
STREAM_MTRY = 4


class WeightKind(Enum):
    POSTERIOR_DRAW = "posterior_draw"
    POSTERIOR_MEAN = "posterior_mean"


@dataclass(frozen=True)
class SeedSpec:
    """Address of one random stream: master seed plus replicate counter."""

    master_seed: int
    replicate_index: int = 0

    def __post_init__(self):
        if not 0 <= int(self.master_seed) < 2**64:
            raise ValueError("master_seed must be in [0, 2**64)")
        if int(self.replicate_index) < 0:
            raise ValueError("replicate_index must be nonnegative")

    def replicate(self, b: int) -> "SeedSpec":
        """The same master stream readdressed to replicate ``b``."""
        return SeedSpec(self.master_seed, b)

    def generator(self, *tags: int) -> np.random.Generator:
        """A Philox generator keyed by (master, replicate, *tags)."""
        seq = np.random.SeedSequence(
            (int(self.master_seed), int(self.replicate_index)) + tuple(int(t) for t in tags)
        )
        return np.random.Generator(np.random.Philox(seq))

    def to_dict(self) -> dict:
        return {"master_seed": int(self.master_seed), "replicate_index": int(self.replicate_index)}

    @staticmethod
    def from_dict(d: dict) -> "SeedSpec":
        return SeedSpec(int(d["master_seed"]), int(d.get("replicate_index", 0)))


@dataclass(frozen=True)
class WeightVector:
    """One weighting of the observed rows.

    ``POSTERIOR_DRAW`` values are strictly positive Exp(1) draws;
    ``POSTERIOR_MEAN`` is the all-ones vector (the posterior-mean model).
    """

    values: np.ndarray
    kind: WeightKind

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 1 or vals.size == 0:
            raise ValueError("weights must be a nonempty 1-d array")
        if self.kind is WeightKind.POSTERIOR_DRAW:
            if not np.all(vals > 0.0):
                raise ValueError("posterior weight draws must be strictly positive")
        elif self.kind is WeightKind.POSTERIOR_MEAN:
            if not np.all(vals == 1.0):
                raise ValueError("posterior-mean weights must be identically 1")
        else:
            raise ValueError(f"unknown weight kind {self.kind!r}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return self.values.size

    @property
    def total(self) -> float:
        return float(np.sum(self.values))


@dataclass(frozen=True)
class PosteriorMoments:
    """Mean and variance of a scalar functional of the data distribution."""

    mean: float
    variance: float

    def __post_init__(self):
        if not math.isfinite(self.mean):
            raise ValueError("mean must be finite")
        if not (math.isfinite(self.variance) and self.variance >= 0.0):
            raise ValueError("variance must be finite and nonnegative")

    @property
    def sd(self) -> float:
        return math.sqrt(self.variance)


def posterior_mean_weights(n: int) -> WeightVector:
    """The theta = 1 weighting on ``n`` rows."""
    if n < 1:
        raise ValueError("n must be positive")
    return WeightVector(np.ones(n), WeightKind.POSTERIOR_MEAN)


def _exp_draws(rng: np.random.Generator, shape) -> np.ndarray:
    # Inverse-CDF form -log(U) keeps draws strictly positive except on the
    # measure-zero event U == 0, which is redrawn.
    u = rng.random(shape)
    flat = u.reshape(-1)
    zero = flat == 0.0
    while zero.any():
        flat[zero] = rng.random(int(zero.sum()))
        zero = flat == 0.0
    return -np.log(u)


def sample_weights(n: int, seed: SeedSpec, stream: int = STREAM_BASE) -> WeightVector:
    """Draw one posterior weight vector of length ``n``.

    The draw is fully determined by ``(seed.master_seed,
    seed.replicate_index, stream)``.
    """
    if n < 1:
        raise ValueError("n must be positive")
    rng = seed.generator(stream)
    return WeightVector(_exp_draws(rng, n), WeightKind.POSTERIOR_DRAW)


def sample_weights_matrix(n: int, B: int, seed: SeedSpec, stream: int = STREAM_BASE) -> np.ndarray:
    """``B`` weight vectors drawn from a single stream, as a (B, n) array.

    Bulk variant for Monte Carlo work where only joint independence
    matters, not per-replicate addressing.
    """
    if n < 1 or B < 1:
        raise ValueError("n and B must be positive")
    rng = seed.generator(stream)
    return _exp_draws(rng, (B, n))


def dgp_mean(v: np.ndarray, w: WeightVector) -> float:
    """Mean of ``v`` under the data model defined by weights ``w``."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError("v must be 1-d")
    if v.size != len(w):
        raise ValueError(f"length mismatch: v has {v.size} entries, weights have {len(w)}")
    if w.kind is WeightKind.POSTERIOR_MEAN:
        return float(np.mean(v))
    total = w.total
    if total <= 0.0:
        raise ValueError("weights must have positive total mass")
    return float(np.dot(w.values, v) / total)


def dgp_mean_moments(v: np.ndarray) -> PosteriorMoments:
    """Exact posterior mean and variance of the data-model mean of ``v``."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("v must be a nonempty 1-d array")
    n = v.size
    vbar = float(np.mean(v))
    centered_ss = float(np.sum((v - vbar) ** 2))
    return PosteriorMoments(mean=vbar, variance=centered_ss / (n * (n + 1)))


def bootstrap_statistic(
    stat: Callable[[WeightVector], float],
    n: int,
    B: int,
    seed: SeedSpec,
    threads: int | None = None,
) -> np.ndarray:
    """Posterior draws of ``stat`` under ``B`` reweightings of ``n`` rows.

    Replicate ``b`` evaluates ``stat`` on ``sample_weights(n,
    seed.replicate(b))``; failures carry the replicate index.
    """
    if B < 1:
        raise ValueError("B must be positive")

    def one(b: int) -> float:
        w = sample_weights(n, seed.replicate(b))
        try:
            return float(stat(w))
        except Exception as exc:
            raise ReplicateError(b, f"statistic failed on replicate {b}: {exc}") from exc

    return np.asarray(run_indexed(one, B, threads), dtype=np.float64)
