import numpy as np
import pytest

from npbhte import ExperimentTable


def make_table(
    n: int = 400,
    p: int = 3,
    seed: int = 0,
    q: float = 0.5,
    signal: float = 1.0,
    noise: float = 1.0,
    effect: float = 0.5,
) -> ExperimentTable:
    """Well-conditioned linear-signal table with an explicit intercept.

    p counts the non-intercept covariates; the effect is constant so the
    truth is known exactly.
    """
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((n, p))
    d = (rng.random(n) < q).astype(np.int8)
    if d.min() == d.max():
        d[0] = 1 - d[0]
    gamma = signal * rng.standard_normal(p)
    y = 1.0 + Z @ gamma + effect * d + noise * rng.standard_normal(n)
    X = np.column_stack([np.ones(n), Z])
    names = ("intercept",) + tuple(f"z{j + 1}" for j in range(p))
    return ExperimentTable(y=y, d=d, X=X, feature_names=names, q=q)


@pytest.fixture
def small_table() -> ExperimentTable:
    return make_table(n=200, p=2, seed=11)
