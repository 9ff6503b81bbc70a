"""Distribution-free Bayesian analysis of randomized A/B experiments.

The observed sample is treated as the support of an unknown discrete
data distribution; independent exponential weights on the rows sample
its posterior. Everything downstream is a functional of that weighted
distribution: means and their exact moments (``dgp``), projection
coefficients with expansion covariances (``linproj``), adjusted average
effects (``ate``), and trees and forests over effect heterogeneity
(``cart``, ``forest``).
"""
from .dgp import (
    PosteriorMoments,
    SeedSpec,
    WeightKind,
    WeightVector,
    bootstrap_statistic,
    dgp_mean,
    dgp_mean_moments,
    posterior_mean_weights,
    sample_weights,
    sample_weights_matrix,
)
from .data import (
    ColumnSchema,
    ExperimentTable,
    ExpansionPlan,
    SynthConfig,
    SyntheticExperiment,
    apply_expansion,
    build_expansion,
    generate_synthetic,
    load_csv,
)
from .linproj import (
    HteLinearSummary,
    OlsFit,
    StratumEffect,
    hte_linear,
    ols_gradient,
    stratified_moments,
    taylor_cov,
    weighted_ols,
)
from .ate import (
    AdjustedBootstrapResult,
    AdjustedTaylorResult,
    AteReport,
    VarianceReduction,
    adjusted_ate_bootstrap,
    adjusted_ate_taylor,
    compute_ate_report,
    intercept_in_span,
    unadjusted_ate,
    variance_reduction,
)
from .cart import (
    Node,
    SplitChoice,
    TotSample,
    TreeConfig,
    TreeModel,
    best_split,
    fit_tree,
    predict,
    predict_matrix,
    tot_transform,
    tree_from_dict,
    tree_to_dict,
)
from .forest import (
    EffectSelector,
    ForestAteResult,
    ForestModel,
    HteForestSummary,
    SplitProbabilityTable,
    VariableEffectResult,
    WeightScheme,
    fit_forest,
    fit_group_forests,
    fit_tot_forest,
    forest_ate,
    forest_from_dict,
    forest_to_dict,
    hte_predict,
    hte_summary,
    split_probabilities,
    variable_effect,
)
from .errors import (
    ConfigError,
    DataError,
    NpbhteError,
    RankDeficiencyError,
    ReplicateError,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
