"""Rank intraclass correlation for two- and three-level clustered data."""

from __future__ import annotations

__version__ = "0.1.0"

from .data import (
    ClusteredDataset,
    RiditTable,
    ThreeLevelDataset,
    WeightAssignment,
    build_dataset,
    build_three_level_dataset,
    ridit_cdf,
)
from .errors import RankIccError
from .estimator import (
    IccEstimate,
    ThreeLevelEstimate,
    fisher_icc_pairwise,
    monte_carlo_rank_icc,
    rank_icc,
    rank_icc_three_level,
)
from .inference import (
    BootstrapResult,
    ConfidenceInterval,
    InfluenceTable,
    asymptotic_se,
    asymptotic_se_three_level,
    ci_fisher_z,
    ci_wald,
    cluster_bootstrap,
    one_stage_bootstrap_3level,
    two_stage_bootstrap,
)
from .weighting import (
    WeightScheme,
    combination_weights,
    equal_cluster_weights,
    equal_obs_weights,
    ess_weights,
    iterate_weights,
    make_weights,
    three_level_weights,
)

__all__ = [
    "BootstrapResult", "ClusteredDataset", "ConfidenceInterval", "IccEstimate",
    "InfluenceTable", "RankIccError", "RiditTable", "ThreeLevelDataset",
    "ThreeLevelEstimate", "WeightAssignment", "WeightScheme", "asymptotic_se",
    "asymptotic_se_three_level", "build_dataset", "build_three_level_dataset",
    "ci_fisher_z", "ci_wald", "cluster_bootstrap", "combination_weights",
    "equal_cluster_weights", "equal_obs_weights", "ess_weights", "fisher_icc_pairwise",
    "iterate_weights", "make_weights", "monte_carlo_rank_icc", "one_stage_bootstrap_3level",
    "rank_icc", "rank_icc_three_level", "ridit_cdf", "three_level_weights",
    "two_stage_bootstrap", "__version__",
]
