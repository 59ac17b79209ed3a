from .forest import (
    EffectEstimate,
    ForestParams,
    IvForest,
    IvTree,
    NoValidNeighborhood,
    ate,
    ate_for_cases,
    cate_by_group,
    fit_forest,
    fit_forest_cases,
    forest_weights,
    grow_tree,
    iv_scores,
    leaf_iv_estimate,
    predict_iate,
    pseudo_outcome,
)
from .diagnostics import (
    FIRST_STAGE_FORMULAS,
    FirstStage,
    HistogramReport,
    compliance_histogram,
    first_stage_diagnostics,
    overlap_report,
)
from .io import load_forest, save_forest, schema_hash
from .nuisance import NuisanceEstimates, NuisanceModels, fit_models, fit_nuisance
