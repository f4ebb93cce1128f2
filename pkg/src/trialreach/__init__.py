"""Translate randomized trial effects to a target population.

The library estimates a trial's average treatment effect (TATE) and its
population counterpart (PATE) by inverse-probability-of-sampling
weighting, outcome modeling, or doubly robust combination, with
population-similarity diagnostics, multiple imputation for missing
covariates, sensitivity scenarios, and an agreement verdict between the
two estimands. The ``trialreach`` command drives the same pipeline from
a JSON config file.
"""

from .config import PipelineConfig, load_config, validate_config
from .dataset import (
    CovariateSchema,
    MissingnessReport,
    StudyTable,
    harmonize,
    load_study,
    make_table,
    missingness_profile,
    save_study,
    schema_from_json,
    stack,
)
from .engines import (
    DesignMatrix,
    FittedModel,
    ForestParams,
    build_design,
    fit_forest,
    fit_linear,
    fit_logistic,
    predict,
)
from .errors import (
    AnalysisWarning,
    BootstrapError,
    ConfigError,
    DataError,
    DegenerateDataError,
    DgpError,
    DroppedCovariateWarning,
    EstimationError,
    HarmonizeError,
    ImputationError,
    MissingDataError,
    ParseError,
    PolicyError,
    RankDeficiencyWarning,
    RidgeFallbackWarning,
    RoleError,
    SchemaError,
    SeparationWarning,
    TrialReachError,
)
from .estimators import (
    BootstrapResult,
    EffectEstimate,
    SubgroupTable,
    bootstrap_ci,
    dr_pate,
    gcomp_pate,
    ipsw_pate,
    subgroup_effects,
    tate,
    with_bootstrap,
)
from .imputation import (
    ImputationSet,
    MiceSettings,
    PooledEstimate,
    average_scores,
    impute_once,
    mi_boot,
    mice,
    psi_across,
    psi_within,
    rubin_pool,
)
from .pipeline import run, write_outputs
from .report import RunReport, canonical, emit_report, render_json, render_markdown
from .rng import parallel_map, spawn_seed, substream
from .similarity import (
    SimilarityReport,
    bhattacharyya_coefficient,
    classify_overlap,
    similarity_report,
    smd,
    standardized_delta_p,
    tipton_index,
)
from .simulate import CovariateSpec, DgpSpec, generate_synthetic
from .verdict import (
    AgreementVerdict,
    ScenarioSpec,
    adjust_unmeasured_modifier,
    build_verdict,
    design_agreement,
    estimate_agreement,
    regulatory_agreement,
    run_scenarios,
    standardized_difference,
)
from .weighting import (
    PositivityAudit,
    PropensityFit,
    WeightSet,
    estimate_sampling_score,
    make_weights,
    positivity_audit,
    trim_stabilize,
)

__version__ = "0.1.0"

__all__ = [
    "AgreementVerdict",
    "AnalysisWarning",
    "BootstrapError",
    "BootstrapResult",
    "ConfigError",
    "CovariateSchema",
    "CovariateSpec",
    "DataError",
    "DegenerateDataError",
    "DesignMatrix",
    "DgpError",
    "DgpSpec",
    "DroppedCovariateWarning",
    "EffectEstimate",
    "EstimationError",
    "FittedModel",
    "ForestParams",
    "HarmonizeError",
    "ImputationError",
    "ImputationSet",
    "MiceSettings",
    "MissingDataError",
    "MissingnessReport",
    "ParseError",
    "PipelineConfig",
    "PolicyError",
    "PooledEstimate",
    "PositivityAudit",
    "PropensityFit",
    "RankDeficiencyWarning",
    "RidgeFallbackWarning",
    "RoleError",
    "RunReport",
    "ScenarioSpec",
    "SchemaError",
    "SeparationWarning",
    "SimilarityReport",
    "StudyTable",
    "SubgroupTable",
    "TrialReachError",
    "WeightSet",
    "adjust_unmeasured_modifier",
    "average_scores",
    "bhattacharyya_coefficient",
    "bootstrap_ci",
    "build_design",
    "build_verdict",
    "canonical",
    "classify_overlap",
    "design_agreement",
    "dr_pate",
    "emit_report",
    "estimate_agreement",
    "estimate_sampling_score",
    "fit_forest",
    "fit_linear",
    "fit_logistic",
    "gcomp_pate",
    "generate_synthetic",
    "harmonize",
    "impute_once",
    "ipsw_pate",
    "load_config",
    "load_study",
    "make_table",
    "make_weights",
    "mi_boot",
    "mice",
    "missingness_profile",
    "parallel_map",
    "positivity_audit",
    "predict",
    "psi_across",
    "psi_within",
    "regulatory_agreement",
    "render_json",
    "render_markdown",
    "rubin_pool",
    "run",
    "run_scenarios",
    "save_study",
    "schema_from_json",
    "similarity_report",
    "smd",
    "spawn_seed",
    "stack",
    "standardized_delta_p",
    "standardized_difference",
    "subgroup_effects",
    "substream",
    "tate",
    "tipton_index",
    "trim_stabilize",
    "validate_config",
    "with_bootstrap",
    "write_outputs",
]
