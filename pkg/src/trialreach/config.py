"""Run configuration: parsing, normalization, and full validation.

validate_config collects every violation instead of stopping at the
first, so a bad config surfaces all of its problems in one pass.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from .errors import ConfigError
from .verdict import SCENARIO_KINDS

SCHEMA_VERSION = 1
ESTIMATOR_NAMES = ("ipsw", "gcomp", "dr")
STRATEGY_NAMES = ("psi_within", "psi_across", "complete_case")
REPORT_FORMATS = ("json", "markdown", "figures", "weights")
TOP_LEVEL_KEYS = {
    "schema_version",
    "seed",
    "paths",
    "scenario",
    "sampling_model",
    "outcome_model",
    "estimators",
    "weight_policy",
    "similarity",
    "missing_data",
    "variance",
    "agreement",
    "sensitivity",
    "appropriateness",
    "report",
    "subgroups",
}

_SCENARIO_PARAMS = {
    "identity": set(),
    "unmeasured_modifier": {"delta_u", "prevalence_trial", "prevalence_target"},
    "drop_covariates": {"covariates"},
    "trimming_policy": {"policy"},
    "alternate_estimator": {"estimator"},
    "outcome_cutoff": {"cutoff"},
    "complete_case_toggle": set(),
}


def _check_policy(policy, problems: list[str], where: str) -> None:
    if not isinstance(policy, list):
        problems.append(f"{where}: weight policy must be a list of steps")
        return
    for i, step in enumerate(policy):
        if not isinstance(step, dict) or "kind" not in step:
            problems.append(f"{where}[{i}]: each step needs a 'kind'")
            continue
        kind = step["kind"]
        if kind not in ("none", "cap", "normalize"):
            problems.append(f"{where}[{i}]: unknown step kind {kind!r}")
        elif kind == "cap":
            lo = step.get("lo", 0.0)
            hi = step.get("hi", 100.0)
            if not (
                isinstance(lo, (int, float))
                and isinstance(hi, (int, float))
                and 0.0 <= lo < hi <= 100.0
            ):
                problems.append(
                    f"{where}[{i}]: cap percentiles need 0 <= lo < hi <= 100"
                )


def validate_config(cfg: dict) -> list[str]:
    """Return every violation in the config dict (empty list = valid)."""
    problems: list[str] = []
    if not isinstance(cfg, dict):
        return ["config must be a JSON object"]
    for key in cfg:
        if key not in TOP_LEVEL_KEYS:
            problems.append(f"unknown config key {key!r}")
    if cfg.get("schema_version") != SCHEMA_VERSION:
        problems.append(
            f"schema_version must be {SCHEMA_VERSION}, got "
            f"{cfg.get('schema_version')!r}"
        )
    seed = cfg.get("seed")
    if not isinstance(seed, int) or isinstance(seed, bool):
        problems.append(
            "seed is mandatory and must be an integer; runs are never "
            "seeded from the clock"
        )

    paths = cfg.get("paths")
    if not isinstance(paths, dict):
        problems.append("paths block is required")
    else:
        for key in ("trial_csv", "target_csv", "schema_json"):
            if not isinstance(paths.get(key), str) or not paths.get(key):
                problems.append(f"paths.{key} is required")

    scenario = cfg.get("scenario")
    if scenario not in ("generalizability", "transportability"):
        problems.append(
            f"scenario must be 'generalizability' or 'transportability', "
            f"got {scenario!r}"
        )

    sampling = cfg.get("sampling_model", {})
    if not isinstance(sampling, dict):
        problems.append("sampling_model must be an object")
        sampling = {}
    family = sampling.get("family", "logistic")
    if family not in ("logistic", "forest"):
        problems.append(f"sampling_model.family must be logistic or forest, got {family!r}")
    if sampling.get("covariates") is not None and not isinstance(
        sampling.get("covariates"), list
    ):
        problems.append("sampling_model.covariates must be a list or null")

    outcome = cfg.get("outcome_model", {})
    if not isinstance(outcome, dict):
        problems.append("outcome_model must be an object")
        outcome = {}
    if outcome.get("family", "auto") not in ("auto", "linear", "logistic"):
        problems.append("outcome_model.family must be auto, linear, or logistic")

    estimators = cfg.get("estimators", ["ipsw"])
    if (
        not isinstance(estimators, list)
        or not estimators
        or any(e not in ESTIMATOR_NAMES for e in estimators)
        or len(set(estimators)) != len(estimators)
    ):
        problems.append(
            f"estimators must be a non-empty list drawn from {ESTIMATOR_NAMES}"
        )
        estimators = []

    _check_policy(cfg.get("weight_policy", [{"kind": "normalize"}]), problems, "weight_policy")

    similarity = cfg.get("similarity", {})
    if isinstance(similarity, dict):
        thr = similarity.get("smd_threshold", 0.1)
        if not isinstance(thr, (int, float)) or thr <= 0.0:
            problems.append("similarity.smd_threshold must be positive")
    else:
        problems.append("similarity must be an object")

    variance = cfg.get("variance", {"method": "bootstrap"})
    v_method = "bootstrap"
    if not isinstance(variance, dict):
        problems.append("variance must be an object")
    else:
        v_method = variance.get("method", "bootstrap")
        if v_method not in ("sandwich", "bootstrap"):
            problems.append(f"variance.method must be sandwich or bootstrap, got {v_method!r}")
        if v_method == "sandwich":
            unsupported = [e for e in estimators if e in ("gcomp", "dr")]
            if unsupported:
                problems.append(
                    f"sandwich variance is not available for {unsupported}; "
                    "their uncertainty comes from the bootstrap"
                )
        else:
            b = variance.get("n_replicates", 200)
            if not isinstance(b, int) or b < 2:
                problems.append("variance.n_replicates must be an integer >= 2")
            if variance.get("flavor", "percentile") not in ("percentile", "normal"):
                problems.append("variance.flavor must be percentile or normal")

    missing = cfg.get("missing_data", {"complete_case": {}})
    if not isinstance(missing, dict):
        problems.append("missing_data must be an object")
    else:
        strategies = [k for k in missing if k in STRATEGY_NAMES]
        unknown = [k for k in missing if k not in STRATEGY_NAMES]
        for k in unknown:
            problems.append(f"missing_data: unknown strategy {k!r}")
        if len(strategies) != 1:
            problems.append(
                f"missing_data must set exactly one strategy from "
                f"{STRATEGY_NAMES}, found {strategies or 'none'}"
            )
        for strat in strategies:
            block = missing[strat] or {}
            if strat in ("psi_within", "psi_across"):
                m = block.get("m", 20)
                it = block.get("iterations", 10)
                if not isinstance(m, int) or m < 2:
                    problems.append(f"missing_data.{strat}.m must be an integer >= 2")
                if not isinstance(it, int) or it < 1:
                    problems.append(
                        f"missing_data.{strat}.iterations must be an integer >= 1"
                    )
            if strat == "psi_across" and v_method != "bootstrap":
                problems.append(
                    "psi_across pools averaged scores; its variance must come "
                    "from the bootstrap (set variance.method = 'bootstrap')"
                )

    agreement = cfg.get("agreement", {})
    if isinstance(agreement, dict):
        alpha = agreement.get("alpha", 0.05)
        if not isinstance(alpha, (int, float)) or not 0.0 < alpha < 1.0:
            problems.append("agreement.alpha must be inside (0, 1)")
        thr = agreement.get("design_threshold")
        if thr is not None:
            if not isinstance(thr, dict):
                problems.append("agreement.design_threshold must be an object or null")
            else:
                if thr.get("direction") not in ("positive", "negative"):
                    problems.append(
                        "agreement.design_threshold.direction must be "
                        "'positive' or 'negative'"
                    )
                mag = thr.get("magnitude")
                if not isinstance(mag, (int, float)) or mag < 0.0:
                    problems.append(
                        "agreement.design_threshold.magnitude must be >= 0"
                    )
    else:
        problems.append("agreement must be an object")

    sensitivity = cfg.get("sensitivity", [])
    if not isinstance(sensitivity, list):
        problems.append("sensitivity must be a list of scenario objects")
        sensitivity = []
    for i, sc in enumerate(sensitivity):
        where = f"sensitivity[{i}]"
        if not isinstance(sc, dict):
            problems.append(f"{where}: must be an object")
            continue
        label = sc.get("label")
        kind = sc.get("kind")
        if not label or not isinstance(label, str):
            problems.append(f"{where}: label is required")
        if kind not in SCENARIO_KINDS:
            problems.append(
                f"{where}: kind must be one of {SCENARIO_KINDS}, got {kind!r}"
            )
            continue
        params = {k: v for k, v in sc.items() if k not in ("label", "kind")}
        expected = _SCENARIO_PARAMS[kind]
        missing_p = expected - set(params)
        extra_p = set(params) - expected
        if missing_p:
            problems.append(f"{where}: missing parameters {sorted(missing_p)}")
        if extra_p:
            problems.append(
                f"{where}: unexpected parameters {sorted(extra_p)} for kind "
                f"{kind!r} (exactly one perturbation per scenario)"
            )
        if kind == "unmeasured_modifier" and not missing_p:
            for p in ("prevalence_trial", "prevalence_target"):
                v = params.get(p)
                if not isinstance(v, (int, float)) or not 0.0 <= v <= 1.0:
                    problems.append(f"{where}: {p} must be in [0, 1]")
        if kind == "drop_covariates" and not missing_p:
            if not isinstance(params["covariates"], list) or not params["covariates"]:
                problems.append(f"{where}: covariates must be a non-empty list")
        if kind == "trimming_policy" and not missing_p:
            _check_policy(params["policy"], problems, f"{where}.policy")
        if kind == "alternate_estimator" and not missing_p:
            if params["estimator"] not in ESTIMATOR_NAMES:
                problems.append(
                    f"{where}: estimator must be one of {ESTIMATOR_NAMES}"
                )
        if kind == "outcome_cutoff" and not missing_p:
            if not isinstance(params["cutoff"], (int, float)):
                problems.append(f"{where}: cutoff must be numeric")

    report = cfg.get("report", {})
    if isinstance(report, dict):
        formats = report.get("formats", list(REPORT_FORMATS))
        if not isinstance(formats, list) or any(
            f not in REPORT_FORMATS for f in formats
        ):
            problems.append(f"report.formats must be a subset of {REPORT_FORMATS}")
    else:
        problems.append("report must be an object")

    subgroups = cfg.get("subgroups", [])
    if not isinstance(subgroups, list):
        problems.append("subgroups must be a list")
    else:
        for i, sg in enumerate(subgroups):
            if not isinstance(sg, dict) or not sg.get("covariate"):
                problems.append(f"subgroups[{i}]: needs a covariate name")

    return problems


@dataclass
class PipelineConfig:
    """Normalized run configuration with resolved paths."""

    seed: int
    trial_csv: str
    target_csv: str
    schema_json: str
    output_dir: str | None
    scenario: str
    sampling_family: str
    sampling_covariates: list[str] | None
    forest: dict
    outcome_covariates: list[str] | None
    outcome_family: str
    estimators: list[str]
    weight_policy: list[dict]
    smd_threshold: float
    strategy: str
    mi: dict
    variance_method: str
    n_replicates: int
    bootstrap_flavor: str
    alpha: float
    design_threshold: dict | None
    sensitivity: list[dict]
    appropriateness: dict
    report_formats: list[str]
    subgroups: list[dict]
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, cfg: dict, base_dir: str = ".") -> "PipelineConfig":
        problems = validate_config(cfg)
        if problems:
            raise ConfigError(problems)

        def resolve(p: str | None) -> str | None:
            if p is None:
                return None
            return p if os.path.isabs(p) else os.path.join(base_dir, p)

        paths = cfg["paths"]
        sampling = cfg.get("sampling_model", {})
        outcome = cfg.get("outcome_model", {})
        variance = cfg.get("variance", {"method": "bootstrap"})
        missing = cfg.get("missing_data", {"complete_case": {}})
        strategy = next(k for k in missing if k in STRATEGY_NAMES)
        mi_block = dict(missing[strategy] or {})
        agreement = cfg.get("agreement", {})
        report = cfg.get("report", {})
        return cls(
            seed=int(cfg["seed"]),
            trial_csv=resolve(paths["trial_csv"]),
            target_csv=resolve(paths["target_csv"]),
            schema_json=resolve(paths["schema_json"]),
            output_dir=resolve(paths.get("output_dir")),
            scenario=cfg["scenario"],
            sampling_family=sampling.get("family", "logistic"),
            sampling_covariates=sampling.get("covariates"),
            forest=dict(sampling.get("forest", {})),
            outcome_covariates=outcome.get("covariates"),
            outcome_family=outcome.get("family", "auto"),
            estimators=list(cfg.get("estimators", ["ipsw"])),
            weight_policy=list(cfg.get("weight_policy", [{"kind": "normalize"}])),
            smd_threshold=float(
                cfg.get("similarity", {}).get("smd_threshold", 0.1)
            ),
            strategy=strategy,
            mi=mi_block,
            variance_method=variance.get("method", "bootstrap"),
            n_replicates=int(variance.get("n_replicates", 200)),
            bootstrap_flavor=variance.get("flavor", "percentile"),
            alpha=float(agreement.get("alpha", 0.05)),
            design_threshold=agreement.get("design_threshold"),
            sensitivity=list(cfg.get("sensitivity", [])),
            appropriateness=dict(cfg.get("appropriateness", {})),
            report_formats=list(report.get("formats", list(REPORT_FORMATS))),
            subgroups=list(cfg.get("subgroups", [])),
            raw=cfg,
        )


def load_config(path: str) -> tuple[dict, str]:
    """Read a config JSON file; returns (dict, directory for relative paths)."""
    with open(path, "r", encoding="utf-8") as fh:
        cfg = json.load(fh)
    return cfg, os.path.dirname(os.path.abspath(path))
