"""End-to-end orchestration: config in, rendered report out.

run() walks the workflow in a fixed order (load, harmonize, profile
missingness, handle missing data, fit sampling scores, weight, audit,
compare populations, estimate, judge agreement, stress-test) and packs
everything into a RunReport. All randomness is derived from the master
seed, so a given config and input files always produce the same
report.json, whatever the thread count.
"""

from __future__ import annotations

import json
import os
import time
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import norm

from . import dataset
from .config import PipelineConfig
from .engines import ForestParams
from .errors import DataError, EstimationError, TrialReachError
from .estimators import (
    EffectEstimate,
    bootstrap_ci,
    dr_pate,
    gcomp_pate,
    ipsw_pate,
    subgroup_effects,
    tate,
    with_bootstrap,
)
from .figures import FigureData
from .imputation import (
    ImputationSet,
    MiceSettings,
    average_scores,
    mi_boot,
    mice,
    psi_within,
)
from .report import REPORT_SCHEMA_VERSION, RunReport, emit_report
from .rng import spawn_seed
from .similarity import similarity_report
from .verdict import (
    ScenarioSpec,
    adjust_unmeasured_modifier,
    build_verdict,
    run_scenarios,
)
from .weighting import (
    estimate_sampling_score,
    make_weights,
    positivity_audit,
    trim_stabilize,
)

# Below this trial share of the combined sample, every implemented
# estimator is known to behave poorly; the run completes with a caveat.
SMALL_TRIAL_FRACTION = 0.02


@contextmanager
def _step(name: str):
    """Label module errors with the workflow step they came from."""
    try:
        yield
    except TrialReachError as exc:
        exc.args = (f"[{name}] {exc}",)
        raise


@dataclass(frozen=True)
class _Knobs:
    """Everything a single analysis pass needs; scenarios perturb copies."""

    scenario: str
    ps_family: str
    ps_covariates: tuple[str, ...]
    forest: ForestParams | None
    outcome_covariates: tuple[str, ...]
    outcome_family: str
    policy: tuple
    estimators: tuple[str, ...]
    strategy: str
    mi_m: int
    mi_iterations: int
    mi_donors: int
    variance_method: str
    n_replicates: int
    flavor: str
    alpha: float
    outcome_cutoff: float | None = None


def _build_knobs(config: PipelineConfig, schema) -> _Knobs:
    names = {c.name for c in schema}
    ps_default = tuple(c.name for c in schema if c.in_ps_model)
    out_default = tuple(c.name for c in schema if c.in_outcome_model)
    ps_cov = tuple(config.sampling_covariates or ps_default)
    out_cov = tuple(
        config.outcome_covariates
        if config.outcome_covariates is not None
        else out_default
    )
    unknown = [c for c in (*ps_cov, *out_cov) if c not in names]
    if unknown:
        raise DataError(
            f"configured model covariates not in the schema: {sorted(set(unknown))}"
        )
    if not ps_cov:
        raise DataError("the sampling model needs at least one covariate")
    forest = None
    if config.sampling_family == "forest":
        f = config.forest
        forest = ForestParams(
            n_trees=int(f.get("n_trees", 500)),
            max_depth=f.get("max_depth"),
            min_leaf=int(f.get("min_leaf", 5)),
            mtry=f.get("mtry"),
            seed=spawn_seed(config.seed, "sampling-forest"),
        )
    return _Knobs(
        scenario=config.scenario,
        ps_family=config.sampling_family,
        ps_covariates=ps_cov,
        forest=forest,
        outcome_covariates=out_cov,
        outcome_family=config.outcome_family,
        policy=tuple(config.weight_policy),
        estimators=tuple(config.estimators),
        strategy=config.strategy,
        mi_m=int(config.mi.get("m", 20)),
        mi_iterations=int(config.mi.get("iterations", 10)),
        mi_donors=int(config.mi.get("pmm_donors", 5)),
        variance_method=config.variance_method,
        n_replicates=config.n_replicates,
        flavor=config.bootstrap_flavor,
        alpha=config.alpha,
    )


def _drop_missing_ty(trial: dataset.StudyTable) -> tuple[dataset.StudyTable, int]:
    t = trial.data["t"].to_numpy(dtype=float)
    y = trial.data["y"].to_numpy(dtype=float)
    ok = np.isfinite(t) & np.isfinite(y)
    if bool(ok.all()):
        return trial, 0
    return trial.take(np.flatnonzero(ok)), int(np.count_nonzero(~ok))


def _apply_cutoff(trial: dataset.StudyTable, cutoff: float) -> dataset.StudyTable:
    df = trial.data.copy()
    y = df["y"].to_numpy(dtype=float)
    df["y"] = (y >= float(cutoff)).astype(float)
    return dataset.StudyTable(df, trial.schema, trial.side, dict(trial.provenance))


def _analysis_covariates(knobs: _Knobs) -> tuple[str, ...]:
    cov = list(knobs.ps_covariates)
    if any(e in ("gcomp", "dr") for e in knobs.estimators):
        cov.extend(c for c in knobs.outcome_covariates if c not in cov)
    return tuple(cov)


def _drop_incomplete(table: dataset.StudyTable, covariates) -> tuple[dataset.StudyTable, int]:
    if not covariates:
        return table, 0
    miss = np.zeros(table.n, dtype=bool)
    for name in covariates:
        miss |= table.data[name].isna().to_numpy()
    if not miss.any():
        return table, 0
    return table.take(np.flatnonzero(~miss)), int(np.count_nonzero(miss))


def _fit_scores(data: dataset.StudyTable, knobs: _Knobs):
    return estimate_sampling_score(
        data,
        scenario=knobs.scenario,
        family=knobs.ps_family,
        covariates=list(knobs.ps_covariates),
        forest_params=knobs.forest,
    )


def _weights_from(fit, knobs: _Knobs):
    return trim_stabilize(make_weights(fit), list(knobs.policy) or None)


def _point_estimate(
    data: dataset.StudyTable,
    name: str,
    knobs: _Knobs,
    weightset,
    variance: str = "none",
) -> EffectEstimate:
    if name == "ipsw":
        return ipsw_pate(data, weightset, alpha=knobs.alpha, variance=variance)
    if name == "gcomp":
        return gcomp_pate(
            data,
            covariates=list(knobs.outcome_covariates),
            family=knobs.outcome_family,
            alpha=knobs.alpha,
        )
    if name == "dr":
        return dr_pate(
            data,
            weightset,
            covariates=list(knobs.outcome_covariates),
            family=knobs.outcome_family,
            alpha=knobs.alpha,
        )
    raise EstimationError(f"unknown estimator {name!r}")


def _estimate_with_variance(
    data: dataset.StudyTable,
    name: str,
    knobs: _Knobs,
    seed: int,
    threads: int,
) -> EffectEstimate:
    """Single-table estimate with variance per the configured method."""
    fit = _fit_scores(data, knobs)
    w = _weights_from(fit, knobs)
    if name == "ipsw" and knobs.variance_method == "sandwich":
        return ipsw_pate(data, w, alpha=knobs.alpha, variance="sandwich")
    est = _point_estimate(data, name, knobs, w)

    def procedure(tr, tg) -> float:
        stacked = dataset.stack(tr, tg)
        f = _fit_scores(stacked, knobs)
        ws = _weights_from(f, knobs)
        return _point_estimate(stacked, name, knobs, ws).point

    boot = bootstrap_ci(
        procedure,
        data.trial_rows(),
        data.target_rows(),
        n_replicates=knobs.n_replicates,
        seed=seed,
        flavor=knobs.flavor,
        alpha=knobs.alpha,
        threads=threads,
        point=est.point,
    )
    return with_bootstrap(est, boot)


@dataclass
class _AnalysisOutput:
    tate: EffectEstimate
    pates: list[EffectEstimate]
    pooled: list
    fit: object
    weightset: object
    table: dataset.StudyTable
    mi_diag: dict | None = None
    dropped_complete: dict | None = None
    caveats: list[str] = field(default_factory=list)


def _analyze(
    trial: dataset.StudyTable,
    target: dataset.StudyTable,
    knobs: _Knobs,
    seed: int,
    threads: int,
) -> _AnalysisOutput:
    """One full analysis pass under the given knobs.

    Used for the base run and re-entered by sensitivity scenarios with
    perturbed knobs and the same seed, so scenario deltas reflect the
    perturbation rather than fresh randomness.
    """
    if knobs.outcome_cutoff is not None:
        trial = _apply_cutoff(trial, knobs.outcome_cutoff)
    caveats: list[str] = []
    pooled: list = []
    mi_diag = None
    dropped_complete = None

    if knobs.strategy == "complete_case":
        cov = _analysis_covariates(knobs)
        trial_cc, d_tr = _drop_incomplete(trial, cov)
        target_cc, d_tg = _drop_incomplete(target, cov)
        if d_tr + d_tg:
            dropped_complete = {"trial": d_tr, "target": d_tg}
            caveats.append(
                f"Complete-case handling dropped {d_tr} trial and {d_tg} "
                "target units. This is only unbiased when missingness is "
                "unrelated to observed and unobserved values; multiple "
                "imputation needs only missingness-at-random given the "
                "observed data."
            )
        if trial_cc.n == 0 or target_cc.n == 0:
            raise DataError(
                "complete-case handling removed an entire side; use "
                "multiple imputation instead"
            )
        data = dataset.stack(trial_cc, target_cc)
        tate_est = tate(data, alpha=knobs.alpha)
        fit = _fit_scores(data, knobs)
        w = _weights_from(fit, knobs)
        pates = [
            _estimate_with_variance(
                data, name, knobs, seed=spawn_seed(seed, "bootstrap", name),
                threads=threads,
            )
            for name in knobs.estimators
        ]
        return _AnalysisOutput(
            tate=tate_est, pates=pates, pooled=pooled, fit=fit, weightset=w,
            table=data, dropped_complete=dropped_complete, caveats=caveats,
        )

    # Multiple imputation strategies.
    data = dataset.stack(trial, target)
    tate_est = tate(data, alpha=knobs.alpha)
    settings = MiceSettings(
        m=knobs.mi_m, iterations=knobs.mi_iterations, pmm_donors=knobs.mi_donors
    )
    imps = mice(data, settings, seed=spawn_seed(seed, "imputation"))
    mi_diag = {
        "m": imps.m,
        "iterations": imps.iterations,
        "methods": dict(imps.methods),
        "chain_means_first_imputation": dict(imps.diagnostics["chain_means"][0]),
    }

    if knobs.strategy == "psi_within":
        pates = []
        for name in knobs.estimators:

            def analysis(tbl, _name=name):
                m_idx = next(i for i, t in enumerate(imps.tables) if t is tbl)
                return _estimate_with_variance(
                    tbl,
                    _name,
                    knobs,
                    seed=spawn_seed(seed, "within-bootstrap", _name, m_idx),
                    threads=threads,
                )

            pe = psi_within(imps, analysis, alpha=knobs.alpha)
            pooled.append(pe)
            pates.append(
                EffectEstimate(
                    estimand="PATE",
                    method=name,
                    point=pe.point,
                    se=pe.se,
                    ci=pe.ci,
                    alpha=knobs.alpha,
                    variance_method="rubin_pool",
                    n_trial=data.n_trial,
                    n_target=data.n_target,
                    flags=list(pe.flags) + [f"pooled_over_{imps.m}_imputations"],
                )
            )
        fit = _fit_scores(imps.tables[0], knobs)
        w = _weights_from(fit, knobs)
        return _AnalysisOutput(
            tate=tate_est, pates=pates, pooled=pooled, fit=fit, weightset=w,
            table=imps.tables[0], mi_diag=mi_diag, caveats=caveats,
        )

    # psi_across: average the M score vectors, analyze once, bootstrap the
    # whole impute-fit-estimate pipeline for the uncertainty.
    fits = [_fit_scores(tbl, knobs) for tbl in imps.tables]
    avg = average_scores(fits)
    w_avg = _weights_from(avg, knobs)
    z = float(norm.ppf(1.0 - knobs.alpha / 2.0))
    pates = []
    for name in knobs.estimators:
        base_est = _point_estimate(imps.tables[0], name, knobs, w_avg)

        def scalar(tbl, _name=name) -> float:
            f = _fit_scores(tbl, knobs)
            ws = _weights_from(f, knobs)
            return _point_estimate(tbl, _name, knobs, ws).point

        single = MiceSettings(
            m=2, iterations=knobs.mi_iterations, pmm_donors=knobs.mi_donors
        )
        mb = mi_boot(
            data,
            single,
            scalar,
            n_replicates=knobs.n_replicates,
            seed=spawn_seed(seed, "across-bootstrap", name),
            alpha=knobs.alpha,
            threads=threads,
        )
        ci = (
            (base_est.point - z * mb.se, base_est.point + z * mb.se)
            if knobs.flavor == "normal"
            else mb.ci
        )
        kept = [
            f
            for f in base_est.flags
            if f not in ("variance_not_requested", "variance_by_bootstrap_only")
        ]
        pates.append(
            replace(
                base_est,
                se=mb.se,
                ci=ci,
                variance_method=f"bootstrap_mi_{knobs.flavor}",
                flags=kept
                + list(mb.flags)
                + ["scores_averaged_across_imputations"],
            )
        )
    return _AnalysisOutput(
        tate=tate_est, pates=pates, pooled=pooled, fit=avg, weightset=w_avg,
        table=imps.tables[0], mi_diag=mi_diag, caveats=caveats,
    )


def _perturbed_knobs(knobs: _Knobs, spec: ScenarioSpec) -> _Knobs:
    if spec.kind == "identity":
        return knobs
    if spec.kind == "drop_covariates":
        dropped = list(spec.params["covariates"])
        known = set(knobs.ps_covariates) | set(knobs.outcome_covariates)
        unknown = [c for c in dropped if c not in known]
        if unknown:
            raise DataError(
                f"scenario drops covariates not in any model: {unknown}"
            )
        ps_kept = tuple(c for c in knobs.ps_covariates if c not in dropped)
        if not ps_kept:
            raise DataError("scenario would drop every sampling-model covariate")
        return replace(
            knobs,
            ps_covariates=ps_kept,
            outcome_covariates=tuple(
                c for c in knobs.outcome_covariates if c not in dropped
            ),
        )
    if spec.kind == "trimming_policy":
        return replace(knobs, policy=tuple(spec.params["policy"]))
    if spec.kind == "alternate_estimator":
        return replace(knobs, estimators=(spec.params["estimator"],))
    if spec.kind == "outcome_cutoff":
        return replace(knobs, outcome_cutoff=float(spec.params["cutoff"]))
    if spec.kind == "complete_case_toggle":
        return replace(knobs, strategy="complete_case")
    raise DataError(f"unknown scenario kind {spec.kind!r}")


def run(config: PipelineConfig, threads: int = 1) -> RunReport:
    """Execute the whole workflow for one configuration."""
    t_start = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")

        with _step("load"):
            with open(config.schema_json, "r", encoding="utf-8") as fh:
                try:
                    schema_obj = json.load(fh)
                except json.JSONDecodeError as exc:
                    raise DataError(
                        f"schema file is not valid JSON: {exc}"
                    ) from None
            schema = dataset.schema_from_json(schema_obj)
            trial_raw = dataset.load_study(config.trial_csv, schema, "trial")
            target_raw = dataset.load_study(config.target_csv, schema, "target")

        with _step("harmonize"):
            trial_h, target_h = dataset.harmonize(trial_raw, target_raw)
            knobs = _build_knobs(config, trial_h.schema)

        with _step("missingness-profile"):
            profile = dataset.missingness_profile(
                dataset.stack(trial_h, target_h)
            )
            trial_x, n_ty_excluded = _drop_missing_ty(trial_h)

        t_analysis = time.perf_counter()
        with _step("analysis"):
            base = _analyze(trial_x, target_h, knobs, config.seed, threads)
            audit = positivity_audit(base.fit, base.table)
            sim = similarity_report(
                base.table,
                base.fit,
                weights=base.weightset,
                threshold=config.smd_threshold,
            )
        analysis_seconds = time.perf_counter() - t_analysis

        with _step("subgroups"):
            subgroup_payload = []
            for sg in config.subgroups:
                table = subgroup_effects(
                    base.table,
                    sg["covariate"],
                    n_bins=int(sg.get("bins", 4)),
                    alpha=config.alpha,
                )
                subgroup_payload.append(table.to_dict())

        with _step("verdict"):
            verdicts = []
            tate_degenerate = not (
                np.isfinite(base.tate.ci[0]) and np.isfinite(base.tate.ci[1])
            )
            if not tate_degenerate:
                for pate in base.pates:
                    verdicts.append(
                        build_verdict(
                            base.tate, pate, design_threshold=config.design_threshold
                        ).to_dict()
                    )

        t_scenarios = time.perf_counter()
        with _step("sensitivity"):
            specs = [
                ScenarioSpec(
                    label=sc["label"],
                    kind=sc["kind"],
                    params={
                        k: v for k, v in sc.items() if k not in ("label", "kind")
                    },
                )
                for sc in config.sensitivity
            ]

            def run_one(spec: ScenarioSpec | None) -> dict:
                if spec is None:
                    return {"estimates": [e.to_dict() for e in base.pates]}
                if spec.kind == "unmeasured_modifier":
                    adjusted = [
                        adjust_unmeasured_modifier(
                            e,
                            delta_u=float(spec.params["delta_u"]),
                            prevalence_trial=float(spec.params["prevalence_trial"]),
                            prevalence_target=float(
                                spec.params["prevalence_target"]
                            ),
                        )
                        for e in base.pates
                    ]
                    return {"estimates": [e.to_dict() for e in adjusted]}
                out = _analyze(
                    trial_x,
                    target_h,
                    _perturbed_knobs(knobs, spec),
                    config.seed,
                    threads=1,
                )
                return {"estimates": [e.to_dict() for e in out.pates]}

            scenario_rows = run_scenarios(run_one, specs, threads=threads)
        scenario_seconds = time.perf_counter() - t_scenarios

        caveats: list[str] = []
        if not config.appropriateness.get("reviewed", False):
            caveats.append(
                "The appropriateness review is marked as not completed; "
                "settle the checklist in section 1 before relying on the "
                "translated numbers."
            )
        caveats.append(
            "Exchangeability of trial participation, consistency of the "
            "outcome, and no interference are assumed throughout and cannot "
            "be verified from these data."
        )
        if n_ty_excluded:
            caveats.append(
                f"{n_ty_excluded} trial units were dropped for a missing "
                "treatment or outcome value before any other handling."
            )
        dropped_cov = list(trial_h.provenance.get("dropped_covariates", []))
        if dropped_cov:
            caveats.append(
                "Covariates measured on one side only were dropped at "
                f"harmonization: {', '.join(dropped_cov)}."
            )
        n_trial, n_target = trial_x.n, target_h.n
        if n_target > 0 and n_trial / n_target < SMALL_TRIAL_FRACTION:
            caveats.append(
                f"The trial ({n_trial} units) is under 2% of the target "
                f"({n_target} units); in simulation work at this ratio no "
                "estimator achieved satisfactory results, so treat every "
                "interval here with caution."
            )
        if sim.overlap_label == "Low":
            caveats.append(
                f"Score overlap index {sim.overlap_index:.3f} is in the "
                "lowest band: not generalizable. Estimates are reported for "
                "completeness only."
            )
        n_clamped = base.fit.n_clamped_low + base.fit.n_clamped_high
        if n_clamped:
            caveats.append(
                f"{n_clamped} sampling scores were clamped away from 0 or 1; "
                "the heaviest weights are floor or ceiling values."
            )
        if base.fit.model is not None and getattr(
            base.fit.model, "separation_flag", False
        ):
            caveats.append(
                "The sampling model shows signs of separation; scores near 0 "
                "or 1 may be artifacts of the fit rather than the population."
            )
        if audit.any_violation:
            n_out = sum(m["n_violating"] for m in audit.modifiers.values())
            caveats.append(
                f"Positivity concern: {n_out} target values fall outside the "
                "trial's observed support on effect-modifier candidates."
            )
        if any("bootstrap_replicates_dropped" in e.flags for e in base.pates):
            caveats.append(
                "Some bootstrap replicates failed and were dropped; the "
                "affected intervals rest on fewer replicates than requested."
            )
        if tate_degenerate:
            caveats.append(
                "The trial estimate has no usable confidence interval, so no "
                "agreement verdict could be formed."
            )
        caveats.extend(base.caveats)

        missing_block = {
            "strategy": knobs.strategy,
            "n_trial_excluded": n_ty_excluded,
            "dropped_complete_case": base.dropped_complete,
        }
        if base.mi_diag is not None:
            missing_block.update(
                {
                    "m": base.mi_diag["m"],
                    "iterations": base.mi_diag["iterations"],
                    "methods": base.mi_diag["methods"],
                    "imputation_diagnostics": base.mi_diag[
                        "chain_means_first_imputation"
                    ],
                }
            )

        payload = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "config": config.raw,
            "scenario": config.scenario,
            "seed": config.seed,
            "data": {
                "n_trial": n_trial,
                "n_target": n_target,
                "n_trial_excluded": n_ty_excluded,
                "ps_covariates": list(knobs.ps_covariates),
                "outcome_covariates": list(knobs.outcome_covariates),
                "dropped_covariates": dropped_cov,
            },
            "missingness": profile.to_dict(),
            "missing_data": missing_block,
            "sampling_model": base.fit.to_dict(),
            "weights": base.weightset.to_dict(),
            "positivity_audit": audit.to_dict(),
            "similarity": sim.to_dict(),
            "estimates": [base.tate.to_dict()]
            + [e.to_dict() for e in base.pates],
            "pooled": [p.to_dict() for p in base.pooled],
            "subgroups": subgroup_payload,
            "verdict": verdicts,
            "sensitivity": scenario_rows,
            "caveats": caveats,
            "appropriateness": {
                "reviewed": bool(config.appropriateness.get("reviewed", False)),
                "notes": str(config.appropriateness.get("notes", "")),
            },
        }
        seen = set()
        messages = []
        for w in caught:
            text = str(w.message)
            if text not in seen:
                seen.add(text)
                messages.append(text)
        payload["warnings"] = messages

    return RunReport(
        payload=payload,
        timing={
            "total": time.perf_counter() - t_start,
            "analysis": analysis_seconds,
            "sensitivity": scenario_seconds,
        },
        artifacts={
            "figure_data": FigureData(
                trial_ps=base.fit.trial_ps(),
                target_ps=base.fit.target_ps(),
                smd_before=dict(sim.smd_unweighted),
                smd_after=dict(sim.smd_weighted) if sim.smd_weighted else None,
                threshold=config.smd_threshold,
                scheme=config.scenario,
            ),
            "weight_rows": [
                (str(u), float(v))
                for u, v in zip(base.weightset.unit_ids, base.weightset.w)
            ],
        },
    )


def write_outputs(
    report: RunReport, out_dir: str, formats: list[str] | None = None
) -> list[str]:
    """Write report renderings plus the weight export; returns file paths."""
    formats = list(formats or ("json", "markdown", "figures", "weights"))
    artifacts = getattr(report, "artifacts", {})
    emit_formats = [f for f in formats if f in ("json", "markdown")]
    if "figures" in formats or "svg" in formats:
        emit_formats.append("svg")
    written = emit_report(
        report,
        out_dir,
        emit_formats,
        figure_data=artifacts.get("figure_data"),
    )
    if "weights" in formats and "weight_rows" in artifacts:
        path = os.path.join(out_dir, "weights.csv")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("unit_id,weight\n")
            for uid, wv in artifacts["weight_rows"]:
                fh.write(f"{uid},{wv!r}\n")
        written.append(path)
    return written
