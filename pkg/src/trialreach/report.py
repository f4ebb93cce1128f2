"""Run report assembly and rendering.

The JSON rendering is canonical: keys sorted, floats at six significant
digits, non-finite values mapped to null. Identical analyses therefore
produce byte-identical files. The Markdown rendering works from the same
payload dict, so a report re-rendered from its JSON needs no other inputs.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

REPORT_SCHEMA_VERSION = 1

# Observed range of the standardized score difference in a published
# ten-trial comparison, offered as context because no consensus threshold
# exists for this metric.
DELTA_P_CONTEXT = (
    "Values between 1.06 and 2.08 have been reported across ten real "
    "trial-to-population comparisons and read as a large difference."
)

APPROPRIATENESS_CHECKLIST = (
    "Is there a concrete reason to doubt that the trial effect applies to "
    "the target population?",
    "Is the target population explicitly defined, and does the trial draw "
    "from it (generalizability) or from a separate population "
    "(transportability)?",
    "Is the trial endpoint meaningful and measured comparably in the "
    "target population?",
    "Were candidate effect modifiers chosen on subject-matter grounds "
    "before modeling?",
    "Are those modifiers measured and harmonizable in both data sources?",
    "Do setting, treatment delivery, and outcome definitions carry over, "
    "so that distribution shift in modifiers is the main threat?",
)


def canonical(value):
    """Map a report value to plain JSON types with 6-significant-digit floats."""
    if isinstance(value, dict):
        return {str(k): canonical(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [canonical(v) for v in value]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if not math.isfinite(v):
            return None
        return float(f"{v:.6g}")
    if value is None or isinstance(value, str):
        return value
    raise DataError(f"value of type {type(value).__name__} cannot go in a report")


@dataclass
class RunReport:
    """Complete result of one pipeline run.

    ``payload`` holds everything that renders; ``timing`` stays outside the
    canonical payload so repeated runs of one configuration stay
    byte-identical, and is shown only in the Markdown footer.
    """

    payload: dict
    timing: dict = field(default_factory=dict)
    # Render-time inputs that are not part of the payload (figure arrays,
    # per-unit weights); never serialized into report.json.
    artifacts: dict = field(default_factory=dict, repr=False)

    @property
    def caveats(self) -> list[str]:
        return list(self.payload.get("caveats", []))


def render_json(report: RunReport) -> str:
    body = canonical(report.payload)
    return json.dumps(body, sort_keys=True, indent=2, allow_nan=False) + "\n"


def _fmt(x, digits: int = 4) -> str:
    if x is None:
        return "n/a"
    if isinstance(x, bool):
        return "yes" if x else "no"
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    v = float(x)
    if not math.isfinite(v):
        return "n/a"
    return f"{v:.{digits}g}"


def _ci_cell(point, ci, digits: int = 4) -> str:
    lo = ci[0] if ci else None
    hi = ci[1] if ci else None
    return f"{_fmt(point, digits)} ({_fmt(lo, digits)}, {_fmt(hi, digits)})"


def _table(headers: list[str], rows: list[list[str]]) -> list[str]:
    lines = ["| " + " | ".join(headers) + " |"]
    lines.append("|" + "|".join(" --- " for _ in headers) + "|")
    for row in rows:
        lines.append("| " + " | ".join(row) + " |")
    return lines


def _estimate_row(est: dict) -> list[str]:
    ci = est.get("ci") or (None, None)
    flags = ", ".join(est.get("flags", [])) or "none"
    return [
        est.get("estimand", ""),
        est.get("method", ""),
        _fmt(est.get("point")),
        _fmt(est.get("se")),
        f"({_fmt(ci[0])}, {_fmt(ci[1])})",
        est.get("variance_method", ""),
        flags,
    ]


def render_markdown(report: RunReport) -> str:
    p = report.payload
    lines: list[str] = ["# Treatment effect translation report", ""]

    caveats = p.get("caveats", [])
    if caveats:
        lines.append("> **Caveats**")
        for c in caveats:
            lines.append(f"> - {c}")
        lines.append("")

    data = p.get("data", {})
    lines += [
        "## 1. Appropriateness of the study question",
        "",
    ]
    appro = p.get("appropriateness", {})
    reviewed = appro.get("reviewed", False)
    lines.append(
        "Reviewed by the investigators: " + ("yes" if reviewed else "**no**")
    )
    notes = appro.get("notes") or ""
    if notes:
        lines += ["", f"Notes: {notes}"]
    lines += ["", "Checklist to confirm before trusting the numbers below:", ""]
    for item in APPROPRIATENESS_CHECKLIST:
        lines.append(f"- {item}")
    lines.append("")

    lines += ["## 2. Data", ""]
    lines += _table(
        ["Quantity", "Value"],
        [
            ["Scenario", str(p.get("scenario", ""))],
            ["Trial units", _fmt(data.get("n_trial"))],
            ["Target units", _fmt(data.get("n_target"))],
            ["Trial units dropped (missing treatment or outcome)",
             _fmt(data.get("n_trial_excluded", 0))],
            ["Covariates in sampling model",
             ", ".join(data.get("ps_covariates", [])) or "none"],
            ["Covariates dropped at harmonization",
             ", ".join(data.get("dropped_covariates", [])) or "none"],
        ],
    )
    lines.append("")
    miss = p.get("missingness", {})
    per_side = miss.get("per_side", {})
    if per_side:
        lines += ["Missing data before handling (fraction of units):", ""]
        names = sorted(
            set(per_side.get("trial", {}).get("per_variable", {}))
            | set(per_side.get("target", {}).get("per_variable", {}))
        )
        rows = []
        for name in names:
            rows.append(
                [
                    name,
                    _fmt(per_side.get("trial", {}).get("per_variable", {}).get(name)),
                    _fmt(per_side.get("target", {}).get("per_variable", {}).get(name)),
                ]
            )
        lines += _table(["Variable", "Trial", "Target"], rows)
        lines.append("")

    lines += ["## 3. Identifiability and positivity", ""]
    lines.append(
        "Exchangeability of trial participation and treatment, consistency "
        "of the outcome, and no interference are assumed; none of them is "
        "testable from these data."
    )
    lines.append("")
    audit = p.get("positivity_audit", {})
    if audit:
        rows = [
            ["Sampling score range, trial",
             f"[{_fmt(audit.get('ps_range_trial', (None, None))[0])}, "
             f"{_fmt(audit.get('ps_range_trial', (None, None))[1])}]"],
            ["Sampling score range, target",
             f"[{_fmt(audit.get('ps_range_target', (None, None))[0])}, "
             f"{_fmt(audit.get('ps_range_target', (None, None))[1])}]"],
            ["Scores clamped at lower bound", _fmt(audit.get("n_clamped_low"))],
            ["Scores clamped at upper bound", _fmt(audit.get("n_clamped_high"))],
        ]
        for name, detail in sorted(audit.get("modifiers", {}).items()):
            rows.append(
                [
                    f"Target values outside trial support on {name}",
                    _fmt(detail.get("n_violating")),
                ]
            )
        lines += _table(["Check", "Value"], rows)
        lines.append("")
    wt = p.get("weights", {})
    if wt:
        rows = [
            ["Scheme", str(wt.get("scheme", ""))],
            ["Effective sample size (trial, weighted)",
             _fmt(wt.get("effective_sample_size"))],
        ]
        for step in wt.get("trimming", []):
            rows.append([f"Policy step: {step.get('kind')}", json.dumps(step, sort_keys=True)])
        lines += _table(["Weighting", "Value"], rows)
        lines.append("")

    lines += ["## 4. Effect estimation", ""]
    est_rows = [_estimate_row(e) for e in p.get("estimates", [])]
    lines += _table(
        ["Estimand", "Method", "Point", "SE", "CI", "Variance", "Flags"],
        est_rows,
    )
    lines.append("")
    pooled = p.get("pooled", [])
    if pooled:
        rows = []
        for e in pooled:
            ci = e.get("ci") or (None, None)
            rows.append(
                [
                    e.get("method", ""),
                    _fmt(e.get("point")),
                    _fmt(e.get("within_variance")),
                    _fmt(e.get("between_variance")),
                    _fmt(e.get("total_variance")),
                    _fmt(e.get("df")),
                    f"({_fmt(ci[0])}, {_fmt(ci[1])})",
                ]
            )
        lines += ["Pooled across imputations:", ""]
        lines += _table(
            ["Method", "Point", "Within", "Between", "Total", "df", "CI"],
            rows,
        )
        lines.append("")
    subgroups = p.get("subgroups", [])
    for sg in subgroups:
        lines += [
            f"Exploratory subgroup effects by {sg.get('covariate')} "
            "(no multiplicity adjustment):",
            "",
        ]
        rows = []
        for r in sg.get("rows", []):
            ci = r.get("ci") or (None, None)
            rows.append(
                [
                    str(r.get("stratum", "")),
                    f"{_fmt(r.get('n_treated'))}/{_fmt(r.get('n_control'))}",
                    _fmt(r.get("point")),
                    f"({_fmt(ci[0])}, {_fmt(ci[1])})",
                    ", ".join(r.get("flags", [])) or "none",
                ]
            )
        lines += _table(
            ["Stratum", "n treated/control", "Point", "CI", "Flags"], rows
        )
        if sg.get("heterogeneity_note"):
            lines += ["", sg["heterogeneity_note"]]
        lines.append("")

    lines += ["## 5. Population similarity", ""]
    sim = p.get("similarity", {})
    if sim:
        lines.append(
            f"Standardized difference in mean sampling score: "
            f"{_fmt(sim.get('standardized_delta_p'))}. {DELTA_P_CONTEXT}"
        )
        lines.append("")
        label = sim.get("overlap_label")
        lines.append(
            f"Score distribution overlap index: {_fmt(sim.get('overlap_index'))}"
            + (f" ({label})" if label else "")
        )
        lines.append("")
        before = sim.get("smd_unweighted", {})
        after = sim.get("smd_weighted") or {}
        rows = []
        for name in sorted(before):
            flagged = name in sim.get("flagged_covariates", [])
            rows.append(
                [
                    name,
                    _fmt(before.get(name)),
                    _fmt(after.get(name)) if after else "n/a",
                    "yes" if flagged else "",
                ]
            )
        lines += _table(
            ["Covariate", "SMD before", "SMD after", "Flagged"], rows
        )
        lines.append("")
        lines.append(
            f"Flag threshold: absolute SMD above "
            f"{_fmt(sim.get('smd_threshold'))} on the weighted side when "
            "weights are available."
        )
        lines.append("")

    lines += ["## 6. Missing data", ""]
    handling = p.get("missing_data", {})
    lines.append(f"Strategy: {handling.get('strategy', 'none')}")
    if handling.get("n_trial_excluded"):
        lines.append(
            f"Trial units dropped for missing treatment or outcome: "
            f"{handling['n_trial_excluded']}"
        )
    diag = handling.get("imputation_diagnostics")
    if diag:
        lines += [
            "",
            f"Imputations: {handling.get('m')}, chained iterations per "
            f"imputation: {handling.get('iterations')}.",
            "",
            "Chain means from the first imputation (for convergence "
            "eyeballing):",
            "",
        ]
        rows = []
        for name in sorted(diag):
            trace = diag[name]
            rows.append(
                [name, ", ".join(_fmt(v) for v in trace)]
            )
        lines += _table(["Variable", "Imputed-cell mean by iteration"], rows)
    lines.append("")

    lines += ["## 7. Sensitivity analysis", ""]
    scen = p.get("sensitivity", [])
    if scen:
        rows = []
        for row in scen:
            if row.get("status") == "failed":
                rows.append(
                    [
                        str(row.get("label", "")),
                        str(row.get("kind", "")),
                        "failed",
                        "",
                        "",
                        str(row.get("error", "")),
                    ]
                )
                continue
            for e in row.get("estimates", []):
                ci = e.get("ci") or (None, None)
                rows.append(
                    [
                        str(row.get("label", "")),
                        str(row.get("kind", "")),
                        "ok",
                        e.get("method", ""),
                        _ci_cell(e.get("point"), ci),
                        ", ".join(e.get("flags", [])) or "",
                    ]
                )
        lines += _table(
            ["Scenario", "Kind", "Status", "Method", "Point (CI)", "Notes"],
            rows,
        )
    else:
        lines.append("No sensitivity scenarios were configured.")
    lines.append("")

    lines += ["## 8. Interpretation", ""]
    verdicts = p.get("verdict", [])
    if verdicts:
        has_design = any(v.get("design_agreement") is not None for v in verdicts)
        headers = [
            "Method",
            "TATE",
            "PATE",
            "Regulatory",
            "Estimate",
            "Standardized Difference",
        ]
        if has_design:
            headers.append("Design")
        rows = []
        for v in verdicts:
            row = [
                v.get("method", ""),
                _ci_cell(v.get("tate_point"), v.get("tate_ci")),
                _ci_cell(v.get("pate_point"), v.get("pate_ci")),
                "agree" if v.get("regulatory_agreement") else "disagree",
                "agree" if v.get("estimate_agreement") else "disagree",
                _fmt(v.get("standardized_difference"), 3),
            ]
            if has_design:
                d = v.get("design_agreement")
                row.append("n/a" if d is None else ("met" if d else "not met"))
            rows.append(row)
        lines += _table(headers, rows)
        lines += [
            "",
            "Regulatory: the trial and translated intervals lead to the same "
            "accept/reject reading. Estimate: the translated point falls "
            "inside the trial interval. The standardized difference scales "
            "the point change by the combined uncertainty.",
        ]
    else:
        lines.append("No translated estimate was produced.")
    lines.append("")

    if report.timing:
        parts = ", ".join(
            f"{k}: {report.timing[k]:.2f}s" for k in sorted(report.timing)
        )
        lines += ["---", "", f"Timing ({parts}); excluded from report.json.", ""]

    return "\n".join(lines)


def emit_report(
    report: RunReport,
    out_dir: str,
    formats: list[str] | tuple[str, ...] = ("json", "markdown"),
    figure_data=None,
) -> list[str]:
    """Write the requested renderings under out_dir; returns file paths."""
    known = {"json", "markdown", "svg", "figures"}
    unknown = set(formats) - known
    if unknown:
        raise DataError(f"unknown report formats: {sorted(unknown)}")
    os.makedirs(out_dir, exist_ok=True)
    written: list[str] = []
    if "json" in formats:
        path = os.path.join(out_dir, "report.json")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(render_json(report))
        written.append(path)
    if "markdown" in formats:
        path = os.path.join(out_dir, "report.md")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(render_markdown(report))
        written.append(path)
    if "svg" in formats or "figures" in formats:
        if figure_data is None:
            raise DataError(
                "figure rendering needs the score and balance data from the "
                "run; pass figure_data"
            )
        from .figures import render_figures

        written.extend(render_figures(figure_data, out_dir))
    return written
