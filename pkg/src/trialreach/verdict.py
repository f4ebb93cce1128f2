"""Agreement classification between trial and target effect estimates.

Three binary agreement notions compare the trial effect with its
translation to the target population: a regulatory reading (do the two
reach the same significance conclusion, with matching direction when
both are significant), an estimate reading (does the translated point
fall inside the trial CI), and an optional design reading (does the
translated point meet a direction-and-magnitude threshold supplied by
the analyst). A standardized difference puts the two points on a
common scale. Sensitivity scenarios rerun the analysis under single
named perturbations.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.stats import norm

from .errors import DataError, EstimationError, TrialReachError
from .estimators import EffectEstimate

SCENARIO_KINDS = (
    "identity",
    "unmeasured_modifier",
    "drop_covariates",
    "trimming_policy",
    "alternate_estimator",
    "outcome_cutoff",
    "complete_case_toggle",
)


def _check_pair(tate_est, pate_est) -> None:
    if abs(tate_est.alpha - pate_est.alpha) > 1e-12:
        raise EstimationError(
            f"estimates use different confidence levels "
            f"({tate_est.alpha} vs {pate_est.alpha}); agreement is undefined"
        )


def _finite_ci(est) -> tuple[float, float]:
    lo, hi = est.ci
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise DataError(
            f"{est.method or est.estimand} estimate carries no confidence "
            "interval; attach a variance first"
        )
    return float(lo), float(hi)


def _significant(est) -> bool:
    lo, hi = _finite_ci(est)
    return lo > 0.0 or hi < 0.0


def regulatory_agreement(tate_est, pate_est) -> bool:
    """Same significance conclusion; same sign when both significant."""
    _check_pair(tate_est, pate_est)
    sig_t = _significant(tate_est)
    sig_p = _significant(pate_est)
    if sig_t and sig_p:
        return bool(np.sign(tate_est.point) == np.sign(pate_est.point))
    return sig_t == sig_p


def estimate_agreement(tate_est, pate_est) -> bool:
    """Translated point inside the closed trial CI."""
    _check_pair(tate_est, pate_est)
    lo, hi = _finite_ci(tate_est)
    return bool(lo <= pate_est.point <= hi)


def design_agreement(pate_est, direction: str, magnitude: float) -> bool:
    """Translated point meets the analyst's direction and magnitude bar."""
    if direction not in ("positive", "negative"):
        raise EstimationError(
            f"direction must be 'positive' or 'negative', got {direction!r}"
        )
    if not np.isfinite(magnitude) or magnitude < 0.0:
        raise EstimationError(f"magnitude must be non-negative, got {magnitude}")
    if direction == "positive":
        return bool(pate_est.point >= magnitude)
    return bool(pate_est.point <= -magnitude)


def _sd_of(est) -> float:
    se = getattr(est, "se", float("nan"))
    if np.isfinite(se) and se > 0.0:
        return float(se)
    lo, hi = _finite_ci(est)
    z = float(norm.ppf(1.0 - est.alpha / 2.0))
    return (hi - lo) / (2.0 * z)


def standardized_difference(tate_est, pate_est) -> float:
    """(PATE - TATE) / sqrt(sd_TATE^2 + sd_PATE^2).

    Estimate SDs come from the reported SEs, or are recovered from the
    CI half-width when an SE is unavailable. A zero denominator yields
    NaN.
    """
    _check_pair(tate_est, pate_est)
    sd_t = _sd_of(tate_est)
    sd_p = _sd_of(pate_est)
    denom = float(np.sqrt(sd_t**2 + sd_p**2))
    if denom == 0.0:
        return float("nan")
    return float((pate_est.point - tate_est.point) / denom)


@dataclass
class AgreementVerdict:
    """All agreement readings for one TATE/PATE pair."""

    method: str
    regulatory: bool
    estimate: bool
    design: bool | None
    standardized_difference: float
    tate_point: float
    tate_ci: tuple[float, float]
    pate_point: float
    pate_ci: tuple[float, float]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "regulatory_agreement": self.regulatory,
            "estimate_agreement": self.estimate,
            "design_agreement": self.design,
            "standardized_difference": self.standardized_difference,
            "tate_point": self.tate_point,
            "tate_ci": [self.tate_ci[0], self.tate_ci[1]],
            "pate_point": self.pate_point,
            "pate_ci": [self.pate_ci[0], self.pate_ci[1]],
        }


def build_verdict(
    tate_est,
    pate_est,
    design_threshold: dict | None = None,
) -> AgreementVerdict:
    """Assemble the full verdict; the design reading only when configured."""
    design = None
    if design_threshold is not None:
        design = design_agreement(
            pate_est,
            design_threshold["direction"],
            float(design_threshold["magnitude"]),
        )
    return AgreementVerdict(
        method=pate_est.method,
        regulatory=regulatory_agreement(tate_est, pate_est),
        estimate=estimate_agreement(tate_est, pate_est),
        design=design,
        standardized_difference=standardized_difference(tate_est, pate_est),
        tate_point=tate_est.point,
        tate_ci=(float(tate_est.ci[0]), float(tate_est.ci[1])),
        pate_point=pate_est.point,
        pate_ci=(float(pate_est.ci[0]), float(pate_est.ci[1])),
    )


def adjust_unmeasured_modifier(
    est: EffectEstimate,
    delta_u: float,
    prevalence_trial: float,
    prevalence_target: float,
) -> EffectEstimate:
    """Shift an estimate for a binary modifier the data never measured.

    The point (and CI) move by delta_u times the prevalence difference;
    the SE is carried over unchanged and the estimate is flagged, since
    the adjustment's own uncertainty is not quantified.
    """
    for name, p in (
        ("prevalence_trial", prevalence_trial),
        ("prevalence_target", prevalence_target),
    ):
        if not 0.0 <= p <= 1.0:
            raise EstimationError(f"{name} must be in [0, 1], got {p}")
    if not np.isfinite(delta_u):
        raise EstimationError("delta_u must be finite")
    shift = float(delta_u * (prevalence_target - prevalence_trial))
    flags = list(est.flags)
    if "unmeasured_modifier_adjustment_unquantified" not in flags:
        flags.append("unmeasured_modifier_adjustment_unquantified")
    return replace(
        est,
        point=est.point + shift,
        ci=(est.ci[0] + shift, est.ci[1] + shift),
        flags=flags,
    )


@dataclass(frozen=True)
class ScenarioSpec:
    """One named perturbation of the base analysis."""

    label: str
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise DataError(
                f"unknown scenario kind {self.kind!r}; expected one of "
                f"{SCENARIO_KINDS}"
            )
        if not self.label:
            raise DataError("scenario label must be non-empty")

    def to_dict(self) -> dict:
        return {"label": self.label, "kind": self.kind, "params": dict(self.params)}


def run_scenarios(
    run_one: Callable[[ScenarioSpec | None], dict],
    specs: list[ScenarioSpec],
    threads: int = 1,
) -> list[dict]:
    """Execute the base analysis and each perturbation, failure-tolerant.

    Row 0 is always the unperturbed base. Scenario rows keep their spec
    order regardless of scheduling; a scenario that raises becomes a
    failed row with the error message rather than aborting the table.
    """
    from .rng import parallel_map

    jobs: list[ScenarioSpec | None] = [None] + list(specs)

    def job(i: int) -> dict:
        spec = jobs[i]
        row = {
            "index": i,
            "label": "base" if spec is None else spec.label,
            "kind": "base" if spec is None else spec.kind,
        }
        try:
            row.update(run_one(spec))
            row["status"] = "ok"
        except (TrialReachError, np.linalg.LinAlgError) as exc:
            if spec is None:
                raise
            row["status"] = "failed"
            row["error"] = f"{type(exc).__name__}: {exc}"
        return row

    return parallel_map(job, range(len(jobs)), threads=threads)
