"""Sampling scores, translation weights, and positivity diagnostics.

The sampling score is the probability a unit belongs to the trial given
covariates, fit on the stacked table. Under the generalizability scheme
(trial drawn from within the target population) trial units are weighted
by the inverse score; under transportability (disjoint populations) by
the inverse odds. Target units always carry weight zero: they define
the reference population rather than contribute outcomes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import StudyTable
from .engines import (
    DesignMatrix,
    FittedModel,
    ForestParams,
    build_design,
    fit_forest,
    fit_logistic,
    predict,
)
from .errors import DataError, MissingDataError, PolicyError, SchemaError

SCHEMES = ("generalizability", "transportability")
PS_CLAMP = 1e-6


@dataclass
class PropensityFit:
    """Fitted sampling scores aligned to a stacked table's rows."""

    scenario: str
    unit_ids: np.ndarray
    s: np.ndarray
    ps: np.ndarray
    model: FittedModel | None
    covariates: tuple[str, ...]
    n_clamped_low: int = 0
    n_clamped_high: int = 0
    estimation_population: str = ""

    @property
    def n(self) -> int:
        return self.ps.shape[0]

    def trial_ps(self) -> np.ndarray:
        return self.ps[self.s == 1]

    def target_ps(self) -> np.ndarray:
        return self.ps[self.s == 0]

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "family": self.model.family if self.model else "averaged",
            "covariates": list(self.covariates),
            "n_clamped_low": self.n_clamped_low,
            "n_clamped_high": self.n_clamped_high,
            "estimation_population": self.estimation_population,
        }


@dataclass
class WeightSet:
    """Per-unit translation weights aligned to a stacked table's rows."""

    scheme: str
    unit_ids: np.ndarray
    s: np.ndarray
    w: np.ndarray
    trimming: list[dict] = field(default_factory=list)
    normalized: bool = False

    @property
    def effective_sample_size(self) -> float:
        pos = self.w[self.s == 1]
        denom = float(np.sum(pos**2))
        if denom == 0.0:
            return 0.0
        return float(np.sum(pos) ** 2 / denom)

    def trial_weights(self) -> np.ndarray:
        return self.w[self.s == 1]

    def to_dict(self) -> dict:
        pos = self.trial_weights()
        return {
            "scheme": self.scheme,
            "effective_sample_size": self.effective_sample_size,
            "normalized": self.normalized,
            "trimming": list(self.trimming),
            "weight_range": [float(pos.min()), float(pos.max())] if pos.size else [],
        }


def clamp_scores(ps: np.ndarray) -> tuple[np.ndarray, int, int]:
    """Clamp scores into [1e-6, 1 - 1e-6], counting affected units."""
    lo = int((ps < PS_CLAMP).sum())
    hi = int((ps > 1.0 - PS_CLAMP).sum())
    return np.clip(ps, PS_CLAMP, 1.0 - PS_CLAMP), lo, hi


def estimate_sampling_score(
    data: StudyTable,
    scenario: str,
    family: str = "logistic",
    covariates: list[str] | None = None,
    forest_params: ForestParams | None = None,
) -> PropensityFit:
    """Fit the trial-membership score on a stacked table.

    The same stacked fit serves both scenarios; what changes downstream
    is the weight map. For generalizability the target table must be
    the full target population (containing the trial members); for
    transportability the two sides are disjoint populations whose stack
    forms the estimation super-population.
    """
    if scenario not in SCHEMES:
        raise DataError(f"scenario must be one of {SCHEMES}, got {scenario!r}")
    if data.side != "stacked":
        raise DataError("sampling scores are fit on a stacked table")
    if data.n_trial == 0 or data.n_target == 0:
        raise DataError("both sides must be present to fit a sampling score")
    if covariates is None:
        covariates = [c.name for c in data.schema if c.in_ps_model]
    else:
        for name in covariates:
            data.schema_for(name)
    for name in covariates:
        if data.data[name].isna().any():
            raise MissingDataError(
                f"covariate {name!r} has missing values in the estimation "
                "population; run imputation (or complete-case selection) first"
            )
    X = build_design(data, covariates=covariates)
    s = data.s.astype(float)
    if family == "logistic":
        model = fit_logistic(X, s)
    elif family == "forest":
        model = fit_forest(X, s, forest_params or ForestParams())
    else:
        raise DataError(f"unknown sampling-model family {family!r}")
    ps_raw = predict(model, X)
    ps, n_lo, n_hi = clamp_scores(np.asarray(ps_raw, dtype=float))
    population = (
        "full target population containing the trial"
        if scenario == "generalizability"
        else "stacked trial and target populations"
    )
    return PropensityFit(
        scenario=scenario,
        unit_ids=data.unit_ids.copy(),
        s=data.s.copy(),
        ps=ps,
        model=model,
        covariates=tuple(covariates),
        n_clamped_low=n_lo,
        n_clamped_high=n_hi,
        estimation_population=population,
    )


def make_weights(fit: PropensityFit, scheme: str | None = None) -> WeightSet:
    """Map sampling scores to translation weights.

    Generalizability: w = 1/ps for trial units (every weight is at
    least 1). Transportability: w = (1-ps)/ps. Target units get 0.
    """
    scheme = scheme or fit.scenario
    if scheme not in SCHEMES:
        raise PolicyError(f"scheme must be one of {SCHEMES}, got {scheme!r}")
    w = np.zeros(fit.n)
    trial = fit.s == 1
    ps = fit.ps[trial]
    if scheme == "generalizability":
        w[trial] = 1.0 / ps
    else:
        w[trial] = (1.0 - ps) / ps
    return WeightSet(
        scheme=scheme,
        unit_ids=fit.unit_ids.copy(),
        s=fit.s.copy(),
        w=w,
    )


def nearest_rank(sorted_values: np.ndarray, percentile: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th order statistic."""
    n = sorted_values.shape[0]
    if n == 0:
        raise PolicyError("cannot take a percentile of an empty set")
    if not 0.0 <= percentile <= 100.0:
        raise PolicyError(f"percentile must be in [0, 100], got {percentile}")
    rank = max(1, math.ceil(percentile / 100.0 * n))
    return float(sorted_values[min(rank, n) - 1])


def trim_stabilize(weights: WeightSet, policy: list[dict] | None) -> WeightSet:
    """Apply weight-handling steps in the order given.

    Each step is one of ``{"kind": "none"}``, ``{"kind": "cap", "lo": p,
    "hi": q}`` (percentile capping with nearest-rank bounds computed on
    the positive weights), or ``{"kind": "normalize"}`` (rescale the
    positive weights to mean one). The default policy is a single
    normalize step.
    """
    if policy is None:
        policy = [{"kind": "normalize"}]
    w = weights.w.copy()
    trial = weights.s == 1
    records = list(weights.trimming)
    normalized = weights.normalized
    for step in policy:
        kind = step.get("kind")
        if kind == "none":
            records.append({"kind": "none", "n_affected": 0})
        elif kind == "cap":
            lo_p = float(step.get("lo", 0.0))
            hi_p = float(step.get("hi", 100.0))
            if lo_p >= hi_p:
                raise PolicyError(
                    f"cap percentiles must satisfy lo < hi, got ({lo_p}, {hi_p})"
                )
            pos = np.sort(w[trial])
            lo_v = nearest_rank(pos, lo_p) if lo_p > 0.0 else float(pos[0])
            hi_v = nearest_rank(pos, hi_p)
            affected = int(((w[trial] < lo_v) | (w[trial] > hi_v)).sum())
            w[trial] = np.clip(w[trial], lo_v, hi_v)
            records.append(
                {
                    "kind": "cap",
                    "lo_percentile": lo_p,
                    "hi_percentile": hi_p,
                    "lo_value": lo_v,
                    "hi_value": hi_v,
                    "n_affected": affected,
                }
            )
        elif kind == "normalize":
            mean = float(w[trial].mean())
            if mean <= 0.0:
                raise PolicyError("cannot normalize weights with zero mean")
            w[trial] = w[trial] / mean
            normalized = True
            records.append(
                {"kind": "normalize", "n_affected": int(trial.sum()), "divisor": mean}
            )
        else:
            raise PolicyError(f"unknown weight-policy step {step!r}")
    return replace(weights, w=w, trimming=records, normalized=normalized)


@dataclass
class PositivityAudit:
    """Score ranges, clamping counts, and effect-modifier coverage."""

    ps_range_trial: tuple[float, float]
    ps_range_target: tuple[float, float]
    n_clamped_low: int
    n_clamped_high: int
    modifiers: dict[str, dict]

    @property
    def any_violation(self) -> bool:
        return any(m["violation"] for m in self.modifiers.values())

    def to_dict(self) -> dict:
        return {
            "ps_range_trial": list(self.ps_range_trial),
            "ps_range_target": list(self.ps_range_target),
            "n_clamped_low": self.n_clamped_low,
            "n_clamped_high": self.n_clamped_high,
            "modifiers": {k: dict(v) for k, v in self.modifiers.items()},
            "any_violation": self.any_violation,
        }


def positivity_audit(
    fit: PropensityFit,
    data: StudyTable,
    modifiers: list[str] | None = None,
) -> PositivityAudit:
    """Check that target units stay inside the trial's covariate support.

    For each audited effect modifier, continuous target values outside
    the trial's observed min/max (or target categorical levels never
    seen in the trial) are counted as positivity violations.
    """
    if data.side != "stacked":
        raise DataError("positivity audit expects the stacked table")
    if not np.array_equal(fit.unit_ids, data.unit_ids):
        raise DataError("sampling fit is not aligned with the table")
    if modifiers is None:
        modifiers = [
            c.name for c in data.schema if c.is_effect_modifier_candidate
        ]
    out: dict[str, dict] = {}
    trial_mask = data.s == 1
    for name in modifiers:
        cov = data.schema_for(name)
        col = data.data[name]
        if cov.kind == "categorical":
            trial_levels = sorted(set(col[trial_mask].dropna()))
            target_vals = col[~trial_mask].dropna()
            extra = sorted(set(target_vals) - set(trial_levels))
            count = int(target_vals.isin(extra).sum())
            out[name] = {
                "kind": cov.kind,
                "trial_levels": trial_levels,
                "target_only_levels": extra,
                "violation": bool(extra),
                "n_violating": count,
            }
        else:
            tv = col[trial_mask].to_numpy(dtype=float)
            gv = col[~trial_mask].to_numpy(dtype=float)
            tv = tv[~np.isnan(tv)]
            gv = gv[~np.isnan(gv)]
            if tv.size == 0:
                raise SchemaError(
                    f"modifier {name!r} has no observed trial values to audit"
                )
            lo, hi = float(tv.min()), float(tv.max())
            viol = (gv < lo) | (gv > hi)
            out[name] = {
                "kind": cov.kind,
                "trial_range": [lo, hi],
                "target_range": [float(gv.min()), float(gv.max())] if gv.size else [],
                "violation": bool(viol.any()),
                "n_violating": int(viol.sum()),
            }
    ps_t = fit.trial_ps()
    ps_g = fit.target_ps()
    return PositivityAudit(
        ps_range_trial=(float(ps_t.min()), float(ps_t.max())),
        ps_range_target=(float(ps_g.min()), float(ps_g.max())),
        n_clamped_low=fit.n_clamped_low,
        n_clamped_high=fit.n_clamped_high,
        modifiers=out,
    )
