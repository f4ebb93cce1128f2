"""Effect estimators: trial-only and target-translated, with bootstrap CIs.

The trial average treatment effect (TATE) is the usual difference in
arm means. Three translations to the target population are provided:
inverse-probability-of-sampling weighting (Hajek form), outcome-model
standardization over the target sample (g-computation), and the doubly
robust combination, which stays consistent when either the sampling
model or the outcome models are wrong, but not both.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import norm

from .dataset import StudyTable
from .engines import build_design, fit_linear, fit_logistic, predict
from .errors import (
    BootstrapError,
    DataError,
    DegenerateDataError,
    EstimationError,
    TrialReachError,
)
from .rng import parallel_map, substream
from .weighting import WeightSet


@dataclass
class EffectEstimate:
    """A point estimate with its uncertainty and provenance flags."""

    estimand: str
    method: str
    point: float
    se: float
    ci: tuple[float, float]
    alpha: float
    variance_method: str
    n_trial: int
    n_target: int = 0
    n_excluded: int = 0
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "estimand": self.estimand,
            "method": self.method,
            "point": self.point,
            "se": self.se,
            "ci": [self.ci[0], self.ci[1]],
            "alpha": self.alpha,
            "variance_method": self.variance_method,
            "n_trial": self.n_trial,
            "n_target": self.n_target,
            "n_excluded": self.n_excluded,
            "flags": list(self.flags),
        }


def _z(alpha: float) -> float:
    if not 0.0 < alpha < 1.0:
        raise EstimationError(f"alpha must be in (0, 1), got {alpha}")
    return float(norm.ppf(1.0 - alpha / 2.0))


def _trial_complete(data: StudyTable):
    """Trial rows with observed treatment and outcome, plus the excluded count."""
    if not data.has_outcomes:
        raise DataError("table has no treatment/outcome columns")
    df = data.data
    trial = df["s"].to_numpy() == 1
    t = df["t"].to_numpy(dtype=float)
    y = df["y"].to_numpy(dtype=float)
    ok = trial & ~np.isnan(t) & ~np.isnan(y)
    n_excluded = int(trial.sum() - ok.sum())
    return ok, t, y, n_excluded


def tate(data: StudyTable, alpha: float = 0.05) -> EffectEstimate:
    """Trial-only difference in arm means with a normal CI.

    Units missing treatment or outcome are excluded and counted. A
    single-arm trial is an error; zero outcome variance in both arms
    yields a zero SE flagged as degenerate.
    """
    ok, t, y, n_excluded = _trial_complete(data)
    if not ok.any():
        raise DegenerateDataError("no trial units with observed treatment and outcome")
    t1 = ok & (t == 1.0)
    t0 = ok & (t == 0.0)
    n1, n0 = int(t1.sum()), int(t0.sum())
    if n1 == 0 or n0 == 0:
        raise DegenerateDataError(
            f"both arms are required (treated={n1}, control={n0})"
        )
    y1, y0 = y[t1], y[t0]
    point = float(y1.mean() - y0.mean())
    flags = []
    if n_excluded:
        flags.append("excluded_units_missing_t_or_y")
    if n1 < 2 or n0 < 2:
        se = float("nan")
        flags.append("degenerate_se")
    else:
        se = float(np.sqrt(np.var(y1, ddof=1) / n1 + np.var(y0, ddof=1) / n0))
        if se == 0.0:
            flags.append("degenerate_se")
    z = _z(alpha)
    ci = (point - z * se, point + z * se)
    return EffectEstimate(
        estimand="TATE",
        method="difference_in_means",
        point=point,
        se=se,
        ci=ci,
        alpha=alpha,
        variance_method="analytic",
        n_trial=n1 + n0,
        n_excluded=n_excluded,
        flags=flags,
    )


def _check_alignment(data: StudyTable, weights: WeightSet) -> None:
    if weights.w.shape[0] != data.n or not np.array_equal(
        weights.unit_ids, data.unit_ids
    ):
        raise DataError("weight set is not aligned with the table rows")


def hajek_arm_means(t, y, w):
    """Weighted arm means; errors if either arm carries no weight."""
    w1 = float(np.sum(w * t))
    w0 = float(np.sum(w * (1.0 - t)))
    if w1 <= 0.0 or w0 <= 0.0:
        raise DegenerateDataError(
            "an arm carries zero total weight; cannot form the weighted contrast"
        )
    m1 = float(np.sum(w * t * y) / w1)
    m0 = float(np.sum(w * (1.0 - t) * y) / w0)
    return m1, m0


def ipsw_pate(
    data: StudyTable,
    weights: WeightSet,
    alpha: float = 0.05,
    variance: str = "sandwich",
) -> EffectEstimate:
    """Weighted (Hajek) contrast of trial arms, translated to the target.

    The SE is the HC0 sandwich from the weighted regression of the
    outcome on an intercept and treatment, which reproduces the
    weighted difference in arm means exactly.
    """
    _check_alignment(data, weights)
    ok, t, y, n_excluded = _trial_complete(data)
    use = ok & (weights.w > 0.0)
    tv, yv, wv = t[use], y[use], weights.w[use]
    if tv.size == 0:
        raise DegenerateDataError("no weighted trial units with observed outcomes")
    m1, m0 = hajek_arm_means(tv, yv, wv)
    point = float(m1 - m0)
    flags = []
    if n_excluded:
        flags.append("excluded_units_missing_t_or_y")
    if variance == "sandwich":
        X = np.column_stack([np.ones_like(tv), tv])
        xtwx = X.T @ (X * wv[:, None])
        bread = np.linalg.inv(xtwx)
        fitted = np.where(tv == 1.0, m1, m0)
        r = yv - fitted
        meat = X.T @ (X * (wv**2 * r**2)[:, None])
        cov = bread @ meat @ bread
        se = float(np.sqrt(cov[1, 1]))
        if se == 0.0:
            flags.append("degenerate_se")
        variance_method = "sandwich"
    elif variance == "none":
        se = float("nan")
        flags.append("variance_not_requested")
        variance_method = "none"
    else:
        raise EstimationError(f"unknown variance method {variance!r} for ipsw")
    z = _z(alpha)
    return EffectEstimate(
        estimand="PATE",
        method="ipsw",
        point=point,
        se=se,
        ci=(point - z * se, point + z * se),
        alpha=alpha,
        variance_method=variance_method,
        n_trial=int(tv.size),
        n_target=data.n_target,
        n_excluded=n_excluded,
        flags=flags,
    )


def _outcome_family(y: np.ndarray, family: str) -> str:
    if family != "auto":
        return family
    vals = np.unique(y)
    return "logistic" if np.isin(vals, (0.0, 1.0)).all() else "linear"


def _fit_arm_models(
    data: StudyTable,
    covariates: list[str],
    family: str = "auto",
):
    """Fit per-arm outcome models on complete trial rows."""
    ok, t, y, n_excluded = _trial_complete(data)
    fam = _outcome_family(y[ok], family)
    fit = fit_logistic if fam == "logistic" else fit_linear
    models = {}
    for arm in (1.0, 0.0):
        rows = ok & (t == arm)
        if not rows.any():
            raise DegenerateDataError(f"no trial units in arm t={int(arm)}")
        X = build_design(data, covariates=covariates, rows=rows)
        models[arm] = fit(X, y[rows])
    return models, fam, n_excluded


def _default_outcome_covariates(data: StudyTable) -> list[str]:
    return [c.name for c in data.schema if c.in_outcome_model]


def gcomp_pate(
    data: StudyTable,
    covariates: list[str] | None = None,
    family: str = "auto",
    alpha: float = 0.05,
) -> EffectEstimate:
    """Outcome-model standardization over the target sample.

    Fits one outcome model per trial arm and averages the predicted
    arm contrast over target units. Its variance comes from the
    bootstrap only; the returned SE is NaN until a bootstrap wraps it.
    """
    if data.side != "stacked":
        raise DataError("g-computation expects the stacked table")
    # [] is a deliberate intercept-only request, distinct from the default
    if covariates is None:
        covariates = _default_outcome_covariates(data)
    models, fam, n_excluded = _fit_arm_models(data, covariates, family)
    target_rows = data.s == 0
    if not target_rows.any():
        raise DataError("no target units to standardize over")
    Xg = build_design(data, covariates=covariates, rows=target_rows)
    m1 = predict(models[1.0], Xg)
    m0 = predict(models[0.0], Xg)
    point = float(np.mean(m1 - m0))
    flags = ["variance_by_bootstrap_only"]
    if n_excluded:
        flags.append("excluded_units_missing_t_or_y")
    return EffectEstimate(
        estimand="PATE",
        method="gcomp",
        point=point,
        se=float("nan"),
        ci=(float("nan"), float("nan")),
        alpha=alpha,
        variance_method="none",
        n_trial=data.n_trial - n_excluded,
        n_target=int(target_rows.sum()),
        n_excluded=n_excluded,
        flags=flags,
    )


def dr_pate(
    data: StudyTable,
    weights: WeightSet,
    covariates: list[str] | None = None,
    family: str = "auto",
    e_trial: float | None = None,
    alpha: float = 0.05,
) -> EffectEstimate:
    """Doubly robust translation: standardization plus weighted residual correction.

    The augmentation reweights the inverse-probability-of-treatment
    residual contrast of the trial units by the sampling weights (Hajek
    normalized), so the estimate stays consistent if either the
    sampling model or the outcome models are correct. The treatment
    probability defaults to the trial's empirical treated fraction.
    Variance comes from the bootstrap only.
    """
    if data.side != "stacked":
        raise DataError("doubly robust estimation expects the stacked table")
    _check_alignment(data, weights)
    if covariates is None:
        covariates = _default_outcome_covariates(data)
    models, fam, n_excluded = _fit_arm_models(data, covariates, family)
    target_rows = data.s == 0
    if not target_rows.any():
        raise DataError("no target units to standardize over")
    Xg = build_design(data, covariates=covariates, rows=target_rows)
    standardized = float(np.mean(predict(models[1.0], Xg) - predict(models[0.0], Xg)))

    ok, t, y, _ = _trial_complete(data)
    use = ok & (weights.w > 0.0)
    if not use.any():
        raise DegenerateDataError("no weighted trial units with observed outcomes")
    tv, yv, wv = t[use], y[use], weights.w[use]
    if e_trial is None:
        e_trial = float(tv.mean())
    if not 0.0 < e_trial < 1.0:
        raise DegenerateDataError(
            f"treatment probability must be inside (0, 1), got {e_trial}"
        )
    Xt = build_design(data, covariates=covariates, rows=use)
    mhat = np.where(tv == 1.0, predict(models[1.0], Xt), predict(models[0.0], Xt))
    psi = (tv / e_trial - (1.0 - tv) / (1.0 - e_trial)) * (yv - mhat)
    wsum = float(wv.sum())
    if wsum <= 0.0:
        raise DegenerateDataError("sampling weights sum to zero on the trial side")
    augmentation = float(np.sum(wv * psi) / wsum)
    point = standardized + augmentation
    flags = ["variance_by_bootstrap_only"]
    if n_excluded:
        flags.append("excluded_units_missing_t_or_y")
    return EffectEstimate(
        estimand="PATE",
        method="dr",
        point=point,
        se=float("nan"),
        ci=(float("nan"), float("nan")),
        alpha=alpha,
        variance_method="none",
        n_trial=int(tv.size),
        n_target=int(target_rows.sum()),
        n_excluded=n_excluded,
        flags=flags,
    )


@dataclass
class BootstrapResult:
    """Replicate summary a bootstrap attaches to an estimate."""

    se: float
    ci: tuple[float, float]
    flavor: str
    n_requested: int
    n_success: int
    n_failed: int
    failure_messages: dict[str, int]

    def to_dict(self) -> dict:
        return {
            "se": self.se,
            "ci": [self.ci[0], self.ci[1]],
            "flavor": self.flavor,
            "n_requested": self.n_requested,
            "n_success": self.n_success,
            "n_failed": self.n_failed,
            "failure_messages": dict(self.failure_messages),
        }


def bootstrap_ci(
    procedure: Callable[[StudyTable, StudyTable], float],
    trial: StudyTable,
    target: StudyTable,
    n_replicates: int,
    seed: int,
    flavor: str = "percentile",
    alpha: float = 0.05,
    threads: int = 1,
    point: float | None = None,
) -> BootstrapResult:
    """Stratified nonparametric bootstrap of an analysis procedure.

    Trial and target units are resampled independently with
    replacement; the procedure (including any model refits) runs on
    each replicate pair. Each replicate draws from a substream keyed by
    the seed and replicate index, so results are identical under any
    thread count. Replicates that raise are dropped and counted; more
    than 10% failures is an error listing the causes. The percentile
    flavor returns nearest-rank order statistics of the replicate
    points; the normal flavor returns point +/- z * sd(replicates).
    """
    if n_replicates < 2:
        raise EstimationError("bootstrap needs at least 2 replicates")
    if flavor not in ("percentile", "normal"):
        raise EstimationError(f"unknown bootstrap flavor {flavor!r}")
    if flavor == "normal" and point is None:
        raise EstimationError("normal-flavor bootstrap needs the full-sample point")
    n_t, n_g = trial.n, target.n

    def one(i: int):
        rng = substream(seed, "bootstrap", i)
        ti = rng.integers(0, n_t, size=n_t)
        gi = rng.integers(0, n_g, size=n_g)
        try:
            return float(procedure(trial.take(ti), target.take(gi))), None
        except (TrialReachError, np.linalg.LinAlgError) as exc:
            return float("nan"), f"{type(exc).__name__}: {exc}"

    results = parallel_map(one, range(n_replicates), threads=threads)
    points = np.array([r[0] for r in results])
    messages: dict[str, int] = {}
    for _, msg in results:
        if msg is not None:
            messages[msg] = messages.get(msg, 0) + 1
    good = points[~np.isnan(points)]
    n_failed = n_replicates - good.size
    if n_failed > 0.1 * n_replicates:
        detail = "; ".join(f"{m} (x{c})" for m, c in sorted(messages.items()))
        raise BootstrapError(
            f"{n_failed} of {n_replicates} bootstrap replicates failed: {detail}"
        )
    se = float(np.std(good, ddof=1))
    if flavor == "percentile":
        ordered = np.sort(good)
        b = ordered.shape[0]

        def at(p: float) -> float:
            rank = max(1, int(np.ceil(p * b)))
            return float(ordered[min(rank, b) - 1])

        ci = (at(alpha / 2.0), at(1.0 - alpha / 2.0))
    else:
        z = _z(alpha)
        ci = (point - z * se, point + z * se)
    return BootstrapResult(
        se=se,
        ci=ci,
        flavor=flavor,
        n_requested=n_replicates,
        n_success=int(good.size),
        n_failed=int(n_failed),
        failure_messages=messages,
    )


def with_bootstrap(
    estimate: EffectEstimate, boot: BootstrapResult
) -> EffectEstimate:
    """Return the estimate with bootstrap uncertainty attached."""
    flags = [f for f in estimate.flags if f != "variance_by_bootstrap_only"]
    if boot.n_failed:
        flags.append("bootstrap_replicates_dropped")
    if boot.se == 0.0:
        flags.append("degenerate_se")
    return EffectEstimate(
        estimand=estimate.estimand,
        method=estimate.method,
        point=estimate.point,
        se=boot.se,
        ci=boot.ci,
        alpha=estimate.alpha,
        variance_method=f"bootstrap_{boot.flavor}",
        n_trial=estimate.n_trial,
        n_target=estimate.n_target,
        n_excluded=estimate.n_excluded,
        flags=flags,
    )


@dataclass
class SubgroupTable:
    """Per-stratum trial effects for one covariate."""

    covariate: str
    rows: list[dict]
    heterogeneity_note: str

    def to_dict(self) -> dict:
        return {
            "covariate": self.covariate,
            "rows": [dict(r) for r in self.rows],
            "heterogeneity_note": self.heterogeneity_note,
        }


def subgroup_effects(
    data: StudyTable,
    covariate: str,
    n_bins: int = 4,
    alpha: float = 0.05,
) -> SubgroupTable:
    """Difference in arm means within strata of one covariate.

    Categorical covariates stratify by level; continuous ones by
    ``n_bins`` quantile bins. A stratum with an empty arm is kept as a
    flagged row rather than failing the table.
    """
    cov = data.schema_for(covariate)
    ok, t, y, _ = _trial_complete(data)
    values = data.data[covariate]
    rows = []
    if cov.kind == "categorical":
        strata = [(lev, ok & (values == lev).to_numpy()) for lev in cov.levels]
    elif cov.kind == "binary":
        v = values.to_numpy(dtype=float)
        strata = [(f"{covariate}={int(lev)}", ok & (v == lev)) for lev in (0.0, 1.0)]
    else:
        if n_bins < 2:
            raise EstimationError("continuous subgroups need at least 2 bins")
        v = values.to_numpy(dtype=float)
        obs = v[ok & ~np.isnan(v)]
        if obs.size == 0:
            raise DegenerateDataError("no observed covariate values in the trial")
        edges = np.quantile(obs, np.linspace(0.0, 1.0, n_bins + 1))
        strata = []
        for k in range(n_bins):
            lo, hi = edges[k], edges[k + 1]
            if k == n_bins - 1:
                mask = ok & (v >= lo) & (v <= hi)
            else:
                mask = ok & (v >= lo) & (v < hi)
            strata.append((f"[{lo:.4g}, {hi:.4g}{']' if k == n_bins - 1 else ')'}", mask))
    z = _z(alpha)
    points = []
    for label, mask in strata:
        n1 = int((mask & (t == 1.0)).sum())
        n0 = int((mask & (t == 0.0)).sum())
        row = {"stratum": label, "n_treated": n1, "n_control": n0}
        if n1 == 0 or n0 == 0:
            row.update(point=float("nan"), se=float("nan"),
                       ci=[float("nan"), float("nan")], flags=["empty_arm"])
        else:
            y1 = y[mask & (t == 1.0)]
            y0 = y[mask & (t == 0.0)]
            pt = float(y1.mean() - y0.mean())
            if n1 < 2 or n0 < 2:
                se = float("nan")
                flags = ["degenerate_se"]
            else:
                se = float(np.sqrt(np.var(y1, ddof=1) / n1 + np.var(y0, ddof=1) / n0))
                flags = ["degenerate_se"] if se == 0.0 else []
            row.update(point=pt, se=se, ci=[pt - z * se, pt + z * se], flags=flags)
            points.append(pt)
        rows.append(row)
    if len(points) >= 2:
        note = (
            f"stratum effects span {min(points):.4g} to {max(points):.4g} "
            f"(range {max(points) - min(points):.4g})"
        )
    else:
        note = "too few populated strata to describe heterogeneity"
    return SubgroupTable(covariate=covariate, rows=rows, heterogeneity_note=note)
