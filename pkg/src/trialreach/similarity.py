"""Population-similarity diagnostics: SMD, score shift, and overlap index.

Three complementary views of how far the trial sits from the target:
per-covariate standardized mean differences (before and after
weighting), the standardized difference in mean sampling scores, and a
kernel-density Bhattacharyya overlap of the score distributions with
its conventional qualitative bins.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import StudyTable
from .errors import DataError, DegenerateDataError
from .weighting import PropensityFit, WeightSet

GRID_POINTS = 512
OVERLAP_BINS = (
    (0.9, "Very high"),
    (0.8, "High"),
    (0.5, "Medium"),
    (0.0, "Low"),
)
DEFAULT_SMD_THRESHOLD = 0.1


def _moments(x: np.ndarray, kind: str, weights: np.ndarray | None):
    """Mean and variance; binary variance is p(1-p)."""
    if weights is None:
        mean = float(np.mean(x))
        if kind == "binary":
            var = mean * (1.0 - mean)
        else:
            var = float(np.var(x, ddof=1))
    else:
        wsum = float(weights.sum())
        if wsum <= 0.0:
            raise DegenerateDataError("weights sum to zero on the trial side")
        mean = float(np.sum(weights * x) / wsum)
        if kind == "binary":
            var = mean * (1.0 - mean)
        else:
            var = float(np.sum(weights * (x - mean) ** 2) / wsum)
    return mean, var


def _smd_numeric(
    trial: np.ndarray,
    target: np.ndarray,
    kind: str,
    trial_weights: np.ndarray | None,
) -> float:
    m1, v1 = _moments(trial, kind, trial_weights)
    m0, v0 = _moments(target, kind, None)
    pooled = (v1 + v0) / 2.0
    if pooled <= 0.0:
        return float("nan")
    return (m1 - m0) / np.sqrt(pooled)


def smd(
    trial_values,
    target_values,
    kind: str,
    levels: tuple[str, ...] | None = None,
    trial_weights=None,
):
    """Standardized mean difference between trial and target.

    (mean_trial - mean_target) / sqrt((var_trial + var_target)/2), with
    p(1-p) variances for binary indicators. Weights, when given,
    reweight the trial side only. Categorical covariates return one SMD
    per non-reference level, on that level's indicator. Returns NaN
    when both variances are zero.
    """
    if kind == "categorical":
        if not levels:
            raise DataError("categorical smd requires the declared levels")
        tv = np.asarray(trial_values, dtype=object)
        gv = np.asarray(target_values, dtype=object)
        w = None if trial_weights is None else np.asarray(trial_weights, dtype=float)
        keep_t = np.array([v is not None and v == v for v in tv])
        keep_g = np.array([v is not None and v == v for v in gv])
        tv, gv = tv[keep_t], gv[keep_g]
        if w is not None:
            w = w[keep_t]
        _check_sizes(tv, gv)
        return {
            lev: _smd_numeric(
                (tv == lev).astype(float), (gv == lev).astype(float), "binary", w
            )
            for lev in levels[1:]
        }
    tv = np.asarray(trial_values, dtype=float)
    gv = np.asarray(target_values, dtype=float)
    w = None if trial_weights is None else np.asarray(trial_weights, dtype=float)
    keep_t = ~np.isnan(tv)
    keep_g = ~np.isnan(gv)
    tv, gv = tv[keep_t], gv[keep_g]
    if w is not None:
        w = w[keep_t]
    _check_sizes(tv, gv)
    return _smd_numeric(tv, gv, kind, w)


def _check_sizes(tv, gv):
    if tv.shape[0] < 2 or gv.shape[0] < 2:
        raise DegenerateDataError(
            "smd needs at least two observed values on each side"
        )


def standardized_delta_p(fit: PropensityFit) -> float:
    """Standardized difference in mean sampling scores between sides."""
    a = fit.trial_ps()
    b = fit.target_ps()
    _check_sizes(a, b)
    va = float(np.var(a, ddof=1))
    vb = float(np.var(b, ddof=1))
    pooled = (va + vb) / 2.0
    if pooled <= 0.0:
        return float("nan")
    return float((a.mean() - b.mean()) / np.sqrt(pooled))


def silverman_bandwidth(x: np.ndarray) -> float:
    """0.9 * min(sd, IQR/1.34) * n^(-1/5), guarding zero spread terms."""
    n = x.shape[0]
    sd = float(np.std(x, ddof=1))
    q75, q25 = np.percentile(x, [75, 25])
    iqr = float(q75 - q25)
    scale_candidates = [v for v in (sd, iqr / 1.34) if v > 0.0]
    if not scale_candidates:
        return 0.0
    return 0.9 * min(scale_candidates) * n ** (-0.2)


def _kde_on_grid(
    x: np.ndarray, grid: np.ndarray, bandwidth: float, reflect01: bool
) -> np.ndarray:
    pts = [x]
    if reflect01:
        pts.append(-x)
        pts.append(2.0 - x)
    dens = np.zeros_like(grid)
    for p in pts:
        z = (grid[:, None] - p[None, :]) / bandwidth
        dens += np.exp(-0.5 * z**2).sum(axis=1)
    dens /= x.shape[0] * bandwidth * np.sqrt(2.0 * np.pi)
    area = np.trapezoid(dens, grid)
    if area > 0.0:
        dens = dens / area
    return dens


def bhattacharyya_coefficient(
    a, b, *, bounded01: bool = False
) -> float:
    """KDE-based overlap integral of two samples, clipped to [0, 1].

    Each sample gets a Gaussian kernel density with its own Silverman
    bandwidth, evaluated on a common 512-point uniform grid and
    renormalized by the trapezoid rule. With ``bounded01`` the grid is
    [0, 1] and mass is reflected at both boundaries (the sampling-score
    case); otherwise the grid spans the pooled sample range padded by
    three bandwidths.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    _check_sizes(a, b)
    ha = silverman_bandwidth(a)
    hb = silverman_bandwidth(b)
    if ha == 0.0 or hb == 0.0:
        const_a = float(a.min()) == float(a.max())
        const_b = float(b.min()) == float(b.max())
        if const_a and const_b:
            return 1.0 if a[0] == b[0] else float("nan")
        return float("nan")
    if bounded01:
        grid = np.linspace(0.0, 1.0, GRID_POINTS)
    else:
        pad = 3.0 * max(ha, hb)
        lo = min(a.min(), b.min()) - pad
        hi = max(a.max(), b.max()) + pad
        grid = np.linspace(lo, hi, GRID_POINTS)
    fa = _kde_on_grid(a, grid, ha, bounded01)
    fb = _kde_on_grid(b, grid, hb, bounded01)
    overlap = float(np.trapezoid(np.sqrt(fa * fb), grid))
    return float(np.clip(overlap, 0.0, 1.0))


def classify_overlap(index: float) -> str:
    """Map an overlap index to its qualitative bin.

    [0.9, 1] Very high; [0.8, 0.9) High; [0.5, 0.8) Medium;
    [0, 0.5) Low. Values outside [0, 1] beyond float tolerance error.
    """
    if np.isnan(index):
        raise DataError("cannot classify an undefined overlap index")
    if index < -1e-9 or index > 1.0 + 1e-9:
        raise DataError(f"overlap index {index} is outside [0, 1]")
    index = min(max(index, 0.0), 1.0)
    for cut, label in OVERLAP_BINS:
        if index >= cut:
            return label
    return "Low"


def tipton_index(fit: PropensityFit) -> tuple[float, str | None]:
    """Generalizability overlap of the sampling-score distributions.

    Returns (index, bin label). If one side's scores are all identical
    the point-mass convention applies: 1 when the other side matches
    exactly, otherwise NaN with no label.
    """
    idx = bhattacharyya_coefficient(
        fit.trial_ps(), fit.target_ps(), bounded01=True
    )
    if np.isnan(idx):
        return float("nan"), None
    return idx, classify_overlap(idx)


@dataclass
class SimilarityReport:
    """Per-covariate balance plus distribution-level overlap measures."""

    smd_unweighted: dict[str, float]
    smd_weighted: dict[str, float] | None
    delta_p: float
    overlap_index: float
    overlap_label: str | None
    threshold: float
    flagged: list[str]

    def to_dict(self) -> dict:
        return {
            "smd_unweighted": dict(self.smd_unweighted),
            "smd_weighted": dict(self.smd_weighted) if self.smd_weighted else None,
            "standardized_delta_p": self.delta_p,
            "overlap_index": self.overlap_index,
            "overlap_label": self.overlap_label,
            "smd_threshold": self.threshold,
            "flagged_covariates": list(self.flagged),
        }


def _flatten_smd(name: str, value) -> dict[str, float]:
    if isinstance(value, dict):
        return {f"{name}={lev}": v for lev, v in value.items()}
    return {name: value}


def similarity_report(
    data: StudyTable,
    fit: PropensityFit,
    weights: WeightSet | None = None,
    threshold: float = DEFAULT_SMD_THRESHOLD,
) -> SimilarityReport:
    """Assemble the balance diagnostics for a stacked table.

    SMDs cover every schema covariate (per non-reference level for
    categoricals), unweighted and, when a weight set is supplied,
    reweighting the trial side. Covariates whose weighted (or, absent
    weights, unweighted) |SMD| exceeds the threshold are flagged.
    """
    if data.side != "stacked":
        raise DataError("similarity report expects the stacked table")
    trial_mask = data.s == 1
    un: dict[str, float] = {}
    wt: dict[str, float] | None = {} if weights is not None else None
    w_trial = weights.trial_weights() if weights is not None else None
    for cov in data.schema:
        col = data.data[cov.name]
        tv = col[trial_mask].to_numpy()
        gv = col[~trial_mask].to_numpy()
        un.update(
            _flatten_smd(cov.name, smd(tv, gv, cov.kind, cov.levels))
        )
        if wt is not None:
            wt.update(
                _flatten_smd(
                    cov.name,
                    smd(tv, gv, cov.kind, cov.levels, trial_weights=w_trial),
                )
            )
    basis = wt if wt is not None else un
    flagged = sorted(
        name
        for name, val in basis.items()
        if not np.isnan(val) and abs(val) > threshold
    )
    idx, label = tipton_index(fit)
    return SimilarityReport(
        smd_unweighted=un,
        smd_weighted=wt,
        delta_p=standardized_delta_p(fit),
        overlap_index=idx,
        overlap_label=label,
        threshold=threshold,
        flagged=flagged,
    )
