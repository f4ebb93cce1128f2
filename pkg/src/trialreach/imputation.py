"""Chained-equation multiple imputation and pooling rules.

Covariate cells are imputed on the stacked table so the imputation
models can condition on study membership, treatment, and outcome
without leaking trial-only columns into target rows (the latter enter
only through interactions with the study indicator, which are zero for
target units). Treatment and outcome are never imputed; their absence
on target rows is structural.

Two ways to combine M completed datasets with the sampling-score
workflow are provided: fit the score and estimate within each completed
dataset and pool the estimates (psi_within), or average the M score
vectors unit-wise and analyze once (psi_across, bootstrap variance
only). mi_boot nests a single imputation chain inside an outer
bootstrap instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import pandas as pd
from scipy.special import expit
from scipy.stats import norm, t as t_dist

from .dataset import StudyTable
from .engines import DesignMatrix, fit_linear, fit_logistic
from .errors import (
    BootstrapError,
    DataError,
    EstimationError,
    ImputationError,
    TrialReachError,
)
from .estimators import EffectEstimate
from .rng import parallel_map, substream
from .weighting import PropensityFit

MIN_OBSERVED_CELLS = 20
DEFAULT_M = 20
DEFAULT_ITERATIONS = 10
DEFAULT_PMM_DONORS = 5

_METHODS_BY_KIND = {
    "continuous": ("pmm", "norm"),
    "binary": ("logistic",),
    "categorical": ("categorical",),
}


@dataclass(frozen=True)
class MiceSettings:
    """Chained-equations settings; defaults follow mainstream practice."""

    m: int = DEFAULT_M
    iterations: int = DEFAULT_ITERATIONS
    pmm_donors: int = DEFAULT_PMM_DONORS
    methods: dict = field(default_factory=dict)

    def method_for(self, kind: str, name: str) -> str:
        default = _METHODS_BY_KIND[kind][0]
        chosen = self.methods.get(name, default)
        if chosen not in _METHODS_BY_KIND[kind]:
            raise ImputationError(
                f"method {chosen!r} is not valid for {kind} covariate {name!r}; "
                f"choose from {_METHODS_BY_KIND[kind]}"
            )
        return chosen


@dataclass
class ImputationSet:
    """M completed tables plus the settings and diagnostics behind them."""

    tables: list[StudyTable]
    m: int
    iterations: int
    seed: int
    methods: dict[str, str]
    model_variables: list[str]
    diagnostics: dict

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "iterations": self.iterations,
            "seed": self.seed,
            "methods": dict(self.methods),
            "model_variables": list(self.model_variables),
        }


def _predictor_matrix(
    df: pd.DataFrame, table: StudyTable, exclude: str
) -> tuple[np.ndarray, list[str]]:
    """Imputation design: intercept, other covariates, S, S*T, S*Y."""
    n = len(df)
    blocks = [np.ones((n, 1))]
    labels = ["intercept"]
    for cov in table.schema:
        if cov.name == exclude:
            continue
        if cov.kind == "categorical":
            vals = df[cov.name].to_numpy(dtype=object)
            for lev in cov.levels[1:]:
                blocks.append((vals == lev).astype(float)[:, None])
                labels.append(f"{cov.name}={lev}")
        else:
            blocks.append(df[cov.name].to_numpy(dtype=float)[:, None])
            labels.append(cov.name)
    s = df["s"].to_numpy(dtype=float)
    blocks.append(s[:, None])
    labels.append("s")
    t = np.where(s == 1.0, df["t"].to_numpy(dtype=float), 0.0)
    y = np.where(s == 1.0, df["y"].to_numpy(dtype=float), 0.0)
    blocks.append(t[:, None])
    labels.append("s*t")
    blocks.append(y[:, None])
    labels.append("s*y")
    return np.hstack(blocks), labels


def _draw_beta(model, rng: np.random.Generator) -> np.ndarray:
    """Approximate posterior draw of linear coefficients."""
    cov = np.nan_to_num(model.cov_unscaled, nan=0.0)
    cov = (cov + cov.T) / 2.0
    try:
        chol = np.linalg.cholesky(cov + 1e-12 * np.eye(cov.shape[0]))
    except np.linalg.LinAlgError:
        return model.coef.copy()
    z = rng.standard_normal(cov.shape[0])
    return model.coef + chol @ z


def _pmm_draw(
    pred_obs: np.ndarray,
    y_obs: np.ndarray,
    pred_mis: np.ndarray,
    k: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw one of the k observed values whose predictions sit nearest."""
    order = np.argsort(pred_obs, kind="stable")
    po = pred_obs[order]
    yo = y_obs[order]
    n = po.shape[0]
    k = min(k, n)
    picks = rng.integers(0, k, size=pred_mis.shape[0])
    pos = np.searchsorted(po, pred_mis)
    out = np.empty(pred_mis.shape[0])
    for i in range(pred_mis.shape[0]):
        left = int(pos[i]) - 1
        right = int(pos[i])
        chosen = -1
        for rank in range(k):
            if left < 0:
                take = right
                right += 1
            elif right >= n:
                take = left
                left -= 1
            elif pred_mis[i] - po[left] <= po[right] - pred_mis[i]:
                take = left
                left -= 1
            else:
                take = right
                right += 1
            if rank == picks[i]:
                chosen = take
        out[i] = yo[chosen]
    return out


def _impute_variable(
    df: pd.DataFrame,
    table: StudyTable,
    name: str,
    miss: np.ndarray,
    method: str,
    pmm_k: int,
    rng: np.random.Generator,
) -> None:
    cov = table.schema_for(name)
    X, labels = _predictor_matrix(df, table, exclude=name)
    obs = ~miss
    X_obs = DesignMatrix(X[obs], tuple(labels))
    X_mis = DesignMatrix(X[miss], tuple(labels))
    if method in ("pmm", "norm"):
        y_obs = df.loc[obs, name].to_numpy(dtype=float)
        model = fit_linear(X_obs, y_obs)
        resid = y_obs - X_obs.values @ model.coef
        dof = max(1, X_obs.n - X_obs.p)
        sigma2 = float(resid @ resid) / dof
        beta_star = model.coef + np.sqrt(sigma2) * (
            _draw_beta(model, rng) - model.coef
        ) if sigma2 > 0 else model.coef
        pred_mis = X_mis.values @ beta_star
        if method == "pmm":
            pred_obs = X_obs.values @ model.coef
            values = _pmm_draw(pred_obs, y_obs, pred_mis, pmm_k, rng)
        else:
            values = pred_mis + np.sqrt(sigma2) * rng.standard_normal(pred_mis.shape[0])
        df.loc[miss, name] = values
    elif method == "logistic":
        y_obs = df.loc[obs, name].to_numpy(dtype=float)
        model = fit_logistic(X_obs, y_obs)
        p = expit(X_mis.values @ model.coef)
        df.loc[miss, name] = (rng.random(p.shape[0]) < p).astype(float)
    elif method == "categorical":
        vals_obs = df.loc[obs, name].to_numpy(dtype=object)
        probs = np.zeros((int(miss.sum()), len(cov.levels)))
        for j, lev in enumerate(cov.levels):
            indicator = (vals_obs == lev).astype(float)
            if indicator.sum() == 0:
                continue
            if indicator.sum() == indicator.shape[0]:
                probs[:, j] = 1.0
                continue
            model = fit_logistic(X_obs, indicator)
            probs[:, j] = expit(X_mis.values @ model.coef)
        totals = probs.sum(axis=1, keepdims=True)
        if (totals <= 0.0).any():
            raise ImputationError(
                f"categorical imputation for {name!r} produced no admissible level"
            )
        probs = probs / totals
        cum = np.cumsum(probs, axis=1)
        u = rng.random(probs.shape[0])
        idx = (u[:, None] > cum).sum(axis=1)
        levels = np.asarray(cov.levels, dtype=object)
        df.loc[miss, name] = levels[np.minimum(idx, len(cov.levels) - 1)]
    else:
        raise ImputationError(f"unknown imputation method {method!r}")


def _chain_once(
    table: StudyTable,
    order: list[str],
    miss_masks: dict[str, np.ndarray],
    methods: dict[str, str],
    settings: MiceSettings,
    rng: np.random.Generator,
) -> tuple[pd.DataFrame, dict]:
    """One chained-equations pass: init by observed draws, then iterate."""
    df = table.data.copy()
    for name in order:
        miss = miss_masks[name]
        obs_vals = df.loc[~miss, name].to_numpy()
        draws = rng.integers(0, obs_vals.shape[0], size=int(miss.sum()))
        df.loc[miss, name] = obs_vals[draws]
    trace: dict[str, list] = {name: [] for name in order}
    for _ in range(settings.iterations):
        for name in order:
            miss = miss_masks[name]
            _impute_variable(
                df, table, name, miss, methods[name], settings.pmm_donors, rng
            )
            cov = table.schema_for(name)
            imputed = df.loc[miss, name]
            if cov.kind == "categorical":
                top = cov.levels[0]
                trace[name].append(float((imputed == top).mean()))
            else:
                trace[name].append(float(imputed.to_numpy(dtype=float).mean()))
    return df, trace


def _validate_for_mice(table: StudyTable) -> tuple[list[str], dict[str, np.ndarray]]:
    if table.side != "stacked":
        raise DataError("imputation runs on the stacked table")
    df = table.data
    s = df["s"].to_numpy()
    t = df["t"].to_numpy(dtype=float)
    y = df["y"].to_numpy(dtype=float)
    trial = s == 1
    if np.isnan(t[trial]).any() or np.isnan(y[trial]).any():
        raise ImputationError(
            "trial units with missing treatment or outcome must be excluded "
            "before imputation; outcomes and treatment are never imputed"
        )
    miss_masks: dict[str, np.ndarray] = {}
    fractions: dict[str, float] = {}
    for cov in table.schema:
        miss = df[cov.name].isna().to_numpy()
        if not miss.any():
            continue
        n_obs = int((~miss).sum())
        if n_obs < MIN_OBSERVED_CELLS:
            raise ImputationError(
                f"covariate {cov.name!r} has only {n_obs} observed cells; "
                f"at least {MIN_OBSERVED_CELLS} are required"
            )
        observed = df.loc[~miss, cov.name]
        if cov.kind == "categorical":
            if observed.nunique() < 2:
                raise ImputationError(
                    f"covariate {cov.name!r} is constant among observed cells"
                )
        else:
            vals = observed.to_numpy(dtype=float)
            if float(vals.min()) == float(vals.max()):
                raise ImputationError(
                    f"covariate {cov.name!r} is constant among observed cells"
                )
        miss_masks[cov.name] = miss
        fractions[cov.name] = float(miss.mean())
    order = sorted(miss_masks, key=lambda nm: (fractions[nm], nm))
    return order, miss_masks


def mice(
    table: StudyTable, settings: MiceSettings | None = None, seed: int = 0
) -> ImputationSet:
    """Multiple imputation by chained equations on the stacked table.

    Runs M independent chains, each initializing missing cells with
    random observed draws and then cycling through incomplete
    covariates in ascending-missingness order (ties broken by name)
    for the configured number of iterations. Continuous covariates use
    predictive mean matching with 5 donors by default; binary and
    categorical covariates redraw from fitted logistic probabilities.
    Observed cells are never modified and target rows never receive
    treatment or outcome values. A table with no missing cells yields
    M identical copies.
    """
    settings = settings or MiceSettings()
    if settings.m < 2:
        raise ImputationError(
            f"multiple imputation needs at least 2 imputations, got {settings.m}"
        )
    if settings.iterations < 1:
        raise ImputationError("iterations must be at least 1")
    order, miss_masks = _validate_for_mice(table)
    methods = {
        name: settings.method_for(table.schema_for(name).kind, name)
        for name in order
    }
    tables: list[StudyTable] = []
    diagnostics: dict = {"chain_means": []}
    for m_idx in range(settings.m):
        if not order:
            tables.append(
                StudyTable(
                    table.data.copy(), table.schema, table.side, dict(table.provenance)
                )
            )
            diagnostics["chain_means"].append({})
            continue
        rng = substream(seed, "imputation-chain", m_idx)
        df, trace = _chain_once(table, order, miss_masks, methods, settings, rng)
        tables.append(StudyTable(df, table.schema, table.side, dict(table.provenance)))
        diagnostics["chain_means"].append(trace)
    model_vars = [c.name for c in table.schema] + ["s", "s*t", "s*y"]
    return ImputationSet(
        tables=tables,
        m=settings.m,
        iterations=settings.iterations,
        seed=seed,
        methods=methods,
        model_variables=model_vars,
        diagnostics=diagnostics,
    )


def impute_once(
    table: StudyTable, settings: MiceSettings | None = None, seed: int = 0
) -> StudyTable:
    """Single-chain completion (the inner step of mi_boot)."""
    settings = settings or MiceSettings()
    order, miss_masks = _validate_for_mice(table)
    if not order:
        return StudyTable(
            table.data.copy(), table.schema, table.side, dict(table.provenance)
        )
    methods = {
        name: settings.method_for(table.schema_for(name).kind, name)
        for name in order
    }
    rng = substream(seed, "imputation-chain", 0)
    df, _ = _chain_once(table, order, miss_masks, methods, settings, rng)
    return StudyTable(df, table.schema, table.side, dict(table.provenance))


# -- pooling -----------------------------------------------------------------


@dataclass
class PooledEstimate:
    """Rubin-combined estimate across M imputations."""

    estimand: str
    method: str
    point: float
    within: float
    between: float
    total: float
    df: float
    m: int
    alpha: float
    ci: tuple[float, float]
    flags: list[str] = field(default_factory=list)

    @property
    def se(self) -> float:
        return float(np.sqrt(self.total))

    def to_dict(self) -> dict:
        return {
            "estimand": self.estimand,
            "method": self.method,
            "point": self.point,
            "se": self.se,
            "ci": [self.ci[0], self.ci[1]],
            "alpha": self.alpha,
            "within_variance": self.within,
            "between_variance": self.between,
            "total_variance": self.total,
            "df": self.df,
            "m": self.m,
            "flags": list(self.flags),
        }


def rubin_pool(
    points,
    variances,
    alpha: float = 0.05,
    estimand: str = "PATE",
    method: str = "",
) -> PooledEstimate:
    """Combine per-imputation points and variances by Rubin's rules.

    Total variance is W + (1 + 1/M) B; the CI uses a t reference with
    df = (M-1) (1 + W / ((1 + 1/M) B))^2, degenerating to the normal
    when B = 0.
    """
    pts = np.asarray(points, dtype=float)
    vs = np.asarray(variances, dtype=float)
    if pts.shape != vs.shape or pts.ndim != 1 or pts.shape[0] < 2:
        raise EstimationError("pooling needs matching point/variance lists (M >= 2)")
    if np.isnan(pts).any() or np.isnan(vs).any():
        raise EstimationError("pooling inputs must be observed (no NaN)")
    m = pts.shape[0]
    point = float(pts.mean())
    within = float(vs.mean())
    between = float(np.var(pts, ddof=1))
    total = within + (1.0 + 1.0 / m) * between
    if between == 0.0:
        df = float("inf")
        q = float(norm.ppf(1.0 - alpha / 2.0))
    else:
        df = float((m - 1) * (1.0 + within / ((1.0 + 1.0 / m) * between)) ** 2)
        q = float(t_dist.ppf(1.0 - alpha / 2.0, df))
    half = q * float(np.sqrt(total))
    return PooledEstimate(
        estimand=estimand,
        method=method,
        point=point,
        within=within,
        between=between,
        total=total,
        df=df,
        m=m,
        alpha=alpha,
        ci=(point - half, point + half),
    )


def psi_within(
    imps: ImputationSet,
    analysis: Callable[[StudyTable], EffectEstimate],
    alpha: float = 0.05,
) -> PooledEstimate:
    """Run the full analysis inside each completed dataset and pool.

    The analysis callable must return an estimate with a finite SE
    (sandwich or bootstrap); pooling combines points and squared SEs.
    """
    points, variances, method = [], [], ""
    for i, tbl in enumerate(imps.tables):
        try:
            est = analysis(tbl)
        except TrialReachError as exc:
            raise ImputationError(
                f"analysis failed on imputation {i + 1} of {imps.m}: {exc}"
            ) from exc
        if not np.isfinite(est.se):
            raise ImputationError(
                f"analysis on imputation {i + 1} returned no variance; "
                "within-imputation pooling needs per-imputation SEs"
            )
        points.append(est.point)
        variances.append(est.se**2)
        method = est.method
    return rubin_pool(points, variances, alpha=alpha, method=method)


def average_scores(fits: list[PropensityFit]) -> PropensityFit:
    """Unit-wise mean of M aligned sampling-score vectors."""
    first = fits[0]
    for f in fits[1:]:
        if not np.array_equal(f.unit_ids, first.unit_ids):
            raise DataError("sampling fits are not aligned across imputations")
    ps = np.mean(np.column_stack([f.ps for f in fits]), axis=1)
    return PropensityFit(
        scenario=first.scenario,
        unit_ids=first.unit_ids.copy(),
        s=first.s.copy(),
        ps=ps,
        model=None,
        covariates=first.covariates,
        n_clamped_low=max(f.n_clamped_low for f in fits),
        n_clamped_high=max(f.n_clamped_high for f in fits),
        estimation_population=first.estimation_population
        + f" (scores averaged over {len(fits)} imputations)",
    )


def psi_across(
    imps: ImputationSet,
    fit_ps: Callable[[StudyTable], PropensityFit],
    estimate: Callable[[StudyTable, PropensityFit], EffectEstimate],
) -> EffectEstimate:
    """Average the M score vectors unit-wise, then analyze once.

    The single analysis runs on the first completed dataset with the
    averaged scores. Uncertainty must come from a bootstrap over the
    whole pipeline (resampling, re-imputing, re-averaging); the point
    returned here carries no variance of its own.
    """
    fits = [fit_ps(tbl) for tbl in imps.tables]
    avg = average_scores(fits)
    return estimate(imps.tables[0], avg)


def mi_boot(
    table: StudyTable,
    settings: MiceSettings,
    analysis: Callable[[StudyTable], float],
    n_replicates: int,
    seed: int,
    alpha: float = 0.05,
    threads: int = 1,
) -> EffectEstimate:
    """Bootstrap outside, single imputation chain inside.

    The point estimate averages the analysis over M full-data chains;
    the CI comes from nearest-rank quantiles of replicate points, each
    replicate resampling units within side and re-imputing once.
    """
    if n_replicates < 2:
        raise EstimationError("mi_boot needs at least 2 replicates")
    full = mice(table, settings, seed=seed)
    full_points = [float(analysis(tbl)) for tbl in full.tables]
    point = float(np.mean(full_points))

    s = table.s
    trial_idx = np.flatnonzero(s == 1)
    target_idx = np.flatnonzero(s == 0)

    def one(i: int):
        rng = substream(seed, "mi-boot", i)
        ti = trial_idx[rng.integers(0, trial_idx.size, size=trial_idx.size)]
        gi = target_idx[rng.integers(0, target_idx.size, size=target_idx.size)]
        resampled = table.take(np.concatenate([ti, gi]))
        try:
            completed = impute_once(
                resampled, settings, seed=substream(seed, "mi-boot-chain", i).integers(2**31)
            )
            return float(analysis(completed)), None
        except (TrialReachError, np.linalg.LinAlgError) as exc:
            return float("nan"), f"{type(exc).__name__}: {exc}"

    results = parallel_map(one, range(n_replicates), threads=threads)
    pts = np.array([r[0] for r in results])
    good = np.sort(pts[~np.isnan(pts)])
    n_failed = int(n_replicates - good.size)
    if n_failed > 0.1 * n_replicates:
        messages: dict[str, int] = {}
        for _, msg in results:
            if msg:
                messages[msg] = messages.get(msg, 0) + 1
        detail = "; ".join(f"{m} (x{c})" for m, c in sorted(messages.items()))
        raise BootstrapError(
            f"{n_failed} of {n_replicates} mi_boot replicates failed: {detail}"
        )

    def at(p: float) -> float:
        rank = max(1, int(np.ceil(p * good.size)))
        return float(good[min(rank, good.size) - 1])

    se = float(np.std(good, ddof=1))
    flags = ["bootstrap_replicates_dropped"] if n_failed else []
    if se == 0.0:
        flags.append("degenerate_se")
    return EffectEstimate(
        estimand="PATE",
        method="mi_boot",
        point=point,
        se=se,
        ci=(at(alpha / 2.0), at(1.0 - alpha / 2.0)),
        alpha=alpha,
        variance_method="bootstrap_percentile",
        n_trial=int(trial_idx.size),
        n_target=int(target_idx.size),
        flags=flags,
    )
