"""Weighted model engines: linear, logistic, and bagged classification trees.

These are the fitting primitives the estimators build on. They accept
explicit per-unit weights everywhere because the sampling weights flow
through every model downstream. The logistic solver is iteratively
reweighted least squares with step-halving, so its log-likelihood is
non-decreasing across iterations; the linear solver uses a pivoted
orthogonal decomposition and zeroes coefficients of redundant columns
instead of failing.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.special import expit

from .dataset import CovariateSchema, StudyTable
from .errors import (
    DegenerateDataError,
    EstimationError,
    MissingDataError,
    RankDeficiencyWarning,
    RidgeFallbackWarning,
    SeparationWarning,
)
from .rng import substream

MAX_IRLS_ITERATIONS = 100
IRLS_TOLERANCE = 1e-8
MAX_STEP_HALVINGS = 10
SEPARATION_BOUND = 15.0
RIDGE_EPS = 1e-8


@dataclass(frozen=True)
class DesignMatrix:
    """A dense design: values plus column labels, intercept first.

    Continuous and binary covariates enter as single columns;
    categorical covariates are reference-coded with one indicator per
    non-reference level (the first declared level is the reference).
    """

    values: np.ndarray
    labels: tuple[str, ...]

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 2:
            raise EstimationError("design matrix must be 2-dimensional")
        if vals.shape[1] != len(self.labels):
            raise EstimationError("design labels do not match column count")
        if np.isnan(vals).any():
            raise MissingDataError(
                "design matrix contains missing values; impute or use "
                "complete cases before modeling"
            )
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]


def indicator_labels(cov: CovariateSchema) -> list[str]:
    """Design column labels contributed by one covariate."""
    if cov.kind == "categorical":
        return [f"{cov.name}={lev}" for lev in cov.levels[1:]]
    return [cov.name]


def build_design(
    table: StudyTable,
    covariates: list[str] | None = None,
    rows: np.ndarray | None = None,
    extra: dict[str, np.ndarray] | None = None,
) -> DesignMatrix:
    """Build an intercept-led design from a study table.

    ``covariates`` defaults to every schema covariate. ``rows`` selects
    a boolean subset of units. ``extra`` appends fully observed numeric
    columns (e.g. a treatment indicator) after the covariate block.
    """
    if covariates is None:
        covariates = table.covariate_names
    df = table.data if rows is None else table.data.loc[np.asarray(rows)]
    n = len(df)
    blocks = [np.ones((n, 1))]
    labels = ["intercept"]
    for name in covariates:
        cov = table.schema_for(name)
        col = df[name]
        if cov.kind == "categorical":
            vals = col.to_numpy(dtype=object)
            if col.isna().any():
                raise MissingDataError(
                    f"covariate {name!r} has missing values; impute or use "
                    "complete cases before modeling"
                )
            for lev in cov.levels[1:]:
                blocks.append((vals == lev).astype(float)[:, None])
            labels.extend(indicator_labels(cov))
        else:
            vals = col.to_numpy(dtype=float)
            blocks.append(vals[:, None])
            labels.append(name)
    if extra:
        for name, vals in extra.items():
            arr = np.asarray(vals, dtype=float).reshape(n, 1)
            blocks.append(arr)
            labels.append(name)
    return DesignMatrix(np.hstack(blocks), tuple(labels))


@dataclass
class ConvergenceInfo:
    converged: bool = True
    iterations: int = 0
    max_coef_change: float = 0.0
    loglik_trace: list[float] = field(default_factory=list)
    ridge_used: bool = False

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "max_coef_change": self.max_coef_change,
            "ridge_used": self.ridge_used,
        }


@dataclass
class FittedModel:
    """A fitted engine: family, coefficients (or trees), labels, diagnostics."""

    family: str
    labels: tuple[str, ...]
    coef: np.ndarray | None = None
    convergence: ConvergenceInfo = field(default_factory=ConvergenceInfo)
    separation_flag: bool = False
    dropped_columns: tuple[str, ...] = ()
    trees: list[dict] | None = None
    cov_unscaled: np.ndarray | None = None

    def to_json_dict(self) -> dict:
        out = {
            "family": self.family,
            "labels": list(self.labels),
            "separation_flag": self.separation_flag,
            "convergence": self.convergence.to_dict(),
        }
        if self.coef is not None:
            out["coef"] = [float(v) for v in self.coef]
        if self.dropped_columns:
            out["dropped_columns"] = list(self.dropped_columns)
        if self.trees is not None:
            out["trees"] = [
                {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in t.items()}
                for t in self.trees
            ]
        return out


def _check_xyw(X: DesignMatrix, y, w):
    yv = np.asarray(y, dtype=float).ravel()
    if yv.shape[0] != X.n:
        raise EstimationError("response length does not match design rows")
    if np.isnan(yv).any():
        raise MissingDataError("response contains missing values")
    if w is None:
        wv = np.ones(X.n)
    else:
        wv = np.asarray(w, dtype=float).ravel()
        if wv.shape[0] != X.n:
            raise EstimationError("weight length does not match design rows")
        if np.isnan(wv).any() or (wv < 0).any():
            raise EstimationError("weights must be non-negative and observed")
    if not (wv > 0).any():
        raise DegenerateDataError("all weights are zero")
    return yv, wv


def fit_linear(X: DesignMatrix, y, weights=None) -> FittedModel:
    """Weighted least squares via pivoted QR.

    Rank-deficient designs warn and return zero coefficients for the
    redundant columns, so the coefficient vector always has one entry
    per design column.
    """
    y, w = _check_xyw(X, y, weights)
    if X.n < X.p:
        raise EstimationError(
            f"underdetermined system: {X.n} rows for {X.p} columns"
        )
    sw = np.sqrt(w)
    A = X.values * sw[:, None]
    b = y * sw
    Q, R, piv = scipy.linalg.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0.0:
        raise DegenerateDataError("design matrix is entirely zero")
    tol = diag[0] * max(X.n, X.p) * np.finfo(float).eps
    rank = int((diag > tol).sum())
    coef = np.zeros(X.p)
    qtb = Q.T @ b
    coef_r = scipy.linalg.solve_triangular(R[:rank, :rank], qtb[:rank])
    coef[piv[:rank]] = coef_r
    dropped: tuple[str, ...] = ()
    if rank < X.p:
        dropped = tuple(X.labels[j] for j in piv[rank:])
        warnings.warn(
            f"rank-deficient design (rank {rank} of {X.p}); dropped "
            f"redundant columns: {list(dropped)}",
            RankDeficiencyWarning,
            stacklevel=2,
        )
    # Unscaled (X'WX)^{-1} on the retained columns, for sandwich variances.
    cov = np.full((X.p, X.p), np.nan)
    Rinv = scipy.linalg.solve_triangular(
        R[:rank, :rank], np.eye(rank)
    )
    block = Rinv @ Rinv.T
    idx = piv[:rank]
    cov[np.ix_(idx, idx)] = block
    info = ConvergenceInfo(converged=True, iterations=1)
    return FittedModel(
        family="linear",
        labels=X.labels,
        coef=coef,
        convergence=info,
        dropped_columns=dropped,
        cov_unscaled=cov,
    )


def _logistic_loglik(eta: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    # w * (y*eta - log(1 + exp(eta))), computed stably.
    return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))))


def fit_logistic(X: DesignMatrix, y, weights=None) -> FittedModel:
    """Weighted logistic regression by IRLS with step-halving.

    Starts at zero, converges when the largest coefficient change
    drops below 1e-8, and never decreases the log-likelihood (a step
    is halved up to 10 times; if it still does not improve, iteration
    stops). A singular weighted information matrix falls back to a
    small ridge with a warning. Non-convergence with any coefficient
    beyond +/-15 raises the separation flag.
    """
    y, w = _check_xyw(X, y, weights)
    pos = w > 0
    classes = np.unique(y[pos])
    if not np.isin(classes, (0.0, 1.0)).all():
        raise EstimationError("logistic response must be 0 or 1")
    if classes.size < 2:
        raise DegenerateDataError(
            "logistic response takes a single value among weighted units"
        )
    beta = np.zeros(X.p)
    eta = X.values @ beta
    ll = _logistic_loglik(eta, y, w)
    trace = [ll]
    info = ConvergenceInfo(converged=False)
    for it in range(1, MAX_IRLS_ITERATIONS + 1):
        p = expit(eta)
        wt = w * p * (1.0 - p)
        score = X.values.T @ (w * (y - p))
        fisher = X.values.T @ (X.values * wt[:, None])
        with warnings.catch_warnings():
            # conditioning problems are handled by the ridge fallback below
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            try:
                delta = scipy.linalg.solve(fisher, score, assume_a="pos")
            except (scipy.linalg.LinAlgError, ValueError):
                delta = None
            if delta is None or not np.isfinite(delta).all():
                fisher = fisher + RIDGE_EPS * np.eye(X.p)
                warnings.warn(
                    "singular information matrix; stabilizing with a small ridge",
                    RidgeFallbackWarning,
                    stacklevel=3,
                )
                info.ridge_used = True
                delta = scipy.linalg.solve(fisher, score, assume_a="pos")
        step = 1.0
        accepted = False
        for _ in range(MAX_STEP_HALVINGS + 1):
            cand = beta + step * delta
            eta_new = X.values @ cand
            ll_new = _logistic_loglik(eta_new, y, w)
            if ll_new >= ll - 1e-10 * (1.0 + abs(ll)):
                accepted = True
                break
            step *= 0.5
        info.iterations = it
        if not accepted:
            break
        change = float(np.max(np.abs(step * delta)))
        beta, eta, ll = cand, eta_new, ll_new
        trace.append(ll)
        info.max_coef_change = change
        if change < IRLS_TOLERANCE:
            info.converged = True
            break
    info.loglik_trace = trace
    # Iteration failure is either the literal kind (no convergence) or the
    # masked kind (a singular information matrix papered over by the ridge);
    # huge coefficients on top of either mean the classes may be separable.
    sep = False
    if (not info.converged or info.ridge_used) and np.max(
        np.abs(beta)
    ) > SEPARATION_BOUND:
        sep = True
        warnings.warn(
            "logistic coefficients diverged; the classes may be separable",
            SeparationWarning,
            stacklevel=2,
        )
    p = expit(X.values @ beta)
    wt = w * p * (1.0 - p)
    fisher = X.values.T @ (X.values * wt[:, None])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        try:
            cov = scipy.linalg.inv(fisher)
        except scipy.linalg.LinAlgError:
            cov = scipy.linalg.inv(fisher + RIDGE_EPS * np.eye(X.p))
    return FittedModel(
        family="logistic",
        labels=X.labels,
        coef=beta,
        convergence=info,
        separation_flag=sep,
        cov_unscaled=cov,
    )


# -- bagged classification trees --------------------------------------------


@dataclass(frozen=True)
class ForestParams:
    """Settings for the bagged-tree classifier."""

    n_trees: int = 500
    max_depth: int | None = None
    min_leaf: int = 5
    mtry: int | None = None
    seed: int = 0

    def resolved_mtry(self, p: int) -> int:
        if self.mtry is not None:
            if not 1 <= self.mtry <= p:
                raise EstimationError(f"mtry must be in [1, {p}]")
            return self.mtry
        return int(np.ceil(np.sqrt(p)))


def _grow_tree(
    X: np.ndarray,
    y: np.ndarray,
    rng: np.random.Generator,
    max_depth: int | None,
    min_leaf: int,
    mtry: int,
) -> dict:
    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    value: list[float] = []

    def new_node() -> int:
        feature.append(-1)
        threshold.append(np.nan)
        left.append(-1)
        right.append(-1)
        value.append(np.nan)
        return len(feature) - 1

    def grow(idx: np.ndarray, depth: int) -> int:
        node = new_node()
        y_node = y[idx]
        frac = float(y_node.mean())
        value[node] = frac
        n = idx.size
        if (
            (max_depth is not None and depth >= max_depth)
            or n < 2 * min_leaf
            or frac in (0.0, 1.0)
        ):
            return node
        parent_gini = 2.0 * frac * (1.0 - frac)
        cols = rng.choice(X.shape[1], size=mtry, replace=False)
        best = None
        for c in cols:
            x = X[idx, c]
            order = np.argsort(x, kind="stable")
            xs = x[order]
            ys = y_node[order]
            if xs[0] == xs[-1]:
                continue
            n_left = np.arange(1, n)
            s_left = np.cumsum(ys)[:-1]
            valid = (xs[:-1] != xs[1:]) & (n_left >= min_leaf) & ((n - n_left) >= min_leaf)
            if not valid.any():
                continue
            p_l = s_left / n_left
            p_r = (s_left[-1] + ys[-1] - s_left) / (n - n_left)
            score = n_left * 2.0 * p_l * (1.0 - p_l) + (n - n_left) * 2.0 * p_r * (1.0 - p_r)
            score = np.where(valid, score, np.inf)
            j = int(np.argmin(score))
            if best is None or score[j] < best[0]:
                best = (float(score[j]), int(c), float(0.5 * (xs[j] + xs[j + 1])))
        if best is None or best[0] >= n * parent_gini - 1e-12:
            return node
        _, c, thr = best
        go_left = X[idx, c] <= thr
        feature[node] = c
        threshold[node] = thr
        left[node] = grow(idx[go_left], depth + 1)
        right[node] = grow(idx[~go_left], depth + 1)
        return node

    grow(np.arange(X.shape[0]), 0)
    return {
        "feature": np.asarray(feature, dtype=np.int64),
        "threshold": np.asarray(threshold, dtype=float),
        "left": np.asarray(left, dtype=np.int64),
        "right": np.asarray(right, dtype=np.int64),
        "value": np.asarray(value, dtype=float),
    }


def _tree_predict(tree: dict, X: np.ndarray) -> np.ndarray:
    out = np.empty(X.shape[0])
    feature = tree["feature"]
    threshold = tree["threshold"]
    left = tree["left"]
    right = tree["right"]
    value = tree["value"]
    for i in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            node = left[node] if X[i, feature[node]] <= threshold[node] else right[node]
        out[i] = value[node]
    return out


def fit_forest(X: DesignMatrix, y, params: ForestParams | None = None) -> FittedModel:
    """Bag CART classification trees grown on Gini impurity.

    Each tree draws its own bootstrap resample and column subsamples
    from a substream keyed by (seed, tree index), so the ensemble is
    identical for a given seed no matter how the work is scheduled.
    Predictions average each tree's leaf positive fraction.
    """
    params = params or ForestParams()
    y, w = _check_xyw(X, y, None)
    classes = np.unique(y)
    if not np.isin(classes, (0.0, 1.0)).all():
        raise EstimationError("forest response must be 0 or 1")
    if classes.size < 2:
        raise DegenerateDataError("forest response takes a single value")
    if params.n_trees < 1:
        raise EstimationError("n_trees must be at least 1")
    if params.max_depth is not None and params.max_depth < 0:
        raise EstimationError("max_depth must be non-negative")
    if params.min_leaf < 1:
        raise EstimationError("min_leaf must be at least 1")
    mtry = params.resolved_mtry(X.p)
    vals = X.values
    trees = []
    for i in range(params.n_trees):
        rng = substream(params.seed, "tree", i)
        boot = rng.integers(0, X.n, size=X.n)
        trees.append(
            _grow_tree(vals[boot], y[boot], rng, params.max_depth, params.min_leaf, mtry)
        )
    return FittedModel(family="forest", labels=X.labels, trees=trees)


def predict(model: FittedModel, X: DesignMatrix) -> np.ndarray:
    """Predict from a fitted engine on a design with matching columns.

    Linear models return the linear predictor; logistic models return
    probabilities; forests return mean leaf positive fractions (always
    inside [0, 1]).
    """
    if tuple(X.labels) != tuple(model.labels):
        raise EstimationError(
            f"design columns {list(X.labels)} do not match the training "
            f"columns {list(model.labels)}"
        )
    if model.family == "linear":
        return X.values @ model.coef
    if model.family == "logistic":
        return expit(X.values @ model.coef)
    if model.family == "forest":
        acc = np.zeros(X.n)
        for tree in model.trees:
            acc += _tree_predict(tree, X.values)
        return acc / len(model.trees)
    raise EstimationError(f"unknown model family {model.family!r}")
