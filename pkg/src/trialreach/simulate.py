"""Synthetic trial/target generator with a known translated effect.

The target sample is drawn directly from the declared covariate
distributions, so it represents the target population exactly. Trial
units are drawn from the same population and kept with probability
given by a logistic selection model, which induces the covariate shift
between the sides. Treatment is randomized fairly within the trial and
the outcome is linear with an additive, covariate-modified effect, so
the population-averaged effect has the closed form

    baseline + sum_j modifier_j * E[X_j].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .dataset import CovariateSchema, StudyTable, make_table
from .errors import DgpError
from .rng import substream

MAX_REJECTION_BATCHES = 200
MIN_TRIAL_UNITS = 50


@dataclass(frozen=True)
class CovariateSpec:
    """One generated covariate: normal(mean, sd) or bernoulli(p)."""

    name: str
    dist: str
    mean: float = 0.0
    sd: float = 1.0

    def __post_init__(self):
        if self.dist not in ("normal", "bernoulli"):
            raise DgpError(f"unknown covariate distribution {self.dist!r}")
        if self.dist == "normal" and self.sd <= 0.0:
            raise DgpError(f"covariate {self.name!r}: sd must be positive")
        if self.dist == "bernoulli" and not 0.0 < self.mean < 1.0:
            raise DgpError(
                f"covariate {self.name!r}: bernoulli mean must be inside (0, 1)"
            )

    @property
    def expectation(self) -> float:
        return self.mean


@dataclass(frozen=True)
class DgpSpec:
    """Full synthetic study specification.

    ``selection`` maps covariate names to logit coefficients for trial
    membership (plus ``selection_intercept``); ``outcome`` maps names
    to linear outcome coefficients; ``modifiers`` maps names to
    treatment-effect modification coefficients. ``missingness`` is
    optional: {"mechanism": "mcar"|"mar", "rate": r, "vars": [...],
    "driver": name (mar only)}.
    """

    n_trial: int
    n_target: int
    covariates: tuple[CovariateSpec, ...]
    selection_intercept: float = 0.0
    selection: dict = field(default_factory=dict)
    outcome_intercept: float = 0.0
    outcome: dict = field(default_factory=dict)
    effect_baseline: float = 0.0
    modifiers: dict = field(default_factory=dict)
    noise_sd: float = 1.0
    missingness: dict | None = None

    def __post_init__(self):
        if self.n_trial < 1 or self.n_target < 1:
            raise DgpError("sample sizes must be positive")
        names = [c.name for c in self.covariates]
        if len(set(names)) != len(names):
            raise DgpError("duplicate covariate names in the specification")
        for source, label in (
            (self.selection, "selection"),
            (self.outcome, "outcome"),
            (self.modifiers, "modifiers"),
        ):
            for key in source:
                if key not in names:
                    raise DgpError(f"{label} references unknown covariate {key!r}")
        if self.noise_sd < 0.0:
            raise DgpError("noise_sd must be non-negative")
        if self.missingness is not None:
            mech = self.missingness.get("mechanism")
            if mech not in ("mcar", "mar"):
                raise DgpError(f"unknown missingness mechanism {mech!r}")
            allowed = {"mechanism", "rate", "vars", "driver"}
            extra = set(self.missingness) - allowed
            if extra:
                raise DgpError(
                    f"unknown missingness keys {sorted(extra)}; allowed: "
                    f"{sorted(allowed)}"
                )
            rate = float(self.missingness.get("rate", 0.0))
            if not 0.0 <= rate < 1.0:
                raise DgpError("missingness rate must be in [0, 1)")
            targets = self.missingness.get("vars", [])
            if not targets:
                raise DgpError(
                    "a missingness mechanism needs a non-empty 'vars' list"
                )
            for v in targets:
                if v not in names:
                    raise DgpError(f"missingness references unknown covariate {v!r}")
            if mech == "mar":
                driver = self.missingness.get("driver")
                if driver not in names:
                    raise DgpError("mar missingness needs an existing driver covariate")
                if driver in self.missingness.get("vars", []):
                    raise DgpError("the mar driver cannot itself go missing")

    @property
    def true_pate(self) -> float:
        """Closed-form population-averaged effect."""
        total = self.effect_baseline
        means = {c.name: c.expectation for c in self.covariates}
        for name, coef in self.modifiers.items():
            total += coef * means[name]
        return float(total)

    def to_dict(self) -> dict:
        return {
            "n_trial": self.n_trial,
            "n_target": self.n_target,
            "covariates": [
                {"name": c.name, "dist": c.dist, "mean": c.mean, "sd": c.sd}
                for c in self.covariates
            ],
            "selection_intercept": self.selection_intercept,
            "selection": dict(self.selection),
            "outcome_intercept": self.outcome_intercept,
            "outcome": dict(self.outcome),
            "effect_baseline": self.effect_baseline,
            "modifiers": dict(self.modifiers),
            "noise_sd": self.noise_sd,
            "missingness": dict(self.missingness) if self.missingness else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DgpSpec":
        covs = tuple(
            CovariateSpec(
                name=c["name"],
                dist=c["dist"],
                mean=float(c.get("mean", 0.0)),
                sd=float(c.get("sd", 1.0)),
            )
            for c in d["covariates"]
        )
        return cls(
            n_trial=int(d["n_trial"]),
            n_target=int(d["n_target"]),
            covariates=covs,
            selection_intercept=float(d.get("selection_intercept", 0.0)),
            selection={k: float(v) for k, v in d.get("selection", {}).items()},
            outcome_intercept=float(d.get("outcome_intercept", 0.0)),
            outcome={k: float(v) for k, v in d.get("outcome", {}).items()},
            effect_baseline=float(d.get("effect_baseline", 0.0)),
            modifiers={k: float(v) for k, v in d.get("modifiers", {}).items()},
            noise_sd=float(d.get("noise_sd", 1.0)),
            missingness=d.get("missingness"),
        )


def _draw_covariates(spec: DgpSpec, n: int, rng: np.random.Generator) -> dict:
    out = {}
    for c in spec.covariates:
        if c.dist == "normal":
            out[c.name] = rng.normal(c.mean, c.sd, size=n)
        else:
            out[c.name] = (rng.random(n) < c.mean).astype(float)
    return out


def _linear_term(cov: dict, coefs: dict, intercept: float, n: int) -> np.ndarray:
    total = np.full(n, intercept, dtype=float)
    for name, coef in coefs.items():
        total += coef * cov[name]
    return total


def _schema_for(spec: DgpSpec) -> list[CovariateSchema]:
    return [
        CovariateSchema(
            name=c.name,
            kind="continuous" if c.dist == "normal" else "binary",
            is_effect_modifier_candidate=(c.name in spec.modifiers),
        )
        for c in spec.covariates
    ]


def _apply_missingness(
    cov: dict, spec: DgpSpec, rng: np.random.Generator, n: int
) -> None:
    miss = spec.missingness
    if miss is None:
        return
    rate = float(miss.get("rate", 0.0))
    if rate == 0.0:
        return
    for name in miss.get("vars", []):
        if miss["mechanism"] == "mcar":
            mask = rng.random(n) < rate
        else:
            driver = cov[miss["driver"]]
            ranks = np.argsort(np.argsort(driver, kind="stable"), kind="stable")
            prob = 2.0 * rate * (ranks + 0.5) / n
            mask = rng.random(n) < np.clip(prob, 0.0, 1.0)
        col = cov[name].astype(float).copy()
        col[mask] = np.nan
        cov[name] = col


def generate_synthetic(
    spec: DgpSpec, seed: int
) -> tuple[StudyTable, StudyTable, float]:
    """Draw (trial, target, true_pate) for a specification.

    Target units are iid draws from the covariate distributions. Trial
    candidates are drawn from the same distributions and accepted with
    the logistic selection probability until n_trial accumulate; if the
    selection model admits units too rarely to get there (fewer than 50
    acceptances expected within the attempt budget), generation errors
    and suggests larger sizes or a weaker selection model.
    """
    schema = _schema_for(spec)

    rng_target = substream(seed, "dgp-target")
    cov_target = _draw_covariates(spec, spec.n_target, rng_target)

    rng_trial = substream(seed, "dgp-trial")
    accepted: dict[str, list[np.ndarray]] = {c.name: [] for c in spec.covariates}
    n_accepted = 0
    batch = max(spec.n_trial, 1000)
    for attempt in range(MAX_REJECTION_BATCHES):
        cand = _draw_covariates(spec, batch, rng_trial)
        logit = _linear_term(cand, spec.selection, spec.selection_intercept, batch)
        keep = rng_trial.random(batch) < expit(logit)
        n_keep = int(keep.sum())
        if n_keep:
            for name in accepted:
                accepted[name].append(cand[name][keep])
            n_accepted += n_keep
        if n_accepted >= max(MIN_TRIAL_UNITS, spec.n_trial):
            break
    else:
        raise DgpError(
            f"selection model admitted only {n_accepted} trial units within "
            f"the attempt budget (need {max(MIN_TRIAL_UNITS, spec.n_trial)}); "
            "increase the sizes or weaken the selection model"
        )
    cov_trial = {
        name: np.concatenate(parts)[: spec.n_trial] for name, parts in accepted.items()
    }

    rng_outcome = substream(seed, "dgp-outcome")
    t = (rng_outcome.random(spec.n_trial) < 0.5).astype(float)
    base = _linear_term(cov_trial, spec.outcome, spec.outcome_intercept, spec.n_trial)
    effect = _linear_term(cov_trial, spec.modifiers, spec.effect_baseline, spec.n_trial)
    noise = (
        rng_outcome.normal(0.0, spec.noise_sd, size=spec.n_trial)
        if spec.noise_sd > 0.0
        else np.zeros(spec.n_trial)
    )
    y = base + t * effect + noise

    rng_missing = substream(seed, "dgp-missingness")
    _apply_missingness(cov_trial, spec, rng_missing, spec.n_trial)
    _apply_missingness(cov_target, spec, rng_missing, spec.n_target)

    width_t = len(str(spec.n_trial))
    width_g = len(str(spec.n_target))
    trial = make_table(
        [f"t{i + 1:0{width_t}d}" for i in range(spec.n_trial)],
        schema,
        cov_trial,
        side="trial",
        t=t,
        y=y,
        provenance={"source": "synthetic", "seed": seed},
    )
    target = make_table(
        [f"p{i + 1:0{width_g}d}" for i in range(spec.n_target)],
        schema,
        cov_target,
        side="target",
        provenance={"source": "synthetic", "seed": seed},
    )
    return trial, target, spec.true_pate
