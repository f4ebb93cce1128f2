"""Shared builders for the test suite.

Most tests construct their own tiny tables inline; the helpers here
cover the recurring shapes (a simple continuous schema, a stacked
synthetic study) so the oracle arithmetic stays visible in the tests
themselves.
"""

import numpy as np
import pytest

from trialreach.dataset import CovariateSchema, make_table, stack
from trialreach.simulate import CovariateSpec, DgpSpec, generate_synthetic


def simple_schema(names=("x1", "x2")):
    return [CovariateSchema(name=n, kind="continuous") for n in names]


def two_sided(
    trial_cov: dict,
    target_cov: dict,
    t,
    y,
    schema=None,
):
    """Build (trial, target, stacked) tables from plain arrays."""
    names = list(trial_cov)
    if schema is None:
        schema = simple_schema(names)
    n_t = len(next(iter(trial_cov.values())))
    n_g = len(next(iter(target_cov.values())))
    trial = make_table(
        [f"t{i}" for i in range(n_t)],
        schema,
        {k: np.asarray(v, dtype=float) for k, v in trial_cov.items()},
        side="trial",
        t=np.asarray(t, dtype=float),
        y=np.asarray(y, dtype=float),
    )
    target = make_table(
        [f"g{i}" for i in range(n_g)],
        schema,
        {k: np.asarray(v, dtype=float) for k, v in target_cov.items()},
        side="target",
    )
    return trial, target, stack(trial, target)


# A covariate-shift study with one effect modifier. true_pate is exact:
# 1.0 + 0.5 * E[x1] = 1.5.
SHIFT_SPEC = DgpSpec(
    n_trial=400,
    n_target=2500,
    covariates=(
        CovariateSpec(name="x1", dist="normal", mean=1.0, sd=1.0),
        CovariateSpec(name="x2", dist="normal", mean=0.0, sd=1.0),
    ),
    selection_intercept=-1.0,
    selection={"x1": -0.8, "x2": 0.4},
    outcome_intercept=0.5,
    outcome={"x1": 1.0, "x2": -0.5},
    effect_baseline=1.0,
    modifiers={"x1": 0.5},
    noise_sd=1.0,
)


@pytest.fixture(scope="session")
def shift_study():
    trial, target, true_pate = generate_synthetic(SHIFT_SPEC, seed=61)
    return trial, target, stack(trial, target), true_pate
