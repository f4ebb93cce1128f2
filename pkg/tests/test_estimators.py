import numpy as np
import pytest

from trialreach.dataset import CovariateSchema, make_table, stack
from trialreach.errors import (
    BootstrapError,
    DataError,
    DegenerateDataError,
    EstimationError,
)
from trialreach.estimators import (
    bootstrap_ci,
    dr_pate,
    gcomp_pate,
    ipsw_pate,
    subgroup_effects,
    tate,
    with_bootstrap,
)
from trialreach.rng import substream
from trialreach.weighting import WeightSet

from conftest import two_sided


def weightset_for(table, trial_w):
    """Align a hand-chosen trial weight vector to a stacked table."""
    w = np.zeros(table.n, dtype=float)
    w[table.s == 1] = np.asarray(trial_w, dtype=float)
    return WeightSet(
        scheme="generalizability",
        unit_ids=table.unit_ids.copy(),
        s=table.s.copy(),
        w=w,
    )


def small_study(t, y, target_x=(0.0, 1.0, 2.0)):
    n = len(t)
    return two_sided(
        {"x1": np.linspace(0.0, 1.0, n)},
        {"x1": np.asarray(target_x, dtype=float)},
        t=t,
        y=y,
    )


class TestTate:
    def test_hand_arithmetic(self):
        trial, target, both = small_study(t=[1, 1, 0, 0], y=[3.0, 5.0, 1.0, 2.0])
        est = tate(trial)
        assert est.point == pytest.approx(2.5)
        # var([3,5]) / 2 + var([1,2]) / 2 with sample variances
        assert est.se == pytest.approx(np.sqrt(2.0 / 2.0 + 0.5 / 2.0))
        z = 1.959963984540054
        assert est.ci[0] == pytest.approx(est.point - z * est.se)
        assert est.ci[1] == pytest.approx(est.point + z * est.se)
        assert est.estimand == "TATE"
        assert est.n_trial == 4

    def test_constant_arms_flag_degenerate_se(self):
        trial, _, _ = small_study(t=[1, 1, 0, 0], y=[2.0, 2.0, 1.0, 1.0])
        est = tate(trial)
        assert est.point == pytest.approx(1.0)
        assert est.se == 0.0
        assert "degenerate_se" in est.flags

    def test_single_arm_rejected(self):
        trial, _, _ = small_study(t=[1, 1, 1, 1], y=[1.0, 2.0, 3.0, 4.0])
        with pytest.raises(DegenerateDataError, match="both arms"):
            tate(trial)

    def test_missing_ty_excluded_and_flagged(self):
        trial, _, _ = small_study(
            t=[1, 1, 0, 0, np.nan], y=[3.0, 5.0, 1.0, 2.0, 9.0]
        )
        est = tate(trial)
        assert est.point == pytest.approx(2.5)
        assert est.n_excluded == 1
        assert "excluded_units_missing_t_or_y" in est.flags

    def test_works_on_stacked_table(self):
        trial, target, both = small_study(t=[1, 1, 0, 0], y=[3.0, 5.0, 1.0, 2.0])
        assert tate(both).point == tate(trial).point

    def test_one_unit_arm_has_no_se(self):
        trial, _, _ = small_study(t=[1, 0, 0], y=[3.0, 1.0, 2.0])
        est = tate(trial)
        assert est.point == pytest.approx(1.5)
        assert np.isnan(est.se)
        assert "degenerate_se" in est.flags


class TestIpsw:
    def test_equal_weights_reduce_to_tate(self):
        trial, target, both = small_study(t=[1, 1, 0, 0], y=[3.0, 5.0, 1.0, 2.0])
        est = ipsw_pate(both, weightset_for(both, [2.0] * 4))
        assert est.point == pytest.approx(tate(trial).point)
        assert est.estimand == "PATE"

    def test_scale_invariance(self):
        trial, target, both = small_study(t=[1, 1, 0, 0], y=[3.0, 5.0, 1.0, 2.0])
        w = np.array([1.0, 4.0, 2.0, 3.0])
        a = ipsw_pate(both, weightset_for(both, w))
        b = ipsw_pate(both, weightset_for(both, 2.0 * w))
        assert a.point == pytest.approx(b.point)

    def test_weighted_contrast_hand_value(self):
        trial, target, both = small_study(t=[1, 1, 0, 0], y=[3.0, 5.0, 1.0, 2.0])
        est = ipsw_pate(both, weightset_for(both, [1.0, 3.0, 1.0, 1.0]))
        m1 = (3.0 + 3 * 5.0) / 4.0
        m0 = 1.5
        assert est.point == pytest.approx(m1 - m0)

    def test_sandwich_se_closed_form(self):
        trial, target, both = small_study(t=[1, 1, 0, 0], y=[3.0, 5.0, 1.0, 2.0])
        est = ipsw_pate(both, weightset_for(both, [1.0] * 4))
        # HC0 for the saturated arm-mean regression at unit weights:
        # sum of squared arm residuals over each squared arm size
        expected = np.sqrt(2.0 / 4.0 + 0.5 / 4.0)
        assert est.se == pytest.approx(expected)

    def test_zero_weight_arm_rejected(self):
        trial, target, both = small_study(t=[1, 1, 0, 0], y=[3.0, 5.0, 1.0, 2.0])
        with pytest.raises(DegenerateDataError, match="zero total weight"):
            ipsw_pate(both, weightset_for(both, [1.0, 1.0, 0.0, 0.0]))

    def test_misaligned_weights_rejected(self):
        trial, target, both = small_study(t=[1, 1, 0, 0], y=[3.0, 5.0, 1.0, 2.0])
        ws = weightset_for(both, [1.0] * 4)
        short = WeightSet(
            scheme=ws.scheme, unit_ids=ws.unit_ids[:-1], s=ws.s[:-1], w=ws.w[:-1]
        )
        with pytest.raises(DataError, match="aligned"):
            ipsw_pate(both, short)

    def test_variance_none_flags(self):
        trial, target, both = small_study(t=[1, 1, 0, 0], y=[3.0, 5.0, 1.0, 2.0])
        est = ipsw_pate(both, weightset_for(both, [1.0] * 4), variance="none")
        assert np.isnan(est.se)
        assert "variance_not_requested" in est.flags
        with pytest.raises(EstimationError):
            ipsw_pate(both, weightset_for(both, [1.0] * 4), variance="jackknife")


def cell_study(seed=5, n_trial=80, n_target=160):
    """Two binary covariates folded into one categorical cell label."""
    rng = substream(seed, "cells")
    schema = [
        CovariateSchema(
            name="cell", kind="categorical", levels=("00", "01", "10", "11")
        )
    ]
    # cycle cells in pairs and alternate arms so every (cell, arm) is populated
    labels = ("00", "01", "10", "11")
    cells_t = np.array([labels[(i // 2) % 4] for i in range(n_trial)], dtype=object)
    t = np.tile([0, 1], n_trial // 2)
    base = {"00": 1.0, "01": 2.0, "10": -1.0, "11": 0.5}
    eff = {"00": 0.0, "01": 1.0, "10": 2.0, "11": -0.5}
    y = np.array(
        [
            base[c] + eff[c] * ti + rng.normal(0.0, 0.3)
            for c, ti in zip(cells_t, t)
        ]
    )
    cells_g = np.array(
        rng.choice(["00", "01", "10", "11"], n_target, p=[0.1, 0.2, 0.3, 0.4]),
        dtype=object,
    )
    trial = make_table(
        [f"t{i}" for i in range(n_trial)],
        schema,
        {"cell": cells_t},
        side="trial",
        t=t,
        y=y,
    )
    target = make_table(
        [f"p{i}" for i in range(n_target)],
        schema,
        {"cell": cells_g},
        side="target",
    )
    return trial, target, stack(trial, target)


def standardize_by_cell(trial, target):
    """Brute-force oracle: target-share-weighted cell contrasts."""
    tc = trial.data["cell"].to_numpy()
    t = trial.data["t"].to_numpy(dtype=float)
    y = trial.data["y"].to_numpy(dtype=float)
    gc = target.data["cell"].to_numpy()
    total = 0.0
    for cell in np.unique(gc):
        share = float(np.mean(gc == cell))
        m1 = float(y[(tc == cell) & (t == 1.0)].mean())
        m0 = float(y[(tc == cell) & (t == 0.0)].mean())
        total += share * (m1 - m0)
    return total


class TestGcomp:
    def test_saturated_model_matches_cell_standardization(self):
        trial, target, both = cell_study()
        est = gcomp_pate(both, covariates=["cell"])
        assert abs(est.point - standardize_by_cell(trial, target)) < 1e-8

    def test_intercept_only_reduces_to_tate(self):
        trial, target, both = small_study(t=[1, 1, 0, 0], y=[3.0, 5.0, 1.0, 2.0])
        est = gcomp_pate(both, covariates=[])
        assert est.point == pytest.approx(tate(trial).point)

    def test_variance_deferred_to_bootstrap(self):
        trial, target, both = cell_study()
        est = gcomp_pate(both, covariates=["cell"])
        assert np.isnan(est.se)
        assert "variance_by_bootstrap_only" in est.flags
        assert est.variance_method == "none"

    def test_binary_outcome_uses_logistic(self):
        rng = substream(8, "binary-outcome")
        n = 200
        trial, target, both = two_sided(
            {"x1": rng.normal(size=n)},
            {"x1": rng.normal(0.5, 1.0, size=400)},
            t=np.tile([0, 1], n // 2),
            y=rng.integers(0, 2, size=n).astype(float),
        )
        est = gcomp_pate(both, covariates=[])
        # intercept-only logistic standardization is the arm proportion gap
        assert est.point == pytest.approx(tate(trial).point, abs=1e-6)
        assert -1.0 <= est.point <= 1.0

    def test_requires_stacked_table(self):
        trial, target, both = small_study(t=[1, 1, 0, 0], y=[3.0, 5.0, 1.0, 2.0])
        with pytest.raises(DataError, match="stacked"):
            gcomp_pate(trial)


class TestDoublyRobust:
    def test_zero_residuals_reduce_to_gcomp(self):
        # exactly linear outcomes leave nothing for the augmentation
        n = 40
        x = np.linspace(-1.0, 1.0, n)
        t = np.tile([0, 1], n // 2)
        y = 2.0 + 3.0 * x + 1.5 * t
        trial, target, both = two_sided(
            {"x1": x}, {"x1": np.linspace(0.0, 2.0, 100)}, t=t, y=y
        )
        ws = weightset_for(both, np.linspace(1.0, 3.0, n))
        dr = dr_pate(both, ws, covariates=["x1"], family="linear")
        gc = gcomp_pate(both, covariates=["x1"], family="linear")
        assert dr.point == pytest.approx(gc.point, abs=1e-10)
        assert dr.point == pytest.approx(1.5, abs=1e-10)

    def test_equal_weight_intercept_only_augmentation_vanishes(self):
        trial, target, both = small_study(t=[1, 1, 0, 0], y=[3.0, 5.0, 1.0, 2.0])
        dr = dr_pate(both, weightset_for(both, [1.0] * 4), covariates=[])
        assert dr.point == pytest.approx(tate(trial).point, abs=1e-12)

    def test_bad_treatment_probability_rejected(self):
        trial, target, both = small_study(t=[1, 1, 0, 0], y=[3.0, 5.0, 1.0, 2.0])
        ws = weightset_for(both, [1.0] * 4)
        with pytest.raises(DegenerateDataError, match="treatment probability"):
            dr_pate(both, ws, covariates=[], e_trial=1.5)

    def test_variance_deferred_to_bootstrap(self):
        trial, target, both = small_study(t=[1, 1, 0, 0], y=[3.0, 5.0, 1.0, 2.0])
        dr = dr_pate(both, weightset_for(both, [1.0] * 4), covariates=[])
        assert np.isnan(dr.se)
        assert "variance_by_bootstrap_only" in dr.flags


def mean_outcome_procedure(trial, target):
    y = trial.data["y"].to_numpy(dtype=float)
    return float(np.nanmean(y))


def oracle_replicates(trial, target, n_replicates, seed):
    """Replay the bootstrap resampling streams outside the library."""
    y = trial.data["y"].to_numpy(dtype=float)
    pts = np.empty(n_replicates)
    for i in range(n_replicates):
        rng = substream(seed, "bootstrap", i)
        ti = rng.integers(0, trial.n, size=trial.n)
        rng.integers(0, target.n, size=target.n)
        pts[i] = float(np.nanmean(y[ti]))
    return pts


@pytest.fixture()
def boot_study():
    rng = substream(12, "boot-study")
    n = 40
    return two_sided(
        {"x1": rng.normal(size=n)},
        {"x1": rng.normal(size=60)},
        t=np.tile([0, 1], n // 2),
        y=rng.normal(1.0, 2.0, size=n),
    )


class TestBootstrap:
    def test_percentile_endpoints_are_order_statistics(self, boot_study):
        trial, target, both = boot_study
        n_reps, seed = 40, 77
        res = bootstrap_ci(mean_outcome_procedure, trial, target, n_reps, seed)
        pts = np.sort(oracle_replicates(trial, target, n_reps, seed))
        # nearest rank at alpha = 0.05: ceil(.025*40) = 1, ceil(.975*40) = 39
        assert res.ci == (pts[0], pts[38])
        assert res.se == pytest.approx(np.std(pts, ddof=1))
        assert res.n_success == n_reps and res.n_failed == 0

    def test_thread_count_does_not_change_results(self, boot_study):
        trial, target, both = boot_study
        a = bootstrap_ci(mean_outcome_procedure, trial, target, 60, 5, threads=1)
        b = bootstrap_ci(mean_outcome_procedure, trial, target, 60, 5, threads=8)
        assert a.ci == b.ci and a.se == b.se

    def test_normal_flavor_uses_replicate_sd(self, boot_study):
        trial, target, both = boot_study
        res = bootstrap_ci(
            mean_outcome_procedure,
            trial,
            target,
            50,
            9,
            flavor="normal",
            point=1.25,
        )
        z = 1.959963984540054
        assert res.ci[0] == pytest.approx(1.25 - z * res.se)
        assert res.ci[1] == pytest.approx(1.25 + z * res.se)

    def test_failures_counted_below_threshold(self, boot_study):
        trial, target, both = boot_study
        n_reps, seed = 40, 77
        pts = oracle_replicates(trial, target, n_reps, seed)
        cut = float(np.quantile(pts, 0.93))
        expected_failures = int((pts > cut).sum())
        assert 1 <= expected_failures <= 4

        def touchy(tr, tg):
            v = mean_outcome_procedure(tr, tg)
            if v > cut:
                raise EstimationError("resample mean out of bounds")
            return v

        res = bootstrap_ci(touchy, trial, target, n_reps, seed)
        assert res.n_failed == expected_failures
        assert res.n_success == n_reps - expected_failures
        assert sum(res.failure_messages.values()) == expected_failures
        assert any("EstimationError" in k for k in res.failure_messages)

    def test_excess_failures_abort(self, boot_study):
        trial, target, both = boot_study
        pts = oracle_replicates(trial, target, 40, 77)
        cut = float(np.median(pts))

        def touchy(tr, tg):
            v = mean_outcome_procedure(tr, tg)
            if v > cut:
                raise EstimationError("resample mean out of bounds")
            return v

        with pytest.raises(BootstrapError, match="replicates failed"):
            bootstrap_ci(touchy, trial, target, 40, 77)

    def test_argument_validation(self, boot_study):
        trial, target, both = boot_study
        with pytest.raises(EstimationError):
            bootstrap_ci(mean_outcome_procedure, trial, target, 1, 0)
        with pytest.raises(EstimationError):
            bootstrap_ci(mean_outcome_procedure, trial, target, 10, 0, flavor="bca")
        with pytest.raises(EstimationError):
            bootstrap_ci(
                mean_outcome_procedure, trial, target, 10, 0, flavor="normal"
            )

    def test_with_bootstrap_attaches_uncertainty(self, boot_study):
        trial, target, both = boot_study
        gc = gcomp_pate(both, covariates=["x1"])

        def proc(tr, tg):
            return gcomp_pate(stack(tr, tg), covariates=["x1"]).point

        boot = bootstrap_ci(proc, trial, target, 30, 21, point=gc.point)
        wrapped = with_bootstrap(gc, boot)
        assert wrapped.point == gc.point
        assert wrapped.se == boot.se and wrapped.ci == boot.ci
        assert wrapped.variance_method == "bootstrap_percentile"
        assert "variance_by_bootstrap_only" not in wrapped.flags

    def test_degenerate_replicates_flagged(self):
        trial, target, both = small_study(
            t=[1, 0, 1, 0], y=[2.0, 1.0, 2.0, 1.0]
        )

        def constant(tr, tg):
            return 3.25

        boot = bootstrap_ci(constant, trial, target, 20, 4)
        assert boot.se == 0.0
        est = with_bootstrap(tate(trial), boot)
        assert "degenerate_se" in est.flags


class TestSubgroups:
    def make_trial(self):
        schema = [
            CovariateSchema(
                name="site", kind="categorical", levels=("a", "b")
            ),
            CovariateSchema(name="age", kind="continuous"),
            CovariateSchema(name="flag", kind="binary"),
        ]
        t = [1, 0, 1, 0, 1, 0, 1, 0]
        y = [4.0, 1.0, 5.0, 2.0, 1.0, 1.0, 2.0, 0.0]
        site = np.array(["a", "a", "a", "a", "b", "b", "b", "b"], dtype=object)
        age = np.array([30.0, 35.0, 40.0, 45.0, 50.0, 55.0, 60.0, 65.0])
        flag = np.array([0, 0, 0, 0, 1, 1, 1, 1], dtype=float)
        return make_table(
            [f"t{i}" for i in range(8)],
            schema,
            {"site": site, "age": age, "flag": flag},
            side="trial",
            t=t,
            y=y,
        )

    def test_categorical_levels_hand_values(self):
        out = subgroup_effects(self.make_trial(), "site")
        assert [r["stratum"] for r in out.rows] == ["a", "b"]
        assert out.rows[0]["point"] == pytest.approx(4.5 - 1.5)
        assert out.rows[1]["point"] == pytest.approx(1.5 - 0.5)
        assert "range" in out.heterogeneity_note

    def test_binary_strata(self):
        out = subgroup_effects(self.make_trial(), "flag")
        assert [r["stratum"] for r in out.rows] == ["flag=0", "flag=1"]
        assert out.rows[0]["n_treated"] == 2 and out.rows[0]["n_control"] == 2

    def test_quantile_bins_partition_trial(self):
        out = subgroup_effects(self.make_trial(), "age", n_bins=2)
        assert len(out.rows) == 2
        counts = [r["n_treated"] + r["n_control"] for r in out.rows]
        assert sum(counts) == 8
        assert out.rows[0]["point"] == pytest.approx(4.5 - 1.5)
        assert out.rows[1]["point"] == pytest.approx(1.5 - 0.5)

    def test_empty_arm_kept_as_flagged_row(self):
        schema = [
            CovariateSchema(name="site", kind="categorical", levels=("a", "b"))
        ]
        trial = make_table(
            ["t0", "t1", "t2", "t3"],
            schema,
            {"site": np.array(["a", "a", "b", "b"], dtype=object)},
            side="trial",
            t=[1, 0, 1, 1],
            y=[2.0, 1.0, 3.0, 4.0],
        )
        out = subgroup_effects(trial, "site")
        b_row = out.rows[1]
        assert b_row["flags"] == ["empty_arm"]
        assert np.isnan(b_row["point"])
        assert out.heterogeneity_note.startswith("too few")

    def test_min_bins_enforced(self):
        with pytest.raises(EstimationError):
            subgroup_effects(self.make_trial(), "age", n_bins=1)
