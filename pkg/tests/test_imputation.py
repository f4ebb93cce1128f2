import numpy as np
import pandas as pd
import pytest

from trialreach.dataset import CovariateSchema, StudyTable, make_table, stack
from trialreach.errors import DataError, EstimationError, ImputationError
from trialreach.estimators import ipsw_pate, tate
from trialreach.imputation import (
    MiceSettings,
    average_scores,
    mi_boot,
    mice,
    psi_across,
    psi_within,
    rubin_pool,
)
from trialreach.rng import substream
from trialreach.weighting import estimate_sampling_score, make_weights

from test_weighting import fit_with_ps

FAST = MiceSettings(m=3, iterations=3)


def mask_cells(table, name, rows):
    """Blank chosen cells of one covariate, keeping everything else."""
    df = table.data.copy()
    df.loc[df.index[rows], name] = np.nan
    return StudyTable(df, table.schema, table.side, dict(table.provenance))


def shifted_study(seed, n_trial=100, n_target=200, binary=False, categorical=False):
    rng = substream(seed, "mi-study")
    schema = [
        CovariateSchema(name="x1", kind="continuous"),
        CovariateSchema(name="x2", kind="continuous"),
    ]
    cols_t = {
        "x1": rng.normal(1.0, 1.0, n_trial),
        "x2": rng.normal(0.0, 1.0, n_trial),
    }
    cols_g = {
        "x1": rng.normal(0.0, 1.0, n_target),
        "x2": rng.normal(0.0, 1.0, n_target),
    }
    if binary:
        schema.append(CovariateSchema(name="b1", kind="binary"))
        cols_t["b1"] = rng.integers(0, 2, n_trial).astype(float)
        cols_g["b1"] = rng.integers(0, 2, n_target).astype(float)
    if categorical:
        schema.append(
            CovariateSchema(name="grp", kind="categorical", levels=("a", "b", "c"))
        )
        cols_t["grp"] = np.array(
            rng.choice(["a", "b", "c"], n_trial), dtype=object
        )
        cols_g["grp"] = np.array(
            rng.choice(["a", "b", "c"], n_target), dtype=object
        )
    t = np.tile([0, 1], n_trial // 2)
    y = (
        0.5
        + 1.0 * cols_t["x1"]
        + (1.0 + 0.5 * cols_t["x1"]) * t
        + rng.normal(0.0, 1.0, n_trial)
    )
    trial = make_table(
        [f"t{i}" for i in range(n_trial)], schema, cols_t, side="trial", t=t, y=y
    )
    target = make_table(
        [f"p{i}" for i in range(n_target)], schema, cols_g, side="target"
    )
    return stack(trial, target)


class TestMice:
    def test_observed_cells_untouched(self):
        both = shifted_study(1)
        rows = substream(1, "mask").choice(both.n, size=60, replace=False)
        masked = mask_cells(both, "x1", rows)
        original = masked.data["x1"].to_numpy(dtype=float)
        observed = ~np.isnan(original)
        imps = mice(masked, FAST, seed=3)
        assert len(imps.tables) == 3
        for tbl in imps.tables:
            filled = tbl.data["x1"].to_numpy(dtype=float)
            assert np.array_equal(filled[observed], original[observed])
            assert not np.isnan(filled).any()

    def test_pmm_draws_from_observed_values(self):
        both = shifted_study(2)
        rows = substream(2, "mask").choice(both.n, size=60, replace=False)
        masked = mask_cells(both, "x1", rows)
        observed_values = masked.data["x1"].dropna().to_numpy(dtype=float)
        imps = mice(masked, FAST, seed=5)
        miss = masked.data["x1"].isna().to_numpy()
        for tbl in imps.tables:
            imputed = tbl.data["x1"].to_numpy(dtype=float)[miss]
            assert np.isin(imputed, observed_values).all()

    def test_binary_and_categorical_stay_in_domain(self):
        both = shifted_study(3, binary=True, categorical=True)
        rng = substream(3, "mask")
        masked = mask_cells(both, "b1", rng.choice(both.n, 50, replace=False))
        masked = mask_cells(masked, "grp", rng.choice(both.n, 50, replace=False))
        imps = mice(masked, FAST, seed=7)
        miss_b = masked.data["b1"].isna().to_numpy()
        miss_g = masked.data["grp"].isna().to_numpy()
        for tbl in imps.tables:
            b = tbl.data["b1"].to_numpy(dtype=float)[miss_b]
            assert np.isin(b, (0.0, 1.0)).all()
            g = tbl.data["grp"].to_numpy(dtype=object)[miss_g]
            assert set(g) <= {"a", "b", "c"}

    def test_no_missing_gives_identical_copies(self):
        both = shifted_study(4)
        imps = mice(both, FAST, seed=1)
        for tbl in imps.tables:
            pd.testing.assert_frame_equal(tbl.data, both.data)
        assert imps.methods == {}

    def test_same_seed_reproduces_exactly(self):
        both = shifted_study(5)
        masked = mask_cells(
            both, "x1", substream(5, "mask").choice(both.n, 60, replace=False)
        )
        a = mice(masked, FAST, seed=11)
        b = mice(masked, FAST, seed=11)
        for ta, tb in zip(a.tables, b.tables):
            pd.testing.assert_frame_equal(ta.data, tb.data)

    def test_mean_recovery_under_mcar(self):
        both = shifted_study(6, n_trial=150, n_target=350)
        full_mean = float(both.data["x1"].mean())
        rows = substream(6, "mask").choice(both.n, size=150, replace=False)
        masked = mask_cells(both, "x1", rows)
        imps = mice(masked, MiceSettings(m=5, iterations=5), seed=13)
        completed_means = [float(t.data["x1"].mean()) for t in imps.tables]
        assert abs(np.mean(completed_means) - full_mean) < 0.1

    def test_target_rows_keep_structural_missingness(self):
        both = shifted_study(7)
        masked = mask_cells(
            both, "x1", substream(7, "mask").choice(both.n, 60, replace=False)
        )
        imps = mice(masked, FAST, seed=2)
        for tbl in imps.tables:
            target_rows = tbl.s == 0
            assert tbl.data.loc[target_rows, "t"].isna().all()
            assert tbl.data.loc[target_rows, "y"].isna().all()

    def test_diagnostics_trace_shape(self):
        both = shifted_study(8)
        masked = mask_cells(
            both, "x1", substream(8, "mask").choice(both.n, 60, replace=False)
        )
        imps = mice(masked, FAST, seed=4)
        assert len(imps.diagnostics["chain_means"]) == 3
        for trace in imps.diagnostics["chain_means"]:
            assert set(trace) == {"x1"}
            assert len(trace["x1"]) == FAST.iterations

    def test_m_below_two_rejected(self):
        both = shifted_study(9)
        with pytest.raises(ImputationError, match="at least 2"):
            mice(both, MiceSettings(m=1), seed=0)

    def test_too_few_observed_cells_rejected(self):
        both = shifted_study(10, n_trial=20, n_target=10)
        masked = mask_cells(both, "x1", np.arange(both.n - 19))
        with pytest.raises(ImputationError, match="x1"):
            mice(masked, FAST, seed=0)

    def test_constant_observed_covariate_rejected(self):
        both = shifted_study(11)
        df = both.data.copy()
        df["x2"] = 1.0
        df.loc[df.index[:30], "x2"] = np.nan
        constant = StudyTable(df, both.schema, both.side, dict(both.provenance))
        with pytest.raises(ImputationError, match="constant"):
            mice(constant, FAST, seed=0)

    def test_missing_trial_outcome_rejected(self):
        both = shifted_study(12)
        df = both.data.copy()
        trial_pos = np.flatnonzero(df["s"].to_numpy() == 1)
        df.loc[df.index[trial_pos[0]], "y"] = np.nan
        broken = StudyTable(df, both.schema, both.side, dict(both.provenance))
        with pytest.raises(ImputationError, match="never imputed"):
            mice(broken, FAST, seed=0)

    def test_stacked_table_required(self):
        schema = [CovariateSchema(name="x1", kind="continuous")]
        trial = make_table(
            ["t0", "t1"],
            schema,
            {"x1": np.array([0.0, 1.0])},
            side="trial",
            t=[0, 1],
            y=[0.0, 1.0],
        )
        with pytest.raises(DataError, match="stacked"):
            mice(trial, FAST, seed=0)

    def test_method_override_validated(self):
        both = shifted_study(13)
        masked = mask_cells(
            both, "x1", substream(13, "mask").choice(both.n, 60, replace=False)
        )
        with pytest.raises(ImputationError, match="not valid"):
            mice(masked, MiceSettings(m=2, methods={"x1": "logistic"}), seed=0)
        norm_based = mice(
            masked, MiceSettings(m=2, iterations=2, methods={"x1": "norm"}), seed=0
        )
        assert norm_based.methods == {"x1": "norm"}


class TestRubinPool:
    def test_two_imputation_hand_values(self):
        pooled = rubin_pool([1.0, 2.0], [0.5, 0.5])
        assert pooled.point == pytest.approx(1.5)
        assert pooled.within == pytest.approx(0.5)
        assert pooled.between == pytest.approx(0.5)
        assert pooled.total == pytest.approx(0.5 + 1.5 * 0.5)
        assert pooled.df == pytest.approx((1.0 + 0.5 / 0.75) ** 2)

    def test_three_imputation_hand_values(self):
        pooled = rubin_pool([0.0, 1.0, 2.0], [1.0, 1.0, 1.0])
        assert pooled.point == pytest.approx(1.0)
        assert pooled.within == pytest.approx(1.0)
        assert pooled.between == pytest.approx(1.0)
        assert pooled.total == pytest.approx(1.0 + 4.0 / 3.0)
        assert pooled.df == pytest.approx(2.0 * (1.0 + 1.0 / (4.0 / 3.0)) ** 2)

    def test_no_between_variance_degenerates_to_normal(self):
        pooled = rubin_pool([2.0, 2.0], [0.64, 0.36])
        assert pooled.between == 0.0
        assert pooled.total == pytest.approx(pooled.within)
        assert pooled.df == float("inf")
        half = 1.959963984540054 * np.sqrt(0.5)
        assert pooled.ci[0] == pytest.approx(2.0 - half)
        assert pooled.ci[1] == pytest.approx(2.0 + half)

    def test_total_never_below_within(self):
        rng = substream(0, "pool-prop")
        for _ in range(30):
            m = int(rng.integers(2, 8))
            pts = rng.normal(size=m)
            vs = rng.uniform(0.1, 2.0, size=m)
            pooled = rubin_pool(pts, vs)
            assert pooled.total >= pooled.within

    def test_input_validation(self):
        with pytest.raises(EstimationError):
            rubin_pool([1.0], [1.0])
        with pytest.raises(EstimationError):
            rubin_pool([1.0, 2.0], [1.0])
        with pytest.raises(EstimationError):
            rubin_pool([1.0, np.nan], [1.0, 1.0])


def ipsw_analysis(tbl):
    fit = estimate_sampling_score(tbl, "generalizability")
    return ipsw_pate(tbl, make_weights(fit))


class TestPsiWithin:
    def test_identical_imputations_collapse_to_single_analysis(self):
        both = shifted_study(20)
        imps = mice(both, FAST, seed=1)  # no missing cells: M copies
        pooled = psi_within(imps, ipsw_analysis)
        single = ipsw_analysis(both)
        assert pooled.point == pytest.approx(single.point)
        # identical points leave only float residue in the between term
        assert pooled.between == pytest.approx(0.0, abs=1e-20)
        assert pooled.within == pytest.approx(single.se**2)
        assert pooled.total == pytest.approx(pooled.within)

    def test_pooled_point_averages_imputations(self):
        both = shifted_study(21)
        masked = mask_cells(
            both, "x1", substream(21, "mask").choice(both.n, 80, replace=False)
        )
        imps = mice(masked, FAST, seed=9)
        pooled = psi_within(imps, ipsw_analysis)
        points = [ipsw_analysis(t).point for t in imps.tables]
        assert pooled.point == pytest.approx(float(np.mean(points)))
        assert pooled.m == 3
        assert pooled.total >= pooled.within

    def test_missing_variance_is_an_error(self):
        from trialreach.estimators import gcomp_pate

        both = shifted_study(22)
        imps = mice(both, FAST, seed=1)
        with pytest.raises(ImputationError, match="imputation 1"):
            psi_within(imps, lambda tbl: gcomp_pate(tbl))

    def test_analysis_failure_names_the_imputation(self):
        both = shifted_study(23)
        imps = mice(both, FAST, seed=1)

        def broken(tbl):
            raise EstimationError("synthetic failure")

        with pytest.raises(ImputationError, match="imputation 1 of 3"):
            psi_within(imps, broken)


class TestPsiAcross:
    def test_scores_average_unit_wise(self):
        a = fit_with_ps([0.2, 0.4], [0.6])
        b = fit_with_ps([0.4, 0.8], [0.2])
        avg = average_scores([a, b])
        np.testing.assert_allclose(avg.ps, [0.3, 0.6, 0.4])
        assert "averaged over 2 imputations" in avg.estimation_population

    def test_misaligned_fits_rejected(self):
        a = fit_with_ps([0.2, 0.4], [0.6])
        b = fit_with_ps([0.4, 0.8], [0.2, 0.3])
        with pytest.raises(DataError, match="aligned"):
            average_scores([a, b])

    def test_no_missing_matches_single_analysis(self):
        both = shifted_study(24)
        imps = mice(both, FAST, seed=1)
        est = psi_across(
            imps,
            lambda tbl: estimate_sampling_score(tbl, "generalizability"),
            lambda tbl, fit: ipsw_pate(tbl, make_weights(fit)),
        )
        assert est.point == pytest.approx(ipsw_analysis(both).point)

    def test_tracks_psi_within_under_mcar(self):
        both = shifted_study(25, n_trial=150, n_target=350)
        masked = mask_cells(
            both, "x1", substream(25, "mask").choice(both.n, 150, replace=False)
        )
        imps = mice(masked, MiceSettings(m=5, iterations=4), seed=17)
        within = psi_within(imps, ipsw_analysis)
        across = psi_across(
            imps,
            lambda tbl: estimate_sampling_score(tbl, "generalizability"),
            lambda tbl, fit: ipsw_pate(tbl, make_weights(fit)),
        )
        assert abs(across.point - within.point) < 0.15


class TestMiBoot:
    def analysis(self, tbl):
        return ipsw_pate(
            tbl,
            make_weights(estimate_sampling_score(tbl, "generalizability")),
            variance="none",
        ).point

    def test_no_missing_point_is_plain_analysis(self):
        both = shifted_study(30, n_trial=60, n_target=120)
        settings = MiceSettings(m=2, iterations=2)
        est = mi_boot(both, settings, self.analysis, n_replicates=20, seed=31)
        assert est.point == pytest.approx(self.analysis(both))
        assert est.method == "mi_boot"
        assert est.ci[0] <= est.point <= est.ci[1]

    def test_same_seed_and_threads_reproduce(self):
        both = shifted_study(31, n_trial=60, n_target=120)
        masked = mask_cells(
            both, "x1", substream(31, "mask").choice(both.n, 50, replace=False)
        )
        settings = MiceSettings(m=2, iterations=2)
        a = mi_boot(masked, settings, self.analysis, 20, seed=5, threads=1)
        b = mi_boot(masked, settings, self.analysis, 20, seed=5, threads=4)
        assert a.point == b.point and a.se == b.se and a.ci == b.ci

    def test_constant_outcome_flags_degenerate_se(self):
        rng = substream(32, "flat")
        n = 40
        schema = [CovariateSchema(name="x1", kind="continuous")]
        trial = make_table(
            [f"t{i}" for i in range(n)],
            schema,
            {"x1": rng.normal(size=n)},
            side="trial",
            t=np.tile([0, 1], n // 2),
            y=np.full(n, 2.0),
        )
        target = make_table(
            [f"p{i}" for i in range(80)],
            schema,
            {"x1": rng.normal(size=80)},
            side="target",
        )
        both = stack(trial, target)
        est = mi_boot(
            both,
            MiceSettings(m=2, iterations=2),
            lambda tbl: tate(tbl).point,
            n_replicates=15,
            seed=3,
        )
        assert est.se == 0.0
        assert "degenerate_se" in est.flags

    def test_replicate_floor(self):
        both = shifted_study(33, n_trial=60, n_target=120)
        with pytest.raises(EstimationError):
            mi_boot(both, MiceSettings(m=2), self.analysis, n_replicates=1, seed=0)
