import numpy as np
import pytest

from trialreach.dataset import CovariateSchema, make_table, stack
from trialreach.errors import DataError, DegenerateDataError
from trialreach.rng import substream
from trialreach.similarity import (
    bhattacharyya_coefficient,
    classify_overlap,
    silverman_bandwidth,
    similarity_report,
    smd,
    standardized_delta_p,
    tipton_index,
)
from trialreach.weighting import estimate_sampling_score, make_weights

from conftest import two_sided
from test_weighting import fit_with_ps


class TestSmd:
    def test_unit_shift_unit_variance(self):
        trial = [0.0, 1.0, 2.0]  # mean 1, sample variance 1
        target = [-1.0, 0.0, 1.0]  # mean 0, sample variance 1
        assert smd(trial, target, "continuous") == pytest.approx(1.0)

    def test_identical_samples(self):
        x = [1.0, 4.0, 2.0, 8.0]
        assert smd(x, x, "continuous") == pytest.approx(0.0)

    def test_binary_uses_proportion_variance(self):
        trial = [1] * 7 + [0] * 3
        target = [1] * 5 + [0] * 5
        expected = 0.2 / np.sqrt((0.7 * 0.3 + 0.5 * 0.5) / 2.0)
        assert smd(trial, target, "binary") == pytest.approx(expected)

    def test_antisymmetric(self):
        a = [0.0, 1.0, 3.0]
        b = [2.0, 2.5, 4.0]
        assert smd(a, b, "continuous") == pytest.approx(-smd(b, a, "continuous"))

    def test_weights_can_restore_balance(self):
        trial = [0.0, 0.0, 1.0, 1.0]
        target = [1.0, 1.0, 1.0, 0.0]
        unweighted = smd(trial, target, "binary")
        assert abs(unweighted) > 0.1
        balanced = smd(trial, target, "binary", trial_weights=[1.0, 1.0, 3.0, 3.0])
        assert balanced == pytest.approx(0.0)

    def test_zero_pooled_variance_is_nan(self):
        assert np.isnan(smd([5.0, 5.0, 5.0], [5.0, 5.0], "continuous"))

    def test_missing_values_dropped(self):
        with_nan = smd([1.0, 2.0, np.nan], [0.0, 1.0], "continuous")
        without = smd([1.0, 2.0], [0.0, 1.0], "continuous")
        assert with_nan == pytest.approx(without)

    def test_categorical_per_level(self):
        trial = ["a", "b", "b", "c"]
        target = ["a", "a", "b", "c"]
        out = smd(trial, target, "categorical", levels=("a", "b", "c"))
        assert set(out) == {"b", "c"}
        expected_b = 0.25 / np.sqrt((0.5 * 0.5 + 0.25 * 0.75) / 2.0)
        assert out["b"] == pytest.approx(expected_b)
        assert out["c"] == pytest.approx(0.0)

    def test_categorical_requires_levels(self):
        with pytest.raises(DataError):
            smd(["a", "b"], ["a", "b"], "categorical")

    def test_too_few_observed(self):
        with pytest.raises(DegenerateDataError):
            smd([1.0], [0.0, 1.0], "continuous")


class TestStandardizedDeltaP:
    def test_hand_value(self):
        # means 0.6 vs 0.4, each side sample variance 0.02
        fit = fit_with_ps([0.5, 0.7], [0.3, 0.5])
        assert standardized_delta_p(fit) == pytest.approx(0.2 / np.sqrt(0.02))

    def test_identical_distributions(self):
        fit = fit_with_ps([0.4, 0.6], [0.4, 0.6])
        assert standardized_delta_p(fit) == pytest.approx(0.0)

    def test_point_masses_are_undefined(self):
        fit = fit_with_ps([0.5, 0.5], [0.5, 0.5])
        assert np.isnan(standardized_delta_p(fit))


class TestBandwidth:
    def test_constant_sample(self):
        assert silverman_bandwidth(np.array([3.0, 3.0, 3.0])) == 0.0

    def test_zero_iqr_falls_back_to_sd(self):
        x = np.array([0.0, 0.0, 0.0, 0.0, 10.0])
        expected = 0.9 * np.std(x, ddof=1) * 5 ** (-0.2)
        assert silverman_bandwidth(x) == pytest.approx(expected)

    def test_robust_scale_wins_under_outliers(self):
        x = np.array([0.0, 1.0, 2.0, 3.0, 1000.0])
        q75, q25 = np.percentile(x, [75, 25])
        assert silverman_bandwidth(x) == pytest.approx(
            0.9 * (q75 - q25) / 1.34 * 5 ** (-0.2)
        )


class TestBhattacharyya:
    def test_sample_overlaps_itself(self):
        x = substream(3, "self").normal(size=400)
        assert bhattacharyya_coefficient(x, x) >= 0.99

    def test_disjoint_clusters(self):
        rng = substream(3, "disjoint")
        a = rng.normal(0.0, 0.1, size=300)
        b = rng.normal(10.0, 0.1, size=300)
        assert bhattacharyya_coefficient(a, b) < 0.05

    def test_gaussian_shift_matches_closed_form(self):
        # equal-variance normals shifted by d have overlap exp(-d^2/(8 s^2));
        # d = 0.5, s = 0.5 gives exp(-1/8)
        rng = substream(3, "gauss")
        a = rng.normal(0.0, 0.5, size=4000)
        b = rng.normal(0.5, 0.5, size=4000)
        got = bhattacharyya_coefficient(a, b, bounded01=False)
        assert got == pytest.approx(np.exp(-0.125), abs=0.02)

    def test_point_mass_conventions(self):
        const = np.full(10, 0.4)
        assert bhattacharyya_coefficient(const, const.copy()) == 1.0
        assert np.isnan(bhattacharyya_coefficient(const, np.full(8, 0.6)))
        spread = np.linspace(0.1, 0.9, 10)
        assert np.isnan(bhattacharyya_coefficient(const, spread))

    def test_result_is_bounded(self):
        rng = substream(3, "bounded")
        for _ in range(5):
            a = rng.normal(rng.uniform(-2, 2), rng.uniform(0.2, 2), size=80)
            b = rng.normal(rng.uniform(-2, 2), rng.uniform(0.2, 2), size=80)
            v = bhattacharyya_coefficient(a, b)
            assert 0.0 <= v <= 1.0


class TestClassifyOverlap:
    @pytest.mark.parametrize(
        "value,label",
        [
            (1.0, "Very high"),
            (0.95, "Very high"),
            (0.9, "Very high"),
            (0.8, "High"),
            (0.5, "Medium"),
            (0.49999, "Low"),
            (0.0, "Low"),
        ],
    )
    def test_bins(self, value, label):
        assert classify_overlap(value) == label

    def test_float_slop_tolerated(self):
        assert classify_overlap(1.0 + 1e-12) == "Very high"
        assert classify_overlap(-1e-12) == "Low"

    def test_undefined_rejected(self):
        with pytest.raises(DataError):
            classify_overlap(float("nan"))

    def test_out_of_range_rejected(self):
        with pytest.raises(DataError):
            classify_overlap(1.1)
        with pytest.raises(DataError):
            classify_overlap(-0.2)


class TestTiptonIndex:
    def test_matching_point_masses(self):
        fit = fit_with_ps([0.3, 0.3, 0.3], [0.3, 0.3])
        idx, label = tipton_index(fit)
        assert idx == 1.0 and label == "Very high"

    def test_mismatched_point_mass_unlabeled(self):
        fit = fit_with_ps([0.3, 0.3, 0.3], [0.2, 0.4, 0.6, 0.8])
        idx, label = tipton_index(fit)
        assert np.isnan(idx) and label is None

    def test_similar_scores_rate_high(self):
        rng = substream(3, "tipton")
        fit = fit_with_ps(
            np.clip(rng.normal(0.3, 0.05, 200), 0.01, 0.99),
            np.clip(rng.normal(0.3, 0.05, 800), 0.01, 0.99),
        )
        idx, label = tipton_index(fit)
        assert idx > 0.9 and label == "Very high"


class TestSimilarityReport:
    def make_study(self):
        rng = substream(3, "report")
        schema = [
            CovariateSchema(name="x1", kind="continuous"),
            CovariateSchema(
                name="grp", kind="categorical", levels=("a", "b"), in_ps_model=False
            ),
        ]
        n_t, n_g = 300, 2000
        trial = make_table(
            [f"t{i}" for i in range(n_t)],
            schema,
            {
                "x1": rng.normal(1.0, 1.0, n_t),
                "grp": np.array(
                    rng.choice(["a", "b"], n_t, p=[0.8, 0.2]), dtype=object
                ),
            },
            side="trial",
            t=rng.integers(0, 2, n_t),
            y=rng.normal(size=n_t),
        )
        target = make_table(
            [f"p{i}" for i in range(n_g)],
            schema,
            {
                "x1": rng.normal(0.0, 1.0, n_g),
                "grp": np.array(
                    rng.choice(["a", "b"], n_g, p=[0.4, 0.6]), dtype=object
                ),
            },
            side="target",
        )
        return stack(trial, target)

    def test_report_shape_and_flags(self):
        both = self.make_study()
        fit = estimate_sampling_score(both, "generalizability")
        weights = make_weights(fit)
        rep = similarity_report(both, fit, weights)
        assert set(rep.smd_unweighted) == {"x1", "grp=b"}
        assert set(rep.smd_weighted) == {"x1", "grp=b"}
        # the shifted covariates are out of balance before weighting
        assert abs(rep.smd_unweighted["x1"]) > 0.5
        assert abs(rep.smd_unweighted["grp=b"]) > 0.5
        # weighting on x1 restores x1 balance; grp stayed out of the model
        assert abs(rep.smd_weighted["x1"]) < 0.1
        assert "x1" not in rep.flagged
        assert "grp=b" in rep.flagged
        assert rep.overlap_label in {"Very high", "High", "Medium", "Low"}
        assert np.isfinite(rep.delta_p)

    def test_flags_follow_unweighted_without_weights(self):
        both = self.make_study()
        fit = estimate_sampling_score(both, "generalizability")
        rep = similarity_report(both, fit)
        assert rep.smd_weighted is None
        assert "x1" in rep.flagged

    def test_round_trip_dict(self):
        both = self.make_study()
        fit = estimate_sampling_score(both, "generalizability")
        d = similarity_report(both, fit, make_weights(fit)).to_dict()
        assert d["smd_threshold"] == 0.1
        assert "standardized_delta_p" in d
        assert "overlap_index" in d
        assert sorted(d["flagged_covariates"]) == d["flagged_covariates"]

    def test_requires_stacked_table(self):
        trial, target, both = two_sided(
            {"x1": [0.0, 1.0]}, {"x1": [0.0, 1.0]}, t=[0, 1], y=[0.0, 1.0]
        )
        fit = estimate_sampling_score(both, "generalizability")
        with pytest.raises(DataError):
            similarity_report(trial, fit)
