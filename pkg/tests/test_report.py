import json
import os

import numpy as np
import pytest

from trialreach.errors import DataError
from trialreach.report import (
    RunReport,
    canonical,
    emit_report,
    render_json,
    render_markdown,
)


def sample_payload():
    return {
        "schema_version": 1,
        "scenario": "generalizability",
        "data": {"n_trial": 100, "n_target": 900, "ps_covariates": ["x1"]},
        "estimates": [
            {
                "estimand": "TATE",
                "method": "difference_in_means",
                "point": 1.23456789,
                "se": 0.5,
                "ci": [0.25, 2.21],
                "variance_method": "analytic",
                "flags": [],
            }
        ],
        "similarity": {
            "standardized_delta_p": 1.4,
            "overlap_index": 0.87,
            "overlap_label": "High",
            "smd_unweighted": {"x1": 0.45},
            "smd_weighted": {"x1": 0.03},
            "smd_threshold": 0.1,
            "flagged_covariates": [],
        },
        "missing_data": {"strategy": "complete_case"},
        "sensitivity": [],
        "verdict": [
            {
                "method": "ipsw",
                "regulatory_agreement": True,
                "estimate_agreement": False,
                "design_agreement": None,
                "standardized_difference": 0.42,
                "tate_point": 1.23,
                "tate_ci": [0.25, 2.21],
                "pate_point": 2.5,
                "pate_ci": [1.1, 3.9],
            }
        ],
        "caveats": [],
    }


class TestCanonical:
    def test_floats_keep_six_significant_digits(self):
        assert canonical(0.123456789) == 0.123457
        assert canonical(1234567.89) == 1234570.0
        assert canonical(1.5) == 1.5

    def test_non_finite_becomes_null(self):
        assert canonical(float("nan")) is None
        assert canonical(float("inf")) is None
        assert canonical(-np.inf) is None

    def test_numpy_scalars_unwrapped(self):
        assert canonical(np.float64(0.25)) == 0.25
        assert canonical(np.int64(7)) == 7
        assert canonical(np.bool_(True)) is True

    def test_bools_stay_bools(self):
        out = canonical({"flag": True, "count": 1})
        assert out["flag"] is True and out["count"] == 1

    def test_containers_normalized(self):
        out = canonical({"a": (1.0, float("nan")), "b": [{"c": np.float32(2.0)}]})
        assert out == {"a": [1.0, None], "b": [{"c": 2.0}]}

    def test_unsupported_types_rejected(self):
        with pytest.raises(DataError, match="set"):
            canonical({"bad": {1, 2}})


class TestRenderJson:
    def test_keys_sorted_and_trailing_newline(self):
        text = render_json(RunReport(payload={"zebra": 1, "apple": 2}))
        assert text.index('"apple"') < text.index('"zebra"')
        assert text.endswith("\n")

    def test_round_trip_equals_canonical_payload(self):
        payload = sample_payload()
        text = render_json(RunReport(payload=payload))
        assert json.loads(text) == canonical(payload)

    def test_rendering_is_deterministic(self):
        payload = sample_payload()
        a = render_json(RunReport(payload=payload))
        b = render_json(RunReport(payload=sample_payload()))
        assert a == b

    def test_timing_never_serialized(self):
        report = RunReport(payload=sample_payload(), timing={"total": 12.5})
        assert "12.5" not in render_json(report)


class TestRenderMarkdown:
    def test_verdict_table_header(self):
        text = render_markdown(RunReport(payload=sample_payload()))
        assert (
            "| Method | TATE | PATE | Regulatory | Estimate "
            "| Standardized Difference |" in text
        )
        assert "agree" in text and "disagree" in text

    def test_design_column_only_when_present(self):
        payload = sample_payload()
        without = render_markdown(RunReport(payload=payload))
        assert "| Design |" not in without
        payload["verdict"][0]["design_agreement"] = True
        with_design = render_markdown(RunReport(payload=payload))
        assert "Design |" in with_design and "met" in with_design

    def test_score_shift_context_sentence(self):
        text = render_markdown(RunReport(payload=sample_payload()))
        assert "1.06" in text and "2.08" in text

    def test_caveats_block(self):
        payload = sample_payload()
        payload["caveats"] = ["overlap is low"]
        text = render_markdown(RunReport(payload=payload))
        assert "> **Caveats**" in text
        assert "> - overlap is low" in text
        assert "> **Caveats**" not in render_markdown(
            RunReport(payload=sample_payload())
        )

    def test_timing_footer_is_markdown_only(self):
        report = RunReport(payload=sample_payload(), timing={"total": 2.0})
        text = render_markdown(report)
        assert "excluded from report.json" in text
        bare = render_markdown(RunReport(payload=sample_payload()))
        assert "excluded from report.json" not in bare

    def test_numbered_sections_present(self):
        text = render_markdown(RunReport(payload=sample_payload()))
        for section in (
            "## 1. Appropriateness",
            "## 2. Data",
            "## 3. Identifiability",
            "## 4. Effect estimation",
            "## 5. Population similarity",
            "## 6. Missing data",
            "## 7. Sensitivity",
            "## 8. Interpretation",
        ):
            assert section in text


class TestEmitReport:
    def test_json_only_writes_one_file(self, tmp_path):
        out = str(tmp_path / "out")
        written = emit_report(
            RunReport(payload=sample_payload()), out, formats=("json",)
        )
        assert written == [os.path.join(out, "report.json")]
        assert sorted(os.listdir(out)) == ["report.json"]

    def test_json_and_markdown(self, tmp_path):
        out = str(tmp_path)
        written = emit_report(
            RunReport(payload=sample_payload()), out, formats=("json", "markdown")
        )
        assert [os.path.basename(p) for p in written] == ["report.json", "report.md"]

    def test_unknown_format_rejected(self, tmp_path):
        with pytest.raises(DataError, match="unknown report formats"):
            emit_report(
                RunReport(payload=sample_payload()), str(tmp_path), formats=("pdf",)
            )

    def test_figures_need_figure_data(self, tmp_path):
        with pytest.raises(DataError, match="figure_data"):
            emit_report(
                RunReport(payload=sample_payload()), str(tmp_path), formats=("svg",)
            )
