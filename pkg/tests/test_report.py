import pytest

from diffcoder.report import (
    EvalReport,
    ReportError,
    delta_percent,
    format_cell,
    percentile_sample_index,
    render_comparison_tables,
)


def make_report(values, arch="vae"):
    report = EvalReport(dataset_id="ds", arch=arch)
    for v in values:
        for method in ("model", "bilinear", "bicubic"):
            report.add_sample(method, {
                "rel_l2": v, "spectral_error": 2 * v, "highfreq_spectral_error": 3 * v,
            })
    return report


class TestEvalReport:
    def test_aggregates(self):
        report = make_report([0.1, 0.2, 0.3])
        assert report.n_samples == 3
        assert report.aggregate("model", "rel_l2") == pytest.approx(0.2)
        assert report.aggregate("model", "spectral_error") == pytest.approx(0.4)

    def test_json_round_trip(self):
        report = make_report([0.25, 0.5])
        loaded = EvalReport.from_json(report.to_json())
        assert loaded.per_sample == report.per_sample
        assert loaded.dataset_id == "ds"

    def test_stable_serialization(self):
        a = make_report([0.1, 0.7]).to_json()
        b = make_report([0.1, 0.7]).to_json()
        assert a == b

    def test_rejects_invalid_values(self):
        report = EvalReport(dataset_id="ds", arch="vae")
        with pytest.raises(ReportError):
            report.add_sample("model", {
                "rel_l2": -1.0, "spectral_error": 0.0, "highfreq_spectral_error": 0.0,
            })
        with pytest.raises(ReportError):
            report.add_sample("model", {
                "rel_l2": float("nan"), "spectral_error": 0.0,
                "highfreq_spectral_error": 0.0,
            })


class TestPercentileSelection:
    def test_rank_formula(self):
        errors = [0.5, 0.1, 0.9, 0.3, 0.7]  # sorted order: 1,3,0,4,2
        assert percentile_sample_index(errors, 0) == 1
        assert percentile_sample_index(errors, 100) == 2
        assert percentile_sample_index(errors, 50) == 0
        # p=40: rank round(0.4*4) = 2 -> third smallest -> index 0
        assert percentile_sample_index(errors, 40) == 0
        # p=60: rank round(0.6*4) = 2 -> also index 0
        assert percentile_sample_index(errors, 60) == 0

    def test_tie_break_lowest_index(self):
        errors = [0.5, 0.5, 0.5, 0.5]
        assert percentile_sample_index(errors, 0) == 0
        # rank round(p/100*3): ties keep ascending index order
        assert percentile_sample_index(errors, 100) == 3

    def test_range_errors(self):
        with pytest.raises(ReportError):
            percentile_sample_index([0.1], 150)
        with pytest.raises(ReportError):
            percentile_sample_index([], 50)


class TestTables:
    def test_delta_percent_reference_value(self):
        # 0.1239 -> 0.0602 must render -51.4%
        assert delta_percent(0.1239, 0.0602) == pytest.approx(-51.41, abs=0.01)
        assert format_cell(0.1239, 0.0602) == "0.1239 -> 0.0602 (-51.4%)"

    def test_delta_percent_sign(self):
        assert delta_percent(0.1, 0.2) == pytest.approx(100.0)
        assert delta_percent(0.2, 0.1) == pytest.approx(-50.0)
        with pytest.raises(ReportError):
            delta_percent(0.0, 0.1)

    def test_render_matches_aggregates(self):
        cells = {
            (100_000, 2): {"vae": make_report([0.2]), "diffcoder": make_report([0.1])},
            (100_000, 3): {"vae": make_report([0.4]), "diffcoder": make_report([0.5])},
        }
        text, csv = render_comparison_tables(cells, sizes=[100_000], depths=[2, 3])
        assert "0.2000 -> 0.1000 (-50.0%)" in text
        assert "0.4000 -> 0.5000 (+25.0%)" in text
        assert "100K" in text
        lines = csv.strip().splitlines()
        assert lines[0] == "metric,size,depth,vae,diffcoder,delta_pct"
        # 3 metrics x 2 populated cells
        assert len(lines) == 1 + 6
        row = next(l for l in lines if l.startswith("rel_l2,100000,2,"))
        assert row.split(",")[3] == "0.2"
        assert row.split(",")[5] == "-50"

    def test_missing_cells_render_dash(self):
        cells = {(100_000, 2): {"vae": make_report([0.2])}}
        text, csv = render_comparison_tables(cells, sizes=[100_000], depths=[2, 3])
        assert "-" in text
        assert len(csv.strip().splitlines()) == 1
