import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad
from scipy.stats import norm

from mexaudit.analysis import (
    AuditReport,
    build_report,
    exit_ratios,
    js_divergence,
    loss_histograms,
    nonmember_ratio_per_exit,
    overfitting_gap,
    per_exit_js,
    per_exit_js_from,
    spearman,
    write_figure_csvs,
)
from mexaudit.nn import MultiExitModel, accuracy


def js_by_quadrature(m1, s1, m2, s2):
    """Continuous base-2 JS divergence of two Gaussians."""
    def integrand(x):
        p, q = norm.pdf(x, m1, s1), norm.pdf(x, m2, s2)
        m = (p + q) / 2
        out = 0.0
        if p > 0:
            out += 0.5 * p * np.log2(p / m)
        if q > 0:
            out += 0.5 * q * np.log2(q / m)
        return out
    lo, hi = min(m1 - 12 * s1, m2 - 12 * s2), max(m1 + 12 * s1, m2 + 12 * s2)
    return quad(integrand, lo, hi, limit=500, points=[m1, m2])[0]


class TestJensenShannon:
    def test_identical_is_exactly_zero(self):
        x = np.random.default_rng(0).exponential(size=500)
        assert js_divergence(x, x) == 0.0

    def test_disjoint_is_one(self):
        assert js_divergence(np.full(50, 0.1), np.full(60, 50.0)) == pytest.approx(1.0, abs=1e-9)
        rng = np.random.default_rng(1)
        assert js_divergence(rng.uniform(0, 1, 300), rng.uniform(5, 6, 300)) == pytest.approx(1.0, abs=1e-9)

    @pytest.mark.parametrize("params", [(0, 1, 1, 1), (0, 1, 2, 1), (0, 1, 0, 2), (3, 1, 5, 0.5)])
    def test_gaussians_match_quadrature(self, params):
        m1, s1, m2, s2 = params
        rng = np.random.default_rng(7)
        est = js_divergence(rng.normal(m1, s1, 200_000), rng.normal(m2, s2, 200_000))
        assert est == pytest.approx(js_by_quadrature(*params), abs=0.01)

    def test_epsilon_smoothing_pulls_disjoint_below_one(self):
        assert js_divergence(np.zeros(10), np.full(10, 9.0), epsilon=1e-3) < 1.0

    def test_histogram_layout(self):
        h = loss_histograms(np.r_[np.linspace(0, 1, 99), 100.0], np.linspace(0, 1, 100))
        assert len(h.edges) == 101 and len(h.member_hist) == 101
        assert h.member_hist[-1] == pytest.approx(0.01)
        assert h.edges[0] == 0.0

    def test_empty_side(self):
        with pytest.raises(ValueError):
            js_divergence([], [1.0])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 50), min_size=1, max_size=40),
           st.lists(st.floats(0, 50), min_size=1, max_size=40))
    def test_symmetric_and_bounded(self, p, q):
        a, b = js_divergence(p, q), js_divergence(q, p)
        assert 0.0 <= a <= 1.0
        assert a == pytest.approx(b, abs=1e-12)


class TestPerExit:
    def test_buckets(self):
        ml = np.array([0.1, 0.1, 5.0, 5.0])
        me = np.array([0, 0, 1, 1])
        nl = np.array([0.1, 9.0, 9.0])
        ne = np.array([0, 1, 1])
        res = per_exit_js_from(ml, me, nl, ne, 3)
        assert res.values[0] == 0.0
        assert res.values[1] == pytest.approx(1.0)
        assert np.isnan(res.values[2])
        assert res.member_counts.tolist() == [2, 2, 0] and not res.reliable.any()

    def test_on_model(self):
        model = MultiExitModel.build(5, 3, 3, width=8, n_blocks=3, head_width=4, tau=0.5)
        rng = np.random.default_rng(0)
        mem = (rng.normal(size=(80, 5)), rng.integers(0, 3, 80))
        non = (rng.normal(size=(80, 5)), rng.integers(0, 3, 80))
        res = per_exit_js(model, mem, non)
        assert len(res.values) == 3
        assert res.member_counts.sum() == 80 and res.nonmember_counts.sum() == 80


class TestRatios:
    def test_counting_identity(self):
        me = np.array([0, 0, 0, 1, 2])
        ne = np.array([0, 1, 1, 1, 2])
        r = exit_ratios(me, ne, 4)
        assert r.counts.tolist() == [4, 4, 2, 0]
        np.testing.assert_allclose(r.ratios[:3], [0.25, 0.75, 0.5])
        assert np.isnan(r.ratios[3])

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 200), st.integers(1, 6), st.integers(0, 2**32 - 1))
    def test_weighted_mean_is_half_on_balanced_input(self, n, n_exits, seed):
        rng = np.random.default_rng(seed)
        r = exit_ratios(rng.integers(0, n_exits, n), rng.integers(0, n_exits, n), n_exits)
        assert abs(r.weighted_mean() - 0.5) <= 1e-9

    def test_on_model(self):
        model = MultiExitModel.build(5, 3, 2, width=8, n_blocks=2, head_width=4, tau=0.6)
        x = np.random.default_rng(0).normal(size=(40, 5))
        r = nonmember_ratio_per_exit(model, (x[:20], None), (x[20:], None))
        assert r.counts.sum() == 40


def test_overfitting_gap():
    model = MultiExitModel.build(5, 3, 2, width=8, n_blocks=2, head_width=4)
    rng = np.random.default_rng(0)
    a = (rng.normal(size=(30, 5)), rng.integers(0, 3, 30))
    b = (rng.normal(size=(30, 5)), rng.integers(0, 3, 30))
    assert overfitting_gap(model, a, b) == pytest.approx(accuracy(model, *a) - accuracy(model, *b))


def test_spearman_ignores_nan():
    assert spearman([1, 2, np.nan, 4], [1, 2, 3, 5]) == pytest.approx(1.0)
    assert np.isnan(spearman([1, np.nan], [1, 2]))


def sample_run(run_id="r0"):
    return {
        "run_id": run_id, "task": "purchases", "architecture": "mlp", "n_exits": 2, "tau": 0.9,
        "accuracy": 0.5, "ops_per_exit": [10, 20],
        "asr": {"adv1": {"score": 0.8, "score_hybrid": 0.82}, "adv2": {"score": None}},
        "js_per_exit": [0.1, np.nan], "js_reliable": [True, False],
        "nonmember_ratio": np.array([0.2, 0.7]), "exit_counts": [10, 10],
        "loss_hist": {"edges": [0.0, 0.5, 1.0], "member": [0.5, 0.5, 0.0], "nonmember": [0.2, 0.3, 0.5]},
        "sweep": [{"sigma": 0.0, "hybrid_asr": 0.8, "original_asr": 0.7, "mean_time": 1.0,
                   "steal_accuracy": 1.0, "n_clusters": 2}],
    }


class TestReport:
    def test_round_trip(self, tmp_path):
        report = build_report([sample_run()])
        report.write(tmp_path / "r.json")
        back = AuditReport.read(tmp_path / "r.json")
        assert back.to_dict() == json.loads(report.dumps())
        assert back.schema_version == "1.0"
        run = back.runs[0]
        assert run["js_per_exit"] == [0.1, None]
        assert run["steal_accuracy"] is None
        assert sorted(back.asr_values()) == [0.8, 0.82]

    def test_dump_is_stable(self):
        assert build_report([sample_run()]).dumps() == build_report([sample_run()]).dumps()

    def test_asr_range_enforced(self):
        run = sample_run()
        run["asr"]["adv1"]["score"] = 1.2
        with pytest.raises(ValueError, match="outside"):
            build_report([run])

    def test_unknown_field(self):
        with pytest.raises(ValueError, match="unknown"):
            build_report([dict(sample_run(), extra=1)])

    def test_missing_schema(self):
        with pytest.raises(ValueError):
            AuditReport.loads('{"runs": []}')

    def test_figure_csvs(self, tmp_path):
        paths = write_figure_csvs(build_report([sample_run()]), tmp_path)
        names = sorted(p.name for p in paths)
        assert names == ["fig16_tradeoff.csv", "fig3_loss_hist.csv", "fig6_js_per_exit.csv", "fig8_ratio.csv"]
        with open(tmp_path / "fig3_loss_hist.csv") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 4 and rows[-1][3] == ""
        with open(tmp_path / "fig6_js_per_exit.csv") as fh:
            assert list(csv.reader(fh))[2] == ["r0", "1", "", "False"]
