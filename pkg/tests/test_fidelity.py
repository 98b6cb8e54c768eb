"""Tests for confusion tallies, mean measurement fidelity, and the
cross-model comparison report."""

import numpy as np
import pytest

from qdetect.errors import EvaluationError
from qdetect.fidelity import (
    ConfusionTable,
    FidelityResult,
    compare_report,
    mmf,
    mmf_error_percent,
    render_compare_report,
    report_csv,
    tally,
)


def result(error_percent: float) -> FidelityResult:
    err = error_percent / 100.0
    return FidelityResult(
        mmf=1.0 - err, error=err, per_state=np.array([1.0 - err])
    )


# ---------------------------------------------------------------------------
# tally


class TestTally:
    def test_perfect_predictions_are_diagonal(self):
        labels = np.array([0, 1, 2, 3, 0, 1, 2, 3])
        table = tally(labels, labels, n_ions=2)
        assert table.counts.shape == (4, 4)
        np.testing.assert_array_equal(
            table.counts, np.diag([2, 2, 2, 2])
        )

    def test_single_misclassification(self):
        table = tally(predictions=[1], labels=[0], n_ions=1)
        assert table.counts[0][1] == 1
        assert table.counts.sum() == 1

    def test_against_recount_oracle(self):
        rng = np.random.default_rng(41)
        labels = rng.integers(0, 8, size=1000)
        preds = rng.integers(0, 8, size=1000)
        table = tally(preds, labels, n_ions=3)
        expected = np.zeros((8, 8), dtype=np.int64)
        for p, y in zip(preds, labels):
            expected[y][p] += 1
        np.testing.assert_array_equal(table.counts, expected)
        np.testing.assert_array_equal(
            table.row_totals, expected.sum(axis=1)
        )

    def test_length_mismatch_rejected(self):
        with pytest.raises(EvaluationError):
            tally([0, 1], [0], n_ions=1)

    def test_out_of_range_state_rejected(self):
        with pytest.raises(EvaluationError):
            tally([2], [0], n_ions=1)
        with pytest.raises(EvaluationError):
            tally([0], [4], n_ions=1)

    def test_negative_counts_rejected(self):
        with pytest.raises(EvaluationError):
            ConfusionTable(n_ions=1, counts=np.array([[1, -1], [0, 1]]))


# ---------------------------------------------------------------------------
# mean measurement fidelity


class TestMmf:
    def test_two_state_point_value(self):
        counts = np.array([[98, 2], [2, 98]])
        res = mmf(ConfusionTable(n_ions=1, counts=counts))
        assert res.mmf == pytest.approx(0.98)
        assert res.error == pytest.approx(0.02)
        assert res.error == 1.0 - res.mmf

    def test_perfect_table(self):
        counts = np.diag([5, 7, 3, 9])
        res = mmf(ConfusionTable(n_ions=2, counts=counts))
        assert res.mmf == 1.0
        assert res.error == 0.0

    def test_uniform_diagonal(self):
        counts = np.full((8, 8), 0, dtype=np.int64)
        for s in range(8):
            counts[s, s] = 985
            counts[s, (s + 1) % 8] = 15
        res = mmf(ConfusionTable(n_ions=3, counts=counts))
        assert res.mmf == pytest.approx(0.985)
        np.testing.assert_allclose(res.per_state, 0.985)

    def test_unbalanced_rows_weight_equally(self):
        # 10x the samples in state 0 must not give state 0 extra weight
        counts = np.array([[900, 100], [50, 50]])
        res = mmf(ConfusionTable(n_ions=1, counts=counts))
        assert res.mmf == pytest.approx((0.9 + 0.5) / 2)

    def test_empty_prepared_state_named(self):
        counts = np.zeros((4, 4), dtype=np.int64)
        counts[0, 0] = counts[1, 1] = counts[3, 3] = 5
        with pytest.raises(EvaluationError, match="state 2"):
            mmf(ConfusionTable(n_ions=2, counts=counts))

    def test_matches_bruteforce_rederivation(self):
        rng = np.random.default_rng(42)
        labels = rng.integers(0, 8, size=4000)
        preds = np.where(
            rng.random(4000) < 0.9, labels, rng.integers(0, 8, size=4000)
        )
        res = mmf(tally(preds, labels, n_ions=3))
        brute = np.mean(
            [np.mean(preds[labels == s] == s) for s in range(8)]
        )
        assert res.mmf == pytest.approx(brute, abs=1e-12)

    def test_relabeling_symmetry(self):
        rng = np.random.default_rng(43)
        labels = rng.integers(0, 4, size=2000)
        preds = np.where(
            rng.random(2000) < 0.8, labels, rng.integers(0, 4, size=2000)
        )
        base = mmf(tally(preds, labels, n_ions=2)).mmf
        perm = np.array([2, 0, 3, 1])
        permuted = mmf(tally(perm[preds], perm[labels], n_ions=2)).mmf
        assert base == pytest.approx(permuted, abs=1e-12)

    def test_error_percent_helper(self):
        labels = np.array([0, 0, 1, 1])
        preds = np.array([0, 1, 1, 1])
        assert mmf_error_percent(preds, labels, n_ions=1) == pytest.approx(25.0)


# ---------------------------------------------------------------------------
# comparison report


class TestCompareReport:
    def test_reduction_factors_match_published_framing(self):
        rep = compare_report(
            {"threshold": result(11.4), "vit": result(1.5)},
            dataset="3-qubit",
        )
        by_model = {row.model: row for row in rep.rows}
        assert by_model["vit"].reduction_factor == 7.6
        assert by_model["threshold"].reduction_factor == 1.0

    def test_factor_rounded_to_one_decimal(self):
        rep = compare_report(
            {"threshold": result(2.0), "mlp": result(1.1)},
            dataset="1-qubit",
        )
        by_model = {row.model: row for row in rep.rows}
        assert by_model["mlp"].reduction_factor == 1.8

    def test_single_model_has_no_factors(self):
        rep = compare_report({"mlp": result(3.0)}, dataset="solo")
        assert rep.rows[0].reduction_factor is None
        text = render_compare_report(rep)
        assert "mlp" in text

    def test_latencies_carried_through(self):
        rep = compare_report(
            {"threshold": result(11.4), "mlp": result(2.7)},
            latencies={"mlp": 2e-8},
            dataset="3-qubit",
        )
        by_model = {row.model: row for row in rep.rows}
        assert by_model["mlp"].latency_seconds == 2e-8
        assert by_model["threshold"].latency_seconds is None

    def test_text_rendering(self):
        rep = compare_report(
            {
                "threshold": result(11.4),
                "mlp": result(2.7),
                "vit": result(1.5),
            },
            latencies={"mlp": 2e-8, "vit": 3.5188e-5},
            dataset="3-qubit",
        )
        text = render_compare_report(rep)
        for token in ("3-qubit", "threshold", "mlp", "vit",
                      "11.40", "2.70", "1.50", "4.2", "7.6"):
            assert token in text

    def test_csv_layout(self):
        rep = compare_report(
            {"threshold": result(11.4), "vit": result(1.5)},
            latencies={"vit": 3.5188e-5},
            dataset="3-qubit",
        )
        csv_text = report_csv(rep)
        lines = csv_text.strip().split("\n")
        assert lines[0] == (
            "dataset,model,mmf_error_percent,reduction_factor,"
            "latency_seconds"
        )
        assert len(lines) == 3
        cells = lines[2].split(",")
        assert cells[0] == "3-qubit"
        assert cells[1] == "vit"
        assert float(cells[2]) == pytest.approx(1.5)
        assert cells[3] == "7.6"
        assert float(cells[4]) == pytest.approx(3.5188e-5)
        # threshold row has a factor but no latency
        thr_cells = lines[1].split(",")
        assert thr_cells[3] == "1.0" and thr_cells[4] == ""

    def test_csv_single_model_empty_factor(self):
        rep = compare_report({"mlp": result(3.0)}, dataset="solo")
        lines = report_csv(rep).strip().split("\n")
        assert lines[1].split(",")[3] == ""

    def test_empty_results_rejected(self):
        with pytest.raises(EvaluationError):
            compare_report({}, dataset="none")

    def test_deterministic_output(self):
        kw = dict(
            results={"threshold": result(11.4), "vit": result(1.5)},
            latencies={"vit": 3.5188e-5},
            dataset="3-qubit",
        )
        a = compare_report(kw["results"], latencies=kw["latencies"],
                           dataset=kw["dataset"])
        b = compare_report(kw["results"], latencies=kw["latencies"],
                           dataset=kw["dataset"])
        assert render_compare_report(a) == render_compare_report(b)
        assert report_csv(a) == report_csv(b)
