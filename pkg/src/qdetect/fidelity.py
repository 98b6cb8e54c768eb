"""Mean measurement fidelity and cross-model comparison reports.

For an n-ion register with 2^n basis states, the mean measurement fidelity
is the unweighted average of the per-state diagonal conditional
probabilities::

    F = (1 / 2^n) * sum_i  p(measured i | prepared i)

and the reported figure of merit is the error 1 - F, usually quoted in
percent.  Averaging conditional probabilities (rather than pooling counts)
gives every prepared state equal weight regardless of how many shots it
received, so every prepared state must appear at least once.

``compare_report`` renders a dataset/model/error grid with error-reduction
factors relative to the row named "threshold" (baseline error divided by
model error, rounded to one decimal), as aligned text and as CSV.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import EvaluationError

BASELINE_MODEL = "threshold"


@dataclass(frozen=True)
class ConfusionTable:
    """counts[prepared][measured] for all 2^n_ions states."""

    n_ions: int
    counts: np.ndarray

    def __post_init__(self):
        n_states = 2 ** self.n_ions
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.shape != (n_states, n_states):
            raise EvaluationError(
                f"confusion table for {self.n_ions} ions must be "
                f"{n_states}x{n_states}, got {counts.shape}"
            )
        if np.any(counts < 0):
            raise EvaluationError("confusion counts must be non-negative")
        object.__setattr__(self, "counts", counts)

    @property
    def n_states(self) -> int:
        return 2 ** self.n_ions

    @property
    def row_totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)


@dataclass(frozen=True)
class FidelityResult:
    """F, its complement, and the per-state diagonal probabilities."""

    mmf: float
    error: float
    per_state: np.ndarray


def tally(predictions, labels, n_ions: int) -> ConfusionTable:
    """Exact confusion counts from parallel prediction/label sequences."""
    preds = np.asarray(predictions, dtype=np.int64)
    labs = np.asarray(labels, dtype=np.int64)
    if preds.shape != labs.shape or preds.ndim != 1:
        raise EvaluationError(
            f"predictions and labels must be equal-length 1-D sequences, "
            f"got {preds.shape} vs {labs.shape}"
        )
    n_states = 2 ** n_ions
    for name, arr in (("prediction", preds), ("label", labs)):
        if len(arr) and (arr.min() < 0 or arr.max() >= n_states):
            raise EvaluationError(
                f"{name} values must lie in [0, {n_states}), "
                f"found {int(arr.min())}..{int(arr.max())}"
            )
    flat = np.bincount(labs * n_states + preds, minlength=n_states * n_states)
    return ConfusionTable(
        n_ions=n_ions, counts=flat.reshape(n_states, n_states)
    )


def mmf(table: ConfusionTable) -> FidelityResult:
    """Mean measurement fidelity of a confusion table."""
    totals = table.row_totals
    for state in range(table.n_states):
        if totals[state] == 0:
            raise EvaluationError(
                f"prepared state {state} has no samples; "
                "fidelity is undefined"
            )
    per_state = np.diag(table.counts) / totals
    fidelity = float(np.mean(per_state))
    return FidelityResult(
        mmf=fidelity, error=1.0 - fidelity, per_state=per_state
    )


def mmf_error_percent(predictions, labels, n_ions: int) -> float:
    """Convenience: 100 * (1 - F) straight from predictions and labels."""
    return 100.0 * mmf(tally(predictions, labels, n_ions)).error


# ---------------------------------------------------------------------------
# comparison report


@dataclass(frozen=True)
class ReportRow:
    dataset: str
    model: str
    mmf_error_percent: float
    reduction_factor: float | None
    latency_seconds: float | None


@dataclass(frozen=True)
class CompareReport:
    dataset: str
    rows: tuple


def compare_report(results: dict, latencies: dict | None = None,
                   dataset: str = "dataset") -> CompareReport:
    """Comparison grid over model-name -> FidelityResult.

    If a result named "threshold" is present, every row gets an
    error-reduction factor (threshold error / model error, one decimal);
    otherwise factors are omitted.  ``latencies`` optionally maps model
    names to per-shot inference latency in seconds.
    """
    if not results:
        raise EvaluationError("comparison report needs at least one result")
    latencies = latencies or {}
    baseline = results.get(BASELINE_MODEL)
    rows = []
    for model, res in results.items():
        factor = None
        if baseline is not None and res.error > 0:
            factor = round(baseline.error / res.error, 1)
        rows.append(
            ReportRow(
                dataset=dataset,
                model=model,
                mmf_error_percent=100.0 * res.error,
                reduction_factor=factor,
                latency_seconds=latencies.get(model),
            )
        )
    return CompareReport(dataset=dataset, rows=tuple(rows))


def render_compare_report(report: CompareReport) -> str:
    """Aligned plain-text grid: dataset / model / error / factor / latency."""
    header = (
        f"{'dataset':<12} {'model':<12} {'mmf error':>10} "
        f"{'reduction':>10} {'latency':>12}"
    )
    lines = [header, "-" * len(header)]
    for row in report.rows:
        factor = f"{row.reduction_factor:.1f}x" if (
            row.reduction_factor is not None) else "-"
        latency = f"{row.latency_seconds:.3e} s" if (
            row.latency_seconds is not None) else "-"
        lines.append(
            f"{row.dataset:<12} {row.model:<12} "
            f"{row.mmf_error_percent:>9.2f}% {factor:>10} {latency:>12}"
        )
    return "\n".join(lines) + "\n"


def report_csv(report: CompareReport) -> str:
    """Machine-readable companion table, one row per model."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["dataset", "model", "mmf_error_percent", "reduction_factor",
         "latency_seconds"]
    )
    for row in report.rows:
        writer.writerow(
            [
                row.dataset,
                row.model,
                f"{row.mmf_error_percent:.4f}",
                "" if row.reduction_factor is None
                else f"{row.reduction_factor:.1f}",
                "" if row.latency_seconds is None
                else f"{row.latency_seconds:.6e}",
            ]
        )
    return buf.getvalue()
