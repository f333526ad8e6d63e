"""Frame-level evaluation: ROC curve, AUROC, EER, and report artifacts.

The ROC is built by sweeping every distinct evidence value as a threshold
(abnormal = positive class, flagged when evidence >= threshold), which
makes the trapezoidal area agree exactly with the pairwise probability
P(evidence_pos > evidence_neg) + 0.5 * P(equal).

Reports aggregate clips two ways: the canonical micro average concatenates
the per-clip-normalized evidence of all clips into one curve; the macro
average is the mean of per-clip metrics.
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .scoring import ScoreSeries, score_gap

log = logging.getLogger(__name__)

METRICS_HEADER = ["scope", "clip_id", "auroc", "eer", "score_gap", "n_frames", "n_abnormal"]


@dataclass
class RocCurve:
    fpr: np.ndarray  # nondecreasing, starts at 0, ends at 1
    tpr: np.ndarray

    def __post_init__(self):
        self.fpr = np.asarray(self.fpr, dtype=np.float64)
        self.tpr = np.asarray(self.tpr, dtype=np.float64)
        if self.fpr.shape != self.tpr.shape or self.fpr.ndim != 1 or len(self.fpr) < 2:
            raise ValueError("curve needs matching 1-D fpr/tpr with >= 2 points")

    def validate(self):
        for name, arr in (("fpr", self.fpr), ("tpr", self.tpr)):
            if arr.min() < -1e-12 or arr.max() > 1 + 1e-12:
                raise ValueError(f"{name} values outside [0, 1]")
            if np.any(np.diff(arr) < -1e-12):
                raise ValueError(f"{name} is not nondecreasing")
        if self.fpr[0] != 0 or self.tpr[0] != 0 or self.fpr[-1] != 1 or self.tpr[-1] != 1:
            raise ValueError("curve must run from (0,0) to (1,1)")
        return self


def roc_curve(evidence: Sequence[float], labels: Sequence[int]) -> RocCurve:
    """ROC over all distinct evidence thresholds, endpoints included."""
    evidence = np.asarray(evidence, dtype=np.float64)
    labels = np.asarray(labels)
    if evidence.shape != labels.shape:
        raise ValueError("evidence and labels must have the same length")
    positives = int(labels.sum())
    negatives = int(len(labels) - positives)
    if positives == 0 or negatives == 0:
        raise ValueError("ROC needs both classes present")
    order = np.argsort(-evidence, kind="stable")
    sorted_labels = labels[order].astype(np.float64)
    sorted_evidence = evidence[order]
    tp = np.cumsum(sorted_labels)
    fp = np.cumsum(1.0 - sorted_labels)
    # keep only the last index of each tie group (threshold boundaries)
    distinct = np.r_[np.diff(sorted_evidence) != 0, True]
    tpr = np.r_[0.0, tp[distinct] / positives]
    fpr = np.r_[0.0, fp[distinct] / negatives]
    if fpr[-1] != 1.0 or tpr[-1] != 1.0:
        fpr = np.r_[fpr, 1.0]
        tpr = np.r_[tpr, 1.0]
    return RocCurve(fpr=fpr, tpr=tpr).validate()


def auroc(curve: RocCurve) -> float:
    """Trapezoidal area under the ROC curve."""
    curve.validate()
    return float(np.trapezoid(curve.tpr, curve.fpr))


def eer(curve: RocCurve) -> float:
    """Equal error rate: FPR at the interpolated point where TPR = 1 - FPR."""
    curve.validate()
    fpr, tpr = curve.fpr, curve.tpr
    # g crosses zero where the curve meets the TPR + FPR = 1 diagonal
    g = tpr + fpr - 1.0
    for i in range(len(g) - 1):
        if g[i] <= 0.0 <= g[i + 1]:
            if g[i + 1] == g[i]:
                return float(fpr[i])
            alpha = -g[i] / (g[i + 1] - g[i])
            return float(fpr[i] + alpha * (fpr[i + 1] - fpr[i]))
    raise ValueError("curve never crosses TPR = 1 - FPR")


@dataclass
class MetricsRow:
    scope: str  # "clip" | "aggregate" | "aggregate_macro"
    clip_id: str
    auroc: Optional[float]
    eer: Optional[float]
    score_gap: Optional[float]
    n_frames: int
    n_abnormal: int


@dataclass
class MetricsReport:
    dataset_name: str
    config_hash: str
    rows: List[MetricsRow] = field(default_factory=list)

    @property
    def aggregate(self) -> MetricsRow:
        return next(r for r in self.rows if r.scope == "aggregate")


def _clip_metrics(series: ScoreSeries) -> MetricsRow:
    n = len(series)
    n_abnormal = int(series.labels.sum())
    if n_abnormal == 0 or n_abnormal == n:
        log.warning("clip %s has a single class; per-clip AUROC/EER undefined", series.clip_id)
        return MetricsRow("clip", series.clip_id, None, None, None, n, n_abnormal)
    curve = roc_curve(series.evidence, series.labels)
    return MetricsRow(
        "clip",
        series.clip_id,
        auroc(curve),
        eer(curve),
        score_gap(series.s, series.labels),
        n,
        n_abnormal,
    )


def build_report(
    series_set: Sequence[ScoreSeries],
    output_dir,
    dataset_name: str = "",
    config_hash: str = "",
    make_plots: bool = True,
) -> MetricsReport:
    """Compute per-clip and aggregate metrics; write CSV and plot artifacts.

    Writes ``metrics.csv``, ``roc_aggregate.png`` plus per-clip ROC plots,
    and per-clip score timelines with ground-truth anomaly intervals shaded.
    """
    series_set = list(series_set)
    if not series_set:
        raise ValueError("no score series to report on")
    for series in series_set:
        if series.labels is None:
            raise ValueError(f"series {series.clip_id} carries no labels")
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)

    report = MetricsReport(dataset_name=dataset_name, config_hash=config_hash)
    for series in series_set:
        report.rows.append(_clip_metrics(series))

    all_evidence = np.concatenate([s.evidence for s in series_set])
    all_s = np.concatenate([s.s for s in series_set])
    all_labels = np.concatenate([s.labels for s in series_set])
    n, n_abnormal = len(all_labels), int(all_labels.sum())
    if n_abnormal == 0 or n_abnormal == n:
        raise ValueError("aggregate evaluation needs both classes present")
    agg_curve = roc_curve(all_evidence, all_labels)
    report.rows.append(
        MetricsRow(
            "aggregate", "", auroc(agg_curve), eer(agg_curve),
            score_gap(all_s, all_labels), n, n_abnormal,
        )
    )
    clip_rows = [r for r in report.rows if r.scope == "clip" and r.auroc is not None]
    if clip_rows:
        report.rows.append(
            MetricsRow(
                "aggregate_macro",
                "",
                float(np.mean([r.auroc for r in clip_rows])),
                float(np.mean([r.eer for r in clip_rows])),
                float(np.mean([r.score_gap for r in clip_rows])),
                n,
                n_abnormal,
            )
        )

    save_metrics_csv(report, output_dir / "metrics.csv")
    if make_plots:
        _plot_roc(agg_curve, output_dir / "roc_aggregate.png", "aggregate")
        for series in series_set:
            n_ab = int(series.labels.sum())
            if 0 < n_ab < len(series):
                _plot_roc(
                    roc_curve(series.evidence, series.labels),
                    output_dir / f"roc_{series.clip_id}.png",
                    series.clip_id,
                )
            _plot_timeline(series, output_dir / f"timeline_{series.clip_id}.png")
    return report


def save_metrics_csv(report: MetricsReport, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    def fmt(value):
        return "" if value is None else f"{value:.6f}"

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for row in report.rows:
            writer.writerow(
                [row.scope, row.clip_id, fmt(row.auroc), fmt(row.eer),
                 fmt(row.score_gap), row.n_frames, row.n_abnormal]
            )


def _plot_roc(curve: RocCurve, path: Path, title: str):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(curve.fpr, curve.tpr, color="tab:blue", label=f"AUROC = {auroc(curve):.4f}")
    ax.plot([0, 1], [0, 1], linestyle="--", color="gray", linewidth=0.8)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_title(f"ROC ({title})")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_timeline(series: ScoreSeries, path: Path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(8, 3))
    ax.plot(series.frame_index, series.s, color="tab:blue", linewidth=1.2, label="S(t)")
    if series.labels is not None:
        for start, end in _label_intervals(series.frame_index, series.labels):
            ax.axvspan(start, end, color="purple", alpha=0.25, linewidth=0)
    ax.set_xlabel("frame")
    ax.set_ylabel("anomaly score S(t)")
    ax.set_title(series.clip_id)
    ax.legend(loc="lower left")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _label_intervals(frame_index: np.ndarray, labels: np.ndarray):
    """Contiguous runs of abnormal frames as (start, end) index pairs."""
    intervals = []
    start = None
    for idx, lab in zip(frame_index, labels):
        if lab and start is None:
            start = idx
        elif not lab and start is not None:
            intervals.append((start, idx))
            start = None
    if start is not None:
        intervals.append((start, frame_index[-1]))
    return intervals
