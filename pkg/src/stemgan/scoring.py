"""Per-frame anomaly quantification.

PSNR between prediction and ground truth is min-max normalized per clip
into P(t) in [0, 1]; the combined normality score is
S(t) = P(t) + lambda_d * d_norm(t), where d_norm is the clip-normalized
mean critic score of the predicted frame. Higher S means more normal, so
thresholding runs on the flipped anomaly evidence
a(t) = (1 + lambda_d) - S(t) >= 0 (larger = more anomalous).
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from .data_io import LabelTrack
from .model import windows_to_tensors
from .pipeline import make_windows

log = logging.getLogger(__name__)

DEFAULT_LAMBDA_D = 0.3
PSNR_PEAK_MIN = 1e-3
PSNR_MSE_MIN = 1e-10

SCORE_HEADER = ["frame_index", "psnr", "p", "d_norm", "s", "evidence", "label"]


def psnr(truth: np.ndarray, pred: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB between two [-1, 1] frames.

    Frames are mapped to [0, 1] first; the peak is the predicted frame's
    maximum (floored at 1e-3 for near-black frames) and the MSE is floored
    at 1e-10 so identical frames return a large finite cap.
    """
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if truth.shape != pred.shape:
        raise ValueError(f"shape mismatch: truth {truth.shape} vs pred {pred.shape}")
    if not (np.isfinite(truth).all() and np.isfinite(pred).all()):
        raise ValueError("frames contain non-finite values")
    truth01 = (truth + 1.0) / 2.0
    pred01 = (pred + 1.0) / 2.0
    peak = max(float(pred01.max()), PSNR_PEAK_MIN)
    mse = max(float(np.mean((truth01 - pred01) ** 2)), PSNR_MSE_MIN)
    return 10.0 * math.log10(peak * peak / mse)


def normalize_scores(series: Sequence[float]) -> np.ndarray:
    """Min-max normalize a per-clip score series into [0, 1].

    A constant series is degenerate; it maps to all ones (uniformly normal)
    with a logged warning.
    """
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 1 or len(series) < 2:
        raise ValueError("series must be 1-D with length >= 2")
    lo, hi = float(series.min()), float(series.max())
    if hi == lo:
        log.warning("constant score series: min == max == %.6g, mapping to all 1.0", lo)
        return np.ones_like(series)
    return (series - lo) / (hi - lo)


def anomaly_score(p, d_norm, lambda_d: float = DEFAULT_LAMBDA_D):
    """Combined normality score S = P + lambda_d * d_norm (lower = more anomalous)."""
    return np.asarray(p, dtype=np.float64) + lambda_d * np.asarray(d_norm, dtype=np.float64)


def evidence_from_score(s, lambda_d: float = DEFAULT_LAMBDA_D) -> np.ndarray:
    """Flip normality into nonnegative anomaly evidence: a = (1 + lambda_d) - S."""
    return (1.0 + lambda_d) - np.asarray(s, dtype=np.float64)


@dataclass
class ThresholdSweep:
    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    n_flagged: np.ndarray


def threshold_sweep(
    evidence: Sequence[float], labels: LabelTrack, num_thresholds: int = 1000
) -> ThresholdSweep:
    """Classify frames at evenly spaced thresholds over [0, max(evidence)].

    Evidence must be oriented so larger means more anomalous. A frame is
    flagged abnormal iff evidence >= threshold; abnormal is the positive
    class. At threshold 0 every frame is abnormal (TPR = FPR = 1).
    """
    evidence = np.asarray(evidence, dtype=np.float64)
    lab = np.asarray(labels.labels if isinstance(labels, LabelTrack) else labels)
    if evidence.shape != lab.shape:
        raise ValueError(f"evidence length {evidence.shape} != labels length {lab.shape}")
    if num_thresholds < 2:
        raise ValueError("num_thresholds must be >= 2")
    positives = int(lab.sum())
    negatives = int(len(lab) - positives)
    if positives == 0:
        raise ValueError("no positive frames: TPR undefined")
    if negatives == 0:
        raise ValueError("no negative frames: FPR undefined")
    thresholds = np.linspace(0.0, float(evidence.max()), num_thresholds)
    flagged = evidence[None, :] >= thresholds[:, None]
    is_pos = lab.astype(bool)[None, :]
    tp = (flagged & is_pos).sum(axis=1)
    fp = (flagged & ~is_pos).sum(axis=1)
    return ThresholdSweep(
        thresholds=thresholds,
        tpr=tp / positives,
        fpr=fp / negatives,
        n_flagged=flagged.sum(axis=1),
    )


def score_gap(s: Sequence[float], labels: LabelTrack) -> float:
    """Mean normality score of normal frames minus that of abnormal frames."""
    s = np.asarray(s, dtype=np.float64)
    lab = np.asarray(labels.labels if isinstance(labels, LabelTrack) else labels)
    if s.shape != lab.shape:
        raise ValueError(f"scores length {s.shape} != labels length {lab.shape}")
    normal = s[lab == 0]
    abnormal = s[lab == 1]
    if len(normal) == 0 or len(abnormal) == 0:
        raise ValueError("score gap needs both normal and abnormal frames")
    return float(normal.mean() - abnormal.mean())


@dataclass
class ScoreSeries:
    """Per-frame scores for one clip, aligned to the predicted frame index."""

    clip_id: str
    frame_index: np.ndarray
    psnr: np.ndarray
    p: np.ndarray
    d_norm: np.ndarray
    s: np.ndarray
    evidence: np.ndarray
    labels: Optional[np.ndarray] = None
    lambda_d: float = DEFAULT_LAMBDA_D

    def __post_init__(self):
        n = len(self.frame_index)
        for name in ("psnr", "p", "d_norm", "s", "evidence"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length differs from frame_index length {n}")
        if self.labels is not None and len(self.labels) != n:
            raise ValueError("labels length differs from score length")

    def __len__(self) -> int:
        return len(self.frame_index)


def score_clip(
    generator,
    discriminator,
    frames: Sequence[np.ndarray],
    clip_id: str,
    labels: Optional[LabelTrack] = None,
    window_total: int = 5,
    stride: int = 1,
    lambda_d: float = DEFAULT_LAMBDA_D,
    batch_size: int = 16,
    device=None,
) -> ScoreSeries:
    """Run prediction over a clip and assemble its per-frame score series.

    Scores exist for frames that have a full conditioning window, i.e.
    indices start at window_total - 1. Labels, when given, must cover the
    whole clip and are sliced to the scored frames.
    """
    windows = make_windows(list(frames), clip_id=clip_id, window_total=window_total, stride=stride)
    if not windows:
        raise ValueError(f"clip {clip_id} is shorter than one window ({window_total} frames)")
    if labels is not None and len(labels) != len(frames):
        raise ValueError(
            f"clip {clip_id}: {len(labels)} labels for {len(frames)} frames"
        )
    psnr_vals: List[float] = []
    d_raw: List[float] = []
    indices: List[int] = []
    generator.eval()
    discriminator.eval()
    with torch.no_grad():
        for i in range(0, len(windows), batch_size):
            batch = windows[i : i + batch_size]
            inputs, targets = windows_to_tensors(batch, device=device)
            preds = generator(inputs)
            grids = discriminator(preds)
            preds_np = preds.cpu().numpy()
            for j, window in enumerate(batch):
                psnr_vals.append(psnr(window.target.transpose(2, 0, 1), preds_np[j]))
                d_raw.append(float(grids[j].mean()))
                indices.append(window.start_index + window_total - 1)
    p = normalize_scores(psnr_vals) if len(psnr_vals) >= 2 else np.ones(len(psnr_vals))
    d_norm = normalize_scores(d_raw) if len(d_raw) >= 2 else np.ones(len(d_raw))
    s = anomaly_score(p, d_norm, lambda_d)
    series_labels = None
    if labels is not None:
        series_labels = np.asarray(labels.labels)[np.asarray(indices)]
    return ScoreSeries(
        clip_id=clip_id,
        frame_index=np.asarray(indices),
        psnr=np.asarray(psnr_vals),
        p=p,
        d_norm=np.asarray(d_norm),
        s=s,
        evidence=evidence_from_score(s, lambda_d),
        labels=series_labels,
        lambda_d=lambda_d,
    )


def save_score_csv(series: ScoreSeries, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCORE_HEADER)
        for i in range(len(series)):
            label = "" if series.labels is None else int(series.labels[i])
            writer.writerow(
                [
                    int(series.frame_index[i]),
                    f"{series.psnr[i]:.6f}",
                    f"{series.p[i]:.9f}",
                    f"{series.d_norm[i]:.9f}",
                    f"{series.s[i]:.9f}",
                    f"{series.evidence[i]:.9f}",
                    label,
                ]
            )


def load_score_csv(path, clip_id: Optional[str] = None, lambda_d: float = DEFAULT_LAMBDA_D) -> ScoreSeries:
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SCORE_HEADER:
            raise ValueError(f"bad score CSV header {header!r}, expected {SCORE_HEADER}")
        rows = [row for row in reader if row]
    if not rows:
        raise ValueError(f"score CSV {path} has no rows")
    cols = list(zip(*rows))
    labels = None
    if all(tok != "" for tok in cols[6]):
        labels = np.asarray([int(tok) for tok in cols[6]], dtype=np.uint8)
    return ScoreSeries(
        clip_id=clip_id or path.stem.replace("scores_", ""),
        frame_index=np.asarray([int(t) for t in cols[0]]),
        psnr=np.asarray([float(t) for t in cols[1]]),
        p=np.asarray([float(t) for t in cols[2]]),
        d_norm=np.asarray([float(t) for t in cols[3]]),
        s=np.asarray([float(t) for t in cols[4]]),
        evidence=np.asarray([float(t) for t in cols[5]]),
        labels=labels,
        lambda_d=lambda_d,
    )
