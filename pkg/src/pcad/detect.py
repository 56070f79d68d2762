"""Anomaly scoring from teacher/student feature disagreement."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .backbone import BackboneParams, TapFeatures, extract_taps
from .distill import cosine_loss, matched_positions
from .geometry import PointCloud, stack_points

SCALE_MODES = ("final", "multi")
METRICS = ("cos", "l2")


@dataclass(frozen=True)
class AnomalyScore:
    value: float
    scale_mode: str = "final"
    metric: str = "cos"

    def __post_init__(self):
        if not self.value >= 0:
            raise ValueError(f"anomaly score must be >= 0, got {self.value}")
        if self.metric == "cos" and self.value > 2:
            raise ValueError(f"cosine score above 2: {self.value}")

    def __float__(self) -> float:
        return self.value


def _check_modes(scale_mode, metric):
    if scale_mode not in SCALE_MODES:
        raise ValueError(f"scale_mode must be one of {SCALE_MODES}, got {scale_mode!r}")
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}, got {metric!r}")


def score_taps(
    taps_t: TapFeatures,
    taps_s: TapFeatures,
    scale_mode: str = "final",
    metric: str = "cos",
    eps: float = 1e-8,
) -> np.ndarray:
    """Per-cloud scores from precomputed taps, shape ``(B,)``.

    ``final`` compares the last tap; ``multi`` averages over every tap the two
    networks share at equal width.
    """
    _check_modes(scale_mode, metric)
    pos = matched_positions(taps_s.widths, taps_t.widths)
    if 2 not in pos:
        raise ValueError(f"final taps differ: student {taps_s.widths} vs teacher {taps_t.widths}")
    if scale_mode == "final":
        pos = [2]
    s_all, t_all = taps_s.as_tuple(), taps_t.as_tuple()
    out = np.zeros(len(t_all[2]), dtype=np.float64)
    for i in pos:
        fs = np.asarray(s_all[i], dtype=np.float64)
        ft = np.asarray(t_all[i], dtype=np.float64)
        if metric == "cos":
            part = cosine_loss(fs, ft, eps)
            # rounding can push 1 - cos a hair outside [0, 2]
            out += np.clip(part, 0.0, 2.0)
        else:
            out += np.linalg.norm(fs - ft, axis=-1)
    return out / len(pos)


def _batch(clouds) -> np.ndarray:
    if isinstance(clouds, PointCloud):
        return clouds.points[None]
    if isinstance(clouds, np.ndarray):
        return clouds[None] if clouds.ndim == 2 else clouds
    return stack_points(list(clouds))


def score_batch(
    teacher: BackboneParams,
    student: BackboneParams,
    clouds,
    scale_mode: str = "final",
    metric: str = "cos",
    eps: float = 1e-8,
) -> np.ndarray:
    """Eval-mode scores for preprocessed clouds of equal size."""
    batch = _batch(clouds)
    teacher = teacher.without_seg_head() if teacher.has_seg_head else teacher
    return score_taps(extract_taps(teacher, batch), extract_taps(student, batch), scale_mode, metric, eps)


def anomaly_score(
    teacher: BackboneParams,
    student: BackboneParams,
    cloud: PointCloud,
    scale_mode: str = "final",
    metric: str = "cos",
    eps: float = 1e-8,
) -> AnomalyScore:
    value = float(score_batch(teacher, student, cloud, scale_mode, metric, eps)[0])
    return AnomalyScore(value, scale_mode, metric)


def classify(score, tau: float) -> int:
    """0 (normal) iff ``score < tau``, else 1."""
    if not np.isfinite(tau):
        raise ValueError("threshold must be finite")
    return 0 if float(score) < tau else 1


def youden_threshold(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Threshold maximizing TPR - FPR on a labeled validation set (1 = anomalous).

    Candidates are the observed scores, so ``classify`` with the result flags
    every score at or above it.  Ties in J go to the largest threshold.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    pos, neg = int((y == 1).sum()), int((y == 0).sum())
    if pos == 0 or neg == 0:
        raise ValueError("need both normal and anomalous samples")
    best: Optional[tuple] = None
    for tau in np.unique(s)[::-1]:
        flagged = s >= tau
        j = flagged[y == 1].sum() / pos - flagged[y == 0].sum() / neg
        if best is None or j > best[0]:
            best = (j, float(tau))
    return best[1]
