"""Student distillation with the multi-scale cosine loss against a frozen teacher."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .backbone import (
    BackboneConfig,
    BackboneParams,
    LossGrad,
    TapFeatures,
    backward,
    extract_taps,
    forward,
    init_params,
    update_norm_stats,
)
from .geometry import PointCloud, stack_points
from .optim import Adam, learning_rate

log = logging.getLogger(__name__)

FULL_BATCH_LIMIT = 8


@dataclass(frozen=True)
class DistillConfig:
    normal_category: Union[int, str] = 0
    n_samples: int = 5
    epochs: int = 20
    lr0: float = 1e-3
    decay: float = 0.98
    seed: int = 0
    eps: float = 1e-8
    init: str = "random"

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.eps > 0:
            raise ValueError("eps must be > 0")
        if not self.lr0 > 0 or not 0 < self.decay <= 1:
            raise ValueError("need lr0 > 0 and 0 < decay <= 1")
        if self.init != "random":
            # a student copied from the teacher scores every input as 0
            raise ValueError(f"student init must be 'random', got {self.init!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def _cos_parts(fs, ft, eps):
    fs = np.asarray(fs, dtype=np.float64)
    ft = np.asarray(ft, dtype=np.float64)
    if fs.shape != ft.shape:
        raise ValueError(f"dimension mismatch: {fs.shape} vs {ft.shape}")
    dot = (fs * ft).sum(axis=-1)
    ss = (fs * fs).sum(axis=-1)
    tt = (ft * ft).sum(axis=-1)
    # sqrt(ss * tt) is exactly dot when fs == ft, so identical inputs give 0
    denom = np.maximum(np.sqrt(ss * tt), eps)
    return fs, ft, dot, ss, tt, denom


def cosine_loss(fs, ft, eps: float = 1e-8):
    """``1 - fs.ft / max(|fs| |ft|, eps)``, row-wise for 2-D inputs."""
    _, _, dot, _, _, denom = _cos_parts(fs, ft, eps)
    out = 1.0 - dot / denom
    return float(out) if np.ndim(out) == 0 else out


def cosine_loss_grad(fs, ft, eps: float = 1e-8) -> np.ndarray:
    """Gradient of :func:`cosine_loss` with respect to ``fs`` (same shape as ``fs``)."""
    fs, ft, dot, ss, tt, denom = _cos_parts(fs, ft, eps)
    active = np.sqrt(ss * tt) > eps
    safe_ss = np.where(active, ss, 1.0)
    g = -ft / denom[..., None] if np.ndim(denom) else -ft / denom
    corr = np.where(active, dot / (safe_ss * denom), 0.0)
    return g + (corr[..., None] if np.ndim(corr) else corr) * fs


def matched_positions(student: Sequence, teacher: Sequence) -> list:
    """Tap indices distilled between two width triples: present in both, equal width."""
    return [i for i, (s, t) in enumerate(zip(student, teacher)) if s is not None and s == t]


def multiscale_loss(taps_s: TapFeatures, taps_t: TapFeatures, eps: float = 1e-8, return_grad: bool = False):
    """Per-sample mean of the cosine loss over matched taps, summed over the batch.

    Only positions where both networks have a tap of equal width count; the
    mean divides by that number.  With ``return_grad`` also returns gradients
    w.r.t. the student taps (None at unmatched positions).
    """
    pos = matched_positions(taps_s.widths, taps_t.widths)
    if not pos:
        raise ValueError(f"no matching taps between widths {taps_s.widths} and {taps_t.widths}")
    s_all, t_all = taps_s.as_tuple(), taps_t.as_tuple()
    total = 0.0
    grads = [None, None, None]
    for i in pos:
        fs, ft = np.atleast_2d(s_all[i]), np.atleast_2d(t_all[i])
        total += float(np.sum(cosine_loss(fs, ft, eps))) / len(pos)
        if return_grad:
            grads[i] = (cosine_loss_grad(fs, ft, eps) / len(pos)).reshape(np.shape(s_all[i]))
    return (total, grads) if return_grad else total


def student_config(teacher: BackboneConfig, mid: Optional[int] = "same") -> BackboneConfig:
    """The teacher's architecture without its head; ``mid`` overrides the middle tap."""
    cfg = teacher.without_seg_head().to_dict()
    if mid != "same":
        cfg["mid"] = mid
    return BackboneConfig.from_dict(cfg)


def train_student(
    teacher: BackboneParams,
    samples: Sequence[PointCloud],
    config: DistillConfig = DistillConfig(),
    architecture: Optional[BackboneConfig] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> BackboneParams:
    """Distill a freshly initialized student from ``teacher`` on normal ``samples``.

    Samples must already be preprocessed.  With at most ``FULL_BATCH_LIMIT``
    samples each epoch is one full-batch step on the summed loss; larger sets
    use mini-batches of that size.  After training the student's normalization
    statistics are set from one pass over its training samples.
    """
    if not samples:
        raise ValueError("empty sample list")
    batch = stack_points(list(samples))
    arch = architecture or student_config(teacher.config)
    if arch.num_parts is not None:
        raise ValueError("student architecture must not carry a segmentation head")
    if not matched_positions(arch.tap_widths, teacher.config.tap_widths):
        raise ValueError(f"student taps {arch.tap_widths} share no width with teacher {teacher.config.tap_widths}")
    teacher_digest = teacher.digest()

    student = init_params(arch, [config.seed, 2], dtype=teacher.dtype)
    if student.digest() == teacher.without_seg_head().digest():  # pragma: no cover
        raise ValueError("student must not start as a copy of the teacher")

    target = extract_taps(teacher, batch)
    rng = np.random.default_rng([config.seed, 3])
    n = len(batch)
    step = n if n <= FULL_BATCH_LIMIT else FULL_BATCH_LIMIT
    opt = Adam()
    history = []
    for epoch in range(config.epochs):
        lr = learning_rate(config.lr0, config.decay, epoch)
        order = np.arange(n) if step == n else rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, step):
            idx = order[start : start + step]
            trace = forward(student, batch[idx], "train")
            loss, d_taps = multiscale_loss(trace.taps, target[idx], config.eps, return_grad=True)
            grads = backward(student, trace, LossGrad(taps=d_taps))
            opt.step(student.weights, grads, lr)
            update_norm_stats(student, trace)
            epoch_loss += loss
        row = {"epoch": epoch, "loss": epoch_loss / n, "lr": lr}
        history.append(row)
        log.info("distill epoch %d loss %.5f lr %.2e", epoch, row["loss"], lr)
        if on_epoch is not None:
            on_epoch(row)

    if n <= FULL_BATCH_LIMIT:
        update_norm_stats(student, forward(student, batch, "train"), momentum=1.0)
    final = multiscale_loss(extract_taps(student, batch), target, config.eps) / n

    if teacher.digest() != teacher_digest:  # pragma: no cover
        raise RuntimeError("teacher parameters changed during distillation")
    student.meta = {
        "role": "student",
        "teacher_digest": teacher_digest,
        "distill": config.to_dict(),
        "history": history,
        "final_eval_loss": final,
    }
    return student
