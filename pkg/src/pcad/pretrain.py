"""Teacher pretraining on per-point part segmentation over every category."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from .backbone import (
    BackboneConfig,
    BackboneParams,
    LossGrad,
    backward,
    forward,
    init_params,
    update_norm_stats,
)
from .geometry import LabeledDataset, PointCloud, preprocess
from .optim import Adam, learning_rate

log = logging.getLogger(__name__)

FULL_SCALE_EPOCHS = 251


@dataclass(frozen=True)
class PretrainConfig:
    """Teacher training recipe.

    ``points`` is the number of points drawn afresh from every training cloud
    each epoch (None keeps whole clouds, which then must share one size).
    ``epochs`` defaults to the desk-scale 60; :data:`FULL_SCALE_EPOCHS` is the
    full ShapeNet-Part schedule.
    """

    epochs: int = 60
    batch_size: int = 16
    lr0: float = 1e-3
    decay: float = 0.98
    ortho_weight: float = 1e-3
    points: Optional[int] = 256
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be > 0")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if self.ortho_weight < 0:
            raise ValueError("ortho_weight must be >= 0")
        if self.points is not None and self.points < 2:
            raise ValueError("points must be >= 2")

    def to_dict(self) -> dict:
        return asdict(self)


def segmentation_loss(seg_logits, labels, align_mat, ortho_weight: float, return_grad: bool = False):
    """Mean per-point cross-entropy plus ``ortho_weight * ||A^T A - I||_F^2``.

    ``seg_logits`` is ``(N, K)`` or ``(B, W, K)``; ``align_mat`` is one ``(k, k)``
    transform or a ``(B, k, k)`` stack, whose regularizer is averaged over the
    batch.  With ``return_grad`` also returns ``(d_logits, d_align)`` shaped like
    the inputs.
    """
    logits = np.asarray(seg_logits, dtype=np.float64)
    shape = logits.shape
    logits = logits.reshape(-1, shape[-1])
    labels = np.asarray(labels).reshape(-1)
    n, k = logits.shape
    if labels.shape[0] != n:
        raise ValueError(f"{labels.shape[0]} labels for {n} points")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range for {k} classes")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    ce = float((lse - shifted[np.arange(n), labels]).mean())

    a = np.asarray(align_mat, dtype=np.float64)
    a3 = a[None] if a.ndim == 2 else a
    eye = np.eye(a3.shape[-1])
    resid = np.matmul(a3.transpose(0, 2, 1), a3) - eye
    reg = float((resid * resid).sum(axis=(1, 2)).mean())
    loss = ce + ortho_weight * reg
    if not return_grad:
        return loss
    probs = np.exp(shifted - lse[:, None])
    probs[np.arange(n), labels] -= 1.0
    d_logits = (probs / n).reshape(shape)
    d_align = (4.0 * ortho_weight / a3.shape[0]) * np.matmul(a3, resid)
    return loss, d_logits, d_align.reshape(a.shape)


def _global_labels(dataset: LabeledDataset):
    offsets = dataset.part_offsets
    clouds, labels = [], []
    for cat in dataset:
        if not cat.train:
            raise ValueError(f"category {cat.name!r} has no training clouds")
        for i, cloud in enumerate(cat.train):
            if cloud.labels is None:
                raise ValueError(f"training cloud {i} of {cat.name!r} is unlabeled")
            clouds.append(cloud)
            labels.append(cloud.labels + offsets[cat.id])
    return clouds, labels


def pretrain_teacher(
    dataset: LabeledDataset,
    config: PretrainConfig = PretrainConfig(),
    backbone: Optional[BackboneConfig] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> BackboneParams:
    """Train a teacher with a segmentation head over all categories' part labels.

    Labels are mapped into one global part space (category offset + local id).
    The head stays in the returned parameters; downstream code drops it with
    :meth:`BackboneParams.without_seg_head`.  ``on_epoch`` receives one
    ``{epoch, loss, accuracy, lr}`` row per epoch.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    clouds, labels = _global_labels(dataset)
    if config.points is None and len({len(c) for c in clouds}) != 1:
        raise ValueError("clouds differ in size; set PretrainConfig.points to resample them")
    base = backbone or BackboneConfig()
    cfg = BackboneConfig(**{**base.to_dict(), "num_parts": dataset.total_parts})
    params = init_params(cfg, [config.seed, 0])
    rng = np.random.default_rng([config.seed, 1])
    opt = Adam()
    history = []
    n = len(clouds)
    for epoch in range(config.epochs):
        lr = learning_rate(config.lr0, config.decay, epoch)
        order = rng.permutation(n)
        tot_loss = tot_correct = tot_points = 0.0
        for start in range(0, n, config.batch_size):
            chosen = order[start : start + config.batch_size]
            batch, batch_labels = [], []
            for i in chosen:
                labeled = PointCloud(clouds[i].points, labels[i])
                c = preprocess(labeled, config.points, rng.integers(2**63))
                batch.append(c.points)
                batch_labels.append(c.labels)
            pts = np.stack(batch)
            lab = np.stack(batch_labels)
            trace = forward(params, pts, "train")
            loss, d_logits, d_align = segmentation_loss(
                trace.seg_logits, lab, trace.align_mats[1], config.ortho_weight, return_grad=True
            )
            grads = backward(params, trace, LossGrad(seg_logits=d_logits, align2=d_align))
            opt.step(params.weights, grads, lr)
            update_norm_stats(params, trace)
            npts = lab.size
            tot_loss += loss * npts
            tot_correct += float((trace.seg_logits.argmax(axis=-1) == lab).sum())
            tot_points += npts
        row = {"epoch": epoch, "loss": tot_loss / tot_points, "accuracy": tot_correct / tot_points, "lr": lr}
        history.append(row)
        log.info("pretrain epoch %d loss %.4f acc %.3f lr %.2e", epoch, row["loss"], row["accuracy"], lr)
        if on_epoch is not None:
            on_epoch(row)
    params.meta = {
        "role": "teacher",
        "categories": dataset.names,
        "part_offsets": dataset.part_offsets,
        "pretrain": config.to_dict(),
        "seg_head": "excluded from distillation and scoring",
        "history": history,
    }
    return params


def segmentation_accuracy(params: BackboneParams, dataset: LabeledDataset, split: str = "train") -> float:
    """Eval-mode per-point accuracy of the segmentation head in the global part space."""
    if not params.has_seg_head:
        raise ValueError("network has no segmentation head")
    offsets = dataset.part_offsets
    correct = total = 0
    for cat in dataset:
        for cloud in getattr(cat, split):
            if cloud.labels is None:
                continue
            trace = forward(params, preprocess(cloud, None, 0).points, "eval")
            pred = trace.seg_logits[0].argmax(axis=-1)
            correct += int((pred == cloud.labels + offsets[cat.id]).sum())
            total += len(cloud)
    return correct / max(total, 1)
