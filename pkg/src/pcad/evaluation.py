"""ROC/AUC and the one-normal-category-at-a-time experiment protocol."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .backbone import BackboneConfig, BackboneParams, extract_taps
from .detect import METRICS, SCALE_MODES, score_taps
from .distill import DistillConfig, student_config, train_student
from .geometry import LabeledDataset, preprocess, stack_points

log = logging.getLogger(__name__)


def roc_curve(scores: Sequence[float], labels: Sequence[int]):
    """ROC points for "anomalous iff score >= t" over every distinct score t.

    Label 1 is the positive (anomalous) class.  Tied scores form one threshold
    group, so each group adds one point.  Returns ``(fpr, tpr, thresholds)``;
    the first point is (0, 0) at threshold +inf and the last is (1, 1).
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores for {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    if np.isnan(s).any():
        raise ValueError("scores contain NaN")
    pos = int((y == 1).sum())
    neg = y.size - pos
    if pos == 0 or neg == 0:
        raise ValueError("ROC needs at least one positive and one negative label")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y == 1)[ends]
    fp = np.cumsum(y == 0)[ends]
    tpr = np.r_[0.0, tp / pos]
    fpr = np.r_[0.0, fp / neg]
    thresholds = np.r_[np.inf, s[ends]]
    return fpr, tpr, thresholds


def auc(fpr, tpr) -> float:
    """Trapezoidal area under an ROC curve."""
    fpr = np.asarray(fpr, dtype=np.float64)
    tpr = np.asarray(tpr, dtype=np.float64)
    if fpr.shape != tpr.shape or fpr.size < 2:
        raise ValueError("need matching fpr/tpr arrays with at least two points")
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1])) / 2.0)


def roc_auc(scores, labels) -> float:
    fpr, tpr, _ = roc_curve(scores, labels)
    return auc(fpr, tpr)


def sample_std(values: Sequence[float]) -> float:
    """Standard deviation with divisor n - 1; NaN for fewer than two values."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.std(ddof=1)) if v.size > 1 else math.nan


@dataclass(frozen=True)
class Protocol:
    """What to run: which normal categories, how many samples and runs, how to score.

    ``seeds`` defaults to ``0..n_runs-1``; each seed picks the training
    samples and the student initialization.  ``points`` resamples every cloud
    (None keeps the stored clouds).  ``student_mid`` sets the student's middle
    tap width (None drops it; "same" keeps the teacher's).
    """

    categories: Union[str, tuple] = "all"
    n_samples: int = 5
    n_runs: int = 3
    seeds: Optional[tuple] = None
    scale_mode: str = "final"
    metric: str = "cos"
    points: Optional[int] = None
    epochs: int = 20
    lr0: float = 1e-3
    decay: float = 0.98
    eps: float = 1e-8
    student_mid: Union[int, str, None] = "same"
    sample_seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.seeds is not None:
            object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
            if not self.seeds:
                raise ValueError("seeds must not be empty")
        elif self.n_runs < 1:
            raise ValueError("n_runs must be >= 1")
        if self.scale_mode not in SCALE_MODES:
            raise ValueError(f"scale_mode must be one of {SCALE_MODES}")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        if self.points is not None and self.points < 2:
            raise ValueError("points must be >= 2")
        if not isinstance(self.categories, str):
            object.__setattr__(self, "categories", tuple(self.categories))

    @property
    def run_seeds(self) -> tuple:
        return self.seeds if self.seeds is not None else tuple(range(self.n_runs))

    def resolve_categories(self, dataset: LabeledDataset) -> list:
        if self.categories == "all":
            return list(dataset)
        return [dataset.category(c) for c in self.categories]

    def distill_config(self, category_id: int, seed: int) -> DistillConfig:
        return DistillConfig(
            normal_category=category_id,
            n_samples=self.n_samples,
            epochs=self.epochs,
            lr0=self.lr0,
            decay=self.decay,
            seed=seed,
            eps=self.eps,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.run_seeds)
        d["categories"] = self.categories if isinstance(self.categories, str) else list(self.categories)
        return d


@dataclass
class RunResult:
    category: str
    run: int
    seed: int
    auc: float
    train_indices: list
    fpr: np.ndarray = field(repr=False)
    tpr: np.ndarray = field(repr=False)
    thresholds: np.ndarray = field(repr=False)
    scores: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)
    paths: list = field(repr=False)
    final_loss: Optional[float] = None


@dataclass
class EvalReport:
    """All runs of one protocol; summary statistics are derived on demand."""

    runs: list
    config: dict

    @property
    def categories(self) -> list:
        seen = []
        for r in self.runs:
            if r.category not in seen:
                seen.append(r.category)
        return seen

    def aucs(self, category: str) -> list:
        return [r.auc for r in self.runs if r.category == category]

    def mean_auc(self, category: str) -> float:
        return float(np.mean(self.aucs(category)))

    def std_auc(self, category: str) -> float:
        return sample_std(self.aucs(category))

    @property
    def per_category(self) -> dict:
        return {c: (self.mean_auc(c), self.std_auc(c)) for c in self.categories}

    @property
    def overall_auc(self) -> float:
        return float(np.mean([self.mean_auc(c) for c in self.categories]))

    def write(self, out_dir) -> Path:
        """Write ``auc.csv``, one ``roc_<category>_<run>.csv`` per run, ``summary.md`` and ``scores.csv``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "auc.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["category", "run", "seed", "auc", "train_indices"])
            for r in self.runs:
                w.writerow([r.category, r.run, r.seed, repr(r.auc), " ".join(map(str, r.train_indices))])
        for r in self.runs:
            with open(out / f"roc_{r.category}_{r.run}.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["fpr", "tpr", "threshold"])
                for row in zip(r.fpr, r.tpr, r.thresholds):
                    w.writerow([repr(float(v)) for v in row])
        with open(out / "scores.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["normal_category", "run", "path", "label", "score"])
            for r in self.runs:
                for path, label, score in zip(r.paths, r.labels, r.scores):
                    w.writerow([r.category, r.run, path, int(label), repr(float(score))])
        (out / "summary.md").write_text(self.summary(), encoding="utf-8")
        return out

    def summary(self) -> str:
        cfg = self.config
        lines = [
            "# Anomaly detection AUC",
            "",
            f"Normal samples per student: {cfg.get('n_samples')}; runs per category: "
            f"{len(cfg.get('seeds', []))}; scoring: {cfg.get('scale_mode')}/{cfg.get('metric')}.",
            "Std is the sample standard deviation (divisor n - 1) over runs.",
            "",
            "| category | mean AUC | std | runs |",
            "|---|---|---|---|",
        ]
        for c in self.categories:
            m, s = self.per_category[c]
            std = "n/a" if math.isnan(s) else f"{s:.4f}"
            lines.append(f"| {c} | {m:.4f} | {std} | {len(self.aucs(c))} |")
        lines.append(f"| **avg** | {self.overall_auc:.4f} | | |")
        return "\n".join(lines) + "\n"


TrainFn = Callable[..., BackboneParams]


def choose_samples(dataset: LabeledDataset, category, n_samples: int, seed: int, points=None, sample_seed: int = 0):
    """The ``n_samples`` preprocessed training clouds a run with ``seed`` distills on.

    Returns ``(indices, clouds)`` with indices sorted.
    """
    cat = dataset.category(category)
    if len(cat.train) < n_samples:
        raise ValueError(f"category {cat.name!r} has {len(cat.train)} training clouds, {n_samples} requested")
    rng = np.random.default_rng([seed, cat.id, 4])
    idx = sorted(int(i) for i in rng.choice(len(cat.train), n_samples, replace=False))
    return idx, [preprocess(cat.train[i], points, [sample_seed, cat.id, 0, i]) for i in idx]


def prepare_test(dataset: LabeledDataset, points: Optional[int], sample_seed: int = 0):
    """One stacked, preprocessed test batch with category ids and relative paths."""
    test_pts, test_cat, test_paths = [], [], []
    for i, (cid, rel, cloud) in enumerate(dataset.test_items()):
        test_pts.append(preprocess(cloud, points, [sample_seed, cid, 1, i]))
        test_cat.append(cid)
        test_paths.append(rel)
    if not test_pts:
        raise ValueError("dataset has no test clouds")
    return stack_points(test_pts), np.array(test_cat), test_paths


def run_students(
    dataset: LabeledDataset,
    teacher: BackboneParams,
    protocol: Protocol,
    train_fn: Optional[TrainFn] = None,
):
    """Distill one student per (category, seed) and yield its test-set taps.

    Yields ``(category, run, seed, train_indices, student, teacher_taps,
    student_taps, test_categories, test_paths)``.  ``train_fn`` replaces
    :func:`train_student` (same signature) for tests and fixtures.
    """
    train_fn = train_fn or train_student
    cats = protocol.resolve_categories(dataset)
    for cat in cats:
        if len(cat.train) < protocol.n_samples:
            raise ValueError(
                f"category {cat.name!r} has {len(cat.train)} training clouds, {protocol.n_samples} requested"
            )
    frozen = teacher.without_seg_head() if teacher.has_seg_head else teacher
    test_batch, test_cat, test_paths = prepare_test(dataset, protocol.points, protocol.sample_seed)
    teacher_taps = extract_taps(frozen, test_batch)
    arch: Optional[BackboneConfig] = None
    if protocol.student_mid != "same":
        arch = student_config(frozen.config, protocol.student_mid)
    for cat in cats:
        for run, seed in enumerate(protocol.run_seeds):
            idx, samples = choose_samples(
                dataset, cat.id, protocol.n_samples, seed, protocol.points, protocol.sample_seed
            )
            student = train_fn(frozen, samples, protocol.distill_config(cat.id, seed), arch)
            student_taps = extract_taps(student, test_batch)
            log.info("category %s run %d (seed %d) distilled", cat.name, run, seed)
            yield cat, run, seed, idx, student, teacher_taps, student_taps, test_cat, test_paths


def _result(cat, run, seed, idx, student, scores, test_cat, test_paths) -> RunResult:
    labels = (test_cat != cat.id).astype(np.int64)
    fpr, tpr, thr = roc_curve(scores, labels)
    return RunResult(
        category=cat.name,
        run=run,
        seed=seed,
        auc=auc(fpr, tpr),
        train_indices=idx,
        fpr=fpr,
        tpr=tpr,
        thresholds=thr,
        scores=scores,
        labels=labels,
        paths=list(test_paths),
        final_loss=student.meta.get("final_eval_loss"),
    )


def run_scoring_sweep(
    dataset: LabeledDataset,
    teacher: BackboneParams,
    protocol: Protocol,
    modes: Sequence[tuple] = (("final", "cos"), ("multi", "cos"), ("final", "l2"), ("multi", "l2")),
    train_fn: Optional[TrainFn] = None,
) -> dict:
    """One report per ``(scale_mode, metric)``, all scored with the same students."""
    runs = {m: [] for m in modes}
    for cat, run, seed, idx, student, tt, ts, test_cat, paths in run_students(dataset, teacher, protocol, train_fn):
        for scale, metric in modes:
            scores = score_taps(tt, ts, scale, metric, protocol.eps)
            runs[(scale, metric)].append(_result(cat, run, seed, idx, student, scores, test_cat, paths))
    out = {}
    for scale, metric in modes:
        cfg = {**protocol.to_dict(), "scale_mode": scale, "metric": metric}
        out[(scale, metric)] = EvalReport(runs[(scale, metric)], cfg)
    return out


def run_experiment(
    dataset: LabeledDataset,
    teacher: BackboneParams,
    protocol: Protocol = Protocol(),
    train_fn: Optional[TrainFn] = None,
) -> EvalReport:
    """Each requested category in turn is normal and every other category anomalous."""
    mode = (protocol.scale_mode, protocol.metric)
    return run_scoring_sweep(dataset, teacher, protocol, (mode,), train_fn)[mode]


STUDENT_VARIANTS = {
    "128-2048": None,
    "128-32-2048": 32,
    "128-64-2048": 64,
    "128-256-2048": 256,
    "128-512-2048": 512,
}
POINT_COUNTS = (512, 1024, 2048)


def ablation_rows(reports: dict, axis: str) -> list:
    """Flatten ``{setting: EvalReport}`` into per-category CSV rows for one sweep axis."""
    rows = []
    for setting, rep in reports.items():
        label = setting if isinstance(setting, str) else "/".join(map(str, setting))
        for c in rep.categories:
            m, s = rep.per_category[c]
            rows.append({axis: label, "category": c, "mean_auc": m, "std_auc": s, "runs": len(rep.aucs(c))})
        rows.append({axis: label, "category": "avg", "mean_auc": rep.overall_auc, "std_auc": math.nan, "runs": ""})
    return rows


def run_ablations(
    dataset: LabeledDataset,
    teacher: BackboneParams,
    protocol: Protocol = Protocol(),
    axes: Sequence[str] = ("scale", "metric", "points", "student"),
    point_counts: Sequence[int] = POINT_COUNTS,
    variants: Optional[dict] = None,
) -> dict:
    """The four sweeps; returns ``{axis: {setting: EvalReport}}``.

    The scale and metric axes share one set of students.  The student axis
    keeps the protocol's scoring mode; the points axis resamples every cloud.
    """
    variants = STUDENT_VARIANTS if variants is None else variants
    out = {}
    if "scale" in axes or "metric" in axes:
        sweep = run_scoring_sweep(dataset, teacher, protocol, (("final", "cos"), ("multi", "cos"), ("final", "l2")))
        if "scale" in axes:
            out["scale"] = {"final": sweep[("final", "cos")], "multi": sweep[("multi", "cos")]}
        if "metric" in axes:
            out["metric"] = {"cos": sweep[("final", "cos")], "l2": sweep[("final", "l2")]}
    if "points" in axes:
        out["points"] = {
            str(w): run_experiment(dataset, teacher, replace(protocol, points=w)) for w in point_counts
        }
    if "student" in axes:
        out["student"] = {
            name: run_experiment(dataset, teacher, replace(protocol, student_mid=mid)) for name, mid in variants.items()
        }
    return out

