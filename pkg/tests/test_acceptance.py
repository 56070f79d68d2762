"""Acceptance criteria 1-8.

Each test carries a ``criterion`` mark; the terminal summary prints one
PASS/FAIL line per criterion (see conftest).  Criteria 5-7 share one
pretrained teacher and one set of distilled students.
"""

import hashlib
import json
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from pcad.backbone import BackboneConfig, forward
from pcad.cli import dispatch
from pcad.distill import cosine_loss, cosine_loss_grad
from pcad.evaluation import STUDENT_VARIANTS, Protocol, auc, roc_auc, roc_curve, run_ablations, run_experiment, run_scoring_sweep
from pcad.pretrain import PretrainConfig, pretrain_teacher, segmentation_loss
from pcad.synthgen import default_specs, generate_dataset

from conftest import NARROW
from test_backbone import _fd_check, perturbed

MODES = (("final", "cos"), ("multi", "cos"), ("final", "l2"), ("multi", "l2"))


def _central_fd(f, arr, h):
    num = np.zeros_like(arr)
    for i in np.ndindex(arr.shape):
        old = arr[i]
        arr[i] = old + h
        up = f()
        arr[i] = old - h
        down = f()
        arr[i] = old
        num[i] = (up - down) / (2 * h)
    return num


def _max_rel(num, ana):
    return np.abs(num - ana).max() / max(np.abs(num).max(), 1e-12)


# 1 -------------------------------------------------------------------------


@pytest.mark.criterion(1, "loss unit suite")
def test_c1_loss_unit_suite():
    t0 = time.perf_counter()
    v = np.array([0.3, -1.2, 2.0, 0.7])
    assert abs(cosine_loss(v, v) - 0.0) <= 1e-7
    assert abs(cosine_loss([1.0, 0.0, 0.0], [0.0, 3.0, 0.0]) - 1.0) <= 1e-7
    assert abs(cosine_loss(v, -v) - 2.0) <= 1e-7

    rng = np.random.default_rng(0)
    a = rng.standard_normal((10_000, 32)) * rng.uniform(1e-3, 1e3, (10_000, 1))
    b = rng.standard_normal((10_000, 32))
    vals = cosine_loss(a, b)
    assert vals.shape == (10_000,)
    assert vals.min() >= 0.0 and vals.max() <= 2.0

    base = cosine_loss(a[:1000], b[:1000])
    for k in (1e-3, 1.0, 1e3):
        assert np.abs(cosine_loss(k * a[:1000], b[:1000]) - base).max() <= 1e-6
    assert time.perf_counter() - t0 < 1.0


# 2 -------------------------------------------------------------------------


@pytest.mark.criterion(2, "gradient checks")
def test_c2_gradient_checks():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    for _ in range(5):
        fs, ft = rng.standard_normal((3, 16)), rng.standard_normal((3, 16))
        num = _central_fd(lambda: cosine_loss(fs, ft).sum(), fs, 1e-6)
        assert _max_rel(num, cosine_loss_grad(fs, ft)) < 1e-4

        logits = rng.standard_normal((2, 8, 5))
        labels = rng.integers(0, 5, (2, 8))
        mats = rng.standard_normal((2, 4, 4))
        _, dl, da = segmentation_loss(logits, labels, mats, 0.3, return_grad=True)
        for arr, ana in ((logits, dl), (mats, da)):
            num = _central_fd(lambda: segmentation_loss(logits, labels, mats, 0.3), arr, 1e-6)
            assert _max_rel(num, ana) < 1e-4

    # 8 points per cloud; kink-crossing entries excluded as documented there
    err = _fd_check(BackboneConfig(**NARROW, num_parts=3), np.float32, 1e-3, 1e-2, skip_kinks=True)
    assert err < 1e-2
    assert time.perf_counter() - t0 < 30.0


# 3 -------------------------------------------------------------------------


@pytest.mark.criterion(3, "permutation and duplication invariance")
def test_c3_invariance():
    t0 = time.perf_counter()
    cfg = BackboneConfig()
    w, trials = 64, 50
    # 64-bit for the absolute bound: 32-bit taps near 10 carry ~1e-6 BLAS rounding
    # that depends on batch shape, not on point order
    for dtype, bound in ((np.float64, lambda ref: 1e-5), (np.float32, lambda ref: 1e-5 * max(1.0, np.abs(ref).max()))):
        for seed in range(10):
            params = perturbed(cfg, seed, dtype)
            rng = np.random.default_rng(1000 + seed)
            pts = rng.uniform(-1, 1, (w, 3))
            base = forward(params, pts).taps.as_tuple()
            perms = np.stack([pts[rng.permutation(w)] for _ in range(trials)])
            dups = np.stack([np.concatenate([pts, pts[rng.integers(0, w, 16)]])[rng.permutation(w + 16)]
                             for _ in range(trials)])
            for batch in (perms, dups):
                for ref, got in zip(base, forward(params, batch).taps.as_tuple()):
                    assert np.abs(got - ref).max() <= bound(ref)
    assert time.perf_counter() - t0 < 30.0


# 4 -------------------------------------------------------------------------


def _pairwise(scores, labels):
    pos, neg = scores[labels == 1][:, None], scores[labels == 0][None, :]
    return ((pos > neg).sum() + 0.5 * (pos == neg).sum()) / (pos.size * neg.size)


@pytest.mark.criterion(4, "ROC/AUC oracle equivalence")
def test_c4_roc_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    for i in range(200):
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, n)
        labels[0], labels[-1] = 0, 1
        levels = (2, 3, 10, 10**6)[i % 4]  # the first three tie heavily
        scores = rng.integers(0, levels, n) / levels
        fpr, tpr, _ = roc_curve(scores, labels)
        assert abs(auc(fpr, tpr) - _pairwise(scores, labels)) <= 1e-12
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.5] * 4, [0, 1, 0, 1]) == 0.5
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0]) == 0.0
    assert time.perf_counter() - t0 < 10.0


# 5-7: the synthetic benchmark ------------------------------------------------


@pytest.fixture(scope="session")
def bench():
    """Default benchmark, a 60-epoch teacher and 5- and 1-sample sweeps over 3 seeds."""
    t0 = time.perf_counter()
    ds = generate_dataset(default_specs())
    teacher = pretrain_teacher(ds, PretrainConfig(epochs=60))
    digest = teacher.digest()
    sweeps = {n: run_scoring_sweep(ds, teacher, Protocol(n_samples=n, n_runs=3), MODES) for n in (5, 1)}
    return {
        "ds": ds,
        "teacher": teacher,
        "digest_before": digest,
        "digest_after": teacher.digest(),
        "sweeps": sweeps,
        "seconds": time.perf_counter() - t0,
    }


def _table(report):
    return {c: round(m, 4) for c, (m, _) in report.per_category.items()}


@pytest.mark.criterion(5, "end-to-end synthetic benchmark")
def test_c5_benchmark(bench, record_property):
    five = bench["sweeps"][5][("final", "cos")].per_category
    one = bench["sweeps"][1][("final", "cos")].per_category
    assert len(five) == 6
    record_property("detail", f"5 samples {_table(bench['sweeps'][5][('final', 'cos')])}")
    record_property("detail", f"1 sample  {_table(bench['sweeps'][1][('final', 'cos')])}")
    record_property("detail", f"pipeline {bench['seconds']:.0f} s")
    good = [c for c in five if five[c][0] >= 0.90 and one[c][0] >= 0.80]
    assert len(good) >= 5, (_table(bench["sweeps"][5][("final", "cos")]), _table(bench["sweeps"][1][("final", "cos")]))
    assert bench["seconds"] < 600.0


@pytest.mark.criterion(6, "frozen teacher and degenerate student")
def test_c6_frozen_teacher_and_copy_student(bench, record_property):
    assert bench["digest_after"] == bench["digest_before"]
    assert bench["teacher"].digest() == bench["digest_before"]
    for run in bench["sweeps"][5][("final", "cos")].runs:
        assert run.final_loss >= 0

    def copy_fn(teacher, samples, cfg, arch):
        return teacher.copy()

    rep = run_experiment(bench["ds"], bench["teacher"], Protocol(n_samples=1, n_runs=1), train_fn=copy_fn)
    record_property("detail", f"teacher copy {_table(rep)}")
    for run in rep.runs:
        assert np.all(run.scores == 0.0)
        assert 0.4 <= run.auc <= 0.6
    assert bench["teacher"].digest() == bench["digest_before"]


def _soft(record_property, name, value, gate, band):
    """Log a trend; fail only when it is wrong by more than ``gate``."""
    verdict = "holds" if value >= -band else "soft miss"
    record_property("detail", f"{name}: {value:+.4f} ({verdict})")
    assert value >= -(band + gate), name


@pytest.mark.criterion(7, "ablation trends")
def test_c7_ablation_trends(bench, record_property):
    sweep = bench["sweeps"][5]
    final_cos, multi_cos = sweep[("final", "cos")].overall_auc, sweep[("multi", "cos")].overall_auc
    final_l2 = sweep[("final", "l2")].overall_auc
    _soft(record_property, "cos - l2", final_cos - final_l2, 0.05, 0.0)
    # within +/-0.03 on either side
    _soft(record_property, "0.03 - |final - multi|", 0.03 - abs(final_cos - multi_cos), 0.05, 0.0)

    reduced = {k: v for k, v in STUDENT_VARIANTS.items() if v != 512}
    reps = run_ablations(bench["ds"], bench["teacher"], Protocol(n_samples=5, n_runs=3), ("student",),
                         variants=reduced)["student"]
    for name, rep in reps.items():
        _soft(record_property, f"full - {name}", final_cos - rep.overall_auc, 0.05, 0.0)


# 8 -------------------------------------------------------------------------


def _tree(root):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.criterion(8, "bitwise CLI reruns from run.json")
def test_c8_cli_rerun(tmp_path, capsys):
    work, cfgs = tmp_path / "work", tmp_path / "cfgs"
    cfgs.mkdir()
    d, t, s = work / "d", work / "t.ckpt", work / "s.ckpt"
    m = d / "manifest.json"
    steps = [
        ("gen", ["--out", d, "--seed", 3, "--categories", 2, "--train", 5, "--test", 3, "--points", 48], d / "run.json"),
        ("pretrain", ["--manifest", m, "--out", t, "--epochs", 2, "--points", 32], Path(f"{t}.run.json")),
        ("distill", ["--teacher", t, "--manifest", m, "--category", "box", "--n-samples", 2, "--epochs", 3,
                     "--out", s], Path(f"{s}.run.json")),
        ("score", ["--teacher", t, "--student", s, "--manifest", m, "--out", work / "scores.csv",
                   "--youden", "box"], work / "scores.csv.run.json"),
        ("eval", ["--manifest", m, "--teacher", t, "--out", work / "rep", "--n-runs", 2, "--n-samples", 2,
                  "--epochs", 2], work / "rep" / "run.json"),
        ("ablate", ["--manifest", m, "--teacher", t, "--out", work / "abl", "--n-runs", 1, "--n-samples", 2,
                    "--epochs", 1, "--point-counts", "24,32"], work / "abl" / "run.json"),
    ]

    def run(argv):
        assert dispatch([str(a) for a in argv]) == 0
        return capsys.readouterr().out

    first_out = []
    for cmd, args, echo in steps:
        first_out.append(run([cmd, *args]))
        shutil.copy(echo, cfgs / f"{cmd}.json")
        assert json.loads(echo.read_text())["command"] == cmd
    first = _tree(work)

    shutil.rmtree(work)
    second_out = [run([cmd, "--config", cfgs / f"{cmd}.json"]) for cmd, _, _ in steps]
    second = _tree(work)
    assert sorted(first) == sorted(second)
    assert first == second
    assert first_out == second_out
