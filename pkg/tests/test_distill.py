import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pcad.backbone import BackboneConfig, TapFeatures, forward, init_params
from pcad.distill import (
    DistillConfig,
    cosine_loss,
    cosine_loss_grad,
    matched_positions,
    multiscale_loss,
    student_config,
    train_student,
)
from pcad.geometry import PointCloud

from conftest import MEDIUM, NARROW

vec = arrays(np.float64, 16, elements=st.floats(-1e3, 1e3))


def scalar_cosine(a, b, eps):
    """Independent loop implementation."""
    dot = sa = sb = 0.0
    for x, y in zip(a, b):
        dot += x * y
        sa += x * x
        sb += y * y
    return 1.0 - dot / max(math.sqrt(sa) * math.sqrt(sb), eps)


def test_cosine_examples():
    v = np.array([0.3, -1.2, 2.0])
    assert cosine_loss(v, v) == 0.0
    assert cosine_loss([1.0, 0.0], [0.0, 2.0]) == pytest.approx(1.0, abs=1e-7)
    assert cosine_loss(v, -v) == pytest.approx(2.0, abs=1e-7)
    # zero student vector: numerator 0, denominator eps
    assert cosine_loss(np.zeros(3), v, 1e-8) == 1.0


def test_cosine_dimension_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        cosine_loss(np.ones(3), np.ones(4))


@given(vec, vec)
def test_cosine_range_and_oracle(a, b):
    eps = 1e-8
    assume(np.linalg.norm(a) ** 2 >= eps and np.linalg.norm(b) ** 2 >= eps)
    v = cosine_loss(a, b, eps)
    assert -1e-12 <= v <= 2 + 1e-12
    assert v == pytest.approx(scalar_cosine(a, b, eps), abs=1e-9)


@given(vec, vec, st.sampled_from([1e-3, 1.0, 1e3]))
def test_cosine_scale_invariance(a, b, k):
    assume(np.linalg.norm(a) > 1e-2 and np.linalg.norm(b) > 1e-2)
    assert cosine_loss(k * a, b) == pytest.approx(cosine_loss(a, b), abs=1e-6)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30)
def test_cosine_grad_fd(seed):
    rng = np.random.default_rng(seed)
    fs, ft = rng.standard_normal((3, 7)), rng.standard_normal((3, 7))
    g = cosine_loss_grad(fs, ft)
    h = 1e-6
    num = np.zeros_like(fs)
    for i in np.ndindex(fs.shape):
        old = fs[i]
        fs[i] = old + h
        up = cosine_loss(fs, ft).sum()
        fs[i] = old - h
        down = cosine_loss(fs, ft).sum()
        fs[i] = old
        num[i] = (up - down) / (2 * h)
    np.testing.assert_allclose(g, num, rtol=1e-4, atol=1e-9)


def _taps(*rows):
    return TapFeatures(*(None if r is None else np.atleast_2d(np.asarray(r, dtype=float)) for r in rows))


def test_multiscale_examples():
    a = _taps([1.0, 2.0], [3.0, 0.0, 1.0], [1.0, 1.0, 1.0, 1.0])
    assert multiscale_loss(a, a) == 0.0
    s = _taps([1.0, 0.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0])
    t = _taps([1.0, 0.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0, 0.0])  # losses 0, 1, 2
    assert multiscale_loss(s, t) == pytest.approx(1.0, abs=1e-12)


def test_multiscale_reduced_student_divides_by_matched():
    s = _taps([1.0, 0.0], None, [-1.0, 0.0])
    t = _taps([0.0, 1.0], [5.0, 5.0, 5.0], [1.0, 0.0])
    assert multiscale_loss(s, t) == pytest.approx((1.0 + 2.0) / 2)
    s2 = _taps([1.0, 0.0], [1.0, 1.0], [-1.0, 0.0])  # width 2 mid does not match 3
    assert multiscale_loss(s2, t) == pytest.approx(1.5)
    assert matched_positions((2, 2, 2), (2, 3, 2)) == [0, 2]
    with pytest.raises(ValueError, match="no matching"):
        multiscale_loss(_taps([1.0], None, [1.0]), _taps([1.0, 2.0], None, [1.0, 2.0]))


@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
@settings(max_examples=25)
def test_multiscale_matches_scalar_recomputation(seed, batch):
    rng = np.random.default_rng(seed)
    ws = (5, 6, 7)
    s = TapFeatures(*(rng.standard_normal((batch, w)) for w in ws))
    t = TapFeatures(*(rng.standard_normal((batch, w)) for w in ws))
    want = sum(sum(scalar_cosine(a[b], c[b], 1e-8) for a, c in zip(s.as_tuple(), t.as_tuple())) / 3 for b in range(batch))
    got, grads = multiscale_loss(s, t, return_grad=True)
    assert got == pytest.approx(want, abs=1e-6)
    assert [g.shape for g in grads] == [(batch, w) for w in ws]


def test_order_invariance_of_distillation_loss():
    cfg = BackboneConfig(**NARROW)
    s, t = init_params(cfg, 1), init_params(cfg, 2)
    pts = np.random.default_rng(0).standard_normal((15, 3)).astype(np.float32)
    perm = np.random.default_rng(1).permutation(15)
    a = multiscale_loss(forward(s, pts).taps, forward(t, pts).taps)
    b = multiscale_loss(forward(s, pts[perm]).taps, forward(t, pts[perm]).taps)
    assert a == pytest.approx(b, abs=1e-5)


def test_config_rejects_copy_init_and_bad_values():
    with pytest.raises(ValueError, match="random"):
        DistillConfig(init="teacher")
    for bad in (dict(n_samples=0), dict(eps=0), dict(epochs=0), dict(decay=0)):
        with pytest.raises(ValueError):
            DistillConfig(**bad)


def _teacher():
    return init_params(BackboneConfig(**MEDIUM, num_parts=3), 0)


def _samples(n, w=64, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        p = rng.standard_normal((w, 3))
        p -= p.mean(axis=0)
        out.append(PointCloud(p / np.linalg.norm(p, axis=1).max()))
    return out


def test_single_sample_training_reduces_loss():
    teacher = _teacher()
    student = train_student(teacher, _samples(1), DistillConfig(n_samples=1, epochs=10))
    hist = student.meta["history"]
    assert hist[-1]["loss"] < hist[0]["loss"]
    assert student.meta["final_eval_loss"] < hist[0]["loss"]
    assert not student.has_seg_head


def test_teacher_frozen_and_checksum_recorded():
    teacher = _teacher()
    before = teacher.digest()
    student = train_student(teacher, _samples(3), DistillConfig(epochs=2))
    assert teacher.digest() == before
    assert student.meta["teacher_digest"] == before
    assert student.meta["distill"]["epochs"] == 2
    assert student.digest() != teacher.without_seg_head().digest()


def test_student_is_deterministic():
    teacher = _teacher()
    a = train_student(teacher, _samples(2), DistillConfig(epochs=2, seed=5))
    b = train_student(teacher, _samples(2), DistillConfig(epochs=2, seed=5))
    assert a.digest() == b.digest()


def test_large_sample_sets_use_minibatches():
    teacher = init_params(BackboneConfig(**NARROW, num_parts=3), 0)
    student = train_student(teacher, _samples(11, 16), DistillConfig(epochs=2, n_samples=11))
    assert len(student.meta["history"]) == 2


def test_reduced_students():
    teacher = _teacher()
    for mid in (None, 32):
        arch = student_config(teacher.config, mid)
        student = train_student(teacher, _samples(2), DistillConfig(epochs=2), arch)
        assert student.config.mid == mid
        assert student.config.tap_widths[2] == teacher.config.out


def test_train_student_errors():
    teacher = _teacher()
    with pytest.raises(ValueError, match="empty"):
        train_student(teacher, [], DistillConfig())
    bad = BackboneConfig(**{**MEDIUM, "mlp1": (32, 64, 65), "mid": 129, "out": 257})
    with pytest.raises(ValueError, match="share no width"):
        train_student(teacher, _samples(1), DistillConfig(), bad)
    with pytest.raises(ValueError, match="segmentation head"):
        train_student(teacher, _samples(1), DistillConfig(), teacher.config)
