import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pcad.backbone import BackboneConfig, TapFeatures, init_params
from pcad.detect import AnomalyScore, anomaly_score, classify, score_batch, score_taps, youden_threshold
from pcad.geometry import PointCloud

from conftest import NARROW


def _pts(seed, w=20):
    p = np.random.default_rng(seed).standard_normal((w, 3))
    return PointCloud(p / np.abs(p).max())


@pytest.fixture(scope="module")
def pair():
    teacher = init_params(BackboneConfig(**NARROW, num_parts=3), 0)
    student = init_params(BackboneConfig(**NARROW), 1)
    return teacher, student


def test_teacher_copy_scores_zero(pair):
    teacher, _ = pair
    copy = teacher.without_seg_head()
    for s in range(5):
        assert anomaly_score(teacher, copy, _pts(s)).value == 0.0
        assert anomaly_score(teacher, copy, _pts(s), "multi").value == 0.0
        assert anomaly_score(teacher, copy, _pts(s), metric="l2").value == 0.0


def test_score_ranges_and_modes(pair):
    teacher, student = pair
    for s in range(5):
        for mode in ("final", "multi"):
            v = anomaly_score(teacher, student, _pts(s), mode).value
            assert 0 <= v <= 2
        assert anomaly_score(teacher, student, _pts(s), metric="l2").value >= 0


def test_score_definitions():
    t = TapFeatures(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0, 0.0]]), np.array([[3.0, 4.0]]))
    s = TapFeatures(np.array([[1.0, 0.0]]), np.array([[0.0, -1.0, 0.0]]), np.array([[0.0, 4.0]]))
    assert score_taps(t, s)[0] == pytest.approx(1 - 16 / 20)
    assert score_taps(t, s, metric="l2")[0] == pytest.approx(3.0)
    assert score_taps(t, s, "multi")[0] == pytest.approx((0 + 2 + 0.2) / 3)
    reduced = TapFeatures(s.f1, None, s.f3)
    assert score_taps(t, reduced, "multi")[0] == pytest.approx((0 + 0.2) / 2)
    with pytest.raises(ValueError):
        score_taps(t, TapFeatures(s.f1, None, np.ones((1, 3))))
    with pytest.raises(ValueError):
        score_taps(t, s, "middle")


def test_score_deterministic_and_permutation_invariant(pair):
    teacher, student = pair
    c = _pts(3, 30)
    a, b = anomaly_score(teacher, student, c), anomaly_score(teacher, student, c)
    assert a.value == b.value
    perm = PointCloud(c.points[np.random.default_rng(0).permutation(30)])
    assert anomaly_score(teacher, student, perm).value == pytest.approx(a.value, abs=1e-5)


def test_score_batch_matches_single(pair):
    teacher, student = pair
    clouds = [_pts(s) for s in range(4)]
    batch = score_batch(teacher, student, clouds)
    single = [anomaly_score(teacher, student, c).value for c in clouds]
    np.testing.assert_allclose(batch, single, rtol=1e-6)


def test_anomaly_score_type():
    with pytest.raises(ValueError):
        AnomalyScore(-0.1)
    with pytest.raises(ValueError):
        AnomalyScore(2.5, metric="cos")
    assert float(AnomalyScore(2.5, metric="l2")) == 2.5


def test_classify_examples():
    assert classify(0.1, 0.5) == 0
    assert classify(0.5, 0.5) == 1
    assert classify(1.9, 0.5) == 1
    assert classify(AnomalyScore(0.2), 0.3) == 0
    with pytest.raises(ValueError):
        classify(0.1, float("nan"))


finite = st.floats(-1e6, 1e6)


@given(finite, finite, finite)
def test_classify_monotone(s1, s2, tau):
    lo, hi = sorted((s1, s2))
    assert classify(lo, tau) <= classify(hi, tau)
    assert classify(tau, lo) >= classify(tau, hi)


def test_youden_threshold():
    scores = [0.1, 0.2, 0.3, 0.7, 0.8, 0.35]
    labels = [0, 0, 0, 1, 1, 1]
    tau = youden_threshold(scores, labels)
    assert tau == 0.35
    assert [classify(s, tau) for s in scores] == labels
    # J = 0.5 at both 0.9 and 0.5; the larger threshold wins
    assert youden_threshold([0.1, 0.5, 0.6, 0.9], [0, 1, 0, 1]) == 0.9
    with pytest.raises(ValueError):
        youden_threshold([0.1, 0.2], [0, 0])
