import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import identity_extractor, linear_student
from tlattack.attack import AttackRecord, AttackTranscript, CraftedInput, StudentQuery
from tlattack.data import Dataset
from tlattack.metrics import (baseline_random, build_report, class_histogram, effectiveness, js_distance,
                              jsd_correlation, nabac)

# sqrt of the base-2 JSD of [1/2, 1/2] vs [1, 0], evaluated at 40 digits with mpmath
JS_HALF_VS_POINT = 0.557923045284143881195083138050456490344


def transcript(rows, n_classes=2):
    """rows: (predicted_class, confidence[, rejected])."""
    t = AttackTranscript(n_classes=n_classes)
    for n, row in enumerate(rows):
        c, p = row[0], row[1]
        rej = row[2] if len(row) > 2 else False
        crafted = CraftedInput(n, np.zeros(1), np.zeros(1), [0.0], 0)
        t.records.append(AttackRecord(crafted, StudentQuery(c, p, rej), (not rej) and p >= 0.99, 0.0))
        t.n_student_queries += 1
    return t


def test_nabac_examples():
    rows = [(0, 0.5), (1, 0.7), (0, 0.995), (0, 0.999), (1, 0.98), (0, 0.1), (1, 0.992)]
    assert nabac(transcript(rows), 2) == 7
    assert nabac(transcript([(0, 0.999), (0, 0.999)]), 2) is None
    assert nabac(transcript([(0, 0.999)], 1), 1) == 1
    # rejected answers never count
    assert nabac(transcript([(0, 0.999, True)], 1), 1) is None
    with pytest.raises(ValueError):
        nabac(transcript([]), 0)


def test_effectiveness_examples():
    rows = [(0, 0.995)] * 7 + [(1, 0.5)] * 3
    assert effectiveness(transcript(rows), 0.99) == 0.7
    assert effectiveness(transcript([(2, 0.999, True)] * 4), 0.99) == 0.0
    assert effectiveness(transcript([(0, 0.3), (1, 0.6)]), 0.0) == 1.0
    with pytest.raises(ValueError):
        effectiveness(transcript([]), 0.5)


def test_effectiveness_accepts_json_records():
    recs = [{"predicted_class": 0, "confidence": 0.999, "rejected": False}, {"predicted_class": 1, "confidence": 0.2}]
    assert effectiveness(recs, 0.99) == 0.5


def test_class_histogram_examples():
    assert class_histogram(transcript([(0, 1.0), (0, 1.0), (1, 1.0)]), 0.99) == {0: 2, 1: 1}
    assert class_histogram(transcript([]), 0.99) == {}
    assert class_histogram(transcript([(0, 0.2), (1, 0.3)]), 0.99) == {0: 0, 1: 0}


def test_js_distance_examples():
    assert js_distance([0.3, 0.7], [0.3, 0.7]) == 0.0
    assert js_distance([1, 0], [0, 1]) == 1.0
    assert js_distance([0.5, 0.5], [1, 0]) == pytest.approx(JS_HALF_VS_POINT, abs=1e-12)
    with pytest.raises(ValueError):
        js_distance([0.5, 0.5], [1, 0, 0])
    with pytest.raises(ValueError):
        js_distance([0.5, 0.6], [0.5, 0.5])


def distributions(n):
    return st.lists(st.floats(0, 1), min_size=n, max_size=n).filter(lambda v: sum(v) > 1e-6).map(
        lambda v: np.array(v) / sum(v))


@settings(max_examples=300)
@given(st.integers(1, 6).flatmap(lambda n: st.tuples(distributions(n), distributions(n), distributions(n))))
def test_js_distance_is_a_bounded_metric(triple):
    p, q, r = triple
    d_pq = js_distance(p, q)
    assert d_pq == pytest.approx(js_distance(q, p), abs=1e-12)
    assert 0.0 <= d_pq <= 1.0
    assert js_distance(p, p) == 0.0
    assert d_pq <= js_distance(p, r) + js_distance(r, q) + 1e-9
    if d_pq == 0.0:
        assert np.allclose(p, q, atol=1e-6)


@settings(max_examples=100)
@given(st.lists(st.tuples(st.integers(0, 3), st.floats(0, 1), st.booleans()), max_size=30))
def test_metric_invariants(rows):
    t = transcript(rows, 4)
    hist = class_histogram(t, 0.9, 4)
    assert sum(hist.values()) == sum(1 for c, p, r in rows if p >= 0.9 and not r) <= len(rows)
    n = nabac(t, 4)
    assert n is None or n >= 4
    if rows:
        effs = [effectiveness(t, x) for x in (0.0, 0.5, 0.9, 0.99)]
        assert all(a >= b for a, b in zip(effs, effs[1:]))


def test_jsd_correlation():
    # ys are the distances-to-uniform of distributions constructed to be twice the xs
    runs, xs = [], []
    for w in (0.5, 0.6, 0.7, 0.8):
        train = np.array([w, 1 - w])
        xs.append(js_distance(train, [0.5, 0.5]))
        runs.append((train, None))
    # find target distributions whose distance is exactly 2x, by bisection
    fixed = []
    for (train, _), x in zip(runs, xs):
        lo, hi = 0.5, 1.0
        for _ in range(200):
            mid = (lo + hi) / 2
            lo, hi = (mid, hi) if js_distance([mid, 1 - mid], [0.5, 0.5]) < 2 * x else (lo, mid)
        fixed.append((train, np.array([lo, 1 - lo])))
    corr = jsd_correlation(fixed)
    assert corr.slope == pytest.approx(2.0, abs=1e-9) and corr.r == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(ValueError):
        jsd_correlation([([0.5, 0.5], [0.9, 0.1])] * 3)
    with pytest.raises(ValueError):
        jsd_correlation(fixed[:2])


def test_baseline_random():
    ext = identity_extractor()
    student = linear_student(ext, [[9.0, 0.0], [0.0, 9.0]])
    pool = Dataset(np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]), [0, 0, 0], ["x"])
    t, eff = baseline_random(student, pool, 0)
    assert len(t) == 0 and eff is None
    t1, e1 = baseline_random(student, pool, 20, seed=3)
    t2, e2 = baseline_random(student, pool, 20, seed=3)
    assert e1 == e2 and list(t1.predictions) == list(t2.predictions) and len(t1) == 20
    assert t1.records[0].to_dict()["final_loss"] is None
    with pytest.raises(ValueError):
        baseline_random(student, Dataset(np.zeros((0, 2)), [], ["x"]), 3)


def test_report_bundle():
    t = transcript([(0, 0.999), (1, 0.999), (1, 0.5)])
    rep = build_report(t, 2, train_counts=[10, 10]).to_dict()
    assert rep["nabac"] == 2 and rep["eff99"] == pytest.approx(2 / 3) and rep["js_distance_train"] == 0.0
    assert rep["class_histogram"] == {"0": 1, "1": 1}
