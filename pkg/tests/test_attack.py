import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import identity_extractor, linear_student
from tlattack.attack import (AttackConfig, attack_loss, brute_force, capped_attack, craft_for_neuron, craft_set,
                             init_input, neuron_order, query_student)
from tlattack.data import Dataset
from tlattack.errors import NumericOverflowError, ShapeError
from tlattack.netcore import Network, build_network, dense, flatten, relu


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def small_extractor(seed=0):
    return build_network([flatten(), dense(9, 12), relu(), dense(12, 10), relu()], (3, 3), seed)


def test_attack_loss_examples():
    F = np.array([3.0, -1.0, -2.0])
    loss, g = attack_loss(np.array([1000.0, -1.0]), 0, 1000, 1.0, 0.01)
    assert loss == 0 and np.all(g == 0)
    loss, g = attack_loss(np.array([0.0, -1.0, -5.0]), 0, 1000, 1.0, 0.01)
    assert loss == 1e6 and list(g) == [-2000.0, 0.0, 0.0]
    loss, g = attack_loss(np.array([1000.0, 3.0]), 0, 1000, 1.0, 0.01)
    assert loss == pytest.approx(0.09) and g[1] == pytest.approx(0.06) and g[0] == 0
    with pytest.raises(IndexError):
        attack_loss(F, 3, 1000, 1, 0.01)


@settings(max_examples=50)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6), st.data())
def test_attack_loss_gradient_matches_finite_differences(values, data):
    F = np.array(values)
    i = data.draw(st.integers(0, len(values) - 1))
    _, g = attack_loss(F, i, 3.0, 1.5, 0.3)
    h = 1e-6
    for j in range(len(F)):
        if j != i and abs(F[j]) < 1e-3:
            continue  # relu kink
        e = np.zeros_like(F)
        e[j] = h
        fd = (attack_loss(F + e, i, 3.0, 1.5, 0.3)[0] - attack_loss(F - e, i, 3.0, 1.5, 0.3)[0]) / (2 * h)
        assert g[j] == pytest.approx(fd, rel=1e-5, abs=1e-6)


def test_init_input_modes():
    assert np.array_equal(init_input("blank", (2, 2)), np.ones((2, 2)))
    a, b = init_input("random", (3, 3), 5), init_input("random", (3, 3), 5)
    assert np.array_equal(a, b) and a.min() >= 0 and a.max() < 1
    one = Dataset(np.full((1, 2, 2), 0.25), [0], ["a"])
    assert np.array_equal(init_input("sample", (2, 2), 9, one), one.inputs[0])
    with pytest.raises(ValueError):
        init_input("sample", (2, 2))


def test_config_validation():
    for bad in (dict(K=-1), dict(alpha=0), dict(target_value=0), dict(confidence_threshold=1.0),
                dict(init_mode="x"), dict(clip="x"), dict(neuron_order="x")):
        with pytest.raises(ValueError):
            AttackConfig(**bad)


def test_k_zero_returns_init():
    ext = small_extractor()
    init = np.random.default_rng(0).uniform(size=(3, 3))
    c = craft_for_neuron(ext, 2, AttackConfig(K=0), init)
    assert np.array_equal(c.input, init) and c.iterations == 0 and len(c.loss_trajectory) == 1


def scalar_oracle(K, alpha, gamma, beta, target):
    """Independent recurrence for the 2-d identity extractor, neuron 0, blank start."""
    x0, x1 = 1.0, 1.0
    for _ in range(K):
        g0 = 2 * gamma * (x0 - target) if x0 > 0 else 0.0
        g1 = 2 * beta * x1 if x1 > 0 else 0.0
        x0, x1 = x0 - alpha * g0, x1 - alpha * g1
    return x0, x1


def test_identity_extractor_follows_scalar_recurrence():
    cfg = AttackConfig(K=300)
    c = craft_for_neuron(identity_extractor(), 0, cfg)
    x0, x1 = scalar_oracle(300, 0.1, 1.0, 0.01, 1000.0)
    assert c.input[0] == pytest.approx(x0, rel=1e-12) and c.input[1] == pytest.approx(x1, rel=1e-12)
    assert abs(c.input[0] - 1000) < 1e-6
    assert c.final_loss < 1e-2 * c.loss_trajectory[0]


def test_trajectory_is_subsampled():
    c = craft_for_neuron(identity_extractor(), 1, AttackConfig(K=1000))
    assert len(c.loss_trajectory) == 101
    c = craft_for_neuron(identity_extractor(), 1, AttackConfig(K=7))
    assert len(c.loss_trajectory) == 8


def test_capped_target_on_identity_toy():
    c = craft_for_neuron(identity_extractor(3), 1, AttackConfig(K=500, target_value=50))
    assert c.activation.max() <= 51.0


def test_unit_range_clip_keeps_inputs_valid():
    c = craft_for_neuron(small_extractor(), 4, AttackConfig(K=50, clip="unit_range"))
    assert c.input.min() >= 0 and c.input.max() <= 1


def test_overflow_reports_iteration():
    with pytest.raises(NumericOverflowError) as info:
        linear = Network([dense(2, 2)], [(np.eye(2), np.zeros(2))], (2,), 0)
        craft_for_neuron(linear, 0, AttackConfig(K=1000, alpha=50.0))
    assert 0 < info.value.iteration < 1000


def test_two_class_closed_form():
    ext = identity_extractor()
    W = np.array([[3.0, 1.0], [0.5, 2.5]])  # W[neuron, class]
    student = linear_student(ext, W)
    for target in (0.5, 1.0, 2.0, 4.0):
        cfg = AttackConfig(K=400, target_value=target)
        # off-target coordinate starts negative, so it stays silent
        c = craft_for_neuron(ext, 0, cfg, np.array([1.0, -1.0]))
        q = query_student(student, c.input)
        assert q.predicted_class == 0
        assert q.confidence == pytest.approx(sigmoid((W[0, 0] - W[0, 1]) * c.input[0]), abs=1e-6)
    confs = [query_student(student, np.array([x, -1.0])).confidence for x in np.linspace(0, 5, 11)]
    assert np.all(np.diff(confs) > 0)


def test_all_classes_stop_after_two_attempts():
    ext = identity_extractor()
    student = linear_student(ext, [[2.0, 0.0], [0.0, 2.0]])
    t = brute_force(ext, student, AttackConfig(K=200), "all_classes")
    assert len(t) == 2 and t.stop_reason == "all_classes"
    assert list(t.predictions) == [0, 1] and np.all(t.confidences > 0.99)


def test_query_student_examples():
    ext = identity_extractor()
    student = linear_student(ext, np.eye(2))
    q = query_student(student, np.array([5.0, 0.0]))
    assert q.predicted_class == 0 and q.confidence == pytest.approx(1 / (1 + np.exp(-5)), abs=1e-12)
    assert query_student(student, np.array([1.0, 1.0])).confidence == pytest.approx(0.5)
    rej = linear_student(ext, np.eye(2), ["a", "__reject__"])
    rej.reject_index = 1
    assert query_student(rej, np.array([0.0, 3.0])).rejected
    with pytest.raises(ShapeError):
        query_student(student, np.zeros(3))


def test_stop_rules_and_empty_extractor():
    ext = identity_extractor()
    student = linear_student(ext, [[2.0, 0.0], [0.0, 2.0]])
    t = brute_force(ext, student, AttackConfig(K=200), "first_bypass")
    assert len(t) == 1 and t.stop_reason == "first_bypass"
    t = brute_force(ext, student, AttackConfig(K=10), "exhaust")
    assert len(t) == 2 and t.n_student_queries == 2
    empty = Network([dense(2, 0)], [(np.zeros((2, 0)), np.zeros(0))], (2,), 0)
    head = Network([dense(0, 2), *linear_student(ext, np.eye(2)).head.layers[1:]],
                   [(np.zeros((0, 2)), np.zeros(2)), None], (0,), 0)
    from tlattack.pipeline import StudentModel
    t = brute_force(empty, StudentModel(empty, head, ["a", "b"]), AttackConfig())
    assert len(t) == 0 and t.stop_reason == "exhaust"


def test_crafting_independent_of_workers_and_order():
    ext = small_extractor(1)
    cfg = AttackConfig(K=60, block_size=4, init_mode="random", seed=3)
    serial = craft_set(ext, cfg, workers=1)
    parallel = craft_set(ext, cfg, neurons=[9, 3, 0, 5, 1, 2, 4, 6, 7, 8], workers=3)
    for i in range(10):
        assert serial[i].input.tobytes() == parallel[i].input.tobytes()
    # blocks of one reproduce the batched result up to rounding
    single = craft_for_neuron(ext, 5, cfg)
    assert np.allclose(single.input, serial[5].input, rtol=1e-9, atol=1e-12)


def test_seeded_shuffle_order():
    cfg = AttackConfig(neuron_order="seeded_shuffle", seed=4)
    order = neuron_order(10, cfg)
    assert sorted(order) == list(range(10)) and order == neuron_order(10, cfg)
    ext = small_extractor(2)
    student = linear_student(ext, np.random.default_rng(0).normal(size=(10, 3)))
    a = brute_force(ext, student, AttackConfig(K=20, neuron_order="seeded_shuffle", seed=4, block_size=3))
    b = brute_force(ext, student, AttackConfig(K=20, block_size=3))
    assert [r.crafted.neuron for r in a.records] == order
    by_neuron = {r.crafted.neuron: r.crafted.input.tobytes() for r in b.records}
    assert all(by_neuron[r.crafted.neuron] == r.crafted.input.tobytes() for r in a.records)


def test_target_agnostic_replay():
    ext = small_extractor(3)
    rng = np.random.default_rng(1)
    s1 = linear_student(ext, rng.normal(size=(10, 3)))
    s2 = linear_student(ext, rng.normal(size=(10, 4)))
    cfg = AttackConfig(K=40)
    t1, t2 = brute_force(ext, s1, cfg), brute_force(ext, s2, cfg)
    assert all(a.crafted.input.tobytes() == b.crafted.input.tobytes() for a, b in zip(t1.records, t2.records))


def test_capped_attack_keys():
    ext = identity_extractor()
    student = linear_student(ext, [[2.0, 0.0], [0.0, 2.0]])
    out = capped_attack(ext, student, AttackConfig(K=100), caps=(1.0, 50.0))
    assert sorted(out) == [1.0, 50.0]
    assert out[1.0].confidences.max() < out[50.0].confidences.max()


def test_transcript_json_lines():
    ext = identity_extractor()
    t = brute_force(ext, linear_student(ext, np.eye(2)), AttackConfig(K=5))
    lines = t.to_jsonl().splitlines()
    import json
    rec = json.loads(lines[0])
    assert set(rec) == {"i", "confidence", "predicted_class", "rejected", "bypass", "final_loss",
                        "iterations", "wall_ms"}
    assert len(lines) == 2
