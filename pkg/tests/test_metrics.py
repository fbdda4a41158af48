import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hgprop.metrics import EvalReport, evaluate


def nested_loop_oracle(pred, truth, class_count):
    exact = tp = fp = fn = 0
    for i in range(len(truth)):
        same = True
        for c in range(class_count):
            p, t = c in pred[i], c in truth[i]
            if p and t:
                tp += 1
            elif p:
                fp += 1
                same = False
            elif t:
                fn += 1
                same = False
        exact += same
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return exact / len(truth), prec, rec, f1


def random_case(rng, n=20, q=6):
    def draw():
        return [sorted(rng.choice(q, size=rng.integers(0, 4), replace=False).tolist()) for _ in range(n)]
    return draw(), draw()


def test_perfect_predictions():
    truth = [[0, 2], [1], [], [3]]
    r = evaluate(truth, truth)
    assert (r.subset_accuracy, r.precision, r.recall, r.f1) == (1.0, 1.0, 1.0, 1.0)


def test_half_exact_match():
    truth = [[0], [1], [2], [3]]
    pred = [[0], [1], [0], []]
    r = evaluate(pred, truth)
    assert r.subset_accuracy == 0.5
    assert r.precision == 2 / 3 and r.recall == 0.5


def test_zero_over_zero_is_zero():
    r = evaluate([[], []], [[], []])
    assert r.subset_accuracy == 1.0 and (r.precision, r.recall, r.f1) == (0.0, 0.0, 0.0)


def test_mismatched_lengths():
    with pytest.raises(ValueError):
        evaluate([[0]], [[0], [1]])


@pytest.mark.parametrize("seed", range(50))
def test_matches_nested_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    pred, truth = random_case(rng)
    r = evaluate(pred, truth)
    expected = nested_loop_oracle(pred, truth, 6)
    np.testing.assert_allclose((r.subset_accuracy, r.precision, r.recall, r.f1), expected, atol=1e-12)
    assert r.node_count == 20


def test_permutation_invariance():
    rng = np.random.default_rng(1)
    pred, truth = random_case(rng)
    perm = rng.permutation(20)
    assert evaluate([pred[i] for i in perm], [truth[i] for i in perm]) == evaluate(pred, truth)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sets(st.integers(0, 4)), st.sets(st.integers(0, 4))), min_size=1, max_size=15))
def test_properties(pairs):
    pred = [p for p, _ in pairs]
    truth = [t for _, t in pairs]
    r = evaluate(pred, truth)
    for v in (r.subset_accuracy, r.precision, r.recall, r.f1):
        assert 0.0 <= v <= 1.0
    if r.precision and r.recall:
        assert min(r.precision, r.recall) - 1e-12 <= r.f1 <= max(r.precision, r.recall) + 1e-12
    more = evaluate(pred + [{1}], truth + [{1}])
    assert more.subset_accuracy >= r.subset_accuracy


def test_json_and_render():
    r = EvalReport(0.9316, 0.95, 0.94, 0.945, 10)
    assert json.loads(r.to_json()) == r.as_dict()
    lines = r.render("R-SAGN").splitlines()
    assert lines[0].split() == ["Method", "Acc.", "Prec.", "Rec.", "F1."]
    assert lines[1].split() == ["R-SAGN", "93.16", "95.00", "94.00", "94.50"]
