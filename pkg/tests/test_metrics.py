from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kpseg.metrics import ConfusionMatrix, accumulate, compute_metrics, evaluate_labels
from kpseg.pccore import CLASS_NAMES


def set_oracle(pred, truth, num_classes=6):
    """IoU per class as |P ∩ T| / |P ∪ T| over explicit index sets, in exact rationals."""
    ious = {}
    for c in range(num_classes):
        P = {i for i, p in enumerate(pred) if p == c}
        T = {i for i, t in enumerate(truth) if t == c}
        union = P | T
        if union:
            ious[c] = Fraction(len(P & T), len(union))
    oa = Fraction(sum(p == t for p, t in zip(pred, truth)), len(truth))
    miou = sum(ious.values(), Fraction(0)) / len(ious)
    return ious, oa, miou


def test_set_oracle_thousand_cases():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        k = int(rng.integers(1, 7))
        truth = rng.integers(0, k, n)
        pred = np.where(rng.random(n) < 0.5, truth, rng.integers(0, 6, n))
        rep = evaluate_labels(pred, truth)
        ious, oa, miou = set_oracle(pred.tolist(), truth.tolist())
        assert rep.oa == float(oa)
        assert rep.miou == float(miou)
        for c, name in enumerate(CLASS_NAMES):
            expected = float(ious[c]) if c in ious else None
            assert rep.iou[name] == expected


def test_four_point_example():
    rep = evaluate_labels(np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1]))
    assert rep.oa == 0.75
    assert rep.iou["natural"] == 0.5
    assert rep.iou["bridge"] == float(Fraction(2, 3))
    assert rep.miou == float(Fraction(7, 12))
    assert all(rep.iou[n] is None for n in CLASS_NAMES[2:])


def test_tp_fp_fn_arithmetic():
    counts = np.zeros((6, 6), dtype=np.int64)
    counts[0, 0] = 50
    counts[1, 0] = 10  # false positives for class 0
    counts[0, 2] = 5  # false negatives for class 0
    rep = compute_metrics(ConfusionMatrix(6, counts))
    assert rep.iou["natural"] == pytest.approx(50 / 65)
    assert abs(rep.iou["natural"] - 0.76923) < 1e-5


def test_perfect_prediction():
    truth = np.arange(60) % 6
    rep = evaluate_labels(truth, truth)
    assert rep.oa == 1.0 and rep.miou == 1.0
    assert all(v == 1.0 for v in rep.iou.values())


def test_accumulate_examples():
    cm = ConfusionMatrix()
    accumulate(cm, np.full(10, 2), np.full(10, 2))
    expected = np.zeros((6, 6), dtype=np.int64)
    expected[2, 2] = 10
    np.testing.assert_array_equal(cm.counts, expected)
    accumulate(cm, np.zeros(4), np.full(4, 255))
    np.testing.assert_array_equal(cm.counts, expected)


def test_accumulate_errors():
    with pytest.raises(ValueError):
        ConfusionMatrix().accumulate([0, 1], [0])
    with pytest.raises(ValueError):
        ConfusionMatrix().accumulate([7], [0])
    with pytest.raises(ValueError):
        compute_metrics(ConfusionMatrix())


def test_report_json_and_table():
    rep = evaluate_labels(np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1]))
    d = rep.to_dict()
    assert set(d) == {"oa", "miou", "iou", "confusion"}
    assert d["confusion"][0] == [1, 1, 0, 0, 0, 0]
    lines = rep.table("tiny").splitlines()
    assert lines[0].split("|")[0].strip() == "Method"
    assert "75.00%" in lines[2] and "58.33%" in lines[2]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 200), st.integers(1, 8))
def test_chunked_accumulation_and_permutation(seed, n, chunks):
    rng = np.random.default_rng(seed)
    truth = rng.integers(0, 6, n)
    truth[rng.random(n) < 0.1] = 255
    pred = rng.integers(0, 6, n)
    whole = ConfusionMatrix().accumulate(pred, truth)
    parts = [ConfusionMatrix().accumulate(p, t) for p, t in zip(np.array_split(pred, chunks), np.array_split(truth, chunks))]
    merged = parts[0]
    for p in parts[1:]:
        merged = merged.merge(p)
    np.testing.assert_array_equal(whole.counts, merged.counts)
    perm = rng.permutation(n)
    permuted = ConfusionMatrix().accumulate(pred[perm], truth[perm])
    np.testing.assert_array_equal(whole.counts, permuted.counts)
    if whole.total:
        rep = compute_metrics(whole)
        assert 0 <= rep.oa <= 1 and 0 <= rep.miou <= 1
        assert all(v is None or 0 <= v <= 1 for v in rep.iou.values())
        assert rep.oa == float(Fraction(int(np.trace(whole.counts)), whole.total))
