import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from services.exceptions import ValidationError
from services.inference import Predictions
from services.metrics import (
    EvalReport,
    average_precision,
    confusion_matrix,
    mean_average_precision,
    per_class_accuracy,
    per_image_accuracy,
    top_k_accuracy,
)


def test_perfect_predictions():
    assert per_class_accuracy([0, 1, 2], [0, 1, 2]) == 1.0


def test_per_class_and_per_image_diverge():
    truth, pred = [0, 0, 0, 1], [0, 0, 0, 0]
    assert per_class_accuracy(pred, truth) == pytest.approx(0.5, abs=1e-12)
    assert per_image_accuracy(pred, truth) == pytest.approx(0.75, abs=1e-12)


def test_empty_input_rejected():
    with pytest.raises(ValidationError):
        per_class_accuracy([], [])


label_pairs = st.integers(1, 30).flatmap(
    lambda n: st.tuples(st.lists(st.integers(0, 4), min_size=n, max_size=n),
                        st.lists(st.integers(0, 4), min_size=n, max_size=n)))


@settings(max_examples=100, deadline=None)
@given(label_pairs, st.permutations(range(5)))
def test_relabeling_invariance(pair, mapping):
    pred, truth = pair
    relabel = lambda labels: [mapping[v] for v in labels]  # noqa: E731
    assert per_class_accuracy(relabel(pred), relabel(truth)) == pytest.approx(per_class_accuracy(pred, truth))
    assert per_image_accuracy(relabel(pred), relabel(truth)) == per_image_accuracy(pred, truth)


@settings(max_examples=100, deadline=None)
@given(label_pairs)
def test_confusion_conservation(pair):
    pred, truth = pair
    counts = confusion_matrix(pred, truth, range(5))
    assert counts.sum() == len(truth)
    np.testing.assert_array_equal(counts.sum(axis=1), np.bincount(truth, minlength=5))
    assert np.trace(counts) / counts.sum() == pytest.approx(per_image_accuracy(pred, truth))


def test_confusion_hand_case():
    counts = confusion_matrix([1, 1], [0, 0], [0, 1])
    np.testing.assert_array_equal(counts, [[0, 2], [0, 0]])


def test_confusion_unknown_label():
    with pytest.raises(ValidationError) as excinfo:
        confusion_matrix([0, 3], [0, 1], [0, 1])
    assert excinfo.value.contract == "unknown label"


SCORES = np.array([
    [0.9, 0.5, 0.1, 0.3],
    [0.2, 0.8, 0.7, 0.1],
    [0.4, 0.6, 0.5, 0.3],
])


def test_top_k_hand_case():
    truth = [1, 2, 3]
    # truth ranks: 2, 2, 4
    assert top_k_accuracy(SCORES, truth, 1) == pytest.approx(0.0, abs=1e-12)
    assert top_k_accuracy(SCORES, truth, 2) == pytest.approx(2 / 3, abs=1e-12)
    assert top_k_accuracy(SCORES, truth, 3) == pytest.approx(2 / 3, abs=1e-12)
    assert top_k_accuracy(SCORES, truth, 4) == 1.0


def test_top_k_ties_use_lowest_id():
    scores = np.array([[0.5, 0.5, 0.1]])
    assert top_k_accuracy(scores, [3], 1, class_ids=[3, 1, 0]) == 0.0
    assert top_k_accuracy(scores, [1], 1, class_ids=[3, 1, 0]) == 1.0


def test_top_k_range():
    with pytest.raises(ValidationError) as excinfo:
        top_k_accuracy(SCORES, [0, 0, 0], 5)
    assert excinfo.value.contract == "k out of range"
    with pytest.raises(ValidationError):
        top_k_accuracy(SCORES, [0, 0, 0], 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_top_k_monotone_and_top1_is_per_image(seed):
    rng = np.random.default_rng(seed)
    scores = rng.integers(0, 4, size=(12, 6)).astype(float)
    truth = rng.integers(0, 6, size=12)
    values = [top_k_accuracy(scores, truth, k) for k in range(1, 7)]
    assert all(a <= b for a, b in zip(values, values[1:]))
    assert values[-1] == 1.0
    pred = [int(np.flatnonzero(row == row.max())[0]) for row in scores]
    assert values[0] == per_image_accuracy(pred, truth)


def test_average_precision_hand_cases():
    assert average_precision([7, 3, 9, 1], {3}) == pytest.approx(0.5, abs=1e-12)
    assert average_precision([3, 7, 9, 1], {3, 9}) == pytest.approx((1.0 + 2.0 / 3.0) / 2.0, abs=1e-12)
    assert mean_average_precision([[1, 2, 3], [4, 5]], [{1, 2}, {4}]) == 1.0


def test_zero_relevant_rejected():
    with pytest.raises(ValidationError) as excinfo:
        average_precision([1, 2], set())
    assert excinfo.value.contract == "zero relevant"


def test_report_from_predictions():
    preds = Predictions(np.array([0, 0, 0, 0]), np.array([[0.9, 0.1]] * 4), (0, 1))
    report = EvalReport.from_predictions("U-U", preds, [0, 0, 0, 1], {0: "zebra", 1: "horse"})
    assert report.per_class_accuracy == pytest.approx(0.5)
    assert report.per_image_accuracy == pytest.approx(0.75)
    assert report.topk == {1: 0.75}
    assert report.per_image_accuracy == report.topk[1]
    assert report.test_instances == 4
    assert report.class_id_map == {0: "zebra", 1: "horse"}
    assert report.per_class == {0: 1.0, 1: 0.0}


def test_report_validates_fields():
    with pytest.raises(ValidationError):
        EvalReport("X-Y")
    with pytest.raises(ValidationError) as excinfo:
        EvalReport("ZSR", map_score=1.5)
    assert excinfo.value.contract == "metric-range"


def test_confusion_follows_candidate_order():
    counts = confusion_matrix([7, 3, 3], [3, 3, 7], [7, 3])
    np.testing.assert_array_equal(counts, [[0, 1], [1, 1]])
    assert counts.dtype == np.int64
