#!/usr/bin/env python3
"""
Evaluation measures for classification and retrieval.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.metrics import confusion_matrix as sk_confusion_matrix

from .exceptions import ValidationError

logger = logging.getLogger('lse')

SCENARIOS = ("TZSL", "U-U", "S-S", "U-T", "S-T", "ZSR")
DEFAULT_TOPK = (1, 5)


def _pair(pred, truth):
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if truth.size == 0:
        raise ValidationError("metrics need at least one instance", contract="empty input")
    if pred.size != truth.size:
        raise ValidationError(f"{pred.size} predictions for {truth.size} labels", contract="label count")
    return pred, truth


def per_class_breakdown(pred, truth):
    """{class id: within-class accuracy} over the classes present in truth"""
    pred, truth = _pair(pred, truth)
    result = {}
    for c in np.unique(truth):
        mask = truth == c
        result[int(c)] = float(np.count_nonzero(pred[mask] == c)) / float(np.count_nonzero(mask))
    return result


def per_class_accuracy(pred, truth):
    """Mean over ground-truth classes of within-class accuracy"""
    accuracies = per_class_breakdown(pred, truth)
    return float(np.mean(list(accuracies.values())))


def per_image_accuracy(pred, truth):
    pred, truth = _pair(pred, truth)
    return float(np.count_nonzero(pred == truth)) / float(truth.size)


def ranked_candidates(scores, class_ids):
    """Per-row candidate column order by descending score, ties by lowest class id"""
    scores = np.asarray(scores, dtype=np.float64)
    ids = np.asarray(class_ids)
    return np.array([np.lexsort((ids, -row)) for row in scores], dtype=np.intp).reshape(scores.shape)


def top_k_accuracy(scores, truth, k, class_ids=None):
    """
    Fraction of instances whose true class is among the k best-scoring candidates

    Args:
        scores (ndarray): instance x candidate score matrix
        truth (list): true class id per instance
        k (int): 1 <= k <= number of candidates
        class_ids (list): candidate id per score column, defaults to 0..n-1
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    truth = np.asarray(truth).ravel()
    n_candidates = scores.shape[1]
    class_ids = np.arange(n_candidates) if class_ids is None else np.asarray(class_ids)
    if class_ids.size != n_candidates:
        raise ValidationError(f"{class_ids.size} class ids for {n_candidates} score columns", contract="candidate-set")
    if truth.size == 0 or truth.size != scores.shape[0]:
        raise ValidationError(f"{truth.size} labels for {scores.shape[0]} score rows", contract="label count")
    if not (1 <= int(k) <= n_candidates):
        raise ValidationError(f"k must satisfy 1 <= k <= {n_candidates}, got {k}", contract="k out of range")
    top = class_ids[ranked_candidates(scores, class_ids)[:, :int(k)]]
    hits = np.any(top == truth[:, None], axis=1)
    return float(np.count_nonzero(hits)) / float(truth.size)


def average_precision(ranking, relevant):
    """Mean of precision@position over the positions of relevant items"""
    relevant = set(int(r) for r in relevant)
    if not relevant:
        raise ValidationError("query has zero relevant instances", contract="zero relevant")
    hits, total = 0, 0.0
    for position, item in enumerate(ranking, start=1):
        if int(item) in relevant:
            hits += 1
            total += hits / position
    return total / len(relevant)


def mean_average_precision(rankings, relevance):
    rankings = list(rankings)
    relevance = list(relevance)
    if not rankings:
        raise ValidationError("mAP needs at least one query", contract="empty input")
    if len(rankings) != len(relevance):
        raise ValidationError(f"{len(rankings)} rankings for {len(relevance)} relevance sets", contract="query count")
    return float(np.mean([average_precision(r, rel) for r, rel in zip(rankings, relevance)]))


def confusion_matrix(pred, truth, candidate_ids):
    """counts[t, p]: instances of true class t predicted as p, rows and columns in candidate order"""
    pred, truth = _pair(pred, truth)
    candidate_ids = [int(c) for c in candidate_ids]
    unknown = sorted(set(int(v) for v in np.concatenate([pred, truth])) - set(candidate_ids))
    if unknown:
        raise ValidationError(f"unknown label {unknown}: not in candidate ids {candidate_ids}", contract="unknown label")
    return sk_confusion_matrix(truth, pred, labels=candidate_ids).astype(np.int64)


@dataclass(frozen=True, eq=False)
class EvalReport:
    """Outcome of one evaluation scenario"""

    scenario: str
    per_class_accuracy: float = None
    per_image_accuracy: float = None
    topk: dict = field(default_factory=dict)
    map_score: float = None
    confusion: np.ndarray = None
    class_ids: tuple = ()
    class_id_map: dict = field(default_factory=dict)
    per_class: dict = field(default_factory=dict)
    hyper: dict = field(default_factory=dict)
    warnings: tuple = ()
    timings: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValidationError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}", contract="scenario")
        for name in ("per_class_accuracy", "per_image_accuracy", "map_score"):
            value = getattr(self, name)
            if value is not None and not (0.0 <= value <= 1.0):
                raise ValidationError(f"{name} must lie in [0, 1], got {value}", contract="metric-range")
        object.__setattr__(self, 'class_ids', tuple(int(c) for c in self.class_ids))
        object.__setattr__(self, 'warnings', tuple(self.warnings))

    @property
    def test_instances(self):
        if self.confusion is not None:
            return int(self.confusion.sum())
        return int(self.extras.get("test_instances", 0))

    @classmethod
    def from_predictions(cls, scenario, predictions, truth, class_names=None, hyper=None, warnings=(),
                         timings=None, ks=DEFAULT_TOPK, extras=None):
        """Build a classification report from a Predictions batch and the true labels"""
        truth = np.asarray(truth, dtype=np.int64).ravel()
        pred = predictions.labels
        confusion = confusion_matrix(pred, truth, predictions.class_ids)
        n_candidates = len(predictions.class_ids)
        topk = {int(k): top_k_accuracy(predictions.scores, truth, k, predictions.class_ids)
                for k in ks if 1 <= int(k) <= n_candidates}
        class_names = class_names or {}
        return cls(
            scenario=scenario,
            per_class_accuracy=per_class_accuracy(pred, truth),
            per_image_accuracy=per_image_accuracy(pred, truth),
            topk=topk,
            confusion=confusion,
            class_ids=predictions.class_ids,
            class_id_map={int(c): class_names.get(int(c), str(c)) for c in predictions.class_ids},
            per_class=per_class_breakdown(pred, truth),
            hyper=dict(hyper or {}),
            warnings=tuple(warnings),
            timings=dict(timings or {}),
            extras=dict(extras or {}),
        )

    def accuracy_fields(self):
        """The fields two reports must share to count as the same classification outcome"""
        return (self.per_class_accuracy, self.per_image_accuracy, dict(self.topk), self.map_score,
                None if self.confusion is None else self.confusion.tolist(), self.class_ids)
