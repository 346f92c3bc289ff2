"""Ranking and classification metrics."""
from __future__ import annotations

import math

import numpy as np

from .errors import DomainError, StateError
from .numkernel import RngStream
from .recmodel import ScorerParams, score_all


def _ranks(ranks) -> np.ndarray:
    r = np.asarray(list(ranks), dtype=np.int64)
    if r.size == 0:
        raise DomainError("no users to evaluate")
    if np.any(r < 1):
        raise DomainError("ranks start at 1")
    return r


def hr_at_k(ranks, k: int) -> float:
    r = _ranks(ranks)
    return float(np.count_nonzero(r <= k)) / r.size


def ndcg_at_k(ranks, k: int) -> float:
    """Single relevant item per user, so IDCG = 1."""
    r = _ranks(ranks)
    gains = [1.0 / math.log2(x + 1) if x <= k else 0.0 for x in r.tolist()]
    return math.fsum(gains) / r.size


def rank_test_item(em_u, items: np.ndarray, scorer: ScorerParams, train_items, test_item,
                   n_candidates: int | None = None, rng: RngStream | None = None) -> int:
    """1 + number of competing candidates scoring >= the held-out item.

    Candidates are all items outside the user's training set; with
    ``n_candidates`` a uniform sample of that many is drawn instead. Ties
    count against the test item.
    """
    if test_item is None:
        raise StateError("user has no held-out item")
    scores = score_all(em_u, items, scorer)
    mask = np.ones(items.shape[0], dtype=bool)
    mask[np.asarray(train_items, dtype=np.int64)] = False
    mask[test_item] = False
    others = np.flatnonzero(mask)
    if n_candidates is not None and n_candidates < others.size:
        if rng is None:
            raise StateError("sampled ranking needs an rng stream")
        others = rng.choice(others, size=n_candidates, replace=False)
    return 1 + int(np.count_nonzero(scores[others] >= scores[test_item]))


def confusion(pred, true, n_classes: int | None = None) -> np.ndarray:
    pred = np.asarray(list(pred), dtype=np.int64)
    true = np.asarray(list(true), dtype=np.int64)
    if pred.shape != true.shape:
        raise DomainError("prediction and label counts differ")
    n = n_classes or int(max(pred.max(initial=0), true.max(initial=0))) + 1
    cm = np.zeros((n, n), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


def accuracy(pred, true) -> float:
    cm = confusion(pred, true)
    total = cm.sum()
    if total == 0:
        raise DomainError("no predictions")
    return float(np.trace(cm)) / total


def bacc(pred, true, n_classes: int | None = None) -> float:
    """Mean per-class recall over the classes present in ``true`` (or all
    ``n_classes`` when given, each of which must then occur)."""
    cm = confusion(pred, true, n_classes)
    support = cm.sum(axis=1)
    if n_classes is not None:
        if np.any(support == 0):
            raise DomainError("a true class has no samples")
        classes = np.arange(n_classes)
    else:
        classes = np.flatnonzero(support)
        if classes.size == 0:
            raise DomainError("no labels")
    recalls = [cm[c, c] / support[c] for c in classes]
    return float(math.fsum(recalls) / len(recalls))


def f1_micro(pred, true) -> float:
    cm = confusion(pred, true)
    if cm.sum() == 0:
        raise DomainError("no predictions")
    tp = np.trace(cm)
    fp = cm.sum(axis=0).sum() - tp
    fn = cm.sum(axis=1).sum() - tp
    denom = 2 * tp + fp + fn
    return float(2 * tp / denom) if denom else 0.0
