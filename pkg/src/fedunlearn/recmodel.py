"""Matrix-factorisation backbone with an optional one-hidden-layer scorer.

Loss is binary cross-entropy over sigmoid scores, label 1 for the user's
training positives and 0 for uniformly sampled negatives. All gradients are
written out by hand.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, DomainError, NumericsError, SamplingError
from .numkernel import RngStream, as_vector, sigmoid, softplus

CHECKPOINT_FORMAT = "fedunlearn-checkpoint/1"


@dataclass
class ScorerParams:
    """``dot`` has no parameters; ``mlp`` scores ``w2 . relu(W1 [em_u; em_i] + b1) + b2``."""

    variant: str = "dot"
    W1: np.ndarray | None = None
    b1: np.ndarray | None = None
    w2: np.ndarray | None = None
    b2: np.ndarray | None = None

    def arrays(self) -> dict[str, np.ndarray]:
        if self.variant == "dot":
            return {}
        return {"W1": self.W1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "ScorerParams":
        if self.variant == "dot":
            return ScorerParams("dot")
        return ScorerParams("mlp", arrays["W1"], arrays["b1"], arrays["w2"], arrays["b2"])

    def copy(self) -> "ScorerParams":
        return self.with_arrays({k: v.copy() for k, v in self.arrays().items()})


@dataclass
class RecGrads:
    loss: float
    grad_em_u: np.ndarray
    item_rows: np.ndarray  # sorted unique item indices touched
    grad_item_rows: np.ndarray  # one row per entry of item_rows
    grad_scorer: dict[str, np.ndarray] = field(default_factory=dict)


def xavier_init(shape, rng: RngStream) -> np.ndarray:
    """Glorot-uniform draw; fan_out = rows, fan_in = cols."""
    if len(shape) != 2 or min(shape) <= 0:
        raise DimensionError(f"xavier_init needs two positive dimensions, got {shape}")
    rows, cols = shape
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


def init_scorer(variant: str, dim: int, rng: RngStream, hidden: int = 16) -> ScorerParams:
    if variant == "dot":
        return ScorerParams("dot")
    if variant == "mlp":
        return ScorerParams(
            "mlp",
            W1=xavier_init((hidden, 2 * dim), rng.derive("W1")),
            b1=np.zeros(hidden),
            w2=xavier_init((1, hidden), rng.derive("w2"))[0],
            b2=np.zeros(1),
        )
    raise DomainError(f"unknown scorer variant {variant!r}")


def _scores(em_u, item_vecs, scorer: ScorerParams):
    """Scores for a batch of item rows; returns the cache the backward pass needs."""
    if scorer.variant == "dot":
        return item_vecs @ em_u, None
    x = np.concatenate([np.broadcast_to(em_u, item_vecs.shape), item_vecs], axis=1)
    pre = x @ scorer.W1.T + scorer.b1
    hid = np.maximum(pre, 0.0)
    return hid @ scorer.w2 + scorer.b2[0], (x, pre, hid)


def score(em_u, em_i, scorer: ScorerParams) -> float:
    em_u = as_vector(em_u, "em_u")
    em_i = as_vector(em_i, "em_i")
    if em_u.shape != em_i.shape:
        raise DimensionError(f"embedding sizes differ: {em_u.shape} vs {em_i.shape}")
    s, _ = _scores(em_u, em_i[None, :], scorer)
    return float(s[0])


def score_all(em_u, items: np.ndarray, scorer: ScorerParams) -> np.ndarray:
    if items.shape[1] != em_u.shape[0]:
        raise DimensionError("user and item embedding sizes differ")
    s, _ = _scores(em_u, items, scorer)
    return s


def sample_negatives(positives, n_items: int, count: int, rng: RngStream) -> np.ndarray:
    """Uniform draws (with replacement) from the items the user has not interacted with."""
    pos = np.unique(np.asarray(positives, dtype=np.int64))
    candidates = np.setdiff1d(np.arange(n_items), pos, assume_unique=True)
    if candidates.size == 0:
        raise SamplingError("user has interacted with every item; no negatives to sample")
    return candidates[rng.integers(0, candidates.size, size=count)]


def bce_loss_and_grads(em_u, positives, negatives, items: np.ndarray, scorer: ScorerParams) -> RecGrads:
    """Mean BCE over the given positive and negative item rows."""
    em_u = as_vector(em_u, "em_u")
    if items.shape[1] != em_u.shape[0]:
        raise DimensionError("user and item embedding sizes differ")
    rows = np.concatenate([np.asarray(positives, dtype=np.int64), np.asarray(negatives, dtype=np.int64)])
    labels = np.concatenate([np.ones(len(positives)), np.zeros(len(negatives))])
    n = rows.size
    if n == 0:
        raise DomainError("no training examples")
    vecs = items[rows]
    s, cache = _scores(em_u, vecs, scorer)
    loss = float(np.mean(softplus(s) - labels * s))
    ds = (sigmoid(s) - labels) / n

    grad_scorer: dict[str, np.ndarray] = {}
    if scorer.variant == "dot":
        g_u = ds @ vecs
        g_rows = ds[:, None] * em_u[None, :]
    else:
        x, pre, hid = cache
        d = em_u.shape[0]
        grad_scorer["w2"] = hid.T @ ds
        grad_scorer["b2"] = np.array([ds.sum()])
        da = (ds[:, None] * scorer.w2[None, :]) * (pre > 0)
        grad_scorer["W1"] = da.T @ x
        grad_scorer["b1"] = da.sum(axis=0)
        dx = da @ scorer.W1
        g_u = dx[:, :d].sum(axis=0)
        g_rows = dx[:, d:]

    touched, inverse = np.unique(rows, return_inverse=True)
    g_items = np.zeros((touched.size, items.shape[1]))
    np.add.at(g_items, inverse, g_rows)
    return RecGrads(loss, g_u, touched, g_items, grad_scorer)


def rec_loss_and_grads(
    em_u,
    positives,
    items: np.ndarray,
    scorer: ScorerParams,
    negatives_per_positive: int,
    rng: RngStream,
    exclude=None,
) -> RecGrads:
    """BCE loss and gradients for one user with freshly sampled negatives.

    ``exclude`` lists extra items that must never be drawn as negatives
    (defaults to the positives themselves).
    """
    positives = np.asarray(positives, dtype=np.int64)
    if positives.size == 0:
        raise DomainError("client has no training interactions")
    known = positives if exclude is None else np.union1d(positives, exclude)
    neg = sample_negatives(known, items.shape[0], negatives_per_positive * positives.size, rng)
    return bce_loss_and_grads(em_u, positives, neg, items, scorer)


def sgd_step(params: np.ndarray, grads: np.ndarray, lr: float, rows=None) -> np.ndarray:
    """Return ``params - lr * grads``; with ``rows`` only those rows change."""
    if lr <= 0:
        raise DomainError("learning rate must be positive")
    grads = np.asarray(grads, dtype=np.float64)
    if not np.all(np.isfinite(grads)):
        raise NumericsError("non-finite gradient")
    out = np.array(params, dtype=np.float64, copy=True)
    if rows is None:
        if out.shape != grads.shape:
            raise DimensionError(f"param/grad shape mismatch {out.shape} vs {grads.shape}")
        out -= lr * grads
    else:
        out[rows] -= lr * grads
    return out


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named matrices to an ``.npz`` file (each array keeps its shape header)."""
    import json

    payload = {f"array/{k}": np.asarray(v) for k, v in arrays.items()}
    payload["__format__"] = np.array(CHECKPOINT_FORMAT)
    payload["__meta__"] = np.array(json.dumps(meta or {}, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    import json

    with np.load(path, allow_pickle=False) as z:
        fmt = str(z["__format__"])
        if fmt != CHECKPOINT_FORMAT:
            raise DomainError(f"unsupported checkpoint format {fmt!r}")
        arrays = {k[len("array/"):]: z[k] for k in z.files if k.startswith("array/")}
        meta = json.loads(str(z["__meta__"]))
    return arrays, meta
