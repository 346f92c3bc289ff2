"""Dense float64 arithmetic, seeded random streams and a finite-difference checker.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 (row-major);
the helpers here validate shapes and finiteness at module boundaries.
"""
from __future__ import annotations

import hashlib
from typing import Callable, Iterable

import numpy as np

from .errors import DimensionError, DomainError, NumericsError

MASK64 = (1 << 64) - 1


def as_vector(v, name="vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {arr.shape}")
    return arr


def as_matrix(m, name="matrix") -> np.ndarray:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def check_finite(arr, name="array"):
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"{name} contains non-finite entries")
    return arr


def identity(n: int) -> np.ndarray:
    return np.eye(n, dtype=np.float64)


def zeros(rows: int, cols: int) -> np.ndarray:
    return np.zeros((rows, cols), dtype=np.float64)


def matvec(m, v) -> np.ndarray:
    m = as_matrix(m)
    v = as_vector(v)
    if m.shape[1] != v.shape[0]:
        raise DimensionError(f"cannot multiply {m.shape} matrix by length-{v.shape[0]} vector")
    return m @ v


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax (max-shifted)."""
    s = as_vector(logits, "logits")
    if s.size == 0:
        raise DimensionError("softmax of an empty vector")
    e = np.exp(s - s.max())
    return e / e.sum()


def log_softmax(logits) -> np.ndarray:
    s = as_vector(logits, "logits")
    if s.size == 0:
        raise DimensionError("log_softmax of an empty vector")
    shifted = s - s.max()
    return shifted - np.log(np.exp(shifted).sum())


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    # log(1 + e^x) without overflow
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def argmax_lowest(v) -> int:
    """argmax with ties resolved to the lowest index (numpy's behaviour, made explicit)."""
    v = np.asarray(v)
    return int(np.flatnonzero(v == v.max())[0])


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise DomainError("stream keys must be nonnegative")
        return int(key) & MASK64
    if isinstance(key, str):
        digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"unsupported stream key {key!r}")


class RngStream:
    """A reproducible random stream identified by ``(seed, stream_id)``.

    Backed by the counter-based Philox generator keyed through a
    ``SeedSequence`` spawn key, so streams with distinct ids are independent
    by construction. Two streams built from the same ids yield identical
    draw sequences. Instances are stateful: each draw advances the stream.
    """

    def __init__(self, seed: int, stream_id: Iterable[int] | int = ()):
        if isinstance(stream_id, (int, np.integer)):
            stream_id = (int(stream_id),)
        self.seed = int(seed) & MASK64
        self.stream_id = tuple(_key_to_int(k) for k in stream_id)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.stream_id)
        self.generator = np.random.Generator(np.random.Philox(ss))

    def derive(self, *keys) -> "RngStream":
        """Child stream; depends only on ids, never on how far this stream has advanced."""
        return RngStream(self.seed, self.stream_id + tuple(_key_to_int(k) for k in keys))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    # thin wrappers so callers never need the raw generator
    def normal(self, size=None):
        return self.generator.standard_normal(size)

    def uniform(self, low, high, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self.generator.choice(a, size=size, replace=replace, p=p)


def sample_gaussian(rng: RngStream, mean, var) -> np.ndarray:
    """Independent draws ``mean + sqrt(var) * N(0, 1)``; shape follows ``mean``."""
    mean = np.asarray(mean, dtype=np.float64)
    var = np.broadcast_to(np.asarray(var, dtype=np.float64), mean.shape)
    if np.any(var < 0):
        raise DomainError("variance must be nonnegative")
    noise = rng.normal(mean.shape)
    out = mean + np.sqrt(var) * noise
    # sqrt(0) * z is exactly 0 for finite z, so var == 0 returns mean bit-for-bit
    return out


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    x = np.array(x, dtype=np.float64)
    shape = x.shape
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(flat.reshape(shape))
        flat[i] = orig - h
        fm = f(flat.reshape(shape))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise DomainError(f"non-finite function value near coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(shape)


def relative_error(a, b, floor: float = 1e-12) -> float:
    """||a - b|| / max(||a||, ||b||, floor) over all entries."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)
