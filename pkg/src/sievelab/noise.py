"""Synthetic label corruption: symmetric, pairflip, and feature-dependent flips.

All generators leave features untouched, return fresh label vectors plus
flip flags, and draw every random number from an explicitly seeded
``numpy.random.Generator`` so noisy datasets reproduce byte-for-byte.
"""

from dataclasses import dataclass

import numpy as np

from .data import Dataset

SYMMETRIC = "symmetric"
PAIRFLIP = "pairflip"
INSTANCE = "instance"
KINDS = (SYMMETRIC, PAIRFLIP, INSTANCE)

_MAX_REJECTION_ROUNDS = 10_000


@dataclass(frozen=True)
class NoiseSpec:
    kind: str
    rate: float
    seed: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"rate must be in [0, 1), got {self.rate}")

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


@dataclass(frozen=True)
class TransitionMatrix:
    """Row-stochastic matrix of flip probabilities; entry [l, j] is the
    probability that true label l is observed as label j."""

    entries: np.ndarray

    def __post_init__(self):
        t = np.array(self.entries, dtype=float)
        if t.ndim != 2 or t.shape[0] != t.shape[1]:
            raise ValueError("transition matrix must be square")
        if np.any(t < 0) or np.any(t > 1):
            raise ValueError("transition probabilities must be in [0, 1]")
        if np.any(np.abs(t.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("transition matrix rows must sum to 1")
        t.setflags(write=False)
        object.__setattr__(self, "entries", t)

    @property
    def k(self) -> int:
        return self.entries.shape[0]


def transition_matrix(spec: NoiseSpec, k: int) -> TransitionMatrix:
    """Analytic transition matrix for symmetric or pairflip noise.

    Instance-dependent noise has no single matrix and is rejected.
    """
    if k < 2:
        raise ValueError("need k >= 2")
    if spec.kind == SYMMETRIC:
        t = np.full((k, k), spec.rate / (k - 1))
        np.fill_diagonal(t, 1.0 - spec.rate)
    elif spec.kind == PAIRFLIP:
        t = np.eye(k) * (1.0 - spec.rate)
        t[np.arange(k), (np.arange(k) + 1) % k] = spec.rate
    else:
        raise ValueError("instance-dependent noise has no single transition matrix")
    return TransitionMatrix(t)


def truncated_normal(mean: float, std: float, lo: float, hi: float,
                     rng: np.random.Generator) -> float:
    """One draw from a normal restricted to [lo, hi], by rejection sampling."""
    return float(truncated_normal_batch(mean, std, lo, hi, 1, rng)[0])


def truncated_normal_batch(mean: float, std: float, lo: float, hi: float,
                           size: int, rng: np.random.Generator) -> np.ndarray:
    if lo >= hi:
        raise ValueError(f"need lo < hi, got [{lo}, {hi}]")
    if std < 0:
        raise ValueError("std must be nonnegative")
    if std == 0:
        if not lo <= mean <= hi:
            raise RuntimeError("degenerate truncated normal: mean outside [lo, hi]")
        return np.full(size, float(mean))
    out = np.empty(size)
    pending = np.arange(size)
    for _ in range(_MAX_REJECTION_ROUNDS):
        draws = rng.normal(mean, std, size=pending.size)
        ok = (draws >= lo) & (draws <= hi)
        out[pending[ok]] = draws[ok]
        pending = pending[~ok]
        if pending.size == 0:
            return out
    raise RuntimeError("truncated normal rejection sampling exceeded the draw cap")


def _check_labels(labels, k: int) -> np.ndarray:
    if k < 2:
        raise ValueError("need k >= 2")
    y = np.asarray(labels, dtype=np.int64)
    if y.ndim != 1:
        raise ValueError("labels must be a vector")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    return y


def _check_rate(rate: float) -> float:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"rate must be in [0, 1), got {rate}")
    return float(rate)


def apply_symmetric(labels, rate: float, k: int, rng: np.random.Generator):
    """Flip each label with probability rate to a uniformly random *other* class.

    Flipping to a different class (rather than re-drawing over all k) makes
    the realized flip rate track the nominal rate exactly.
    """
    y = _check_labels(labels, k)
    rate = _check_rate(rate)
    flips = rng.random(y.size) < rate
    offsets = rng.integers(1, k, size=y.size)
    noisy = np.where(flips, (y + offsets) % k, y)
    return noisy, noisy != y


def apply_pairflip(labels, rate: float, k: int, rng: np.random.Generator):
    """Flip each label with probability rate to the adjacent class (j+1) mod k."""
    y = _check_labels(labels, k)
    rate = _check_rate(rate)
    flips = rng.random(y.size) < rate
    noisy = np.where(flips, (y + 1) % k, y)
    return noisy, noisy != y


def instance_flip_probabilities(features, labels, q, w) -> np.ndarray:
    """Per-sample flip distributions for feature-dependent noise.

    Row i places mass 1 - q[i] on the given label and spreads q[i] over the
    other classes in proportion to softmax(x_i . w[y_i]) with the given
    label's score masked out.
    """
    x = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=np.int64)
    q = np.asarray(q, dtype=float)
    w = np.asarray(w, dtype=float)
    n, d = x.shape
    k = w.shape[2]
    if w.shape != (k, d, k):
        raise ValueError(f"projection tensor must have shape (k, d, k), got {w.shape}")
    if q.shape != (n,) or y.shape != (n,):
        raise ValueError("q and labels must be vectors of length n")

    scores = np.einsum("nd,ndk->nk", x, w[y])
    scores[np.arange(n), y] = -np.inf
    # Masked softmax: the -inf entry contributes exactly zero mass.
    scores -= scores.max(axis=1, keepdims=True)
    exp = np.exp(scores)
    p = exp / exp.sum(axis=1, keepdims=True)
    p *= q[:, None]
    p[np.arange(n), y] = 1.0 - q
    return p


def _sample_rows(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row of a row-stochastic matrix."""
    cum = np.cumsum(p, axis=1)
    u = rng.random(p.shape[0])
    idx = (cum < u[:, None]).sum(axis=1)
    return np.minimum(idx, p.shape[1] - 1)


def apply_instance_dependent(features, labels, rate: float, k: int,
                             rng: np.random.Generator):
    """Feature-dependent flips.

    Per-sample flip rates q_i come from a normal(rate, 0.1^2) truncated to
    [0, 1]; one d-by-k projection matrix per class (standard normal entries,
    sampled once per dataset) turns features into flip scores. Each sample
    keeps its label with probability 1 - q_i.
    """
    x = np.asarray(features, dtype=float)
    if x.ndim != 2 or not np.all(np.isfinite(x)):
        raise ValueError("features must be a finite 2-D matrix")
    y = _check_labels(labels, k)
    rate = _check_rate(rate)
    if y.size != x.shape[0]:
        raise ValueError("labels must match the number of feature rows")

    q = truncated_normal_batch(rate, 0.1, 0.0, 1.0, x.shape[0], rng)
    w = rng.standard_normal((k, x.shape[1], k))
    p = instance_flip_probabilities(x, y, q, w)
    noisy = _sample_rows(p, rng)
    return noisy, noisy != y


def apply_noise(ds: Dataset, spec: NoiseSpec, k: int) -> Dataset:
    """Corrupt a clean dataset's labels, recording ground truth for later
    sieve evaluation. Features are shared, not copied."""
    truth = ds.true_labels if ds.true_labels is not None else ds.labels
    if not np.array_equal(truth, ds.labels):
        raise ValueError("apply_noise expects a clean dataset")
    rng = spec.rng()
    if spec.kind == SYMMETRIC:
        noisy, _ = apply_symmetric(ds.labels, spec.rate, k, rng)
    elif spec.kind == PAIRFLIP:
        noisy, _ = apply_pairflip(ds.labels, spec.rate, k, rng)
    else:
        noisy, _ = apply_instance_dependent(ds.features, ds.labels, spec.rate, k, rng)
    return Dataset(features=ds.features, labels=noisy, true_labels=truth.copy())
