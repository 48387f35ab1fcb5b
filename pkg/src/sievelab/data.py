"""Dataset container, synthetic blob generation, splits, batching, and CSV I/O."""

import csv
import math
from dataclasses import dataclass, field

import numpy as np


class ParseError(ValueError):
    """Malformed dataset file; the message carries the offending line."""


@dataclass
class Dataset:
    """Features plus observed labels, optionally with ground truth.

    When ``true_labels`` is given, ``noise_flags`` is derived (or validated)
    as ``labels != true_labels``. Arrays are copied and frozen so datasets
    can be shared freely.
    """

    features: np.ndarray
    labels: np.ndarray
    true_labels: np.ndarray | None = None
    noise_flags: np.ndarray | None = None

    def __post_init__(self):
        feats = np.array(self.features, dtype=float)
        if feats.ndim != 2:
            raise ValueError("features must be a 2-D [n, d] matrix")
        if not np.all(np.isfinite(feats)):
            raise ValueError("features must be finite")
        labels = np.array(self.labels, dtype=np.int64)
        if labels.shape != (feats.shape[0],):
            raise ValueError("labels must be a vector of length n")
        if labels.size and labels.min() < 0:
            raise ValueError("labels must be nonnegative")

        true_labels = self.true_labels
        flags = self.noise_flags
        if true_labels is None:
            if flags is not None:
                raise ValueError("noise_flags require true_labels")
        else:
            true_labels = np.array(true_labels, dtype=np.int64)
            if true_labels.shape != labels.shape:
                raise ValueError("true_labels must match labels in length")
            derived = labels != true_labels
            if flags is None:
                flags = derived
            else:
                flags = np.array(flags, dtype=bool)
                if flags.shape != labels.shape or not np.array_equal(flags, derived):
                    raise ValueError("noise_flags must equal (labels != true_labels)")
        for arr in (feats, labels, true_labels, flags):
            if arr is not None:
                arr.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "true_labels", true_labels)
        object.__setattr__(self, "noise_flags", flags)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            features=self.features[idx],
            labels=self.labels[idx],
            true_labels=None if self.true_labels is None else self.true_labels[idx],
        )


def n_classes(*datasets) -> int:
    """Smallest class count consistent with every label array present."""
    top = -1
    for ds in datasets:
        for arr in (ds.labels, ds.true_labels):
            if arr is not None and arr.size:
                top = max(top, int(arr.max()))
    if top < 0:
        raise ValueError("cannot infer a class count from empty datasets")
    return top + 1


_CENTER_ATTEMPT_CAP = 10_000


def gen_blobs(k: int, n: int, d: int, separation: float, cluster_std: float,
              rng: np.random.Generator) -> Dataset:
    """k Gaussian clusters with centers pairwise >= separation apart.

    Class counts differ by at most one; samples are grouped by class, with
    true_labels equal to labels (a clean dataset).
    """
    if k < 2 or n < k or d < 2:
        raise ValueError("need k >= 2, n >= k, d >= 2")
    if separation <= 0 or cluster_std < 0:
        raise ValueError("separation must be positive and cluster_std nonnegative")
    # Rejection sampling on an origin-centered hypercube scaled to the
    # separation.
    side = separation * (1.0 + 1.5 * k ** (1.0 / d))
    centers = []
    for _ in range(_CENTER_ATTEMPT_CAP):
        cand = rng.uniform(-side / 2, side / 2, size=d)
        if all(np.linalg.norm(cand - c) >= separation for c in centers):
            centers.append(cand)
            if len(centers) == k:
                break
    else:
        raise RuntimeError(f"could not place {k} centers >= {separation} apart "
                           f"after {_CENTER_ATTEMPT_CAP} attempts")
    centers = np.stack(centers)

    counts = np.full(k, n // k)
    counts[: n % k] += 1
    labels = np.repeat(np.arange(k), counts)
    features = centers[labels] + rng.normal(0.0, cluster_std, size=(n, d))
    return Dataset(features=features, labels=labels, true_labels=labels.copy())


def split(ds: Dataset, test_fraction: float, rng: np.random.Generator):
    """Disjoint, exhaustive (train, test) split, stratified by true label.

    Per-class test counts follow largest-remainder rounding of the exact
    quotas, so the overall test size is round(test_fraction * n).
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    strat = ds.true_labels if ds.true_labels is not None else ds.labels
    classes, counts = np.unique(strat, return_counts=True)
    if counts.min() < 2:
        raise ValueError("stratified split needs at least 2 samples per class")

    quotas = test_fraction * counts
    take = np.floor(quotas).astype(int)
    remainder = int(round(test_fraction * ds.n)) - int(take.sum())
    order = np.argsort(-(quotas - take), kind="stable")
    take[order[:remainder]] += 1

    test_idx, train_idx = [], []
    for cls, cls_take in zip(classes, take):
        members = np.flatnonzero(strat == cls)
        perm = rng.permutation(members)
        test_idx.append(perm[:cls_take])
        train_idx.append(perm[cls_take:])
    test_idx = np.sort(np.concatenate(test_idx))
    train_idx = np.sort(np.concatenate(train_idx))
    return ds.subset(train_idx), ds.subset(test_idx)


def batches(ds: Dataset, batch_size: int, rng: np.random.Generator):
    """Shuffled index slices covering every sample exactly once.

    The last slice may be short; it is kept, not dropped.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    perm = rng.permutation(ds.n)
    return [perm[i : i + batch_size] for i in range(0, ds.n, batch_size)]


def balanced_subsample(ds: Dataset, per_class: int, rng: np.random.Generator) -> Dataset:
    """min(per_class, class size) samples per observed class, without replacement."""
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    chosen = []
    for cls in np.unique(ds.labels):
        members = np.flatnonzero(ds.labels == cls)
        take = min(per_class, members.size)
        chosen.append(rng.permutation(members)[:take])
    return ds.subset(np.concatenate(chosen))


def to_csv_string(ds: Dataset) -> str:
    """CSV text with header f0..f{d-1},label[,true_label].

    Floats use 17 significant digits so a save/load round trip is exact.
    Noise flags are not stored; they are derivable from the two label columns.
    """
    import io

    buf = io.StringIO()
    writer = csv.writer(buf)
    header = [f"f{j}" for j in range(ds.dim)] + ["label"]
    if ds.true_labels is not None:
        header.append("true_label")
    writer.writerow(header)
    for i in range(ds.n):
        row = [format(v, ".17g") for v in ds.features[i]]
        row.append(str(int(ds.labels[i])))
        if ds.true_labels is not None:
            row.append(str(int(ds.true_labels[i])))
        writer.writerow(row)
    return buf.getvalue()


def save(ds: Dataset, path) -> None:
    """Write the dataset as CSV (see to_csv_string for the exact format)."""
    with open(path, "w", newline="") as fh:
        fh.write(to_csv_string(ds))


def _parse_int(text: str, path, line_no: int, col: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ParseError(f"{path}: line {line_no}: column {col!r} is not an integer: {text!r}") from None


def load(path) -> Dataset:
    """Read a dataset written by save(); rejects malformed files outright."""
    with open(path, "r", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: empty file")
    header = rows[0]
    d = 0
    while d < len(header) and header[d] == f"f{d}":
        d += 1
    tail = header[d:]
    if d == 0 or tail not in (["label"], ["label", "true_label"]):
        raise ParseError(f"{path}: line 1: bad header {header!r}")
    has_true = tail == ["label", "true_label"]
    width = d + 1 + has_true

    feats, labels, true_labels = [], [], []
    for line_no, row in enumerate(rows[1:], start=2):
        if len(row) != width:
            raise ParseError(f"{path}: line {line_no}: expected {width} columns, got {len(row)}")
        try:
            feats.append([float(v) for v in row[:d]])
        except ValueError:
            raise ParseError(f"{path}: line {line_no}: non-numeric feature value") from None
        labels.append(_parse_int(row[d], path, line_no, "label"))
        if has_true:
            true_labels.append(_parse_int(row[d + 1], path, line_no, "true_label"))
    if not feats:
        raise ParseError(f"{path}: no data rows")
    return Dataset(
        features=np.asarray(feats, dtype=float),
        labels=np.asarray(labels, dtype=np.int64),
        true_labels=np.asarray(true_labels, dtype=np.int64) if has_true else None,
    )
