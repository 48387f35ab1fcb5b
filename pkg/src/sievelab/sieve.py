"""Sample-sieving criteria and the clean-plus-duplicates dataset rebuild.

The confidence error of a sample is the gap between the model's predicted
class probability and its probability on the given label; zero means the
model agrees with the label. Samples at or below the epoch threshold are
kept, everything else is treated as noisy and excluded for that epoch.
"""

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .metrics import Confusion2x2

LRT_FLOOR = 1e-12


class EmptyCleanSetError(RuntimeError):
    """No sample passed the sieve; the caller decides the fallback."""


@dataclass(frozen=True)
class SieveConfig:
    """Initial threshold plus the number of epochs it decays to zero over."""

    alpha0: float
    warmup_epochs: int

    def __post_init__(self):
        if not 0.0 <= self.alpha0 <= 1.0:
            raise ValueError(f"alpha0 must be in [0, 1], got {self.alpha0}")
        if self.warmup_epochs < 1:
            raise ValueError(f"warmup_epochs must be >= 1, got {self.warmup_epochs}")


@dataclass
class SieveReport:
    """One epoch's sieve decision: per-sample errors, the mask, and how the
    mask cross-tabulates against ground-truth noise flags."""

    epoch: int
    alpha: float
    conf_errors: np.ndarray
    selected: np.ndarray
    confusion: Confusion2x2

    def __post_init__(self):
        errs = np.asarray(self.conf_errors, dtype=float)
        sel = np.asarray(self.selected)
        if errs.ndim != 1 or sel.shape != errs.shape or sel.dtype != bool:
            raise ValueError("conf_errors and selected must be matching vectors")
        if errs.size and (errs.min() < -1e-12 or errs.max() > 1 + 1e-12):
            raise ValueError("conf_errors must lie in [0, 1]")
        if not np.array_equal(sel, errs <= self.alpha):
            raise ValueError("selected must equal (conf_errors <= alpha)")
        if self.confusion.total != errs.size:
            raise ValueError("confusion counts must sum to the sample count")
        object.__setattr__(self, "conf_errors", errs)
        object.__setattr__(self, "selected", sel)

    @property
    def n_selected(self) -> int:
        return int(np.count_nonzero(self.selected))


SIEVE_CSV_HEADER = ["epoch", "alpha_i", "n_selected", "tp", "fp", "fn", "tn"]


def sieve_csv_row(report: SieveReport) -> list:
    """Row for the per-epoch sieve CSV: tp = noisy rejected, fp = clean
    rejected, fn = noisy selected, tn = clean selected."""
    c = report.confusion
    return [report.epoch, repr(float(report.alpha)), report.n_selected,
            c.tp_noisy_rejected, c.fp_clean_rejected,
            c.fn_noisy_selected, c.tn_clean_selected]


def _check_probs_label(probs, given_label: int):
    p = np.asarray(probs, dtype=float)
    if p.ndim != 1 or p.size < 2:
        raise ValueError("expected a probability vector of length >= 2")
    if not np.all(np.isfinite(p)) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("expected a valid probability distribution")
    if not 0 <= given_label < p.size:
        raise ValueError(f"label {given_label} out of range for {p.size} classes")
    return p


def confidence_error(probs, given_label: int) -> float:
    """max_j probs[j] - probs[given_label]; zero iff the given label attains
    the maximum (argmax ties broken toward lower class indices)."""
    p = _check_probs_label(probs, given_label)
    return float(p.max() - p[given_label])


def confidence_errors(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Row-wise confidence errors for a [n, k] probability matrix."""
    p = np.asarray(probs, dtype=float)
    y = np.asarray(labels, dtype=np.int64)
    return p.max(axis=1) - p[np.arange(p.shape[0]), y]


def lrt_score(probs, given_label: int) -> float:
    """Likelihood ratio probs[given_label] / max_j probs[j], in [0, 1]."""
    p = _check_probs_label(probs, given_label)
    top = p.max()
    if top < LRT_FLOOR:
        raise ValueError("maximum probability is below the probability floor")
    return float(p[given_label] / top)


def sieve_threshold(epoch: int, cfg: SieveConfig) -> float:
    """Linear decay from alpha0 to 0 across the warm-up epochs, 0 after."""
    if int(epoch) != epoch or epoch < 0:
        raise ValueError(f"epoch must be a nonnegative integer, got {epoch}")
    return max(cfg.alpha0 - epoch * cfg.alpha0 / cfg.warmup_epochs, 0.0)


def select_clean(conf_errors, alpha_i: float) -> np.ndarray:
    """Inclusive threshold mask: a sample is kept when its error <= alpha_i."""
    errs = np.asarray(conf_errors, dtype=float)
    if errs.size and (errs.min() < 0 or errs.max() > 1):
        raise ValueError("conf_errors must lie in [0, 1]")
    return errs <= alpha_i


def rebuild_dataset(dataset: Dataset, mask) -> Dataset:
    """Selected samples followed by duplicates of them, restored to full size.

    Duplicates cycle through the selected samples in index order, so the
    rebuild also covers epochs where fewer than half the samples survive.
    """
    sel = np.asarray(mask)
    if sel.dtype != bool or sel.shape != (dataset.n,):
        raise ValueError("mask must be a boolean vector of length n")
    kept = np.flatnonzero(sel)
    if kept.size == 0:
        raise EmptyCleanSetError("sieve selected no samples")
    n_dup = dataset.n - kept.size
    duplicates = kept[np.arange(n_dup) % kept.size]
    return dataset.subset(np.concatenate([kept, duplicates]))


def small_loss_select(losses, keep_fraction: float) -> np.ndarray:
    """Keep the ceil(keep_fraction * n) smallest losses, lower index on ties."""
    vals = np.asarray(losses, dtype=float)
    if vals.ndim != 1 or not np.all(np.isfinite(vals)):
        raise ValueError("losses must be a finite vector")
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    n_keep = min(int(np.ceil(keep_fraction * vals.size)), vals.size)
    order = np.argsort(vals, kind="stable")
    mask = np.zeros(vals.size, dtype=bool)
    mask[order[:n_keep]] = True
    return mask
