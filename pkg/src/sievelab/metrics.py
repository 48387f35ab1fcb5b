"""Post-hoc sieve diagnostics: confusion counts, histograms, confidence tracks.

Everything here is a pure function of its inputs; undefined ratios are
reported as None rather than faked as 0 or 1.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Confusion2x2:
    """Cross-tabulation of ground-truth noise flags against sieve selection."""

    tn_clean_selected: int
    fp_clean_rejected: int
    fn_noisy_selected: int
    tp_noisy_rejected: int

    def __post_init__(self):
        for name in ("tn_clean_selected", "fp_clean_rejected",
                     "fn_noisy_selected", "tp_noisy_rejected"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def total(self) -> int:
        return (self.tn_clean_selected + self.fp_clean_rejected
                + self.fn_noisy_selected + self.tp_noisy_rejected)


def _check_mask(mask, name: str) -> np.ndarray:
    m = np.asarray(mask)
    if m.dtype != bool or m.ndim != 1:
        raise ValueError(f"{name} must be a 1-D boolean mask")
    return m


def sieve_confusion(selected, noise_flags) -> Confusion2x2:
    sel = _check_mask(selected, "selected")
    noisy = _check_mask(noise_flags, "noise_flags")
    if sel.shape != noisy.shape:
        raise ValueError("selected and noise_flags must have equal length")
    return Confusion2x2(
        tn_clean_selected=int(np.count_nonzero(~noisy & sel)),
        fp_clean_rejected=int(np.count_nonzero(~noisy & ~sel)),
        fn_noisy_selected=int(np.count_nonzero(noisy & sel)),
        tp_noisy_rejected=int(np.count_nonzero(noisy & ~sel)),
    )


def confidence_histogram(values, group, bins: int):
    """Equal-width histograms over [0, 1] for the two sides of a mask.

    Bins are half-open [lo, hi) with the final bin closed, so a value of
    exactly 1.0 lands in the last bin. Returns (counts_in_group,
    counts_out_of_group).
    """
    if bins < 2:
        raise ValueError("bins must be >= 2")
    v = np.asarray(values, dtype=float)
    if v.ndim != 1:
        raise ValueError("values must be a vector")
    if v.size and (not np.all(np.isfinite(v)) or v.min() < 0 or v.max() > 1):
        raise ValueError("values must lie in [0, 1]")
    g = _check_mask(group, "group")
    if g.shape != v.shape:
        raise ValueError("group mask must match values in length")
    edges = np.linspace(0.0, 1.0, bins + 1)
    in_group, _ = np.histogram(v[g], bins=edges)
    out_group, _ = np.histogram(v[~g], bins=edges)
    return in_group, out_group


def histogram_bin_edges(bins: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, bins + 1)


def mean_confidence_tracks(probs, clean_labels, noisy_labels, noise_flags):
    """Mean model confidence over the flipped samples.

    Returns (mean confidence in the withheld true label, mean confidence in
    the given corrupted label, mean confidence in the predicted label), each
    averaged over the samples whose labels were flipped. All three are None
    when no sample is flagged as noisy.
    """
    p = np.asarray(probs, dtype=float)
    clean = np.asarray(clean_labels, dtype=np.int64)
    noisy = np.asarray(noisy_labels, dtype=np.int64)
    flags = _check_mask(noise_flags, "noise_flags")
    n, k = p.shape
    if clean.shape != (n,) or noisy.shape != (n,) or flags.shape != (n,):
        raise ValueError("label vectors and flags must match probs in length")
    if (clean.size and clean.max() >= k) or (noisy.size and noisy.max() >= k):
        raise ValueError("labels out of range")
    if not flags.any():
        return None, None, None
    rows = np.flatnonzero(flags)
    sub = p[rows]
    return (
        float(sub[np.arange(rows.size), clean[rows]].mean()),
        float(sub[np.arange(rows.size), noisy[rows]].mean()),
        float(sub.max(axis=1).mean()),
    )


def precision_recall(c: Confusion2x2):
    """(clean precision, clean recall, noisy recall); None where undefined."""
    def ratio(num, den):
        return num / den if den > 0 else None

    return (
        ratio(c.tn_clean_selected, c.tn_clean_selected + c.fn_noisy_selected),
        ratio(c.tn_clean_selected, c.tn_clean_selected + c.fp_clean_rejected),
        ratio(c.tp_noisy_rejected, c.tp_noisy_rejected + c.fn_noisy_selected),
    )
