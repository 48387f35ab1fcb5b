"""Training loops with per-epoch metric capture.

Four methods share one epoch skeleton: plain cross-entropy, confidence-error
sieving (``confes``), loss-ranked co-teaching, and co-teaching driven by
confidence error instead of loss. Every run is a deterministic function of
(config, seed, data): the master seed is expanded into independent streams
for weight init and per-epoch shuffling, so sieving decisions never disturb
the batch order.

Per-epoch bookkeeping: sieve decisions and mean-confidence summaries are
computed in a dedicated full inference pass with the model frozen at the
start of the epoch; test accuracy and mean train loss reflect the epoch's
training. Model snapshots are taken at the same start-of-epoch point, which
makes the recorded sieve masks reproducible from the snapshots alone.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, batches, n_classes
from .metrics import Confusion2x2
from .nncore import (Network, OptimizerConfig, cosine_lr, backward, forward,
                     init_network, per_sample_losses, predict_probs, sgd_step)
from .sieve import (EmptyCleanSetError, SieveConfig, SieveReport,
                    confidence_errors, rebuild_dataset, select_clean,
                    sieve_threshold, small_loss_select)
from . import metrics

CE = "ce"
CONFES = "confes"
COTEACHING = "coteaching"
CONFES_COTEACHING = "confes_coteaching"
METHODS = (CE, CONFES, COTEACHING, CONFES_COTEACHING)

SMALL_LOSS = "small_loss"
CONFIDENCE_ERROR = "confidence_error"
CRITERIA = (SMALL_LOSS, CONFIDENCE_ERROR)

# Stream tags for deriving independent RNG streams from one master seed.
_STREAM_INIT = 0x11
_STREAM_SHUFFLE = 0x22
_STREAM_NET = 0x33


def child_seed(seed: int, *tags: int) -> int:
    """Derived 64-bit seed; documented so runs can be reproduced piecewise."""
    ss = np.random.SeedSequence([int(seed)] + [int(t) for t in tags])
    return int(ss.generate_state(1, np.uint64)[0])


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + [int(t) for t in tags]))


def coteaching_seeds(seed: int):
    """Per-network master seeds used by the co-teaching loops."""
    return child_seed(seed, _STREAM_NET, 0), child_seed(seed, _STREAM_NET, 1)


@dataclass(frozen=True)
class TrainConfig:
    optimizer: OptimizerConfig
    batch_size: int
    method: str = CE
    sieve: SieveConfig | None = None
    seed: int = 0
    eval_window: int = 5
    hidden_sizes: tuple = (64, 64)
    noise_rate_estimate: float = 0.0  # co-teaching keep-fraction schedule
    snapshot_epochs: tuple = (10, 50, 100)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.eval_window < 1:
            raise ValueError("eval_window must be >= 1")
        if (self.sieve is not None) != (self.method != CE):
            raise ValueError("sieve config must be present exactly for sieving methods")
        if not all(isinstance(h, int) and h > 0 for h in self.hidden_sizes):
            raise ValueError("hidden_sizes must be positive integers")
        if not 0.0 <= self.noise_rate_estimate < 1.0:
            raise ValueError("noise_rate_estimate must be in [0, 1)")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    test_acc: float
    sieve: SieveReport | None = None
    fallback: bool | None = None
    mean_conf_clean: float | None = None
    mean_conf_noisy: float | None = None
    mean_conf_pred: float = 0.0


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)  # epoch -> start-of-epoch Network

    def test_accuracies(self) -> np.ndarray:
        return np.array([r.test_acc for r in self.records])


def window_accuracy(history: TrainHistory, window: int) -> float:
    """Mean test accuracy over the last `window` epochs."""
    accs = history.test_accuracies()
    if accs.size == 0:
        raise ValueError("history has no epochs")
    return float(accs[-window:].mean())


def evaluate(net: Network, test: Dataset) -> float:
    """Fraction of test samples whose argmax logit matches the label.

    Argmax ties resolve toward the lower class index, matching the sieve.
    """
    if test.n == 0:
        raise ValueError("test set must be nonempty")
    preds = np.argmax(forward(net, test.features), axis=1)
    return float(np.mean(preds == test.labels))


def initial_network(cfg: TrainConfig, n_features: int, n_cls: int,
                    net_seed: int | None = None) -> Network:
    """The network a run starts from; exposed so snapshots can be replayed."""
    seed = cfg.seed if net_seed is None else net_seed
    sizes = [n_features, *cfg.hidden_sizes, n_cls]
    return init_network(sizes, _rng(seed, _STREAM_INIT))


def _confidence_summary(probs: np.ndarray, ds: Dataset):
    """Mean given-label confidence for the clean and noisy groups, and mean
    predicted-label confidence over all samples."""
    given = probs[np.arange(ds.n), ds.labels]
    pred = float(probs.max(axis=1).mean())
    flags = ds.noise_flags
    if flags is None:
        flags = np.zeros(ds.n, dtype=bool)
    clean = float(given[~flags].mean()) if (~flags).any() else None
    noisy = float(given[flags].mean()) if flags.any() else None
    return clean, noisy, pred


def _noise_flags(ds: Dataset) -> np.ndarray:
    return ds.noise_flags if ds.noise_flags is not None else np.zeros(ds.n, dtype=bool)


def _check_datasets(cfg: TrainConfig, train: Dataset, test: Dataset):
    if train.n == 0 or test.n == 0:
        raise ValueError("datasets must be nonempty")
    if train.dim != test.dim:
        raise ValueError("train and test feature dimensions differ")
    if cfg.batch_size > train.n:
        raise ValueError("batch_size must not exceed the training set size")
    return n_classes(train, test)


def _sgd_epoch(net: Network, ds: Dataset, lr: float, cfg: TrainConfig,
               shuffle_rng: np.random.Generator):
    """One pass of shuffled mini-batch SGD; returns (net, mean sample loss)."""
    loss_sum = 0.0
    for idx in batches(ds, cfg.batch_size, shuffle_rng):
        grads, loss = backward(net, ds.features[idx], ds.labels[idx])
        net = sgd_step(net, grads, lr, cfg.optimizer)
        loss_sum += loss * idx.size
    return net, loss_sum / ds.n


def _train_single(cfg: TrainConfig, train: Dataset, test: Dataset, sieving: bool):
    k = _check_datasets(cfg, train, test)
    net = initial_network(cfg, train.dim, k)
    history = TrainHistory()
    total = cfg.optimizer.total_epochs

    for epoch in range(total):
        lr = cosine_lr(epoch, cfg.optimizer)
        if epoch in cfg.snapshot_epochs:
            history.snapshots[epoch] = net

        probs = predict_probs(net, train.features)
        conf_clean, conf_noisy, conf_pred = _confidence_summary(probs, train)

        report = None
        fallback = None
        epoch_ds = train
        if sieving:
            alpha = sieve_threshold(epoch, cfg.sieve)
            errs = confidence_errors(probs, train.labels)
            mask = select_clean(errs, alpha)
            report = SieveReport(epoch=epoch, alpha=alpha, conf_errors=errs,
                                 selected=mask,
                                 confusion=metrics.sieve_confusion(mask, _noise_flags(train)))
            try:
                epoch_ds = rebuild_dataset(train, mask)
                fallback = False
            except EmptyCleanSetError:
                # Training on the full noisy set keeps the LR schedule on
                # track; the epoch is flagged so it shows up in the history.
                epoch_ds = train
                fallback = True

        net, train_loss = _sgd_epoch(net, epoch_ds, lr, cfg,
                                     _rng(cfg.seed, _STREAM_SHUFFLE, epoch))
        history.records.append(EpochRecord(
            epoch=epoch, lr=lr, train_loss=train_loss, test_acc=evaluate(net, test),
            sieve=report, fallback=fallback, mean_conf_clean=conf_clean,
            mean_conf_noisy=conf_noisy, mean_conf_pred=conf_pred))
    return net, history


def train_ce(cfg: TrainConfig, train: Dataset, test: Dataset):
    """Plain cross-entropy baseline over the full (noisy) training set."""
    if cfg.method != CE or cfg.sieve is not None:
        raise ValueError("train_ce expects method='ce' and no sieve config")
    return _train_single(cfg, train, test, sieving=False)


def train_confes(cfg: TrainConfig, train: Dataset, test: Dataset):
    """Confidence-error sieving: each epoch keeps only the samples whose
    frozen-model confidence error is at or below the decayed threshold, then
    trains on the size-restored clean-plus-duplicates rebuild."""
    if cfg.sieve is None:
        raise ValueError("train_confes requires a sieve config")
    return _train_single(cfg, train, test, sieving=True)


def train_coteaching(cfg: TrainConfig, train: Dataset, test: Dataset,
                     criterion: str = SMALL_LOSS):
    """Cross-training of two networks.

    The two nets walk their own shuffled batch streams in lockstep; at each
    step the peer scores the trainee's batch with its own criterion (per-
    sample loss, or confidence error) and the trainee updates only on the
    kept fraction. The keep fraction decays as
    1 - min(epoch / warmup, 1) * noise_rate_estimate.
    With a keep fraction of 1 throughout, each net's trajectory equals a
    plain cross-entropy run with its own derived seed.
    """
    if criterion not in CRITERIA:
        raise ValueError(f"criterion must be one of {CRITERIA}, got {criterion!r}")
    if cfg.sieve is None:
        raise ValueError("train_coteaching requires a sieve config")
    k = _check_datasets(cfg, train, test)
    seeds = coteaching_seeds(cfg.seed)
    nets = [initial_network(cfg, train.dim, k, net_seed=s) for s in seeds]
    histories = (TrainHistory(), TrainHistory())
    total = cfg.optimizer.total_epochs
    warmup = cfg.sieve.warmup_epochs

    for epoch in range(total):
        lr = cosine_lr(epoch, cfg.optimizer)
        keep = 1.0 - min(epoch / warmup, 1.0) * cfg.noise_rate_estimate

        summaries = []
        for net in nets:
            probs = predict_probs(net, train.features)
            summaries.append(_confidence_summary(probs, train))

        batch_lists = [batches(train, cfg.batch_size, _rng(s, _STREAM_SHUFFLE, epoch))
                       for s in seeds]
        loss_sums = [0.0, 0.0]
        kept_counts = [0, 0]
        for step in range(len(batch_lists[0])):
            picks = []
            for j in (0, 1):
                idx = batch_lists[j][step]
                peer_probs = predict_probs(nets[1 - j], train.features[idx])
                if criterion == SMALL_LOSS:
                    scores = per_sample_losses(peer_probs, train.labels[idx])
                else:
                    scores = confidence_errors(peer_probs, train.labels[idx])
                picks.append(idx[small_loss_select(scores, keep)])
            for j in (0, 1):
                grads, loss = backward(nets[j], train.features[picks[j]],
                                       train.labels[picks[j]])
                nets[j] = sgd_step(nets[j], grads, lr, cfg.optimizer)
                loss_sums[j] += loss * picks[j].size
                kept_counts[j] += picks[j].size

        for j in (0, 1):
            conf_clean, conf_noisy, conf_pred = summaries[j]
            histories[j].records.append(EpochRecord(
                epoch=epoch, lr=lr, train_loss=loss_sums[j] / kept_counts[j],
                test_acc=evaluate(nets[j], test), mean_conf_clean=conf_clean,
                mean_conf_noisy=conf_noisy, mean_conf_pred=conf_pred))
    return (nets[0], nets[1]), (histories[0], histories[1])


HISTORY_CSV_HEADER = [
    "epoch", "lr", "train_loss", "test_acc",
    "alpha_i", "n_selected", "tp", "fp", "fn", "tn", "fallback",
    "mean_conf_clean", "mean_conf_noisy", "mean_conf_pred",
]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def history_rows(history: TrainHistory):
    rows = []
    for r in history.records:
        if r.sieve is not None:
            c = r.sieve.confusion
            sieve_cols = [r.sieve.alpha, r.sieve.n_selected, c.tp_noisy_rejected,
                          c.fp_clean_rejected, c.fn_noisy_selected, c.tn_clean_selected]
        else:
            sieve_cols = [None] * 6
        rows.append([r.epoch, r.lr, r.train_loss, r.test_acc, *sieve_cols,
                     r.fallback, r.mean_conf_clean, r.mean_conf_noisy, r.mean_conf_pred])
    return rows


def mean_history_rows(history_a: TrainHistory, history_b: TrainHistory):
    """Per-epoch means of two co-trained networks (accuracy reported as the
    average of the two, per the co-teaching evaluation convention)."""
    def mean2(x, y):
        if x is None or y is None:
            return None
        return (x + y) / 2.0

    rows = []
    for ra, rb in zip(history_a.records, history_b.records):
        rows.append([ra.epoch, ra.lr, mean2(ra.train_loss, rb.train_loss),
                     mean2(ra.test_acc, rb.test_acc), *[None] * 7,
                     mean2(ra.mean_conf_clean, rb.mean_conf_clean),
                     mean2(ra.mean_conf_noisy, rb.mean_conf_noisy),
                     mean2(ra.mean_conf_pred, rb.mean_conf_pred)])
    return rows


def write_history_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_CSV_HEADER)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
