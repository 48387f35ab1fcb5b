"""Experiment runner.

Subcommands:
  run <config>       train per config, one subdirectory per seed
  bounds <config>    error-bound verification sweep, emits bounds.csv
  compare <dirs...>  aggregate last-window accuracy across runs
  verify <dir>       re-check the artifact hashes recorded in manifests

Configs are flat ``key = value`` text files with a strict schema: unknown
keys are rejected, every value is typed, and all resolved settings land in
each run's manifest together with sha256 hashes of every artifact. The
whole pipeline draws randomness only from the configured seeds.
"""

import argparse
import csv
import hashlib
import shutil
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .data import Dataset, gen_blobs, load, split, to_csv_string
from .noise import NoiseSpec, apply_noise, transition_matrix
from .nncore import OptimizerConfig, save_network
from .sieve import SieveConfig, SIEVE_CSV_HEADER, sieve_csv_row
from .theory import make_tsybakov_model, bound_sweep
from .trainer import (CE, CONFES, COTEACHING, CONFES_COTEACHING, METHODS,
                      SMALL_LOSS, CONFIDENCE_ERROR, TrainConfig, child_seed,
                      history_rows, mean_history_rows, train_ce, train_confes,
                      train_coteaching, window_accuracy, write_history_csv)

# Stream tags expanding one run seed into independent pipeline stages.
_STREAM_DATA = 0x51
_STREAM_SPLIT = 0x52
_STREAM_NOISE = 0x53
_STREAM_TRAIN = 0x54
_STREAM_MODEL = 0x61

NOISE_NONE = "none"


class CliError(ValueError):
    """Validation or compatibility failure surfaced as a one-line error."""


# --------------------------------------------------------------------------
# Flat key=value config files


class _Key:
    def __init__(self, convert, default=None, required=False):
        self.convert = convert
        self.default = default
        self.required = required


def _to_int(text):
    try:
        return int(text)
    except ValueError:
        raise CliError(f"expected an integer, got {text!r}") from None


def _to_float(text):
    try:
        value = float(text)
    except ValueError:
        raise CliError(f"expected a number, got {text!r}") from None
    if not np.isfinite(value):
        raise CliError(f"expected a finite number, got {text!r}")
    return value


def _to_int_list(text):
    return [_to_int(part.strip()) for part in text.split(",") if part.strip()]


def _to_float_list(text):
    return [_to_float(part.strip()) for part in text.split(",") if part.strip()]


def _choice(*options):
    def convert(text):
        if text not in options:
            raise CliError(f"expected one of {options}, got {text!r}")
        return text
    return convert


RUN_SCHEMA = {
    "out": _Key(str, required=True),
    "seeds": _Key(_to_int_list, required=True),
    "data": _Key(_choice("blobs", "csv"), default="blobs"),
    "data_path": _Key(str, default=""),
    "test_fraction": _Key(_to_float, default=0.0),
    "classes": _Key(_to_int, default=4),
    "train_samples": _Key(_to_int, default=5000),
    "test_samples": _Key(_to_int, default=1000),
    "features": _Key(_to_int, default=16),
    "separation": _Key(_to_float, default=6.0),
    "cluster_std": _Key(_to_float, default=1.0),
    "noise_kind": _Key(_choice(NOISE_NONE, "symmetric", "pairflip", "instance"),
                       default="symmetric"),
    "noise_rate": _Key(_to_float, default=0.4),
    "method": _Key(_choice(*METHODS), default=CONFES),
    "batch_size": _Key(_to_int, default=128),
    "lr": _Key(_to_float, default=0.02),
    "momentum": _Key(_to_float, default=0.9),
    "weight_decay": _Key(_to_float, default=5e-4),
    "epochs": _Key(_to_int, default=100),
    "lr_decay_factor": _Key(_to_float, default=100.0),
    "hidden": _Key(_to_int_list, default=[64, 64]),
    "alpha": _Key(_to_float, default=0.2),
    "warmup_epochs": _Key(_to_int, default=30),
    "eval_window": _Key(_to_int, default=5),
    "noise_rate_estimate": _Key(_to_float, default=0.0),
    "snapshot_epochs": _Key(_to_int_list, default=[10, 50, 100]),
}

BOUNDS_SCHEMA = {
    "out": _Key(str, required=True),
    "seeds": _Key(_to_int_list, required=True),
    "classes": _Key(_to_int, default=4),
    "points": _Key(_to_int, default=40),
    "margin_floor": _Key(_to_float, default=0.2),
    "margin_width": _Key(_to_float, default=0.4),
    "noise_kind": _Key(_choice("symmetric", "pairflip"), default="symmetric"),
    "noise_rate": _Key(_to_float, default=0.3),
    "epsilons": _Key(_to_float_list, default=[0.0, 0.01, 0.02, 0.05]),
    "draws": _Key(_to_int, default=100_000),
}


def parse_config(path, schema) -> dict:
    """Strict parse of a flat key=value file against a schema."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"config: cannot read {path}: {exc.strerror}") from None
    values = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError(f"config {path}:{line_no}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in schema:
            raise CliError(f"config {path}:{line_no}: unknown key '{key}'")
        if key in values:
            raise CliError(f"config {path}:{line_no}: duplicate key '{key}'")
        try:
            values[key] = schema[key].convert(value)
        except CliError as exc:
            raise CliError(f"config {path}:{line_no}: key '{key}': {exc}") from None
    for key, spec in schema.items():
        if key not in values:
            if spec.required:
                raise CliError(f"config {path}: missing required key '{key}'")
            values[key] = spec.default
    return values


def _resolve_config_path(arg: str) -> Path:
    path = Path(arg)
    if path.exists():
        return path
    bundled = resources.files("sievelab").joinpath("configs", f"{arg}.cfg")
    if bundled.is_file():
        return Path(str(bundled))
    raise CliError(f"config: no such file or bundled config: {arg}")


# --------------------------------------------------------------------------
# Experiment runs


@dataclass
class ExperimentConfig:
    """Resolved run settings; constructing one performs all validation that
    does not require the data itself."""

    raw: dict

    def __post_init__(self):
        cfg = self.raw
        if not cfg["seeds"]:
            raise CliError("config: seed list must be nonempty")
        if cfg["data"] == "csv":
            if not cfg["data_path"]:
                raise CliError("config: data = csv requires data_path")
            if not Path(cfg["data_path"]).exists():
                raise CliError(f"config: data_path does not exist: {cfg['data_path']}")
            if not 0.0 < cfg["test_fraction"] < 1.0:
                raise CliError("config: data = csv requires test_fraction in (0, 1)")
        else:
            if cfg["classes"] < 2 or cfg["features"] < 2:
                raise CliError("config: blobs need classes >= 2 and features >= 2")
            if cfg["train_samples"] < 2 * cfg["classes"] or cfg["test_samples"] < cfg["classes"]:
                raise CliError("config: blobs need at least 2 train and 1 test sample per class")
        if cfg["noise_kind"] != NOISE_NONE and not 0.0 <= cfg["noise_rate"] < 1.0:
            raise CliError("config: noise_rate must be in [0, 1)")
        # Constructing the typed configs runs their own validation now,
        # before any output directory is touched.
        self.train_config(seed=0)

    def optimizer(self) -> OptimizerConfig:
        cfg = self.raw
        return OptimizerConfig(lr0=cfg["lr"], momentum=cfg["momentum"],
                               weight_decay=cfg["weight_decay"],
                               total_epochs=cfg["epochs"],
                               lr_decay_factor=cfg["lr_decay_factor"])

    def train_config(self, seed: int) -> TrainConfig:
        cfg = self.raw
        sieve = None
        if cfg["method"] != CE:
            sieve = SieveConfig(alpha0=cfg["alpha"], warmup_epochs=cfg["warmup_epochs"])
        return TrainConfig(optimizer=self.optimizer(), batch_size=cfg["batch_size"],
                           method=cfg["method"], sieve=sieve, seed=seed,
                           eval_window=cfg["eval_window"],
                           hidden_sizes=tuple(cfg["hidden"]),
                           noise_rate_estimate=cfg["noise_rate_estimate"],
                           snapshot_epochs=tuple(cfg["snapshot_epochs"]))


def _sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(seed_dir: Path, cfg_values: dict, seed: int, extra: dict) -> None:
    lines = [f"cfg.{key} = {_manifest_value(cfg_values[key])}" for key in sorted(cfg_values)]
    lines.append(f"seed = {seed}")
    for key in sorted(extra):
        lines.append(f"{key} = {extra[key]}")
    for file in sorted(p for p in seed_dir.rglob("*") if p.is_file()):
        rel = file.relative_to(seed_dir).as_posix()
        lines.append(f"file.{rel} = {_sha256_file(file)}")
    (seed_dir / "manifest.txt").write_text("\n".join(lines) + "\n")


def _manifest_value(value) -> str:
    if isinstance(value, list):
        return ",".join(_manifest_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _read_manifest(path: Path) -> dict:
    entries = {}
    for line in path.read_text().splitlines():
        if line.strip():
            key, _, value = line.partition(" = ")
            entries[key] = value
    return entries


def _prepare_seed_data(exp: ExperimentConfig, seed: int):
    cfg = exp.raw
    if cfg["data"] == "blobs":
        total = cfg["train_samples"] + cfg["test_samples"]
        full = gen_blobs(cfg["classes"], total, cfg["features"], cfg["separation"],
                         cfg["cluster_std"],
                         np.random.default_rng(child_seed(seed, _STREAM_DATA)))
        fraction = cfg["test_samples"] / total
    else:
        full = load(cfg["data_path"])
        fraction = cfg["test_fraction"]
    train_clean, test = split(full, fraction,
                              np.random.default_rng(child_seed(seed, _STREAM_SPLIT)))
    data_hash = hashlib.sha256(
        (to_csv_string(train_clean) + "|" + to_csv_string(test)).encode()).hexdigest()

    if cfg["noise_kind"] == NOISE_NONE:
        train = train_clean
    else:
        spec = NoiseSpec(kind=cfg["noise_kind"], rate=cfg["noise_rate"],
                         seed=child_seed(seed, _STREAM_NOISE))
        train = apply_noise(train_clean, spec, cfg["classes"])
    return train, test, data_hash


def _run_one_seed(exp: ExperimentConfig, seed: int, seed_dir: Path) -> None:
    cfg = exp.raw
    train, test, data_hash = _prepare_seed_data(exp, seed)
    from .data import save as save_dataset
    (seed_dir / "data").mkdir(parents=True)
    save_dataset(train, seed_dir / "data" / "train.csv")
    save_dataset(test, seed_dir / "data" / "test.csv")

    tcfg = exp.train_config(seed=child_seed(seed, _STREAM_TRAIN))
    snap_dir = seed_dir / "snapshots"
    snap_dir.mkdir()
    if cfg["method"] == CE:
        net, history = train_ce(tcfg, train, test)
        rows = history_rows(history)
        _save_snapshots(snap_dir, history, net)
    elif cfg["method"] == CONFES:
        net, history = train_confes(tcfg, train, test)
        rows = history_rows(history)
        _save_snapshots(snap_dir, history, net)
        with open(seed_dir / "sieve.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(SIEVE_CSV_HEADER)
            for record in history.records:
                writer.writerow(sieve_csv_row(record.sieve))
    else:
        criterion = SMALL_LOSS if cfg["method"] == COTEACHING else CONFIDENCE_ERROR
        nets, hists = train_coteaching(tcfg, train, test, criterion)
        rows = mean_history_rows(*hists)
        write_history_csv(seed_dir / "history_net0.csv", history_rows(hists[0]))
        write_history_csv(seed_dir / "history_net1.csv", history_rows(hists[1]))
        save_network(nets[0], snap_dir / "final_net0.bin")
        save_network(nets[1], snap_dir / "final_net1.bin")
    write_history_csv(seed_dir / "history.csv", rows)
    _write_manifest(seed_dir, cfg, seed, {"data_hash": data_hash})


def _save_snapshots(snap_dir: Path, history, final_net) -> None:
    for epoch, net in sorted(history.snapshots.items()):
        save_network(net, snap_dir / f"epoch_{epoch:04d}.bin")
    save_network(final_net, snap_dir / "final.bin")


def _run_seed_quarantined(run_one, seed: int, out: Path) -> None:
    """Run one seed in a .partial directory; promote on success, move to
    quarantine/ on failure so broken outputs are never mistaken for results."""
    final_dir = out / f"seed_{seed}"
    partial = out / f"seed_{seed}.partial"
    for stale in (final_dir, partial):
        if stale.exists():
            shutil.rmtree(stale)
    partial.mkdir(parents=True)
    try:
        run_one(seed, partial)
    except BaseException:
        quarantine = out / "quarantine"
        quarantine.mkdir(exist_ok=True)
        target = quarantine / f"seed_{seed}"
        if target.exists():
            shutil.rmtree(target)
        partial.rename(target)
        raise
    partial.rename(final_dir)


def run_experiment(config_path, out_override=None, seed_override=None) -> Path:
    exp = ExperimentConfig(parse_config(_resolve_config_path(config_path), RUN_SCHEMA))
    seeds = seed_override if seed_override else exp.raw["seeds"]
    out = Path(out_override) if out_override else Path(exp.raw["out"])
    out.mkdir(parents=True, exist_ok=True)
    for seed in seeds:
        _run_seed_quarantined(lambda s, d: _run_one_seed(exp, s, d), seed, out)
    return out


# --------------------------------------------------------------------------
# Bound-verification sweep

BOUNDS_CSV_HEADER = ["case", "eps", "alpha", "empirical_p", "bound",
                     "mc_stderr", "n_draws", "seed"]


def run_bounds(config_path, out_override=None, seed_override=None) -> Path:
    cfg = parse_config(_resolve_config_path(config_path), BOUNDS_SCHEMA)
    if not cfg["seeds"]:
        raise CliError("config: seed list must be nonempty")
    seeds = seed_override if seed_override else cfg["seeds"]
    out = Path(out_override) if out_override else Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)

    spec = NoiseSpec(kind=cfg["noise_kind"], rate=cfg["noise_rate"], seed=0)
    tm = transition_matrix(spec, cfg["classes"])
    rows = []
    violations = 0
    for seed in seeds:
        model = make_tsybakov_model(cfg["classes"], cfg["points"], cfg["margin_floor"],
                                    np.random.default_rng(child_seed(seed, _STREAM_MODEL)),
                                    margin_width=cfg["margin_width"])
        for check in bound_sweep(model, tm, cfg["epsilons"], cfg["draws"], seed):
            rows.append([check.event, repr(check.eps), repr(check.alpha),
                         repr(check.empirical_p), repr(check.bound),
                         repr(check.mc_stderr), check.n_draws, seed])
            if check.empirical_p > check.bound + 3.0 * check.mc_stderr:
                violations += 1
                print(f"warning: bound exceeded: seed={seed} case={check.event} "
                      f"eps={check.eps} empirical_p={check.empirical_p} "
                      f"bound={check.bound}", file=sys.stderr)
    with open(out / "bounds.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(BOUNDS_CSV_HEADER)
        writer.writerows(rows)
    manifest = [f"cfg.{k} = {_manifest_value(cfg[k])}" for k in sorted(cfg)]
    manifest.append(f"violations = {violations}")
    manifest.append(f"file.bounds.csv = {_sha256_file(out / 'bounds.csv')}")
    (out / "manifest.txt").write_text("\n".join(manifest) + "\n")
    return out


# --------------------------------------------------------------------------
# Aggregation across runs


def aggregate_accuracies(values):
    """Mean and sample standard deviation (n-1); std is None for one value."""
    arr = np.asarray(values, dtype=float)
    mean = float(arr.mean())
    std = float(arr.std(ddof=1)) if arr.size > 1 else None
    return mean, std


def _read_history_accuracies(path: Path):
    with open(path, newline="") as fh:
        return [float(row["test_acc"]) for row in csv.DictReader(fh)]


def compare(run_dirs, out_dir=".") -> Path:
    """Aggregate last-window accuracy per (method, noise) cell across seeds."""
    cells = {}
    data_hashes = {}
    found = 0
    for run_dir in run_dirs:
        for manifest_path in sorted(Path(run_dir).glob("seed_*/manifest.txt")):
            manifest = _read_manifest(manifest_path)
            seed = manifest["seed"]
            data_hash = manifest["data_hash"]
            if data_hashes.setdefault(seed, data_hash) != data_hash:
                raise CliError(
                    f"incompatible manifests: seed {seed} was run on different data "
                    f"({manifest_path.parent}); refusing to aggregate")
            accs = _read_history_accuracies(manifest_path.parent / "history.csv")
            if not accs:
                raise CliError(f"empty history in {manifest_path.parent}")
            window = int(manifest["cfg.eval_window"])
            key = (manifest["cfg.method"], manifest["cfg.noise_kind"],
                   manifest["cfg.noise_rate"])
            cells.setdefault(key, []).append(float(np.mean(accs[-window:])))
            found += 1
    if not found:
        raise CliError("no run manifests found under the given directories")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table_path = out / "compare.csv"
    lines = []
    with open(table_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "noise_kind", "noise_rate", "n_seeds",
                         "mean_acc", "std_acc"])
        for key in sorted(cells):
            mean, std = aggregate_accuracies(cells[key])
            writer.writerow([*key, len(cells[key]), repr(mean),
                             "" if std is None else repr(std)])
            std_text = "" if std is None else f" +- {std:.4f}"
            lines.append(f"{key[0]:<20} {key[1]:<10} {key[2]:<6} "
                         f"n={len(cells[key])}  acc={mean:.4f}{std_text}")
    print("\n".join(lines))
    return table_path


def verify(run_dir) -> list:
    """Re-hash every artifact recorded in the manifests; returns problems."""
    problems = []
    manifests = sorted(Path(run_dir).rglob("manifest.txt"))
    if not manifests:
        return [f"{run_dir}: no manifests found"]
    for manifest_path in manifests:
        base = manifest_path.parent
        for key, recorded in _read_manifest(manifest_path).items():
            if not key.startswith("file."):
                continue
            target = base / key[len("file."):]
            if not target.is_file():
                problems.append(f"{target}: missing")
            elif _sha256_file(target) != recorded:
                problems.append(f"{target}: hash mismatch")
    return problems


# --------------------------------------------------------------------------
# Entry point


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="sievelab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("run", "bounds"):
        p = sub.add_parser(name)
        p.add_argument("config")
        p.add_argument("--out", default=None)
        p.add_argument("--seed-override", default=None,
                       help="comma-separated seeds replacing the config's list")

    p = sub.add_parser("compare")
    p.add_argument("dirs", nargs="+")
    p.add_argument("--out", default=".")

    p = sub.add_parser("verify")
    p.add_argument("dir")

    args = parser.parse_args(argv)
    try:
        if args.command in ("run", "bounds"):
            seeds = _to_int_list(args.seed_override) if args.seed_override else None
            runner = run_experiment if args.command == "run" else run_bounds
            out = runner(args.config, out_override=args.out, seed_override=seeds)
            print(out)
        elif args.command == "compare":
            compare(args.dirs, args.out)
        else:
            problems = verify(args.dir)
            if problems:
                raise CliError("; ".join(problems))
            print("ok")
    except Exception as exc:  # surface everything as one parseable line
        message = " ".join(str(exc).split())
        print(f"error: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
