"""Command-line harness: ``qbdc run``, ``qbdc probe``, ``qbdc compare``.

Configuration is a flat ``key=value`` file (``#`` starts a comment); every
key can also be given as a flag (``--batch-size 100``), and flags win.
``QBDC_OUTPUT_DIR`` overrides the output directory of the file.
"""
from __future__ import annotations

import argparse
import csv
from dataclasses import dataclass, field, fields
import logging
import os
from pathlib import Path
import sys

import numpy as np

from . import active, data
from .adversarial import count_adversarials
from .nn import parse_architecture
from .trainer import TrainOptions

log = logging.getLogger("qbdc")

EXPERIMENTS = ("qbdc", "random", "qbdc_dropout_trained", "full_baseline", "adversarial_probe")
DATASETS = ("mnist", "digits", "synthetic")
CURVE_HEADER = ["seed", "round", "labeled_count", "val_error", "test_error"]
ADV_HEADER = ["seed", "epsilon", "probed", "flipped", "rate", "model_tag"]


class ConfigError(ValueError):
    pass


def _floats(text):
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text):
    return [int(t) for t in text.split(",") if t.strip()]


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


def _opt_int(text):
    return None if text.strip().lower() in ("", "none", "auto") else int(text)


@dataclass
class ExperimentConfig:
    experiment: str = "qbdc"
    dataset: str = "mnist"
    mnist_dir: str = "mnist"
    train_size: int = 50000
    val_size: int = 10000
    split_seed: int = 0
    architecture: str = "c20-p2-c40-p2-d100-d100"
    committee_size: int = 3
    dropout: float = 0.5
    candidates: int | None = None
    batch_size: int = 200
    init_minibatches: int = 10
    budget: float = 0.3
    learning_rate: float = 0.001
    decay: float = 0.9
    rms_epsilon: float = 1e-8
    patience: int = 5
    max_epochs: int = 100
    train_dropout: float = 0.5
    warm_start: bool = True
    member_max_epochs: int = 20
    member_patience: int = 2
    seeds: list = field(default_factory=lambda: [1, 2, 3, 4, 5])
    output_dir: str = "results"
    eps_grid: list = field(default_factory=lambda: [0.05, 0.1, 0.15, 0.2, 0.25])
    probe_size: int = 1000
    synth_classes: int = 10
    synth_per_class: int = 350
    synth_dimension: int = 10
    synth_separation: float = 1.5
    synth_seed: int = 123

    def active_config(self, seed: int, strategy: str | None = None) -> active.ActiveConfig:
        if strategy is None:
            strategy = "random" if self.experiment == "random" else "qbdc"
        return active.ActiveConfig(
            committee_size=self.committee_size, dropout=self.dropout,
            candidates=self.candidates, batch_size=self.batch_size,
            init_minibatches=self.init_minibatches, budget=self.budget, strategy=strategy,
            seed=seed, warm_start=self.warm_start, member_max_epochs=self.member_max_epochs,
            member_patience=self.member_patience)

    def train_options(self, dropout_trained: bool = False) -> TrainOptions:
        return TrainOptions(self.batch_size, self.max_epochs, self.patience,
                            self.train_dropout if dropout_trained else None)

    def validate(self):
        def bad(key, why):
            raise ConfigError(f"{key}: {why}")
        if self.experiment not in EXPERIMENTS:
            bad("experiment", f"must be one of {', '.join(EXPERIMENTS)}")
        if self.dataset not in DATASETS:
            bad("dataset", f"must be one of {', '.join(DATASETS)}")
        if not self.seeds:
            bad("seeds", "need at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            bad("seeds", "duplicate seed")
        for key in ("batch_size", "committee_size", "max_epochs", "member_max_epochs",
                    "probe_size", "train_size", "val_size"):
            if getattr(self, key) < 1:
                bad(key, "must be >= 1")
        for key in ("patience", "member_patience", "init_minibatches"):
            if getattr(self, key) < 0:
                bad(key, "must be >= 0")
        if not 0 <= self.dropout < 1:
            bad("dropout", "must be in [0, 1)")
        if not 0 <= self.train_dropout < 1:
            bad("train_dropout", "must be in [0, 1)")
        if not 0 < self.budget <= 1:
            bad("budget", "must be a fraction in (0, 1]")
        if self.candidates is not None and self.candidates < self.batch_size:
            bad("candidates", "must be >= batch_size")
        if self.learning_rate <= 0:
            bad("learning_rate", "must be > 0")
        if not 0 <= self.decay < 1:
            bad("decay", "must be in [0, 1)")
        if any(e < 0 for e in self.eps_grid):
            bad("eps_grid", "epsilons must be >= 0")
        try:
            parse_architecture(self.architecture, 10)
        except ValueError as exc:
            bad("architecture", str(exc))
        init = self.init_minibatches * self.batch_size
        if init > round(self.budget * self.train_size):
            bad("init_minibatches", f"initial set of {init} exceeds the label budget")
        return self


_CONVERTERS = {"int": int, "float": float, "str": str, "bool": _bool, "int | None": _opt_int,
               "seeds": _ints, "eps_grid": _floats}


def _converter(f):
    return _CONVERTERS.get(f.name) or _CONVERTERS[f.type]


FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def read_config_text(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw.strip()!r}")
        values[key.strip()] = value.strip()
    return values


def parse_config(text: str = "", overrides: dict | None = None,
                 env: dict | None = None) -> ExperimentConfig:
    """Build a validated config from file text, environment and flag overrides."""
    values = read_config_text(text)
    env = os.environ if env is None else env
    if env.get("QBDC_OUTPUT_DIR"):
        values["output_dir"] = env["QBDC_OUTPUT_DIR"]
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    kwargs = {}
    for key, value in values.items():
        if key not in FIELDS:
            raise ConfigError(f"{key}: unknown key")
        try:
            kwargs[key] = _converter(FIELDS[key])(str(value))
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {value!r}") from None
    return ExperimentConfig(**kwargs).validate()


def load_splits(cfg: ExperimentConfig) -> tuple[active.Splits, int]:
    """Returns the splits and the class count."""
    if cfg.dataset == "mnist":
        src = data.load_mnist(cfg.mnist_dir, "train")
        test = data.load_mnist(cfg.mnist_dir, "test")
        train, val = data.split(src, cfg.train_size, cfg.val_size, cfg.split_seed)
    else:
        if cfg.dataset == "digits":
            src = data.load_digits()
        else:
            src = data.synthetic_blobs(cfg.synth_classes, cfg.synth_per_class,
                                       cfg.synth_dimension, cfg.synth_separation, cfg.synth_seed)
        n = cfg.train_size + cfg.val_size
        if n >= len(src):
            raise ConfigError(f"train_size + val_size = {n} leaves no test samples "
                              f"in the {len(src)}-sample {cfg.dataset} set")
        order = np.random.default_rng(cfg.split_seed).permutation(len(src))
        train, val, test = (src.subset(order[:cfg.train_size]),
                            src.subset(order[cfg.train_size:n]), src.subset(order[n:]))
    splits = active.Splits(train.images, train.labels, val.images, val.labels,
                           test.images, test.labels)
    return splits, src.classes


def _run_method(cfg, splits, classes, seed, kind):
    layers = parse_architecture(cfg.architecture, classes)
    common = dict(learning_rate=cfg.learning_rate, decay=cfg.decay, epsilon=cfg.rms_epsilon)
    if kind == "full_baseline":
        records, net, _ = active.train_full(cfg.active_config(seed), splits, layers,
                                            cfg.train_options(), **common)
    else:
        strategy = "random" if kind == "random" else "qbdc"
        records, net, _ = active.run_experiment(
            cfg.active_config(seed, strategy), splits, layers,
            cfg.train_options(kind == "qbdc_dropout_trained"), **common)
    return records, net


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def run_suite(cfg: ExperimentConfig) -> dict:
    """Run every seed; write curves.csv, summary.txt and (probes) adversarial.csv."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    targets = {"curves": out / "curves.csv", "summary": out / "summary.txt"}
    if cfg.experiment == "adversarial_probe":
        targets["adversarial"] = out / "adversarial.csv"
    try:
        splits, classes = load_splits(cfg)
        curve_rows, adv_rows, finals = [], [], []
        kind = "qbdc" if cfg.experiment == "adversarial_probe" else cfg.experiment
        for seed in cfg.seeds:
            log.info("%s seed %d", kind, seed)
            records, net = _run_method(cfg, splits, classes, seed, kind)
            curve_rows += [[seed, r.round, r.labeled, _fmt(r.val_error), _fmt(r.test_error)]
                           for r in records]
            finals.append(records[-1].test_error)
            if cfg.experiment == "adversarial_probe":
                _, full_net = _run_method(cfg, splits, classes, seed, "full_baseline")
                n = min(cfg.probe_size, len(splits.test_y))
                for tag, model in (("qbdc", net), ("full", full_net)):
                    report = count_adversarials(model, splits.test_x[:n], splits.test_y[:n],
                                                cfg.eps_grid)
                    adv_rows += [[seed, _fmt(r.epsilon), r.probed, r.flipped, _fmt(r.rate), tag]
                                 for r in report.rows]
        _write_csv(targets["curves"], CURVE_HEADER, curve_rows)
        if "adversarial" in targets:
            _write_csv(targets["adversarial"], ADV_HEADER, adv_rows)
        targets["summary"].write_text(format_summary({kind: summarize(finals)}))
    except BaseException:
        for path in targets.values():
            path.unlink(missing_ok=True)
        raise
    return targets


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


@dataclass
class SummaryRow:
    mean: float
    min: float
    seeds: int


def summarize(final_errors) -> SummaryRow:
    errs = np.asarray(final_errors, dtype=float)
    return SummaryRow(float(errs.mean()), float(errs.min()), len(errs))


def format_summary(table: dict) -> str:
    lines = [f"{'method':<24}{'mean_error_%':>14}{'min_error_%':>14}{'seeds':>7}"]
    for name, row in table.items():
        lines.append(f"{name:<24}{100 * row.mean:>14.4f}{100 * row.min:>14.4f}{row.seeds:>7}")
    return "\n".join(lines) + "\n"


def read_curves(path) -> dict:
    """Final ``(labeled_count, test_error)`` per seed from a curves.csv."""
    finals = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CURVE_HEADER:
            raise ValueError(f"{path}: expected columns {CURVE_HEADER}, got {reader.fieldnames}")
        last = {}
        for row in reader:
            seed, rnd = int(row["seed"]), int(row["round"])
            if (seed, rnd) in last:
                raise ValueError(f"{path}: duplicate row for seed {seed}, round {rnd}")
            last[(seed, rnd)] = (int(row["labeled_count"]), float(row["test_error"]))
    for (seed, rnd), value in sorted(last.items()):
        finals[seed] = value
    if not finals:
        raise ValueError(f"{path}: no rows")
    return finals


def compare_methods(curves: dict) -> dict:
    """``{method: curves path}`` -> ``{method: SummaryRow}`` at the final budget."""
    finals = {name: read_curves(path) for name, path in curves.items()}
    seed_sets = {name: set(f) for name, f in finals.items()}
    budgets = {name: {v[0] for v in f.values()} for name, f in finals.items()}
    first = next(iter(finals))
    for name in finals:
        if seed_sets[name] != seed_sets[first]:
            raise ValueError(f"seed sets differ between {first} and {name}")
        if budgets[name] != budgets[first] or len(budgets[name]) != 1:
            raise ValueError(f"final labeled counts differ: {first} {sorted(budgets[first])}, "
                             f"{name} {sorted(budgets[name])}")
    return {name: summarize([v[1] for v in f.values()]) for name, f in finals.items()}


def _add_config_flags(p):
    p.add_argument("--config", help="key=value configuration file")
    for name in FIELDS:
        p.add_argument("--" + name.replace("_", "-"), dest=name, metavar="VALUE",
                       help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qbdc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    keys = "config keys (also accepted as --key-name VALUE): " + ", ".join(FIELDS)
    run = sub.add_parser("run", help="run an experiment suite over all seeds", epilog=keys)
    _add_config_flags(run)
    probe = sub.add_parser("probe", help="QBDC vs full-training adversarial probe", epilog=keys)
    _add_config_flags(probe)
    cmp_ = sub.add_parser("compare", help="mean/min table from curves.csv files")
    cmp_.add_argument("curves", nargs="+", metavar="NAME=CURVES_CSV")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.command == "compare":
            curves = {}
            for item in args.curves:
                name, sep, path = item.partition("=")
                if not sep:
                    name, path = Path(item).parent.name or item, item
                curves[name] = path
            sys.stdout.write(format_summary(compare_methods(curves)))
            return 0
        text = Path(args.config).read_text() if args.config else ""
        overrides = {k: getattr(args, k) for k in FIELDS}
        if args.command == "probe":
            overrides["experiment"] = "adversarial_probe"
        cfg = parse_config(text, overrides)
        written = run_suite(cfg)
        sys.stdout.write(Path(written["summary"]).read_text())
        return 0
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"qbdc: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
