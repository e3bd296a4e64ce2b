"""Batch command line: gen-synthetic, preprocess, train, sample, backtest, report.

Stages talk only through files. Settings come from ``--config`` (``key=value``
lines, ``#`` comments) and ``--set key=value`` overrides, namespaced as
``synthetic.*``, ``data.*``, ``train.*``, ``dit.*`` and ``backtest.*``. Every artifact starts with ``#`` lines echoing the settings
and seed that produced it.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .backtest import (BacktestConfig, BacktestError, compute_metrics, format_metrics_kv,
                       format_metrics_table, read_ledger, run_backtest, write_ledger,
                       write_trajectories)
from .data import (SPEC_KEYS, DataError, chronological_split, format_spec, generate_synthetic_market,
                   load_panel, parse_spec, preprocess_panel, write_panel)
from .denoiser import DiTConfig
from .diffusion import (CheckpointError, TrainConfig, TrainingError, read_checkpoint, sample_many,
                        train, write_checkpoint)
from .numerics import NumericalError
from .optimizer import OptimizationError

log = logging.getLogger("factordiff")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DATA_KEYS = {"split": float, "clip": float}


class ConfigError(ValueError):
    """Bad or conflicting settings; reported with the usage exit code."""


def _field_types(cls) -> dict:
    return {f.name: f.type for f in fields(cls)}


SECTIONS = {
    "synthetic": set(SPEC_KEYS),
    "data": set(DATA_KEYS),
    "train": set(_field_types(TrainConfig)) - {"checkpoint_path"},
    "dit": set(_field_types(DiTConfig)) - {"k"},
    "backtest": set(_field_types(BacktestConfig)),
}


def parse_settings(lines) -> dict[str, str]:
    out = {}
    for num, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {num}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in SECTIONS or name not in SECTIONS[section]:
            raise ConfigError(f"unknown setting {key!r}")
        out[key] = value
    return out


def _coerce(value: str, default):
    if isinstance(default, bool):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def _build(cls, settings: dict, section: str, **fixed):
    base = cls(**fixed) if fixed else cls()
    kw = dict(fixed)
    for key, value in settings.items():
        sec, _, name = key.partition(".")
        if sec != section:
            continue
        try:
            kw[name] = _coerce(value, getattr(base, name))
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from exc
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section} settings: {exc}") from exc


class Run:
    """Resolved settings for one invocation."""

    def __init__(self, args):
        settings = {}
        if args.config:
            path = Path(args.config)
            if not path.is_file():
                raise ConfigError(f"config file not found: {path}")
            settings.update(parse_settings(path.read_text().splitlines()))
        settings.update(parse_settings(args.set or []))
        if args.seed is not None:
            for key in ("synthetic.seed", "train.seed", "backtest.seed"):
                settings[key] = str(args.seed)
        self.settings = settings
        self.seed = args.seed
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)

    def get(self, key: str, default):
        return _coerce(self.settings[key], default) if key in self.settings else default

    def header(self, command: str) -> list[str]:
        lines = [f"factordiff {__version__} {command}", f"seed={self.seed if self.seed is not None else 'default'}"]
        lines += [f"{k}={v}" for k, v in sorted(self.settings.items())]
        return lines

    def synthetic(self):
        items = {k.split(".", 1)[1]: v for k, v in self.settings.items() if k.startswith("synthetic.")}
        try:
            return parse_spec(items)
        except ValueError as exc:
            raise ConfigError(f"synthetic settings: {exc}") from exc

    def split(self, panel):
        return chronological_split(panel, self.get("data.split", 0.8))


def _need_file(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"{what} path is required")
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{what} file not found: {p}")
    return p


def _panel(args):
    return load_panel(_need_file(args.factors, "factors"), _need_file(args.returns, "returns"))


# -- subcommands --------------------------------------------------------------------


def cmd_gen_synthetic(run: Run, args) -> None:
    spec = run.synthetic()
    panel, _ = generate_synthetic_market(spec)
    header = run.header("gen-synthetic")
    write_panel(panel, run.out / "factors.csv", run.out / "returns.csv", header)
    (run.out / "spec.txt").write_text("".join(f"# {h}\n" for h in header) + format_spec(spec))
    log.info("wrote %d days x %d assets to %s", panel.T, panel.D, run.out)


def cmd_preprocess(run: Run, args) -> None:
    panel = preprocess_panel(_panel(args), run.get("data.clip", 3.0))
    write_panel(panel, run.out / "factors.csv", run.out / "returns.csv", run.header("preprocess"))


def cmd_train(run: Run, args) -> None:
    train_panel, _ = run.split(_panel(args))
    if not train_panel.is_clean():
        raise DataError("training panel has missing values; run preprocess first")
    config = _build(TrainConfig, run.settings, "train")
    dit = _build(DiTConfig, run.settings, "dit", k=train_panel.K)
    path = run.out / "model.ckpt"
    config = TrainConfig(**{**asdict(config), "checkpoint_path": str(path)})
    ckpt = train(train_panel, config, dit)
    write_checkpoint(ckpt, path)
    (run.out / "train_log.txt").write_text(
        "".join(f"# {h}\n" for h in run.header("train"))
        + "".join(f"epoch={i + 1} loss={v!r}\n" for i, v in enumerate(ckpt.loss_history)))


def _test_split(run: Run, args):
    history, test = run.split(_panel(args))
    if not test.is_clean():
        raise DataError("test panel has missing values; run preprocess first")
    return history, test


def cmd_sample(run: Run, args) -> None:
    ckpt = read_checkpoint(_need_file(args.checkpoint, "checkpoint"))
    _, test = _test_split(run, args)
    config = _build(BacktestConfig, run.settings, "backtest")
    count, seed = config.samples, config.seed
    draws = sample_many(ckpt, test.factors, count, [[seed, t] for t in range(test.T)])
    with open(run.out / "samples.csv", "w", newline="") as fh:
        fh.writelines(f"# {h}\n" for h in run.header("sample"))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "sample_id"] + list(test.assets))
        for t, d in enumerate(test.dates):
            for s in range(count):
                w.writerow([d, s] + [repr(float(x)) for x in draws[t, s]])


def read_samples(path, dates, assets) -> np.ndarray:
    """Load a ``date,sample_id,<assets>`` matrix into ``(T, S, D)`` ordered by ``dates``."""
    rows: dict[str, dict[int, list[float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(reader, None)
        if header is None or header[:2] != ["date", "sample_id"]:
            raise DataError(f"{path}: expected header date,sample_id,<assets>")
        if header[2:] != list(assets):
            raise DataError(f"{path}: asset columns do not match the panel")
        for num, row in enumerate(reader, 2):
            try:
                rows.setdefault(row[0], {})[int(row[1])] = [float(x) for x in row[2:]]
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}: bad row {num}: {exc}") from exc
    missing = [d for d in dates if d not in rows]
    if missing:
        raise DataError(f"{path}: no samples for {len(missing)} test date(s), first {missing[0]}")
    counts = {len(rows[d]) for d in dates}
    if len(counts) != 1:
        raise DataError(f"{path}: sample counts differ across dates")
    return np.array([[rows[d][s] for s in sorted(rows[d])] for d in dates])


def cmd_backtest(run: Run, args) -> None:
    config = _build(BacktestConfig, run.settings, "backtest")
    if args.checkpoint and args.samples:
        raise ConfigError("give either --checkpoint or --samples, not both")
    if config.strategy == "Factordiff" and not (args.checkpoint or args.samples):
        raise ConfigError("Factordiff backtest needs --checkpoint or --samples")
    if config.strategy != "Factordiff" and (args.checkpoint or args.samples):
        raise ConfigError(f"{config.strategy} does not use --checkpoint or --samples")
    history, test = _test_split(run, args)
    ckpt = samples = None
    if args.samples:
        samples = read_samples(_need_file(args.samples, "samples"), test.dates, test.assets)
        config = BacktestConfig(**{**asdict(config), "samples": samples.shape[1]})
    elif args.checkpoint:
        ckpt = read_checkpoint(_need_file(args.checkpoint, "checkpoint"))
    ledger = run_backtest(test, config, history.returns, checkpoint=ckpt, samples=samples)
    header = run.header("backtest")
    write_ledger(ledger, run.out / "ledger.csv", header)
    write_trajectories(ledger, run.out / "weights_top5.csv", header=header)
    report = compute_metrics(ledger, config.cvar_level)
    (run.out / "metrics.txt").write_text(
        "".join(f"# {h}\n" for h in header) + f"# strategy={ledger.label}\n"
        + format_metrics_kv(report) + "\n" + format_metrics_table({ledger.label: report}))


def cmd_report(run: Run, args) -> None:
    reports = {}
    for path in args.ledgers:
        ledger = read_ledger(_need_file(path, "ledger"))
        level = float(ledger.meta.get("backtest.cvar_level", 0.95))
        name = ledger.label
        while name in reports:
            name += "'"
        reports[name] = compute_metrics(ledger, level)
    table = format_metrics_table(reports)
    (run.out / "report.txt").write_text("".join(f"# {h}\n" for h in run.header("report"))
                                        + "".join(f"# ledger={p}\n" for p in args.ledgers) + table)
    sys.stdout.write(table)


COMMANDS = {
    "gen-synthetic": (cmd_gen_synthetic, "write a synthetic factor/return panel"),
    "preprocess": (cmd_preprocess, "impute, standardize and clip a raw panel"),
    "train": (cmd_train, "fit the conditional diffusion model"),
    "sample": (cmd_sample, "draw return scenarios for each test day"),
    "backtest": (cmd_backtest, "simulate daily rebalancing on the test split"),
    "report": (cmd_report, "tabulate metrics from ledger files"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="factordiff", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value settings file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting")
    common.add_argument("--seed", type=int, help="seed for generation, training and sampling")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "report":
            p.add_argument("ledgers", nargs="+", help="ledger CSV files")
            continue
        if name == "gen-synthetic":
            continue
        p.add_argument("--factors", required=True)
        p.add_argument("--returns", required=True)
        if name in ("sample", "backtest"):
            p.add_argument("--checkpoint", required=name == "sample")
        if name == "backtest":
            p.add_argument("--samples", help="sample matrix CSV from the sample command")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = Run(args)
        COMMANDS[args.command][0](run, args)
    except ConfigError as exc:
        print(f"factordiff: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, BacktestError, OSError, ValueError) as exc:
        print(f"factordiff: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, TrainingError, OptimizationError, FloatingPointError) as exc:
        print(f"factordiff: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
