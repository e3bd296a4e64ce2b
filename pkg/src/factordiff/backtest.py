"""Daily rebalancing simulation and performance metrics."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .estimators import empirical_moments, generative_moments, james_stein_mean
from .optimizer import FEE_BUY, FEE_SELL, DEFAULT_GAMMA, MVProblem, solve_mv, solve_mv_tc

STRATEGIES = ("EW", "Emp", "ShrEmp", "Factordiff")
VARIANTS = ("mv", "mv_tc")
FEE_TREATMENTS = ("deducted", "ignored")
METRIC_ROWS = (("mean", "Mean (%)"), ("std", "Std (%)"), ("sharpe", "Sharpe"),
               ("sortino", "Sortino"), ("calmar", "Calmar"), ("rtc", "RtC"))


class BacktestError(ValueError):
    pass


@dataclass
class BacktestConfig:
    strategy: str = "EW"
    variant: str = "mv"
    gamma: float = DEFAULT_GAMMA
    fee_buy: float = FEE_BUY
    fee_sell: float = FEE_SELL
    samples: int = 500
    fees: str = "deducted"
    seed: int = 0
    cvar_level: float = 0.95

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise BacktestError(f"unknown strategy {self.strategy!r}; choose from {', '.join(STRATEGIES)}")
        if self.variant not in VARIANTS:
            raise BacktestError(f"unknown problem variant {self.variant!r}; choose mv or mv_tc")
        if self.fees not in FEE_TREATMENTS:
            raise BacktestError(f"fee treatment must be deducted or ignored, got {self.fees!r}")
        if self.fee_buy < 0 or self.fee_sell < 0:
            raise BacktestError("fee rates must be non-negative")
        if self.strategy == "Factordiff" and self.samples < 2:
            raise BacktestError("Factordiff needs at least 2 samples per day")
        if not 0 < self.cvar_level < 1:
            raise BacktestError("cvar_level must lie in (0, 1)")

    @property
    def label(self) -> str:
        if self.strategy == "Factordiff":
            return f"Factordiff ({self.samples})"
        return self.strategy


@dataclass
class BacktestLedger:
    dates: list[str]
    assets: list[str]
    weights: np.ndarray
    drifted: np.ndarray
    buys: np.ndarray
    sells: np.ndarray
    gross: np.ndarray
    fees: np.ndarray
    net: np.ndarray
    wealth: np.ndarray
    label: str = ""
    meta: dict = field(default_factory=dict)


def drift_weights(prev: np.ndarray, realized: np.ndarray) -> np.ndarray:
    """Pre-trade weights after one day of price moves."""
    prev = np.asarray(prev, dtype=np.float64)
    growth = 1.0 + np.asarray(realized, dtype=np.float64)
    if np.any(growth <= 0):
        raise BacktestError("gross return factor must be positive")
    value = prev * growth
    return value / value.sum()


def run_backtest(test, config: BacktestConfig, history: np.ndarray | None = None,
                 checkpoint=None, samples: np.ndarray | None = None) -> BacktestLedger:
    """Simulate daily rebalancing over the ``test`` panel.

    ``history`` holds returns realised before the first test day; the
    Emp and ShrEmp estimators use it plus every test return already
    realised. Factordiff draws ``config.samples`` vectors per day from
    ``checkpoint`` (day t uses seed ``(config.seed, t)``) unless ``samples``
    supplies them as a ``(T, S, D)`` array. Day one starts from cash, so
    the whole initial purchase counts as buys.
    """
    T, D = test.returns.shape
    if T == 0:
        raise BacktestError("empty test period")
    if not np.all(np.isfinite(test.factors)):
        raise BacktestError("missing factor values in test period; preprocess first")
    history = np.zeros((0, D)) if history is None else np.asarray(history, dtype=np.float64)
    if config.strategy in ("Emp", "ShrEmp") and history.shape[0] < 2:
        raise BacktestError(f"{config.strategy} needs at least 2 days of return history")
    if config.strategy == "Factordiff" and samples is None:
        if checkpoint is None:
            raise BacktestError("Factordiff backtest needs a checkpoint or a sample file")
        from .diffusion import sample_many
        samples = sample_many(checkpoint, test.factors, config.samples,
                              [[config.seed, t] for t in range(T)])
    if samples is not None and config.strategy == "Factordiff":
        samples = np.asarray(samples, dtype=np.float64)
        if samples.shape[0] != T or samples.shape[2] != D or samples.shape[1] < 2:
            raise BacktestError(f"sample array {samples.shape} does not cover {T} days x {D} assets")

    deduct = config.fees == "deducted"
    weights = np.zeros((T, D))
    drifted = np.zeros((T, D))
    buys = np.zeros((T, D))
    sells = np.zeros((T, D))
    gross = np.zeros(T)
    fees = np.zeros(T)
    net = np.zeros(T)
    wealth = np.zeros(T)
    past = history
    held = np.zeros(D)
    level = 1.0
    if config.strategy == "ShrEmp" and D < 4:
        warnings.warn("ShrEmp with fewer than 4 assets falls back to the sample mean", stacklevel=2)
    for t in range(T):
        if config.strategy == "EW":
            w = np.full(D, 1.0 / D)
        else:
            if config.strategy == "Emp":
                est = empirical_moments(past)
            elif config.strategy == "ShrEmp":
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    est = james_stein_mean(past)
            else:
                est = generative_moments(samples[t])
            if config.variant == "mv":
                sol = solve_mv(MVProblem(est.mean, est.cov, config.gamma))
            else:
                sol = solve_mv_tc(MVProblem(est.mean, est.cov, config.gamma,
                                            config.fee_buy, config.fee_sell, held))
            w = sol.weights
        delta = w - held
        b, s = np.maximum(delta, 0.0), np.maximum(-delta, 0.0)
        cost = config.fee_buy * b.sum() + config.fee_sell * s.sum() if deduct else 0.0
        r = test.returns[t]
        weights[t], drifted[t], buys[t], sells[t] = w, held, b, s
        gross[t] = w @ r
        fees[t] = cost
        net[t] = gross[t] - cost
        level *= 1.0 + net[t]
        wealth[t] = level
        held = drift_weights(w, r)
        past = np.vstack([past, r[None]])
    meta = {k: v for k, v in asdict(config).items()}
    return BacktestLedger(list(test.return_dates), list(test.assets), weights, drifted, buys, sells,
                          gross, fees, net, wealth, config.label, meta)


# -- metrics ----------------------------------------------------------------------


@dataclass
class MetricsReport:
    """Daily-return statistics. Mean and std are in percent; ratios use raw
    returns. A ratio is ``None`` when its denominator is zero."""

    mean: float
    std: float
    sharpe: float | None
    sortino: float | None
    calmar: float | None
    rtc: float | None
    max_drawdown: float
    cvar: float
    days: int

    def as_dict(self) -> dict:
        return asdict(self)


def max_drawdown(wealth) -> float:
    """Largest peak-to-trough fractional decline of a wealth path."""
    wealth = np.asarray(wealth, dtype=np.float64)
    peaks = np.maximum.accumulate(wealth)
    return float(np.max((peaks - wealth) / peaks))


def cvar(returns, level: float = 0.95) -> float:
    """Average of the worst ``ceil((1 - level) T)`` returns, as a positive loss."""
    r = np.sort(np.asarray(returns, dtype=np.float64))
    k = max(1, math.ceil(round((1.0 - level) * r.size, 9)))
    return float(-r[:k].mean())


def _ratio(num: float, den: float) -> float | None:
    return None if den == 0 else num / den


def compute_metrics(returns, cvar_level: float = 0.95) -> MetricsReport:
    """Six summary statistics of a daily return series (or a ledger's net returns).

    Drawdown is measured on the compounded wealth path starting from 1.
    """
    r = np.asarray(getattr(returns, "net", returns), dtype=np.float64)
    if r.size < 2:
        raise ValueError("need at least 2 daily returns")
    mean = float(r.mean())
    std = float(r.std(ddof=1))
    downside = math.sqrt(float(np.mean(np.minimum(r, 0.0) ** 2)))
    wealth = np.concatenate([[1.0], np.cumprod(1.0 + r)])
    mdd = max_drawdown(wealth)
    tail = cvar(r, cvar_level)
    return MetricsReport(
        mean=100 * mean,
        std=100 * std,
        sharpe=_ratio(mean, std),
        sortino=_ratio(mean, downside),
        calmar=_ratio(mean, mdd),
        rtc=_ratio(mean, tail),
        max_drawdown=mdd,
        cvar=tail,
        days=int(r.size),
    )


def _cell(v: float | None) -> str:
    return "undefined" if v is None else f"{v:.3f}"


def format_metrics_table(reports: dict[str, MetricsReport]) -> str:
    """Strategies as columns, one row per metric."""
    names = list(reports)
    width = max([10] + [len(n) for n in names]) + 2
    lines = ["Metric".ljust(10) + "".join(n.rjust(width) for n in names)]
    for key, title in METRIC_ROWS:
        lines.append(title.ljust(10) + "".join(_cell(getattr(reports[n], key)).rjust(width) for n in names))
    return "\n".join(lines) + "\n"


def format_metrics_kv(report: MetricsReport) -> str:
    return "".join(f"{k}={'undefined' if v is None else repr(v)}\n" for k, v in report.as_dict().items())


# -- files --------------------------------------------------------------------------


def write_ledger(ledger: BacktestLedger, path, header=()) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# strategy={ledger.label}\n")
        fh.writelines(f"# {h}\n" for h in header)
        fh.writelines(f"# backtest.{k}={v}\n" for k, v in ledger.meta.items())
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date"] + [f"w_{a}" for a in ledger.assets] + ["gross_return", "fees", "net_return", "wealth"])
        for t, d in enumerate(ledger.dates):
            w.writerow([d] + [repr(float(x)) for x in ledger.weights[t]]
                       + [repr(float(ledger.gross[t])), repr(float(ledger.fees[t])),
                          repr(float(ledger.net[t])), repr(float(ledger.wealth[t]))])


def read_ledger(path) -> BacktestLedger:
    """Load a ledger CSV (weights and return columns; trade detail is not stored)."""
    label, meta, rows, header = Path(path).stem, {}, [], None
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("strategy="):
                    label = body.split("=", 1)[1]
                elif "=" in body:
                    k, v = body.split("=", 1)
                    meta[k] = v
                continue
            row = next(csv.reader([line]))
            if header is None:
                header = row
            else:
                rows.append(row)
    if header is None or header[-4:] != ["gross_return", "fees", "net_return", "wealth"]:
        raise BacktestError(f"{path}: not a ledger file")
    assets = [h[2:] for h in header[1:-4]]
    vals = np.array([[float(x) for x in r[1:]] for r in rows]).reshape(len(rows), len(assets) + 4)
    D = len(assets)
    zeros = np.zeros((len(rows), D))
    return BacktestLedger([r[0] for r in rows], assets, vals[:, :D], zeros, zeros, zeros,
                          vals[:, D], vals[:, D + 1], vals[:, D + 2], vals[:, D + 3], label, meta)


def top_weight_trajectories(ledger: BacktestLedger, top: int = 5) -> tuple[list[str], np.ndarray]:
    """Assets with the largest average target weight and their daily weights."""
    order = np.argsort(-ledger.weights.mean(axis=0), kind="stable")[:top]
    return [ledger.assets[i] for i in order], ledger.weights[:, order]


def write_trajectories(ledger: BacktestLedger, path, top: int = 5, header=()) -> None:
    names, W = top_weight_trajectories(ledger, top)
    with open(path, "w", newline="") as fh:
        fh.write(f"# strategy={ledger.label}\n")
        fh.writelines(f"# {h}\n" for h in header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date"] + names)
        for t, d in enumerate(ledger.dates):
            w.writerow([d] + [repr(float(x)) for x in W[t]])
