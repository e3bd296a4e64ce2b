"""Panel I/O, cross-sectional preprocessing, splitting, and a synthetic factor market."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

log = logging.getLogger(__name__)


class DataError(ValueError):
    pass


@dataclass
class FactorPanel:
    """Aligned pairs: ``factors[t]`` (D x K) is known at ``dates[t]`` and
    ``returns[t]`` (D) is realised over the following day ``return_dates[t]``."""

    dates: list[str]
    return_dates: list[str]
    assets: list[str]
    factors: np.ndarray
    returns: np.ndarray

    def __post_init__(self):
        self.factors = np.asarray(self.factors, dtype=np.float64)
        self.returns = np.asarray(self.returns, dtype=np.float64)
        T, D = self.returns.shape
        if self.factors.ndim != 3 or self.factors.shape[:2] != (T, D):
            raise DataError(f"factors {self.factors.shape} do not align with returns {self.returns.shape}")
        if len(self.dates) != T or len(self.return_dates) != T or len(self.assets) != D:
            raise DataError("date/asset labels do not match array shapes")

    @property
    def T(self) -> int:
        return self.returns.shape[0]

    @property
    def D(self) -> int:
        return self.returns.shape[1]

    @property
    def K(self) -> int:
        return self.factors.shape[2]

    def slice(self, start: int, stop: int) -> "FactorPanel":
        return FactorPanel(self.dates[start:stop], self.return_dates[start:stop], list(self.assets),
                           self.factors[start:stop].copy(), self.returns[start:stop].copy())

    def select_assets(self, idx: Iterable[int]) -> "FactorPanel":
        idx = list(idx)
        return FactorPanel(list(self.dates), list(self.return_dates), [self.assets[i] for i in idx],
                           self.factors[:, idx].copy(), self.returns[:, idx].copy())

    def is_clean(self) -> bool:
        return bool(np.all(np.isfinite(self.factors)) and np.all(np.isfinite(self.returns)))


def _data_rows(path: Path):
    """Yield ``(line_number, row)`` skipping ``#`` comment lines."""
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.startswith("#") or not line.strip():
                continue
            yield lineno, next(csv.reader([line]))


def _read_table(path, value_cols: int | None, what: str):
    path = Path(path)
    rows = _data_rows(path)
    try:
        lineno, header = next(rows)
    except StopIteration:
        raise DataError(f"{path}: empty {what} file") from None
    if header[:2] != ["date", "asset_id"]:
        raise DataError(f"{path}:{lineno}: header must start with date,asset_id")
    names = header[2:]
    if value_cols is not None and len(names) != value_cols:
        raise DataError(f"{path}:{lineno}: expected {value_cols} value column(s), got {len(names)}")
    table: dict[tuple[str, str], list[float]] = {}
    for lineno, row in rows:
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        key = (row[0].strip(), row[1].strip())
        if key in table:
            raise DataError(f"{path}:{lineno}: duplicate row for date={key[0]} asset={key[1]}")
        try:
            vals = [float(c) if c.strip() else math.nan for c in row[2:]]
        except ValueError:
            raise DataError(f"{path}:{lineno}: unparseable value in {row!r}") from None
        table[key] = vals
    return names, table


def load_panel(factor_path, returns_path) -> FactorPanel:
    """Join a factors CSV and a returns CSV into aligned one-day-lead pairs.

    Dates are the sorted union of both files. Factors on date ``d_k`` pair
    with returns on ``d_{k+1}``. Assets lacking a factor row or a return for
    any pair are dropped. Empty factor cells stay NaN for preprocessing.
    """
    fnames, ftab = _read_table(factor_path, None, "factor")
    _, rtab = _read_table(returns_path, 1, "returns")
    fdates = {d for d, _ in ftab}
    rdates = {d for d, _ in rtab}
    calendar = sorted(fdates | rdates)
    pairs = [(a, b) for a, b in zip(calendar, calendar[1:]) if a in fdates and b in rdates]
    if not pairs:
        raise DataError("factor and return files share no aligned dates")
    assets = sorted({a for _, a in ftab} | {a for _, a in rtab})
    keep = [a for a in assets
            if all((fd, a) in ftab and (rd, a) in rtab and math.isfinite(rtab[(rd, a)][0]) for fd, rd in pairs)]
    dropped = len(assets) - len(keep)
    if dropped:
        log.warning("dropped %d asset(s) without complete coverage", dropped)
    if not keep:
        raise DataError("no asset has complete coverage")
    factors = np.array([[ftab[(fd, a)] for a in keep] for fd, _ in pairs])
    returns = np.array([[rtab[(rd, a)][0] for a in keep] for _, rd in pairs])
    return FactorPanel([p[0] for p in pairs], [p[1] for p in pairs], keep, factors, returns)


def _fmt(x: float) -> str:
    return "" if not math.isfinite(x) else repr(float(x))


def write_panel(panel: FactorPanel, factor_path, returns_path, header: Iterable[str] = ()) -> None:
    """Write the two CSV files; ``header`` lines are emitted as ``# `` comments.

    Factor rows use the factor dates and return rows the return dates, so
    :func:`load_panel` reconstructs the same pairs.
    """
    header = list(header)
    with open(factor_path, "w", newline="") as fh:
        fh.writelines(f"# {h}\n" for h in header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "asset_id"] + [f"f{k + 1}" for k in range(panel.K)])
        for t, d in enumerate(panel.dates):
            for i, a in enumerate(panel.assets):
                w.writerow([d, a] + [_fmt(v) for v in panel.factors[t, i]])
    with open(returns_path, "w", newline="") as fh:
        fh.writelines(f"# {h}\n" for h in header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "asset_id", "ret"])
        for t, d in enumerate(panel.return_dates):
            for i, a in enumerate(panel.assets):
                w.writerow([d, a, _fmt(panel.returns[t, i])])


@dataclass
class DayFlags:
    zero_filled: list[int] = field(default_factory=list)
    constant: list[int] = field(default_factory=list)


def preprocess_day(raw_factors, raw_returns, clip: float = 3.0):
    """Clean one cross-section.

    Factor columns: impute missing entries with the observed mean, convert
    to z-scores (sample std), clip to ``[-clip, clip]``. Returns are clipped
    to ``mean +/- clip * std`` in raw units. Returns ``(X, R, flags)``.
    """
    F = np.array(raw_factors, dtype=np.float64)
    R = np.array(raw_returns, dtype=np.float64)
    if F.ndim != 2 or R.shape != (F.shape[0],):
        raise DataError(f"factor matrix {F.shape} does not match return vector {R.shape}")
    flags = DayFlags()
    for k in range(F.shape[1]):
        col = F[:, k]
        seen = np.isfinite(col)
        if seen.sum() < 2:
            log.warning("factor column %d has fewer than 2 observations; zero-filled", k)
            flags.zero_filled.append(k)
            F[:, k] = 0.0
            continue
        m = col[seen].mean()
        col = np.where(seen, col, m)
        sd = col[seen].std(ddof=1)
        if sd == 0 or not math.isfinite(sd):
            flags.constant.append(k)
            F[:, k] = 0.0
            continue
        F[:, k] = np.clip((col - m) / sd, -clip, clip)
    if np.any(~np.isfinite(R)):
        raise DataError("missing return in cross-section")
    if R.size >= 2:
        m, sd = R.mean(), R.std(ddof=1)
        R = np.clip(R, m - clip * sd, m + clip * sd)
    return F, R, flags


def preprocess_panel(panel: FactorPanel, clip: float = 3.0) -> FactorPanel:
    X = np.empty_like(panel.factors)
    R = np.empty_like(panel.returns)
    for t in range(panel.T):
        X[t], R[t], _ = preprocess_day(panel.factors[t], panel.returns[t], clip)
    return FactorPanel(list(panel.dates), list(panel.return_dates), list(panel.assets), X, R)


def chronological_split(panel: FactorPanel, ratio: float = 0.8) -> tuple[FactorPanel, FactorPanel]:
    """First ``ceil(ratio * T)`` pairs train, the rest test."""
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie strictly between 0 and 1")
    cut = math.ceil(ratio * panel.T)
    if cut == 0 or cut >= panel.T:
        raise DataError(f"split of T={panel.T} at ratio {ratio} leaves one side empty")
    return panel.slice(0, cut), panel.slice(cut, panel.T)


# -- synthetic market -----------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Ground-truth market ``R_{t+1} = f(X_t) + u_{t+1}``.

    ``f_i(X) = intercept + sum_k loadings[k] * phi(x_ik)`` with ``phi`` the
    identity (``nonlinearity="none"``) or ``tanh``. Shocks are Gaussian with
    equicorrelated covariance ``shock_vol**2 * ((1 - rho) I + rho 11')``,
    a one-factor plus diagonal structure. Factors follow independent
    stationary AR(1) paths with unit variance.
    """

    d: int = 4
    k: int = 2
    t: int = 4000
    seed: int = 0
    loadings: tuple[float, ...] = (0.008, -0.005)
    intercept: float = 0.0005
    shock_vol: float = 0.02 * math.sqrt(0.7)
    shock_corr: float = 2.0 / 7.0
    factor_ar: float = 0.9
    nonlinearity: str = "none"
    start: str = "2017-01-03"

    def __post_init__(self):
        self.loadings = tuple(float(x) for x in self.loadings)
        if len(self.loadings) != self.k:
            raise ValueError(f"need {self.k} loadings, got {len(self.loadings)}")
        if self.d < 1 or self.k < 1 or self.t < 1:
            raise ValueError("d, k, t must be positive")
        if not -1 < self.factor_ar < 1:
            raise ValueError("factor_ar must lie in (-1, 1)")
        if self.nonlinearity not in ("none", "tanh"):
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")

    def shock_cov(self) -> np.ndarray:
        rho = self.shock_corr
        cov = self.shock_vol**2 * ((1 - rho) * np.eye(self.d) + rho * np.ones((self.d, self.d)))
        if self.shock_vol <= 0 or np.linalg.eigvalsh(cov).min() <= 0:
            raise ValueError("shock covariance is not positive definite")
        return cov


SPEC_KEYS = ("d", "k", "t", "seed", "loadings", "intercept", "shock_vol", "shock_corr",
             "factor_ar", "nonlinearity", "start")


def parse_spec(items: dict[str, str]) -> SyntheticSpec:
    kw = {}
    for key, raw in items.items():
        if key not in SPEC_KEYS:
            raise DataError(f"unknown synthetic spec key {key!r}")
        if key in ("d", "k", "t", "seed"):
            kw[key] = int(raw)
        elif key == "loadings":
            kw[key] = tuple(float(x) for x in raw.split(",") if x.strip())
        elif key in ("nonlinearity", "start"):
            kw[key] = raw.strip()
        else:
            kw[key] = float(raw)
    if "loadings" in kw and "k" not in kw:
        kw["k"] = len(kw["loadings"])
    return SyntheticSpec(**kw)


def format_spec(spec: SyntheticSpec) -> str:
    lines = []
    for key in SPEC_KEYS:
        v = getattr(spec, key)
        lines.append(f"{key}={','.join(repr(x) for x in v) if key == 'loadings' else v}")
    return "\n".join(lines) + "\n"


@dataclass
class SyntheticOracle:
    spec: SyntheticSpec
    cov: np.ndarray

    def mean(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        phi = np.tanh(X) if self.spec.nonlinearity == "tanh" else X
        return self.spec.intercept + phi @ np.asarray(self.spec.loadings)


def true_conditional_moments(oracle: SyntheticOracle, X) -> tuple[np.ndarray, np.ndarray]:
    """Exact mean ``f(X)`` and covariance of ``R_{t+1}`` given ``X_t = X``."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape != (oracle.spec.d, oracle.spec.k):
        raise ValueError(f"X must be ({oracle.spec.d}, {oracle.spec.k}), got {X.shape}")
    return oracle.mean(X), oracle.cov.copy()


def business_days(start: str, count: int) -> list[str]:
    first = np.busday_offset(np.datetime64(start, "D"), 0, roll="forward")
    return [str(d) for d in np.busday_offset(first, np.arange(count))]


def generate_synthetic_market(spec: SyntheticSpec) -> tuple[FactorPanel, SyntheticOracle]:
    cov = spec.shock_cov()
    rng = np.random.default_rng(spec.seed)
    phi = spec.factor_ar
    X = np.empty((spec.t, spec.d, spec.k))
    X[0] = rng.standard_normal((spec.d, spec.k))
    innov = math.sqrt(1 - phi * phi)
    for t in range(1, spec.t):
        X[t] = phi * X[t - 1] + innov * rng.standard_normal((spec.d, spec.k))
    oracle = SyntheticOracle(spec, cov)
    shocks = rng.standard_normal((spec.t, spec.d)) @ np.linalg.cholesky(cov).T
    R = oracle.mean(X) + shocks
    days = business_days(spec.start, spec.t + 1)
    assets = [f"A{i:03d}" for i in range(spec.d)]
    return FactorPanel(days[:-1], days[1:], assets, X, R), oracle
