"""Mean/covariance estimators feeding the portfolio optimizer."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

RIDGE_FLOOR = 1e-8


@dataclass
class MomentEstimate:
    mean: np.ndarray
    cov: np.ndarray
    source: str
    count: int
    shrinkage: float | None = None
    fallback: bool = False


def floor_covariance(cov: np.ndarray, floor: float = RIDGE_FLOOR) -> np.ndarray:
    """Symmetrize, then add ``(floor - min_eig) * I`` when the smallest eigenvalue is below ``floor``."""
    cov = 0.5 * (cov + cov.T)
    lo = np.linalg.eigvalsh(cov)[0]
    if lo < floor:
        cov = cov + (floor - lo) * np.eye(cov.shape[0])
    return cov


def _moments(rows: np.ndarray, source: str) -> MomentEstimate:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 2:
        raise ValueError(f"need at least 2 observations, got shape {rows.shape}")
    mean = rows.mean(axis=0)
    dev = rows - mean
    cov = dev.T @ dev / (rows.shape[0] - 1)
    return MomentEstimate(mean, floor_covariance(cov), source, rows.shape[0])


def empirical_moments(history: np.ndarray) -> MomentEstimate:
    """Column means and the unbiased sample covariance of a ``(T, D)`` history."""
    return _moments(history, "Emp")


def james_stein_mean(history: np.ndarray) -> MomentEstimate:
    """Positive-part James-Stein mean shrunk toward the grand mean.

    ``mu_js = m + max(0, 1 - (D - 3) s2 / ||mu - m||^2) (mu - m)`` with ``mu``
    the sample mean, ``m`` its cross-asset average and ``s2`` the average
    variance of the per-asset sample means. The covariance is the empirical
    one. Needs ``D >= 4``; smaller universes keep the sample mean and set
    ``fallback``.
    """
    est = _moments(history, "ShrEmp")
    T, D = np.shape(history)
    if D < 4:
        warnings.warn("James-Stein needs at least 4 assets; using the sample mean", stacklevel=2)
        est.fallback = True
        est.shrinkage = 1.0
        return est
    mu = est.mean
    grand = mu.mean()
    dev = mu - grand
    spread = float(dev @ dev)
    if spread == 0.0:
        est.mean = np.full(D, grand)
        est.shrinkage = 0.0
        return est
    dev_rows = np.asarray(history) - mu
    s2 = float((dev_rows * dev_rows).sum(axis=0).mean() / (T - 1)) / T
    weight = max(0.0, 1.0 - (D - 3) * s2 / spread)
    est.mean = grand + weight * dev
    est.shrinkage = weight
    return est


def generative_moments(samples) -> MomentEstimate:
    """Moments of generated return vectors (a SampleSet or an ``(S, D)`` array)."""
    rows = getattr(samples, "samples", samples)
    return _moments(rows, "Factordiff")
