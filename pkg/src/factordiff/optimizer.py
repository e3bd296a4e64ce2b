"""Long-only mean-variance portfolios, with and without linear trading fees.

Both problems are solved as

    minimize  -w'mu + (gamma/2) w'Sigma w + fee_buy * sum((w - w0)+) + fee_sell * sum((w0 - w)+)
    over the simplex {w >= 0, sum(w) = 1}

by accelerated proximal gradient (FISTA with adaptive restart). The
buy/sell variables of the fee problem are eliminated: at an optimum they are
the positive and negative parts of ``w - w0``. The prox step (simplex
indicator plus the separable fee penalty) is solved exactly by a breakpoint
search. The iterate is then polished by solving the equality-constrained
system on its active set and kept only if that passes the KKT check.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

DEFAULT_GAMMA = 100.0
FEE_BUY = 0.00075
FEE_SELL = 0.00125
KKT_TOL = 1e-9
MAX_ITER = 100_000


class OptimizationError(ValueError):
    pass


@dataclass
class MVProblem:
    mu: np.ndarray
    sigma: np.ndarray
    gamma: float = DEFAULT_GAMMA
    fee_buy: float = 0.0
    fee_sell: float = 0.0
    prior: np.ndarray | None = None

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        D = self.mu.size
        if self.mu.shape != (D,) or self.sigma.shape != (D, D):
            raise OptimizationError(f"mu {self.mu.shape} and sigma {self.sigma.shape} disagree")
        if not np.allclose(self.sigma, self.sigma.T, rtol=0, atol=1e-12 * max(1.0, np.abs(self.sigma).max())):
            raise OptimizationError("sigma is not symmetric")
        if not np.all(np.isfinite(self.mu)) or not np.all(np.isfinite(self.sigma)):
            raise OptimizationError("non-finite problem data")
        try:
            np.linalg.cholesky(self.sigma)
        except np.linalg.LinAlgError:
            raise OptimizationError("sigma is not positive definite") from None
        if self.gamma <= 0:
            raise OptimizationError("gamma must be positive")
        if self.fee_buy < 0 or self.fee_sell < 0:
            raise OptimizationError("fee rates must be non-negative")
        if self.prior is None:
            self.prior = np.zeros(D)
        self.prior = np.asarray(self.prior, dtype=np.float64)
        if self.prior.shape != (D,):
            raise OptimizationError("prior weights have the wrong length")
        if np.any(self.prior < 0):
            raise OptimizationError("prior weights must be non-negative (long-only holdings)")

    @property
    def D(self) -> int:
        return self.mu.size

    @property
    def has_fees(self) -> bool:
        return self.fee_buy > 0 or self.fee_sell > 0


@dataclass
class PortfolioSolution:
    weights: np.ndarray
    buys: np.ndarray
    sells: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int


def objective(problem: MVProblem, w: np.ndarray) -> float:
    """Fee-adjusted mean-variance utility (to be maximized)."""
    w = np.asarray(w, dtype=np.float64)
    delta = w - problem.prior
    fees = problem.fee_buy * np.maximum(delta, 0).sum() + problem.fee_sell * np.maximum(-delta, 0).sum()
    return float(w @ problem.mu - 0.5 * problem.gamma * w @ problem.sigma @ w - fees)


def trades(problem: MVProblem, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    delta = w - problem.prior
    return np.maximum(delta, 0.0), np.maximum(-delta, 0.0)


def kkt_residual(problem: MVProblem, w: np.ndarray, tol: float = 1e-9) -> float:
    """Largest violation of the optimality conditions at ``w``.

    With ``g = mu - gamma Sigma w`` each asset constrains the budget
    multiplier ``nu`` to an interval depending on whether it is bought,
    sold, held at its prior weight, or at zero; the residual is half the
    worst gap between those intervals, plus any feasibility violation.
    """
    w = np.asarray(w, dtype=np.float64)
    g = problem.mu - problem.gamma * problem.sigma @ w
    cb, cs, w0 = problem.fee_buy, problem.fee_sell, problem.prior
    lo = np.full(w.size, -np.inf)
    hi = np.full(w.size, np.inf)
    at_zero = w <= tol
    at_prior = np.abs(w - w0) <= tol
    for i in range(w.size):
        if at_zero[i] and w0[i] <= tol:
            lo[i] = g[i] - cb
        elif at_zero[i]:
            lo[i] = g[i] + cs
        elif at_prior[i] and problem.has_fees:
            lo[i], hi[i] = g[i] - cb, g[i] + cs
        elif w[i] > w0[i]:
            lo[i] = hi[i] = g[i] - cb
        else:
            lo[i] = hi[i] = g[i] + cs
    gap = max(0.0, (lo.max() - hi.min()) / 2.0)
    feas = max(abs(w.sum() - 1.0), max(0.0, -w.min()))
    return float(max(gap, feas))


def project_simplex(y: np.ndarray) -> np.ndarray:
    """Euclidean projection onto ``{w >= 0, sum(w) = 1}`` (sort-based)."""
    u = np.sort(y)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, y.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    return np.maximum(y - css[rho] / (rho + 1), 0.0)


def _prox(y: np.ndarray, w0: np.ndarray, tb: float, ts: float) -> np.ndarray:
    """argmin_w 0.5||w - y||^2 + tb*sum((w - w0)+) + ts*sum((w0 - w)+) over the simplex.

    For a budget multiplier ``lam`` each coordinate is
    ``clip(y + lam + ts, 0, w0) + max(0, y + lam - w0 - tb)``, nondecreasing
    and piecewise linear in ``lam``; the multiplier making the sum one is
    found among the breakpoints and interpolated.
    """
    if tb == 0 and ts == 0:
        return project_simplex(y)

    def weights(lam):
        z = y + lam
        return np.clip(z + ts, 0.0, w0) + np.maximum(0.0, z - w0 - tb)

    bps = np.unique(np.concatenate([-y - ts, w0 - y - ts, w0 + tb - y]))
    sums = np.array([weights(b).sum() for b in bps])
    j = np.searchsorted(sums, 1.0)
    if j == bps.size:
        # past the last breakpoint every coordinate moves one-for-one with lam
        lam = bps[-1] + (1.0 - sums[-1]) / y.size
    elif j == 0:
        lam = bps[0]
    else:
        s0, s1 = sums[j - 1], sums[j]
        lam = bps[j] if s1 == s0 else bps[j - 1] + (1.0 - s0) * (bps[j] - bps[j - 1]) / (s1 - s0)
    return weights(lam)


def _polish(problem: MVProblem, w: np.ndarray, tol: float = 1e-9) -> np.ndarray | None:
    """Solve the stationarity system on the active set guessed from ``w``."""
    D = problem.D
    w0 = problem.prior
    gs = problem.gamma * problem.sigma
    fixed = np.zeros(D, dtype=bool)
    target = np.zeros(D)
    cost = np.zeros(D)
    for i in range(D):
        if w[i] <= tol:
            fixed[i] = True
        elif problem.has_fees and abs(w[i] - w0[i]) <= tol:
            fixed[i], target[i] = True, w0[i]
        else:
            cost[i] = problem.fee_buy if w[i] > w0[i] else -problem.fee_sell
    free = ~fixed
    out = target.copy()
    if free.any():
        F = np.flatnonzero(free)
        n = F.size
        A = np.zeros((n + 1, n + 1))
        A[:n, :n] = gs[np.ix_(F, F)]
        A[:n, n] = 1.0
        A[n, :n] = 1.0
        rhs = np.empty(n + 1)
        rhs[:n] = problem.mu[F] - cost[F] - gs[np.ix_(F, np.flatnonzero(fixed))] @ target[fixed]
        rhs[n] = 1.0 - target[fixed].sum()
        try:
            sol = np.linalg.solve(A, rhs)
        except np.linalg.LinAlgError:
            return None
        out[F] = sol[:n]
        # free assets must stay strictly on their side of the kink
        side = np.where(cost[F] > 0, out[F] > w0[F], (out[F] < w0[F]) if problem.has_fees else True)
        if np.any(out[F] <= 0) or not np.all(side):
            return None
    elif abs(target.sum() - 1.0) > 1e-12:
        return None
    return out


def _solve(problem: MVProblem, tol: float = KKT_TOL, max_iter: int = MAX_ITER) -> PortfolioSolution:
    D = problem.D
    gs = problem.gamma * problem.sigma
    L = float(np.linalg.eigvalsh(gs)[-1])
    t = 1.0 / L
    tb, ts = t * problem.fee_buy, t * problem.fee_sell
    w0 = problem.prior

    def grad(w):
        return gs @ w - problem.mu

    x = np.full(D, 1.0 / D) if w0.sum() == 0 else _prox(w0, w0, tb, ts)
    y, k_mom = x.copy(), 1.0
    it = 0
    for it in range(1, max_iter + 1):
        x_new = _prox(y - t * grad(y), w0, tb, ts)
        k_next = 0.5 * (1 + math.sqrt(1 + 4 * k_mom * k_mom))
        if (y - x_new) @ (x_new - x) > 0:  # momentum points uphill: restart
            y, k_mom = x_new.copy(), 1.0
        else:
            y = x_new + ((k_mom - 1) / k_next) * (x_new - x)
            k_mom = k_next
        step = np.abs(x_new - x).max()
        x = x_new
        if step <= tol * t or (it % 50 == 0 and kkt_residual(problem, x) <= tol):
            break
    best = x
    polished = _polish(problem, x)
    if polished is not None and kkt_residual(problem, polished) <= max(tol, kkt_residual(problem, x)) \
            and objective(problem, polished) >= objective(problem, x) - 1e-12:
        best = polished
    best = np.maximum(best, 0.0)
    best = best / best.sum()
    buys, sells = trades(problem, best)
    return PortfolioSolution(best, buys, sells, objective(problem, best), kkt_residual(problem, best), it)


def solve_mv(problem: MVProblem) -> PortfolioSolution:
    """Maximize ``w'mu - (gamma/2) w'Sigma w`` over the long-only simplex (fees ignored)."""
    if problem.has_fees:
        problem = MVProblem(problem.mu, problem.sigma, problem.gamma)
    sol = _solve(problem)
    sol.buys = np.zeros(problem.D)
    sol.sells = np.zeros(problem.D)
    return sol


def solve_mv_tc(problem: MVProblem) -> PortfolioSolution:
    """Mean-variance with proportional buy/sell fees relative to the held weights ``prior``."""
    if problem.prior is None:
        raise OptimizationError("fee-aware problem needs the current holdings")
    sol = _solve(problem)
    if np.any(sol.weights > 1 + 1e-12):
        raise OptimizationError("weight above one")
    return sol


@lru_cache(maxsize=8)
def simplex_grid(D: int, resolution: int) -> np.ndarray:
    """All points of the simplex with coordinates in multiples of ``1/resolution``."""
    if D == 1:
        return np.ones((1, 1))
    head = np.indices((resolution + 1,) * (D - 1), dtype=np.int32).reshape(D - 1, -1).T
    head = head[head.sum(axis=1) <= resolution]
    last = resolution - head.sum(axis=1, keepdims=True)
    return np.hstack([head, last]).astype(np.float64) / resolution


def brute_oracle(problem: MVProblem, resolution: int = 200) -> PortfolioSolution:
    """Best point of a uniform simplex grid (for checking the solver; ``D <= 4``)."""
    if problem.D > 4:
        raise OptimizationError("grid oracle only supports D <= 4")
    W = simplex_grid(problem.D, resolution)
    vals = W @ problem.mu - 0.5 * problem.gamma * np.einsum("ij,jk,ik->i", W, problem.sigma, W)
    if problem.has_fees:
        delta = W - problem.prior
        vals -= problem.fee_buy * np.maximum(delta, 0).sum(1) + problem.fee_sell * np.maximum(-delta, 0).sum(1)
    i = int(np.argmax(vals))
    w = W[i]
    buys, sells = trades(problem, w)
    return PortfolioSolution(w, buys, sells, float(vals[i]), kkt_residual(problem, w), W.shape[0])
