import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from factordiff.optimizer import (DEFAULT_GAMMA, MVProblem, OptimizationError, brute_oracle, kkt_residual,
                                  objective, project_simplex, simplex_grid, solve_mv, solve_mv_tc)


def random_problem(rng, D=None, fees=False):
    D = D or int(rng.integers(2, 5))
    A = rng.normal(size=(D, D))
    sigma = A @ A.T / D + 0.05 * np.eye(D)
    mu = rng.normal(scale=0.5, size=D)
    gamma = float(rng.uniform(0.5, 5))
    if not fees:
        return MVProblem(mu, sigma, gamma)
    return MVProblem(mu, sigma, gamma, float(rng.uniform(0, 0.1)), float(rng.uniform(0, 0.1)),
                     rng.dirichlet(np.ones(D)))


def projected_gradient(problem, iters=5000):
    """Plain projected gradient ascent with a 1/L step (fee-free problems)."""
    L = problem.gamma * np.linalg.eigvalsh(problem.sigma)[-1]
    w = np.full(problem.D, 1.0 / problem.D)
    for _ in range(iters):
        w = project_simplex(w + (problem.mu - problem.gamma * problem.sigma @ w) / L)
    return w


def test_two_asset_closed_form():
    sol = solve_mv(MVProblem([0.1, 0.0], np.eye(2), 1.0))
    assert np.allclose(sol.weights, [0.55, 0.45], atol=1e-8)
    assert sol.kkt_residual < 1e-9


@pytest.mark.parametrize("D", [2, 3, 5, 8])
def test_symmetric_problem_gives_equal_weights(D):
    sol = solve_mv(MVProblem(np.full(D, 0.03), 0.2 * np.eye(D), 4.0))
    assert np.allclose(sol.weights, 1.0 / D, atol=1e-12)


def test_matches_projected_gradient_and_grid():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = random_problem(rng)
        sol = solve_mv(p)
        assert abs(sol.objective - objective(p, projected_gradient(p))) < 1e-6
        assert brute_oracle(p, 200).objective <= sol.objective + 1e-12
        assert sol.objective - brute_oracle(p, 200).objective < 1e-4
        assert sol.kkt_residual < 1e-7


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), D=st.integers(2, 12))
def test_solution_is_feasible_and_optimal(seed, D):
    rng = np.random.default_rng(seed)
    p = random_problem(rng, D)
    sol = solve_mv(p)
    w = sol.weights
    assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-12
    assert kkt_residual(p, w) < 1e-7
    for _ in range(5):
        assert objective(p, rng.dirichlet(np.ones(D))) <= sol.objective + 1e-12


def test_zero_fees_reduce_to_plain_problem():
    rng = np.random.default_rng(1)
    for _ in range(30):
        base = random_problem(rng)
        tc = solve_mv_tc(MVProblem(base.mu, base.sigma, base.gamma, 0.0, 0.0, rng.dirichlet(np.ones(base.D))))
        assert abs(tc.objective - solve_mv(base).objective) < 1e-8


def test_starting_at_optimum_means_no_trade():
    rng = np.random.default_rng(2)
    for _ in range(30):
        base = random_problem(rng)
        w_star = solve_mv(base).weights
        sol = solve_mv_tc(MVProblem(base.mu, base.sigma, base.gamma, 0.002, 0.003, w_star))
        assert np.max(np.abs(sol.buys)) < 1e-8 and np.max(np.abs(sol.sells)) < 1e-8
        assert np.allclose(sol.weights, w_star, atol=1e-8)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), D=st.integers(2, 8))
def test_fee_solution_properties(seed, D):
    p = random_problem(np.random.default_rng(seed), D, fees=True)
    sol = solve_mv_tc(p)
    assert np.all(sol.buys * sol.sells < 1e-12)
    assert np.allclose(sol.weights - p.prior, sol.buys - sol.sells, atol=1e-14)
    assert sol.kkt_residual < 1e-7
    # never worse than holding still or the fee-free optimum
    assert sol.objective >= objective(p, p.prior) - 1e-12
    assert sol.objective >= objective(p, solve_mv(MVProblem(p.mu, p.sigma, p.gamma)).weights) - 1e-12


def test_two_asset_large_fees_against_line_search():
    rng = np.random.default_rng(3)
    for _ in range(10):
        sigma = np.array([[1.0, 0.3], [0.3, 0.5]]) * rng.uniform(0.5, 2)
        p = MVProblem(rng.normal(scale=0.5, size=2), sigma, 2.0, 0.08, 0.12, np.array([0.9, 0.1]))
        a = np.concatenate([np.linspace(0, 1, 200_001), [p.prior[0]]])
        W = np.column_stack([a, 1 - a])
        delta = W - p.prior
        vals = (W @ p.mu - 0.5 * p.gamma * np.einsum("ti,ij,tj->t", W, p.sigma, W)
                - 0.08 * np.maximum(delta, 0).sum(1) - 0.12 * np.maximum(-delta, 0).sum(1))
        sol = solve_mv_tc(p)
        assert abs(sol.weights[0] - a[int(np.argmax(vals))]) < 1e-5
        assert sol.objective >= vals.max() - 1e-12


def test_fee_grid_oracle():
    # the prior sits on the grid so the no-trade kink is representable
    rng = np.random.default_rng(4)
    for _ in range(20):
        p = random_problem(rng, 3, fees=True)
        prior = rng.multinomial(200, np.ones(3) / 3) / 200
        p = MVProblem(p.mu, p.sigma, p.gamma, p.fee_buy, p.fee_sell, prior)
        sol, grid = solve_mv_tc(p), brute_oracle(p, 200)
        assert grid.objective <= sol.objective + 1e-12
        assert sol.objective - grid.objective < 1e-4


def test_grid_oracle_properties():
    assert simplex_grid(3, 4).shape == (15, 3)
    assert np.allclose(simplex_grid(4, 10).sum(1), 1.0)
    sym = MVProblem(np.zeros(3), np.eye(3), 1.0)
    assert np.allclose(brute_oracle(sym, 30).weights, 1 / 3)
    p = random_problem(np.random.default_rng(5), 3)
    vals = [brute_oracle(p, r).objective for r in (25, 50, 100, 200)]
    assert all(b >= a - 1e-15 for a, b in zip(vals, vals[1:]))
    assert solve_mv(p).objective - vals[-1] < 1e-3
    with pytest.raises(ValueError):
        brute_oracle(random_problem(np.random.default_rng(6), 5), 10)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), D=st.integers(1, 10))
def test_projection_is_nearest_simplex_point(seed, D):
    rng = np.random.default_rng(seed)
    y = rng.normal(scale=3, size=D)
    p = project_simplex(y)
    assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-12
    for _ in range(10):
        q = rng.dirichlet(np.ones(D))
        assert np.sum((y - p) ** 2) <= np.sum((y - q) ** 2) + 1e-12


def test_problem_validation():
    with pytest.raises(OptimizationError):
        MVProblem([0, 0], [[1, 2], [2, 1]])
    with pytest.raises(OptimizationError):
        MVProblem([0, 0], [[1, 0.1], [0, 1]])
    with pytest.raises(OptimizationError):
        MVProblem([0, 0], np.eye(2), gamma=0)
    with pytest.raises(OptimizationError):
        MVProblem([0, 0], np.eye(2), fee_buy=-0.1)
    assert MVProblem([0, 0], np.eye(2)).gamma == DEFAULT_GAMMA == 100
