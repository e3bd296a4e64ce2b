"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are collected and repeated in the pytest terminal summary.
"""
import time
import warnings

import numpy as np

from factordiff.backtest import BacktestConfig, compute_metrics, format_metrics_table, max_drawdown, run_backtest
from factordiff.cli import main as cli_main
from factordiff.data import SyntheticSpec, generate_synthetic_market, true_conditional_moments
from factordiff.denoiser import DiTConfig, denoise_forward, dit_block, init_params
from factordiff.diffusion import TrainConfig, build_schedule, denoising_loss, sample_many, train
from factordiff.numerics import AdamState, adam_step, finite_diff_check
from factordiff.optimizer import (MVProblem, brute_oracle, kkt_residual, objective, project_simplex, solve_mv,
                                  solve_mv_tc)

from conftest import busy_params

RESULTS: list[str] = []


def verdict(num: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {num:>2} {title}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# -- 1 -----------------------------------------------------------------------------


def _gradient_error(params, X, R, schedule, draws):
    _, grad = denoising_loss(params, X, R, schedule, draws=draws)
    f = lambda flat: denoising_loss(params.with_flat(flat), X, R, schedule, draws=draws)[0]
    return finite_diff_check(f, params.flat, grad=grad)


def test_criterion_01_gradient_correctness():
    start = time.perf_counter()
    cfg = DiTConfig(k=2, d_model=4, heads=2, depth=2, ff_mult=2, step_dim=4)
    params = init_params(cfg, 0)
    panel, _ = generate_synthetic_market(SyntheticSpec(d=3, k=2, t=64, seed=0))
    schedule = build_schedule(100, 1e-4, 0.1)
    rng = np.random.default_rng(1)
    X, R = panel.factors[:8], panel.returns[:8] / 0.02
    draws = (rng.integers(1, 101, size=8), rng.normal(size=(8, 3)))
    at_init = _gradient_error(params, X, R, schedule, draws)
    state = AdamState.fresh(len(params), lr=0.003)
    for step in range(10):
        idx = slice(step * 6, step * 6 + 6)
        _, grad = denoising_loss(params, panel.factors[idx], panel.returns[idx] / 0.02, schedule, rng)
        flat, state = adam_step(params.flat, grad, state)
        params = params.with_flat(flat)
    trained = _gradient_error(params, X, R, schedule, draws)
    elapsed = time.perf_counter() - start
    verdict(1, "gradient vs finite differences", max(at_init, trained) < 1e-5 and elapsed < 30,
            f"all {len(params)} coords, init err {at_init:.2e}, after 10 steps {trained:.2e}, {elapsed:.1f}s (<30)")


# -- 2 -----------------------------------------------------------------------------


def test_criterion_02_adaln_zero_identity():
    cfg = DiTConfig(k=2, d_model=16, heads=4, depth=3, step_dim=16)
    params = init_params(cfg, 3)
    rng = np.random.default_rng(2)
    out_max, block_max = 0.0, 0.0
    for _ in range(100):
        D = int(rng.integers(1, 9))
        noisy, n, X = rng.normal(size=D), int(rng.integers(1, 101)), rng.normal(size=(D, 2))
        out_max = max(out_max, float(np.max(np.abs(denoise_forward(noisy, n, X, params)))))
        tokens, C = rng.normal(size=(D, 16)), rng.normal(size=(D, 16))
        for j in range(cfg.depth):
            block_max = max(block_max, float(np.max(np.abs(dit_block(tokens, C, params, j) - tokens))))
    verdict(2, "AdaLN-Zero identity at init", out_max == 0.0 and block_max < 1e-12,
            f"max |output| {out_max:.1e}, max block residual {block_max:.1e}")


# -- 3 -----------------------------------------------------------------------------


def test_criterion_03_permutation_equivariance():
    cfg = DiTConfig(k=2, d_model=16, heads=4, depth=3, step_dim=16)
    params = busy_params(cfg, 4)
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        noisy, n, X = rng.normal(size=6), int(rng.integers(1, 101)), rng.normal(size=(6, 2))
        perm = rng.permutation(6)
        a = denoise_forward(noisy[perm], n, X[perm], params)
        b = denoise_forward(noisy, n, X, params)[perm]
        worst = max(worst, float(np.max(np.abs(a - b))))
    verdict(3, "permutation equivariance", worst < 1e-10, f"max deviation {worst:.1e} over 100 permutations")


# -- 4 -----------------------------------------------------------------------------

# Model and schedule used for the law-recovery check. Adam lr, batch size,
# epochs and step count follow the criterion; the rest are choices.
LAW_DIT = dict(d_model=32, heads=4, depth=2, ff_mult=4, step_dim=32)
LAW_TRAIN = dict(epochs=30, batch_size=16, lr=0.003, n_steps=100, beta_min=1e-4, beta_max=0.1,
                 scale_returns=True, ema_decay=0.999, seed=0)


def test_criterion_04_conditional_law_recovery():
    start = time.perf_counter()
    panel, oracle = generate_synthetic_market(SyntheticSpec(t=5000))
    train_panel, held = panel.slice(0, 4000), panel.slice(4000, 5000)
    ckpt = train(train_panel, TrainConfig(**LAW_TRAIN), DiTConfig(k=2, **LAW_DIT))
    idx = np.linspace(0, held.T - 1, 20).astype(int)
    draws = sample_many(ckpt, held.factors[idx], 2000, [[11, int(i)] for i in idx])
    mean_err = var_err = corr_err = 0.0
    for j, i in enumerate(idx):
        mu, cov = true_conditional_moments(oracle, held.factors[i])
        sd = np.sqrt(np.diag(cov))
        emp_mu, emp_cov = draws[j].mean(0), np.cov(draws[j].T)
        emp_sd = np.sqrt(np.diag(emp_cov))
        mean_err = max(mean_err, float(np.max(np.abs(emp_mu - mu) / sd)))
        var_err = max(var_err, float(np.max(np.abs(np.diag(emp_cov) / np.diag(cov) - 1))))
        corr_err = max(corr_err, float(np.max(np.abs(emp_cov / np.outer(emp_sd, emp_sd) - cov / np.outer(sd, sd)))))
    elapsed = time.perf_counter() - start
    ok = mean_err < 0.15 and var_err < 0.25 and corr_err < 0.15 and elapsed < 900
    verdict(4, "conditional law recovery", ok,
            f"mean err {mean_err:.3f} sd (<0.15), var err {var_err:.3f} (<0.25), "
            f"corr err {corr_err:.3f} (<0.15), {elapsed:.0f}s (<900)")


# -- 5 -----------------------------------------------------------------------------


def _pg_oracle(problem, iters=5000):
    L = problem.gamma * np.linalg.eigvalsh(problem.sigma)[-1]
    w = np.full(problem.D, 1.0 / problem.D)
    for _ in range(iters):
        w = project_simplex(w + (problem.mu - problem.gamma * problem.sigma @ w) / L)
    return w


def _random_problem(rng, D):
    A = rng.normal(size=(D, D))
    return MVProblem(rng.normal(scale=0.5, size=D), A @ A.T / D + 0.05 * np.eye(D), float(rng.uniform(0.5, 5)))


def test_criterion_05_qp_optimality():
    rng = np.random.default_rng(5)
    pg_gap = grid_gap = kkt = 0.0
    for i in range(200):
        p = _random_problem(rng, (2, 3, 4)[i % 3])
        sol = solve_mv(p)
        pg_gap = max(pg_gap, abs(sol.objective - objective(p, _pg_oracle(p))))
        grid_gap = max(grid_gap, abs(sol.objective - brute_oracle(p, 200).objective))
        kkt = max(kkt, sol.kkt_residual, kkt_residual(p, sol.weights))
    analytic = float(np.max(np.abs(solve_mv(MVProblem([0.1, 0.0], np.eye(2), 1.0)).weights - [0.55, 0.45])))
    ok = pg_gap < 1e-6 and grid_gap < 1e-4 and kkt < 1e-7 and analytic < 1e-8
    verdict(5, "mean-variance QP optimality", ok,
            f"PG gap {pg_gap:.1e}, grid gap {grid_gap:.1e}, KKT {kkt:.1e}, analytic err {analytic:.1e}")


# -- 6 -----------------------------------------------------------------------------


def test_criterion_06_fee_problem_consistency():
    rng = np.random.default_rng(6)
    zero_gap = no_trade = bs = 0.0
    for _ in range(100):
        D = int(rng.integers(2, 6))
        base = _random_problem(rng, D)
        plain = solve_mv(base)
        tc = solve_mv_tc(MVProblem(base.mu, base.sigma, base.gamma, 0.0, 0.0, rng.dirichlet(np.ones(D))))
        zero_gap = max(zero_gap, abs(tc.objective - plain.objective))
        stay = solve_mv_tc(MVProblem(base.mu, base.sigma, base.gamma, 0.00075, 0.00125, plain.weights))
        no_trade = max(no_trade, float(np.max(np.abs(stay.buys))), float(np.max(np.abs(stay.sells))))
        fees = MVProblem(base.mu, base.sigma, base.gamma, float(rng.uniform(0, 0.05)), float(rng.uniform(0, 0.05)),
                         rng.dirichlet(np.ones(D)))
        for sol in (tc, stay, solve_mv_tc(fees)):
            bs = max(bs, float(np.max(sol.buys * sol.sells)))
    ok = zero_gap < 1e-8 and no_trade < 1e-8 and bs < 1e-12
    verdict(6, "fee-aware QP consistency", ok,
            f"zero-fee gap {zero_gap:.1e}, trades at optimum {no_trade:.1e}, max b*s {bs:.1e}")


# -- 7 -----------------------------------------------------------------------------


def test_criterion_07_metrics():
    mdd = max_drawdown([1.0, 1.1, 0.99])
    r = np.random.default_rng(7).normal(0.0005, 0.01, size=100)
    rep = compute_metrics(r)
    T = r.size
    mean = sum(r) / T
    std = (sum((x - mean) ** 2 for x in r) / (T - 1)) ** 0.5
    down = (sum(min(x, 0.0) ** 2 for x in r) / T) ** 0.5
    wealth, peak, dd = 1.0, 1.0, 0.0
    for x in r:
        wealth *= 1 + x
        peak = max(peak, wealth)
        dd = max(dd, (peak - wealth) / peak)
    tail = -sum(sorted(r)[:5]) / 5
    expect = [100 * mean, 100 * std, mean / std, mean / down, mean / dd, mean / tail]
    got = [rep.mean, rep.std, rep.sharpe, rep.sortino, rep.calmar, rep.rtc]
    worst = max(abs(a - b) for a, b in zip(got, expect))
    verdict(7, "metrics", abs(mdd - 0.1) < 1e-12 and worst < 1e-10,
            f"drawdown {mdd:.6f}, max metric deviation {worst:.1e}")


# -- 8 -----------------------------------------------------------------------------


def test_criterion_08_backtest_accounting():
    panel, _ = generate_synthetic_market(SyntheticSpec(d=5, t=90, seed=8))
    hist, test = panel.slice(0, 60), panel.slice(60, 90)
    same = True
    for strategy in ("EW", "Emp", "ShrEmp"):
        for variant in ("mv", "mv_tc"):
            kw = dict(variant=variant, fee_buy=0.0, fee_sell=0.0)
            a = run_backtest(test, BacktestConfig(strategy, fees="deducted", **kw), history=hist.returns)
            b = run_backtest(test, BacktestConfig(strategy, fees="ignored", **kw), history=hist.returns)
            same &= np.array_equal(a.net, b.net) and np.array_equal(a.weights, b.weights)
    ew = run_backtest(test, BacktestConfig("EW", variant="mv_tc"), history=hist.returns)
    constant = bool(np.all(ew.weights == ew.weights[0]))
    one = test.select_assets([2])
    single = run_backtest(one, BacktestConfig("Emp", variant="mv_tc"), history=hist.select_assets([2]).returns)
    later = float(np.max(single.fees[1:]))
    ok = same and constant and later == 0.0 and np.all(single.weights == 1.0)
    verdict(8, "backtest accounting", ok,
            f"zero-fee ledgers identical={same}, EW constant={constant}, single-asset fees after day 1={later}")


# -- 9 -----------------------------------------------------------------------------


def test_criterion_09_factordiff_beats_equal_weight():
    start = time.perf_counter()
    wins, rows = 0, []
    table = None
    for seed in range(10):
        panel, _ = generate_synthetic_market(SyntheticSpec(d=4, t=1120, seed=100 + seed))
        hist, test = panel.slice(0, 1000), panel.slice(1000, 1120)
        ckpt = train(hist, TrainConfig(epochs=10, n_steps=20, beta_max=0.5, scale_returns=True, ema_decay=0.99,
                                       seed=seed), DiTConfig(k=2, d_model=16, heads=2, depth=1, step_dim=16))
        fd = run_backtest(test, BacktestConfig("Factordiff", "mv_tc", samples=100, seed=seed),
                          history=hist.returns, checkpoint=ckpt)
        ew = run_backtest(test, BacktestConfig("EW", "mv_tc"), history=hist.returns)
        a, b = compute_metrics(fd), compute_metrics(ew)
        wins += a.sharpe > b.sharpe
        rows.append(f"seed {seed}: Factordiff {a.sharpe:.3f} vs EW {b.sharpe:.3f}")
        if seed == 0:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                others = {s: compute_metrics(run_backtest(test, BacktestConfig(s, "mv_tc"), history=hist.returns))
                          for s in ("Emp", "ShrEmp")}
            table = format_metrics_table({"EW": b, **others, fd.label: a})
    print("\n".join(rows))
    print("net metrics, seed 0, fee-aware problem:\n" + table)
    verdict(9, "Factordiff (fee-aware) net Sharpe above EW", wins >= 8,
            f"{wins}/10 seeded runs, {time.perf_counter() - start:.0f}s")


# -- 10 ----------------------------------------------------------------------------


def test_criterion_10_determinism(tmp_path):
    cfg = tmp_path / "run.txt"
    cfg.write_text("synthetic.t=200\nsynthetic.d=4\ntrain.epochs=2\ntrain.n_steps=10\ntrain.ema_decay=0.9\n"
                   "dit.d_model=8\ndit.heads=2\ndit.depth=1\ndit.step_dim=8\n"
                   "backtest.strategy=Factordiff\nbacktest.variant=mv_tc\nbacktest.samples=16\n")
    names = ("model.ckpt", "ledger.csv", "metrics.txt", "weights_top5.csv")
    blobs = []
    for run in ("one", "two"):
        out = tmp_path / run
        common = ["--config", str(cfg), "--seed", "17", "--out", str(out)]
        panel = ["--factors", str(out / "factors.csv"), "--returns", str(out / "returns.csv")]
        assert cli_main(["gen-synthetic"] + common) == 0
        assert cli_main(["train"] + common + panel) == 0
        assert cli_main(["backtest"] + common + panel + ["--checkpoint", str(out / "model.ckpt")]) == 0
        blobs.append([(out / n).read_bytes() for n in names])
    same = [a == b for a, b in zip(*blobs)]
    verdict(10, "byte-identical reruns", all(same),
            ", ".join(f"{n} {'same' if s else 'DIFFERS'}" for n, s in zip(names, same)))
