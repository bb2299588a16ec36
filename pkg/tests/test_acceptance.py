"""Acceptance criteria 1-9, each at its stated tolerance.

Every test prints one ``criterion N: PASS|FAIL ...`` line (run with ``-s``
to see them) and fails when the criterion is not met.
"""

import time

import numpy as np
import pytest

from fedqueue.bounds import (
    BoundParams, ClusterSpec, DelayProfile, SimulatedDelayOracle, default_cap, gamma_ratio,
    log_gamma_ratio_complement, minimize_cubic_bound, bound_coefficients, optimize_sampling,
    physical_time_bound,
)
from fedqueue.network import NetworkConfig, arrival_distribution, global_balance_residual, stationary_distribution
from fedqueue.objectives import QuadraticObjective
from fedqueue.runtime import (
    check_unbiased_sampling, check_virtual_identity, ledger_sizes, run_generalized_async_sgd,
)
from fedqueue.simulation import (
    delay_stats, empirical_arrival_distribution, empirical_state_distribution, simulate,
    transient_delay_curve,
)
from fedqueue.verify import random_network

pytestmark = pytest.mark.slow


def report(number, ok, detail):
    print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, f"criterion {number}: {detail}"


def two_cluster_stats(p_fast, seed=1):
    spec = ClusterSpec((5, 5), (1.2, 1.0))
    stats = delay_stats(simulate(spec.network(p_fast, 1000), 10**6, seed=seed, record_states=False))
    return stats, stats.cluster_means(spec.groups)


# -- queueing laws ------------------------------------------------------------------------------


def test_criterion_1_product_form():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_tv = worst_res = 0.0
    for _ in range(100):
        cfg = random_network(rng, max_n=3, max_c=4)
        exact = stationary_distribution(cfg, cfg.concurrency)
        trace = simulate(cfg, 10**6, seed=int(rng.integers(2**63)))
        worst_tv = max(worst_tv, empirical_state_distribution(trace).total_variation(exact))
        worst_res = max(worst_res, global_balance_residual(cfg, exact))
    elapsed = time.perf_counter() - start
    ok = worst_tv <= 0.02 and worst_res <= 1e-9 and elapsed <= 120
    report(1, ok, f"max TV {worst_tv:.4f} (<= 0.02), max balance residual {worst_res:.1e} "
                  f"(<= 1e-9), {elapsed:.0f} s (<= 120 s)")


def test_criterion_2_arrival_theorem():
    start = time.perf_counter()
    rng = np.random.default_rng(2025)
    worst = 0.0
    for _ in range(100):
        cfg = random_network(rng, max_n=3, max_c=4)
        emp = empirical_arrival_distribution(cfg, 10**6, seed=int(rng.integers(2**63)))
        worst = max(worst, emp.total_variation(arrival_distribution(cfg)))
    elapsed = time.perf_counter() - start
    ok = worst <= 0.02 and elapsed <= 120
    report(2, ok, f"max TV {worst:.4f} (<= 0.02), {elapsed:.0f} s (<= 120 s)")


def test_criterion_3_two_saturated_clusters():
    start = time.perf_counter()
    stats, (fast, slow) = two_cluster_stats(0.1)
    q_fast, q_slow = stats.mean_queue[:5].mean(), stats.mean_queue[5:].mean()
    elapsed = time.perf_counter() - start
    checks = {
        "fast delay in [53, 65]": 53 <= fast <= 65,
        "slow delay in [1840, 2040]": 1840 <= slow <= 2040,
        "fast queue 5 +-10%": abs(q_fast / 5 - 1) <= 0.10,
        "slow queue 195 +-3%": abs(q_slow / 195 - 1) <= 0.03,
        "runtime <= 300 s": elapsed <= 300,
    }
    failed = [k for k, v in checks.items() if not v]
    report(3, not failed, f"fast delay {fast:.1f}, slow delay {slow:.0f}, queues "
                          f"{q_fast:.2f}/{q_slow:.1f}, {elapsed:.0f} s; failed: {failed or 'none'}")


def test_criterion_4_optimal_two_cluster_sampling():
    _, (fast_u, slow_u) = two_cluster_stats(0.1)
    _, (fast_o, slow_o) = two_cluster_stats(7.5e-3)
    r_fast, r_slow = fast_u / fast_o, slow_u / slow_o
    ok = 8 <= r_fast <= 12 and 1.7 <= r_slow <= 2.3
    report(4, ok, f"fast delay ratio {r_fast:.2f} (in [8, 12]), slow ratio {r_slow:.2f} (in [1.7, 2.3])")


def test_criterion_5_three_clusters():
    spec = ClusterSpec((3, 3, 3), (10.0, 1.2, 1.0))
    stats = delay_stats(simulate(spec.network(1 / 9, 1000), 10**6, seed=1, record_states=False))
    fast, medium, slow = stats.cluster_means(spec.groups)
    checks = {
        "medium in [48, 62]": 48 <= medium <= 62,
        "slow in [2790, 3080]": 2790 <= slow <= 3080,
        "fast <= 3": fast <= 3,
    }
    failed = [k for k, v in checks.items() if not v]
    report(5, not failed, f"fast {fast:.2f}, medium {medium:.1f}, slow {slow:.0f}; "
                          f"failed: {failed or 'none'}")


# -- bound optimization ----------------------------------------------------------------------------

WORKED = BoundParams.from_B(L=1.0, B=20.0, A=100.0, T=10**4, C=10)


def worked_plan(mu_f, concurrency, physical=False, seed=1):
    spec = ClusterSpec((90, 10), (float(mu_f), 1.0))
    params = WORKED.replace(C=concurrency)
    oracle = SimulatedDelayOracle(spec, concurrency, horizon=100_000, seed=seed)
    if physical:
        return physical_time_bound(params, spec, 1000.0, oracle)
    return optimize_sampling(params, spec, oracle)


def test_criterion_6_worked_example():
    # the example is reported for concurrency 10, 50 and 100 without saying which;
    # a level matches when both endpoints and the optimal probability agree
    start = time.perf_counter()
    rows = []
    for c in (10, 50, 100):
        low, high = worked_plan(2, c), worked_plan(16, c)
        ok = (abs(low.improvement - 0.30) <= 0.08 and abs(high.improvement - 0.55) <= 0.08
              and 1 / 1.5 <= high.cluster_prob / 7.3e-3 <= 1.5)
        rows.append((c, low.improvement, high.improvement, high.cluster_prob, ok))
    elapsed = time.perf_counter() - start
    matched = [r[0] for r in rows if r[4]]
    detail = "; ".join(f"C={c}: {a:.1%} -> {b:.1%}, p*={p:.2e}" for c, a, b, p, _ in rows)
    report(6, bool(matched) and elapsed <= 900,
           f"{detail}; matching levels {matched or 'none'}, {elapsed:.0f} s (<= 900 s)")


def _weighted_slope(k, y, se):
    w = 1.0 / se**2
    x = np.column_stack([np.ones_like(k), k])
    cov = np.linalg.inv(x.T @ (w[:, None] * x))
    beta = cov @ (x.T @ (w * y))
    return beta[1], np.sqrt(cov[1, 1])


def test_criterion_7_delay_stationarity():
    parts, ok = [], True
    for n, cut in ((10, 50), (50, 150)):
        mu = np.r_[np.full(5, 10.0), np.ones(n - 5)]
        cfg = NetworkConfig.uniform(mu, n)
        curve = transient_delay_curve(cfg, 500, node=0, replications=2000, seed=7, initial="distinct")
        se = curve.stderr
        keep = (curve.k > cut) & (curve.count >= 2) & np.isfinite(se) & (se > 0)
        slope, sd = _weighted_slope(curve.k[keep].astype(float), curve.mean[keep], se[keep])
        z = slope / sd
        ok &= abs(z) <= 2
        parts.append(f"n={n}: slope {slope:.2e} +- {sd:.1e} (z={z:.2f})")
    report(7, ok, "; ".join(parts) + " (|z| <= 2)")


def test_criterion_8_convergence_properties():
    rng = np.random.default_rng(8)
    residuals, sizes_ok = [], True
    for _ in range(10):
        n = int(rng.integers(2, 8))
        c = int(rng.integers(1, 12))
        mu = np.exp(rng.uniform(np.log(0.2), np.log(5.0), size=n))
        p = rng.dirichlet(np.ones(n)) * 0.8 + 0.2 / n
        cfg = NetworkConfig(mu, p / p.sum(), c)
        obj = QuadraticObjective.heterogeneous(n, 5, spread=2.0, sigma2=1.0, seed=int(rng.integers(2**32)))
        run = run_generalized_async_sgd(obj, cfg, (cfg.p, 0.05 / c), 1000, seed=int(rng.integers(2**32)))
        residuals.append(check_virtual_identity(run))
        sizes = ledger_sizes(run)
        sizes_ok &= bool(np.all(sizes == c - 1))
    a = max(residuals) <= 1e-9

    obj = QuadraticObjective.heterogeneous(10, 5, spread=2.0, seed=3)
    p = rng.dirichlet(np.ones(10)) * 0.5 + 0.05
    unbiased = check_unbiased_sampling(obj, p / p.sum(), np.ones(5), 10**6, seed=4)

    # homogeneous quadratic: G2 = 0, so B is the gradient noise variance
    spec = ClusterSpec((5, 5), (10.0, 1.0))
    cfg = spec.network(spec.uniform_prob, 10)
    obj = QuadraticObjective.homogeneous(10, 5, sigma2=1.0, center=np.full(5, 3.0))
    params = BoundParams(L=obj.L, G2=0.0, sigma2=obj.sigma2, A=obj.value(obj.initial_point()),
                         T=1000, C=10)
    profile = SimulatedDelayOracle(spec, 10, horizon=100_000, seed=5)(cfg.p)
    eta = default_cap(params, cfg.p, profile) / 2
    _, c2, c3 = bound_coefficients(params, cfg.p, profile)
    target = 10 * (c2 * eta + c3 * eta**2)
    mins = [run_generalized_async_sgd(obj, cfg, (cfg.p, eta), 1000, seed=s).grad_norm_sq.min()
            for s in range(5)]
    d = max(mins) <= target

    ok = a and sizes_ok and unbiased.passed and d
    report(8, ok, f"(a) max identity residual {max(residuals):.1e}; (b) ledger size C-1 on every run: "
                  f"{sizes_ok}; (c) deviation {unbiased.deviation:.2e} vs envelope "
                  f"{unbiased.envelope:.2e}; (d) max min-grad {max(mins):.2e} vs 10x terms {target:.2e}")


def test_criterion_9_bound_analytics():
    grid = np.geomspace(1e-3, 1e3, 400)
    gamma_ok = True
    for nf in (1, 2, 3, 5, 10, 30, 100):
        vals = np.array([gamma_ratio(nf, c) for c in grid])
        gaps = np.array([log_gamma_ratio_complement(nf, c) for c in grid])
        gamma_ok &= bool(np.all(vals > 0) and np.all(np.isfinite(gaps)) and np.all(np.diff(vals) >= 0)
                         and np.all(np.diff(gaps) < 0))
    saturated = gamma_ratio(3, 200.0)
    gamma_ok &= saturated >= 1 - 1e-6

    rng = np.random.default_rng(9)
    solver_ok = True
    for _ in range(100):
        n = int(rng.integers(2, 20))
        params = BoundParams(L=10 ** rng.uniform(-1, 1), G2=rng.uniform(0, 5), sigma2=rng.uniform(0.1, 5),
                             A=10 ** rng.uniform(-1, 3), T=int(10 ** rng.uniform(1, 5)),
                             C=int(rng.integers(1, 100)))
        p = rng.dirichlet(np.ones(n)) * 0.9 + 0.1 / n
        p /= p.sum()
        profile = DelayProfile(rng.uniform(0, 50, n))
        c1, c2, c3 = bound_coefficients(params, p, profile)
        cap = default_cap(params, p, profile)
        eta = minimize_cubic_bound(c1, c2, c3, cap)
        best = c1 / eta + c2 * eta + c3 * eta**2
        probes = rng.uniform(0, cap, 1000)
        probes = probes[probes > 0]
        solver_ok &= bool(eta <= cap and np.all(best <= (c1 / probes + c2 * probes + c3 * probes**2)
                                                * (1 + 1e-12)))

    small = [worked_plan(mu_f, 10, physical=True) for mu_f in (2, 16)]
    small_uniform = all(plan.cluster_prob == 1 / 100 for plan in small)
    full = worked_plan(16, 100, physical=True)
    full_ok = abs(full.improvement - 0.40) <= 0.10 and 1 / 1.5 <= full.cluster_prob / 8.5e-3 <= 1.5

    ok = gamma_ok and solver_ok and small_uniform and full_ok
    report(9, ok, f"gamma bounded/increasing and saturated ({saturated:.9f}): {gamma_ok}; cubic solver "
                  f"beats probes: {solver_ok}; C=10 uniform: {small_uniform} "
                  f"(p*={[f'{pl.cluster_prob:.2e}' for pl in small]}); C=n improvement "
                  f"{full.improvement:.1%} at p*={full.cluster_prob:.2e} (40% +-10 pp, near 8.5e-3)")
