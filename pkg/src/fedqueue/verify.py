"""Cross-module oracle suites: exact analytics against simulation and runtime."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bounds import gamma_ratio, log_gamma_ratio_complement
from .network import NetworkConfig, arrival_distribution, global_balance_residual, stationary_distribution
from .objectives import QuadraticObjective
from .runtime import check_virtual_identity, ledger_sizes, run_generalized_async_sgd
from .simulation import empirical_arrival_distribution, empirical_state_distribution, simulate

TV_TOL = 0.02
BALANCE_TOL = 1e-9
IDENTITY_TOL = 1e-9


@dataclass
class Check:
    suite: str
    name: str
    passed: bool
    detail: str


def random_network(rng: np.random.Generator, max_n: int = 3, max_c: int = 4,
                   mu_range=(0.2, 5.0), min_p: float = 0.05) -> NetworkConfig:
    """Small network with rates log-uniform in ``mu_range`` and ``p_i >= min_p``."""
    n = int(rng.integers(1, max_n + 1))
    c = int(rng.integers(1, max_c + 1))
    mu = np.exp(rng.uniform(*np.log(mu_range), size=n))
    p = min_p + (1 - n * min_p) * rng.dirichlet(np.ones(n))
    p /= p.sum()
    return NetworkConfig(mu, p, c)


def product_form(seed: int = 0, configs: int = 10, horizon: int = 10**6) -> list[Check]:
    rng = np.random.default_rng(seed)
    out = []
    for r in range(configs):
        cfg = random_network(rng, max_n=3, max_c=4)
        exact = stationary_distribution(cfg, cfg.concurrency)
        trace = simulate(cfg, horizon, seed=int(rng.integers(2**63)))
        tv = empirical_state_distribution(trace).total_variation(exact)
        res = global_balance_residual(cfg, exact)
        ok = tv <= TV_TOL and res <= BALANCE_TOL
        out.append(Check("product-form", f"cfg{r} n={cfg.n} C={cfg.concurrency}", ok,
                         f"TV={tv:.4f} balance={res:.1e}"))
    return out


def arrival(seed: int = 0, configs: int = 10, horizon: int = 10**6) -> list[Check]:
    rng = np.random.default_rng(seed)
    out = []
    for r in range(configs):
        cfg = random_network(rng, max_n=3, max_c=4)
        exact = arrival_distribution(cfg)
        emp = empirical_arrival_distribution(cfg, horizon, seed=int(rng.integers(2**63)))
        tv = emp.total_variation(exact)
        out.append(Check("arrival", f"cfg{r} n={cfg.n} C={cfg.concurrency}", tv <= TV_TOL,
                         f"TV={tv:.4f}"))
    return out


def virtual_iterate(seed: int = 0, runs: int = 10, T: int = 1000) -> list[Check]:
    rng = np.random.default_rng(seed)
    out = []
    for r in range(runs):
        n = int(rng.integers(1, 8))
        c = int(rng.integers(1, 12))
        mu = np.exp(rng.uniform(np.log(0.2), np.log(5.0), size=n))
        p = rng.dirichlet(np.ones(n)) * 0.8 + 0.2 / n
        cfg = NetworkConfig(mu, p / p.sum(), c)
        obj = QuadraticObjective.heterogeneous(n, 5, spread=2.0, sigma2=1.0, seed=int(rng.integers(2**32)))
        eta = 0.05 / max(1, c)
        run = run_generalized_async_sgd(obj, cfg, (cfg.p, eta), T, seed=int(rng.integers(2**32)))
        res = check_virtual_identity(run)
        sizes = np.unique(ledger_sizes(run))
        ok = res <= IDENTITY_TOL and sizes.size == 1
        out.append(Check("virtual-iterate", f"run{r} n={n} C={c}", ok,
                         f"residual={res:.1e} ledger={sizes.tolist()}"))
    return out


def gamma(seed: int = 0) -> list[Check]:
    grid = np.geomspace(1e-3, 1e3, 400)
    out = []
    for nf in (1, 2, 3, 5, 10, 30):
        vals = np.array([gamma_ratio(nf, c) for c in grid])
        # the ratio rounds to 1 for large c; strict "< 1" is read off the log complement
        gaps = np.array([log_gamma_ratio_complement(nf, c) for c in grid])
        in_range = bool(np.all(vals > 0) and np.all(vals <= 1) and np.all(np.isfinite(gaps)))
        increasing = bool(np.all(np.diff(vals) >= 0) and np.all(np.diff(gaps) < 0))
        out.append(Check("gamma", f"nf={nf}", in_range and increasing,
                         f"min={vals.min():.3g} max={vals.max():.17g}"))
    g = gamma_ratio(3, 200.0)
    out.append(Check("gamma", "nf=3 c=200 saturates", g >= 1 - 1e-6, f"value={g:.12f}"))
    return out


SUITES = {
    "product-form": product_form,
    "arrival": arrival,
    "virtual-iterate": virtual_iterate,
    "gamma": gamma,
}


def run_suite(name: str, seed: int = 0) -> list[Check]:
    if name == "all":
        return [c for suite in SUITES.values() for c in suite(seed=seed)]
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {', '.join(SUITES)} or all")
    return SUITES[name](seed=seed)
