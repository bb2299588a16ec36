"""Convergence bounds for Generalized AsyncSGD and their optimization.

The bound for a sampling vector ``p`` and step size ``eta`` is

    G(p, eta) = c1 / eta + c2 * eta + c3 * eta**2

with ``c1 = A / (T + 1)``, ``c2 = L B sum_i 1 / (n^2 p_i)`` and
``c3 = L^2 B C sum_i q_i / (n^2 p_i^2)``.  Here ``q_i`` is the expected
delay charged to node ``i`` per server step: the node is picked with
probability ``p_i``, so ``q_i = p_i m_i`` with ``m_i`` the stationary mean
delay (in server steps) of a task sent to node ``i``.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import gammainc, gammaln

from .network import NetworkConfig, expected_queue_lengths

logger = logging.getLogger(__name__)

#: Stationary weighted delay times this factor stands in for its maximum over k.
TRANSIENT_SAFETY = 1.25


@dataclass(frozen=True)
class BoundParams:
    """Constants of the convergence bound.

    ``A`` is the initial optimality gap, ``T`` the number of server steps and
    ``C`` the concurrency.  ``rho2 > 0`` switches to the strong-growth noise
    model.
    """

    L: float
    G2: float
    sigma2: float
    A: float
    T: float
    C: int
    rho2: float = 0.0

    def __post_init__(self):
        for name in ("G2", "sigma2", "A", "rho2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.L <= 0:
            raise ValueError("L must be positive")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.C < 1:
            raise ValueError("C must be >= 1")

    @property
    def B(self) -> float:
        return 2 * self.G2 + self.sigma2

    @property
    def B_eff(self) -> float:
        """Noise constant of the second and third terms (``B`` when ``rho2 == 0``)."""
        return 2 * (1 + self.rho2) * self.G2 + self.sigma2

    def replace(self, **changes) -> "BoundParams":
        values = {f: getattr(self, f) for f in ("L", "G2", "sigma2", "A", "T", "C", "rho2")}
        values.update(changes)
        return BoundParams(**values)

    @classmethod
    def from_B(cls, L, B, A, T, C, rho2=0.0) -> "BoundParams":
        """Parameters where only ``B = 2 G^2 + sigma^2`` is known."""
        return cls(L=L, G2=0.0, sigma2=B, A=A, T=T, C=C, rho2=rho2)


@dataclass(frozen=True)
class DelayProfile:
    """Stationary mean delay of a task sent to each node, in server steps."""

    m: np.ndarray
    source: str = "simulated"
    throughput: float | None = None

    def __post_init__(self):
        m = np.asarray(self.m, dtype=float)
        if np.any(m < 0) or not np.all(np.isfinite(m)):
            raise ValueError("delays must be finite and non-negative")
        object.__setattr__(self, "m", m)

    def per_step(self, p) -> np.ndarray:
        """Expected delay charged to each node per server step, ``p_i m_i``."""
        return _check_p(p, self.m.size) * self.m

    def weighted(self, p) -> float:
        """``sum_i p_i m_i / (n^2 p_i^2)``, the delay weight of the bound."""
        p = _check_p(p, self.m.size)
        n = p.size
        return float(np.sum(self.per_step(p) / (n**2 * p**2)))


@dataclass
class SamplingPlan:
    """Sampling vector and step size, with the bound they achieve."""

    p: np.ndarray
    eta: float
    bound_value: float
    eta_cap: float = math.inf
    uniform_bound: float | None = None
    uniform_eta: float | None = None
    cluster_prob: float | None = None
    sweep: "Sweep | None" = None

    @property
    def improvement(self) -> float:
        """Relative reduction of the bound against uniform sampling."""
        if self.uniform_bound is None:
            return float("nan")
        return 1.0 - self.bound_value / self.uniform_bound


@dataclass
class Sweep:
    """Bound evaluated on a grid of cluster probabilities."""

    grid: np.ndarray
    eta: np.ndarray
    bound: np.ndarray
    eta_cap: np.ndarray
    horizon: np.ndarray
    profiles: list = field(default_factory=list)
    skipped: int = 0


def _check_p(p, n: int | None = None) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if n is not None and p.size != n:
        raise ValueError(f"p has {p.size} entries, expected {n}")
    if np.any(p <= 0):
        raise ValueError("every p_i must be positive")
    return p


def bound_coefficients(params: BoundParams, p, profile: DelayProfile) -> tuple[float, float, float]:
    """``(c1, c2, c3)`` such that the bound is ``c1/eta + c2*eta + c3*eta**2``."""
    p = _check_p(p, profile.m.size)
    n = p.size
    c1 = params.A / (params.T + 1)
    c2 = params.L * params.B_eff * np.sum(1.0 / (n**2 * p))
    c3 = params.L**2 * params.B_eff * params.C * profile.weighted(p)
    return c1, float(c2), float(c3)


def eta_max(p, params: BoundParams, max_weightm: float) -> float:
    """Largest step size covered by the convergence theorem.

    ``max_weightm`` is the maximum over steps of the weighted delay
    (see :meth:`DelayProfile.weighted`).
    """
    p = _check_p(p)
    if max_weightm <= 0:
        raise ValueError("max_weightm must be positive")
    n = p.size
    g = 1.0 + params.rho2
    delay_cap = 1.0 / math.sqrt(g * params.C * max_weightm)
    variance_cap = 2.0 / (g * np.sum(1.0 / (n**2 * p)))
    return float(min(delay_cap, variance_cap) / (4 * params.L))


def convergence_bound(params: BoundParams, p, eta: float, profile: DelayProfile) -> float:
    """Value of the bound at step size ``eta``."""
    if eta <= 0:
        return math.inf
    c1, c2, c3 = bound_coefficients(params, p, profile)
    return c1 / eta + c2 * eta + c3 * eta**2


def bound_terms(params: BoundParams, p, eta: float, profile: DelayProfile) -> tuple[float, float, float]:
    """The initial-gap, variance and delay terms of the bound, separately."""
    c1, c2, c3 = bound_coefficients(params, p, profile)
    return c1 / eta, c2 * eta, c3 * eta**2


def minimize_cubic_bound(c1: float, c2: float, c3: float, cap: float = math.inf) -> float:
    """Minimizer of ``c1/eta + c2*eta + c3*eta**2`` over ``0 < eta <= cap``.

    The derivative ``-c1/eta**2 + c2 + 2*c3*eta`` increases strictly from
    minus infinity, so its root (equivalently the positive root of
    ``2*c3*eta**3 + c2*eta**2 - c1``) is unique; it is bracketed and refined
    with Brent's method.
    """
    if c1 <= 0:
        raise ValueError("the initial-gap coefficient must be positive")
    if c2 < 0 or c3 < 0:
        raise ValueError("coefficients must be non-negative")
    if c2 == 0 and c3 == 0:
        return float(cap)
    hi = min(math.sqrt(c1 / c2) if c2 > 0 else math.inf,
             (c1 / (2 * c3)) ** (1 / 3) if c3 > 0 else math.inf)

    def slope(eta):
        return 2 * c3 * eta**3 + c2 * eta**2 - c1

    if slope(hi) <= 0:
        root = hi
    else:
        lo = hi / 2
        while slope(lo) > 0:
            lo /= 2
        root = brentq(slope, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    return float(min(root, cap))


def optimal_step_size(params: BoundParams, p, profile: DelayProfile,
                      cap: float | None = None) -> float:
    """Step size minimizing the bound, clamped to ``cap``.

    By default the cap is ``eta_max`` with the stationary weighted delay
    inflated by ``TRANSIENT_SAFETY``.
    """
    c1, c2, c3 = bound_coefficients(params, p, profile)
    if cap is None:
        cap = default_cap(params, p, profile)
    return minimize_cubic_bound(c1, c2, c3, cap)


def default_cap(params: BoundParams, p, profile: DelayProfile,
                safety: float = TRANSIENT_SAFETY) -> float:
    mp = profile.weighted(p)
    if mp <= 0:
        # no delays: only the variance cap applies
        p = _check_p(p)
        n = p.size
        return float(2.0 / ((1 + params.rho2) * np.sum(1.0 / (n**2 * p))) / (4 * params.L))
    return eta_max(p, params, safety * mp)


# -- sampling optimization ---------------------------------------------------


@dataclass(frozen=True)
class ClusterSpec:
    """Nodes grouped in clusters sharing a service rate.

    The first cluster's per-node probability is the free parameter; every
    other node receives an equal share of the remainder.
    """

    sizes: tuple
    mu: tuple

    def __post_init__(self):
        if len(self.sizes) != len(self.mu) or len(self.sizes) < 2:
            raise ValueError("need matching sizes and rates for at least two clusters")
        if any(int(s) != s or s < 1 for s in self.sizes):
            raise ValueError("cluster sizes must be positive integers")
        if any(m <= 0 for m in self.mu):
            raise ValueError("service rates must be positive")
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        object.__setattr__(self, "mu", tuple(float(m) for m in self.mu))

    @property
    def n(self) -> int:
        return sum(self.sizes)

    @property
    def mu_vector(self) -> np.ndarray:
        return np.repeat(self.mu, self.sizes)

    @property
    def groups(self) -> list[np.ndarray]:
        edges = np.cumsum((0,) + self.sizes)
        return [np.arange(a, b) for a, b in zip(edges[:-1], edges[1:])]

    @property
    def uniform_prob(self) -> float:
        return 1.0 / self.n

    @property
    def max_prob(self) -> float:
        """Supremum of feasible first-cluster probabilities."""
        return 1.0 / self.sizes[0]

    def probabilities(self, prob: float) -> np.ndarray:
        nf = self.sizes[0]
        rest = (1.0 - nf * prob) / (self.n - nf)
        if prob <= 0 or rest <= 0:
            raise ValueError(f"cluster probability {prob} is infeasible")
        p = np.full(self.n, rest)
        p[:nf] = prob
        if abs(prob - self.uniform_prob) <= 1e-15:
            p[:] = self.uniform_prob
        return p

    def network(self, prob: float, concurrency: int) -> NetworkConfig:
        return NetworkConfig(self.mu_vector, self.probabilities(prob), concurrency)


def default_grid(spec: ClusterSpec, points: int = 50) -> np.ndarray:
    """Log-spaced first-cluster probabilities in ``[1/(20n), 1/n_f)``, plus uniform."""
    lo = spec.uniform_prob / 20
    hi = spec.max_prob
    grid = np.geomspace(lo, hi, points + 1)[:-1]
    return np.union1d(grid, [spec.uniform_prob])


class SimulatedDelayOracle:
    """Monte-Carlo delay profile for cluster-tied sampling vectors.

    Delays and throughput come from one long run per probability; node
    delays are averaged within clusters.
    """

    def __init__(self, spec: ClusterSpec, concurrency: int, horizon: int = 200_000,
                 seed: int = 0, service_law: str = "exponential", burn_in=0.1):
        self.spec = spec
        self.concurrency = int(concurrency)
        self.horizon = int(horizon)
        self.seed = seed
        self.service_law = service_law
        self.burn_in = burn_in
        self._cache: dict = {}

    def stats(self, p):
        from .simulation import delay_stats, simulate

        p = np.asarray(p, dtype=float)
        key = p.tobytes()
        if key not in self._cache:
            cfg = NetworkConfig(self.spec.mu_vector, p, self.concurrency)
            # per-point seed: the same p always sees the same randomness
            seed = np.random.SeedSequence([self.seed, int.from_bytes(key[:8], "little")])
            trace = simulate(cfg, self.horizon, seed=seed, service_law=self.service_law,
                             burn_in=self.burn_in, record_states=False)
            self._cache[key] = delay_stats(trace)
        return self._cache[key]

    def __call__(self, p) -> DelayProfile:
        st = self.stats(p)
        m = np.empty(self.spec.n)
        for g, value in zip(self.spec.groups, st.cluster_means(self.spec.groups)):
            m[g] = 0.0 if np.isnan(value) else value
        return DelayProfile(m, source="simulated", throughput=st.throughput)

    def throughput(self, p) -> float:
        return self.stats(p).throughput


class QueueBoundDelayOracle:
    """Delay upper bound ``(lambda / mu_i) (E^{C-1}[X_i] + 1)`` from exact queue means.

    ``lambda`` defaults to the total service capacity ``sum_i mu_i``.
    """

    def __init__(self, mu, concurrency: int, rate: float | None = None):
        self.mu = np.asarray(mu, dtype=float)
        self.concurrency = int(concurrency)
        self.rate = rate

    def __call__(self, p) -> DelayProfile:
        cfg = NetworkConfig(self.mu, p, self.concurrency)
        lam = self.mu.sum() if self.rate is None else self.rate
        seen = expected_queue_lengths(cfg, self.concurrency - 1)
        return DelayProfile(lam / self.mu * (seen + 1), source="exact-asymptotic")


def _evaluate(params: BoundParams, p, profile: DelayProfile, safety: float):
    cap = default_cap(params, p, profile, safety)
    c1, c2, c3 = bound_coefficients(params, p, profile)
    eta = minimize_cubic_bound(c1, c2, c3, cap)
    return eta, c1 / eta + c2 * eta + c3 * eta**2, cap


def optimize_sampling(
    params: BoundParams,
    spec: ClusterSpec,
    delay_oracle: Callable[[np.ndarray], DelayProfile],
    grid: Sequence[float] | None = None,
    horizon_fn: Callable[[np.ndarray, DelayProfile], float] | None = None,
    safety: float = TRANSIENT_SAFETY,
    jobs: int = 1,
) -> SamplingPlan:
    """Grid search over the first cluster's probability.

    Each grid point gets its bound-optimal, capped step size.  Infeasible
    points are skipped; ties go to the point nearest uniform.  ``horizon_fn``,
    when given, maps ``(p, profile)`` to the number of server steps used at
    that point (see :func:`physical_time_bound`).
    """
    grid = default_grid(spec) if grid is None else np.asarray(grid, dtype=float)
    uniform = spec.uniform_prob
    if not np.any(np.isclose(grid, uniform, rtol=1e-12, atol=0)):
        grid = np.union1d(grid, [uniform])
    feasible = [g for g in grid if 0 < g < spec.max_prob]
    skipped = len(grid) - len(feasible)
    if skipped:
        logger.warning("skipped %d infeasible grid points", skipped)

    def point(prob):
        p = spec.probabilities(prob)
        profile = delay_oracle(p)
        prm = params
        if horizon_fn is not None:
            prm = params.replace(T=max(1.0, horizon_fn(p, profile)))
        eta, value, cap = _evaluate(prm, p, profile, safety)
        return eta, value, cap, prm.T, profile

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(point, feasible))
    else:
        results = [point(g) for g in feasible]

    probs = np.array(feasible)
    etas = np.array([r[0] for r in results])
    values = np.array([r[1] for r in results])
    caps = np.array([r[2] for r in results])
    horizons = np.array([r[3] for r in results])
    profiles = [r[4] for r in results]
    sweep = Sweep(probs, etas, values, caps, horizons, profiles, skipped)

    best_value = values.min()
    ties = np.flatnonzero(values <= best_value * (1 + 1e-12))
    best = ties[np.argmin(np.abs(np.log(probs[ties] / uniform)))]
    u = int(np.argmin(np.abs(probs - uniform)))
    return SamplingPlan(
        p=spec.probabilities(probs[best]),
        eta=float(etas[best]),
        bound_value=float(values[best]),
        eta_cap=float(caps[best]),
        uniform_bound=float(values[u]),
        uniform_eta=float(etas[u]),
        cluster_prob=float(probs[best]),
        sweep=sweep,
    )


def physical_time_bound(
    params: BoundParams,
    spec: ClusterSpec,
    time_budget: float,
    delay_oracle: Callable[[np.ndarray], DelayProfile],
    throughput: Callable[[np.ndarray], float] | None = None,
    grid: Sequence[float] | None = None,
    safety: float = TRANSIENT_SAFETY,
    jobs: int = 1,
) -> SamplingPlan:
    """Optimize the bound for a fixed amount of physical time.

    At each grid point the horizon is ``T = throughput(p) * time_budget``.
    Without an explicit ``throughput`` the profile's own estimate is used.
    """
    if time_budget <= 0:
        raise ValueError("time_budget must be positive")

    def horizon(p, profile):
        lam = throughput(p) if throughput is not None else profile.throughput
        if lam is None:
            raise ValueError("no throughput available for the physical-time horizon")
        return lam * time_budget

    return optimize_sampling(params, spec, delay_oracle, grid, horizon_fn=horizon,
                             safety=safety, jobs=jobs)


# -- baselines ---------------------------------------------------------------


@dataclass
class BaselineBounds:
    """Optimized bounds of FedBuff and AsyncSGD; ``inf`` marks an undefined bound."""

    fedbuff: float
    asyncsgd: float
    fedbuff_eta: float
    asyncsgd_eta: float
    defined: bool = True


def baseline_bounds(params: BoundParams, tau_max: float, tau_c: float,
                    tau_sum_rate: float, n: int, exponential: bool = False) -> BaselineBounds:
    """Bounds of FedBuff and AsyncSGD, each at its own optimal capped step size.

    ``tau_sum_rate`` is ``sum_i tau_sum^i / (T + 1)``.  With exponential
    service the maximum delay is unbounded and both bounds are reported as
    undefined (``inf``).
    """
    if exponential or not math.isfinite(tau_max):
        return BaselineBounds(math.inf, math.inf, math.nan, math.nan, defined=False)
    L, B = params.L, params.B
    c1 = params.A / (params.T + 1)
    fed_cap = 1.0 / (L * math.sqrt(tau_max**3)) if tau_max > 0 else math.inf
    asy_cap = 1.0 / (L * math.sqrt(tau_c * tau_max)) if tau_c * tau_max > 0 else math.inf
    fed_c3 = tau_max**2 * L**2 * B * n
    asy_c3 = tau_c * L**2 * B * tau_sum_rate
    fed_eta = minimize_cubic_bound(c1, L * B, fed_c3, fed_cap)
    asy_eta = minimize_cubic_bound(c1, L * B, asy_c3, asy_cap)
    return BaselineBounds(
        fedbuff=c1 / fed_eta + L * B * fed_eta + fed_c3 * fed_eta**2,
        asyncsgd=c1 / asy_eta + L * B * asy_eta + asy_c3 * asy_eta**2,
        fedbuff_eta=fed_eta,
        asyncsgd_eta=asy_eta,
    )


# -- saturated-regime closed forms ---------------------------------------------


def _log_erlang_cdf(k: int, c: float) -> float:
    """``log P(k, c)``, the Erlang(k, 1) CDF at ``c``."""
    value = gammainc(k, c)
    if value > 1e-290:
        return math.log(value)
    # lower tail: P(k, c) = e^{-c} c^k / k! * sum_j c^j k! / (k + j)!
    term, total, j = 1.0, 1.0, 0
    while term > 1e-17 * total:
        j += 1
        term *= c / (k + j)
        total += term
    return -c + k * math.log(c) - gammaln(k + 1) + math.log(total)


def gamma_ratio(nf: int, c: float) -> float:
    """``P(nf + 2, c) / P(nf + 1, c)`` for Erlang CDFs ``P``."""
    if nf < 1 or int(nf) != nf:
        raise ValueError("nf must be a positive integer")
    if c <= 0:
        raise ValueError("c must be positive")
    nf = int(nf)
    return math.exp(_log_erlang_cdf(nf + 2, c) - _log_erlang_cdf(nf + 1, c))


def log_gamma_ratio_complement(nf: int, c: float) -> float:
    """``log(1 - gamma_ratio(nf, c))``, accurate when the ratio rounds to one.

    Uses ``P(k, c) - P(k + 1, c) = e^{-c} c^k / k!`` with ``k = nf + 1``.
    """
    if nf < 1 or c <= 0:
        raise ValueError("need nf >= 1 and c > 0")
    k = int(nf) + 1
    return -c + k * math.log(c) - gammaln(k + 1) - _log_erlang_cdf(k, c)


@dataclass
class TwoClusterBounds:
    fast: float
    slow: float
    fast_main: float
    slow_main: float
    fast_simplified: float
    slow_simplified: float
    rate: float
    queue_fast: float
    queue_slow: float


def two_cluster_delay_bounds(n: int, nf: int, mu_f: float, mu_s: float, C: int,
                             p_fast: float | None = None) -> TwoClusterBounds:
    """Saturated-regime delay bounds for ``nf`` fast and ``n - nf`` slow nodes.

    ``fast``/``slow`` are ``(lambda / mu) (E[X] + 1)`` with queue means taken
    from the scaling limit, ``lambda = nf mu_f + (n - nf) mu_s``.  The
    ``*_main`` and ``*_simplified`` fields are the two uniform-sampling
    approximations, which assume ``nf = n / 2``.
    """
    if not 0 < nf < n:
        raise ValueError("need 0 < nf < n")
    if mu_f <= mu_s:
        raise ValueError("the fast cluster must be strictly faster (mu_f > mu_s)")
    p_f = 1.0 / n if p_fast is None else p_fast
    p_s = (1.0 - nf * p_f) / (n - nf)
    if p_s <= 0:
        raise ValueError("p_fast leaves no probability for the slow cluster")
    gamma_f = (mu_f / mu_s) * (p_s / p_f)
    if gamma_f <= 1:
        raise ValueError("fast nodes must carry a lighter load than slow nodes")
    lam = nf * mu_f + (n - nf) * mu_s
    gap = gamma_f - 1.0
    big_gamma = gamma_ratio(nf, gap * (C + 1))
    x_fast = big_gamma / gap
    x_slow = ((C + 1) - nf * x_fast) / (n - nf)
    r = mu_f / mu_s - 1.0
    return TwoClusterBounds(
        fast=lam / mu_f * (x_fast + 1),
        slow=lam / mu_s * (x_slow + 1),
        fast_main=n * (mu_f + mu_s) / (2 * mu_f * r),
        slow_main=(2 * C / n - 1 / r) * n * (mu_f + mu_s) / (2 * mu_s),
        fast_simplified=n / r,
        slow_simplified=(2 * C / n - 1 / r) * n,
        rate=lam,
        queue_fast=x_fast,
        queue_slow=x_slow,
    )


@dataclass
class ThreeClusterBounds:
    fast: float
    medium: float
    slow: float
    rate: float


def three_cluster_delay_bounds(n: int, nf: int, nm: int, mu_f: float, mu_m: float,
                               mu_s: float, C: int, prob_fast_busy: float = 1.0) -> ThreeClusterBounds:
    """Delay bounds with nodes ``[0, nf)`` fast, ``[nf, nm)`` medium and the rest slow.

    Fast queues vanish in this regime, so fast nodes only contribute
    ``prob_fast_busy * mu_f`` each to the server rate.
    """
    if not mu_f > mu_m > mu_s:
        raise ValueError("need mu_f > mu_m > mu_s")
    if not 0 < nf < nm < n:
        raise ValueError("need 0 < nf < nm < n")
    if not 0 <= prob_fast_busy <= 1:
        raise ValueError("prob_fast_busy must lie in [0, 1]")
    lam = nf * prob_fast_busy * mu_f + (nm - nf) * mu_m + (n - nm) * mu_s
    r = mu_m / mu_s - 1.0
    return ThreeClusterBounds(
        fast=lam / mu_f,
        medium=lam / mu_m / r,
        slow=lam / mu_s * (C / (n - nm) - (nm - nf) / (n - nm) / r),
        rate=lam,
    )
