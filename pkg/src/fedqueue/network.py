"""Exact analytics for a closed Jackson network on the complete graph.

Every completed task is routed to node ``i`` with probability ``p_i`` and
served FIFO at exponential rate ``mu_i``.  The stationary law of the queue
vector is product-form in the loads ``theta_i = p_i / mu_i``.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy.signal import lfilter

#: Largest state space enumerated explicitly; ``FEDQUEUE_ENUM_BUDGET`` overrides.
DEFAULT_ENUM_BUDGET = 10**7

PROB_ATOL = 1e-12


class CapacityError(RuntimeError):
    """Raised when an exact computation would exceed the enumeration budget."""


def enum_budget() -> int:
    value = os.environ.get("FEDQUEUE_ENUM_BUDGET")
    if value is None:
        return DEFAULT_ENUM_BUDGET
    return int(value)


@dataclass(frozen=True)
class NetworkConfig:
    """Service rates, routing probabilities and task population.

    Parameters
    ----------
    mu : sequence of float
        Service rate of each node (tasks per unit time).
    p : sequence of float
        Probability that the server dispatches a new task to each node.
    concurrency : int
        Number of tasks ``C`` circulating in the network.
    """

    mu: np.ndarray
    p: np.ndarray
    concurrency: int

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float).ravel()
        p = np.array(self.p, dtype=float).ravel()
        if mu.size < 1:
            raise ValueError("mu: need at least one node")
        if p.shape != mu.shape:
            raise ValueError(f"p: expected {mu.size} entries, got {p.size}")
        if not np.all(np.isfinite(mu)) or np.any(mu <= 0):
            raise ValueError("mu: every service rate must be finite and > 0")
        if not np.all(np.isfinite(p)) or np.any(p <= 0):
            raise ValueError("p: every sampling probability must be > 0")
        if abs(p.sum() - 1.0) > PROB_ATOL:
            raise ValueError(f"p: probabilities sum to {p.sum():.15g}, not 1")
        c = self.concurrency
        if isinstance(c, (bool, np.bool_)) or int(c) != c or c < 1:
            raise ValueError(f"concurrency: must be a positive integer, got {c!r}")
        mu.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "concurrency", int(c))

    @property
    def n(self) -> int:
        return self.mu.size

    @property
    def theta(self) -> np.ndarray:
        return self.p / self.mu

    @classmethod
    def uniform(cls, mu: Sequence[float], concurrency: int) -> "NetworkConfig":
        mu = np.asarray(mu, dtype=float)
        return cls(mu, np.full(mu.size, 1.0 / mu.size), concurrency)

    def with_p(self, p) -> "NetworkConfig":
        return NetworkConfig(self.mu, p, self.concurrency)

    def with_concurrency(self, concurrency: int) -> "NetworkConfig":
        return NetworkConfig(self.mu, self.p, concurrency)


def check_state(x, n: int, population: int | None = None) -> np.ndarray:
    x = np.asarray(x)
    if x.shape != (n,):
        raise ValueError(f"state must have {n} entries, got shape {x.shape}")
    if np.any(x < 0) or not np.all(np.equal(np.mod(x, 1), 0)):
        raise ValueError("state entries must be non-negative integers")
    x = x.astype(np.int64)
    if population is not None and x.sum() != population:
        raise ValueError(f"state {tuple(x)} does not hold {population} tasks")
    return x


def state_count(n: int, population: int) -> int:
    """Number of ways to place ``population`` tasks on ``n`` nodes."""
    return math.comb(population + n - 1, n - 1)


def enumerate_states(n: int, population: int, budget: int | None = None) -> np.ndarray:
    """All states with ``sum(x) == population``, lexicographic in ``(x_1, ..., x_n)``.

    Raises
    ------
    CapacityError
        If the state space is larger than ``budget``.
    """
    if population < 0:
        raise ValueError("population must be non-negative")
    budget = enum_budget() if budget is None else budget
    count = state_count(n, population)
    if count > budget:
        raise CapacityError(
            f"{count} states for n={n}, population={population} exceed the "
            f"enumeration budget {budget}; estimate by Monte-Carlo simulation "
            "instead (fedqueue.simulation)"
        )
    if n == 1:
        return np.array([[population]], dtype=np.int64)
    blocks = []
    for first in range(population + 1):
        rest = enumerate_states(n - 1, population - first, budget=count)
        block = np.empty((rest.shape[0], n), dtype=np.int64)
        block[:, 0] = first
        block[:, 1:] = rest
        blocks.append(block)
    return np.concatenate(blocks, axis=0)


@dataclass
class DistributionTable:
    """Probability mass over the states holding ``population`` tasks."""

    states: np.ndarray
    probs: np.ndarray
    population: int
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.int64)
        self.probs = np.asarray(self.probs, dtype=float)
        if self.states.ndim != 2 or self.states.shape[0] != self.probs.size:
            raise ValueError("states and probs disagree in length")

    @property
    def n(self) -> int:
        return self.states.shape[1]

    def index(self) -> dict:
        if self._index is None:
            self._index = {tuple(s): k for k, s in enumerate(self.states.tolist())}
        return self._index

    def __getitem__(self, state) -> float:
        k = self.index().get(tuple(int(v) for v in state))
        return 0.0 if k is None else float(self.probs[k])

    def __len__(self) -> int:
        return self.probs.size

    def __iter__(self) -> Iterator[tuple[tuple[int, ...], float]]:
        for s, q in zip(self.states.tolist(), self.probs.tolist()):
            yield tuple(s), q

    def as_dict(self) -> dict[tuple[int, ...], float]:
        return dict(iter(self))

    def marginal_means(self) -> np.ndarray:
        return self.probs @ self.states

    def total_variation(self, other: "DistributionTable") -> float:
        if self.population != other.population or self.n != other.n:
            raise ValueError("tables live on different state spaces")
        if np.array_equal(self.states, other.states):
            return 0.5 * float(np.abs(self.probs - other.probs).sum())
        mine, theirs = self.as_dict(), other.as_dict()
        keys = mine.keys() | theirs.keys()
        return 0.5 * sum(abs(mine.get(k, 0.0) - theirs.get(k, 0.0)) for k in keys)


def generator_rate(x, i: int, j: int, cfg: NetworkConfig) -> float:
    """Rate of the jump moving one task from node ``j`` to node ``i``.

    Nodes are indexed from zero.
    """
    n = cfg.n
    for name, idx in (("i", i), ("j", j)):
        if not 0 <= idx < n:
            raise IndexError(f"node index {name}={idx} out of range for n={n}")
    if i == j:
        raise ValueError("i and j must differ: a self-routing does not change the state")
    x = check_state(x, n)
    if x[j] == 0:
        return 0.0
    return float(cfg.p[i] * cfg.mu[j])


def _scaled_constants(theta: np.ndarray, population: int) -> tuple[np.ndarray, float]:
    # Constants for theta / max(theta) (all <= 1, so H_k >= 1), plus log max(theta).
    top = theta.max()
    scaled = theta / top
    g = np.zeros(population + 1)
    g[0] = 1.0
    with np.errstate(over="ignore", invalid="ignore"):
        for t in scaled:
            # g_new[k] = g[k] + t * g_new[k-1]
            g = lfilter([1.0], [1.0, -t], g)
    if not np.all(np.isfinite(g)):
        g = np.exp(_log_constants(np.log(scaled), population))
    return g, math.log(top)


def _log_constants(log_theta: np.ndarray, population: int) -> np.ndarray:
    lg = np.full(population + 1, -np.inf)
    lg[0] = 0.0
    for lt in log_theta:
        for k in range(1, population + 1):
            lg[k] = np.logaddexp(lg[k], lt + lg[k - 1])
    return lg


def log_normalization_constants(cfg: NetworkConfig, population: int) -> np.ndarray:
    """``log H_k`` for ``k = 0..population`` by the convolution recursion."""
    if population < 0:
        raise ValueError("population must be non-negative")
    g, log_top = _scaled_constants(cfg.theta, population)
    with np.errstate(divide="ignore"):
        return np.log(g) + log_top * np.arange(population + 1)


def normalization_constant(cfg: NetworkConfig, population: int) -> float:
    """``H`` summing ``prod_i theta_i**x_i`` over states with ``population`` tasks.

    May overflow to ``inf`` in saturated regimes; use
    :func:`log_normalization_constants` there.
    """
    return float(np.exp(log_normalization_constants(cfg, population)[-1]))


def stationary_distribution(
    cfg: NetworkConfig, population: int, budget: int | None = None
) -> DistributionTable:
    """Exact product-form law of the queue vector with ``population`` tasks."""
    states = enumerate_states(cfg.n, population, budget=budget)
    logw = states @ np.log(cfg.theta)
    w = np.exp(logw - logw.max())
    return DistributionTable(states, w / w.sum(), population)


def expected_queue_lengths(
    cfg: NetworkConfig, population: int, budget: int | None = None
) -> np.ndarray:
    """Stationary mean queue length of every node.

    Enumerates the state space when it fits the budget and otherwise uses
    ``E[X_i] = sum_{k>=1} theta_i**k H_{C-k} / H_C``.
    """
    if population < 0:
        raise ValueError("population must be non-negative")
    budget = enum_budget() if budget is None else budget
    if state_count(cfg.n, population) <= budget:
        return stationary_distribution(cfg, population, budget).marginal_means()
    theta = cfg.theta
    g, _ = _scaled_constants(theta, population)
    scaled = theta / theta.max()
    k = np.arange(1, population + 1)
    # ratios H_{C-k} / H_C for k = 1..C
    ratios = g[population - k] / g[population]
    with np.errstate(under="ignore"):
        powers = scaled[:, None] ** k[None, :]
    return powers @ ratios


def arrival_distribution(cfg: NetworkConfig, budget: int | None = None) -> DistributionTable:
    """Law of the other ``C - 1`` tasks as seen by a task arriving at a node."""
    if cfg.concurrency < 1:
        raise ValueError("arrival distribution needs at least one task")
    return stationary_distribution(cfg, cfg.concurrency - 1, budget=budget)


def busy_probabilities(cfg: NetworkConfig, population: int | None = None) -> np.ndarray:
    """``P(X_i > 0)`` under the stationary law, equal to ``theta_i H_{C-1} / H_C``."""
    c = cfg.concurrency if population is None else population
    if c == 0:
        return np.zeros(cfg.n)
    g, _ = _scaled_constants(cfg.theta, c)
    return (cfg.theta / cfg.theta.max()) * g[c - 1] / g[c]


def throughput(cfg: NetworkConfig, population: int | None = None) -> float:
    """Stationary completions per unit time, ``sum_i mu_i P(X_i > 0)``."""
    return float(cfg.mu @ busy_probabilities(cfg, population))


def global_balance_residual(cfg: NetworkConfig, table: DistributionTable) -> float:
    """Largest relative gap between probability flux out of and into a state."""
    states, probs = table.states, table.probs
    index = table.index()
    n = cfg.n
    outflow = np.zeros(len(table))
    inflow = np.zeros(len(table))
    for a, x in enumerate(states.tolist()):
        for j in range(n):
            if x[j] == 0:
                continue
            for i in range(n):
                if i == j:
                    continue
                rate = cfg.p[i] * cfg.mu[j]
                y = list(x)
                y[j] -= 1
                y[i] += 1
                b = index[tuple(y)]
                outflow[a] += probs[a] * rate
                inflow[b] += probs[a] * rate
    scale = np.maximum(np.maximum(outflow, inflow), np.finfo(float).tiny)
    mask = (outflow > 0) | (inflow > 0)
    if not mask.any():
        return 0.0
    return float(np.max(np.abs(outflow - inflow)[mask] / scale[mask]))
