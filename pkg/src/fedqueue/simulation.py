"""Monte-Carlo simulation of the closed network in continuous time.

A run records one entry per server step ``k``: the completion time, the node
that completed, the step at which that task had been dispatched, the node that
receives the replacement task, and optionally the queue vector just after the
step.  Everything is a deterministic function of the config, seed, horizon and
service law.
"""

from __future__ import annotations

import logging
from collections import namedtuple
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ._kernel import run_closed_network
from .network import (
    CapacityError,
    DistributionTable,
    NetworkConfig,
    check_state,
    enum_budget,
    enumerate_states,
    stationary_distribution,
    state_count,
)

logger = logging.getLogger(__name__)

SERVICE_LAWS = ("exponential", "deterministic")
INITIAL_MODES = ("multiset", "distinct", "stationary")

#: Queue snapshots are kept only when ``(T + 1) * n`` stays below this.
STATE_RECORD_LIMIT = 50_000_000

DEFAULT_BURN_IN = 0.1

StepRecord = namedtuple("StepRecord", "k t j k_next i_k x_k")


def _resolve_burn_in(burn_in, horizon: int) -> int:
    if burn_in is None:
        burn_in = DEFAULT_BURN_IN
    if isinstance(burn_in, float) and 0 <= burn_in < 1:
        return int(burn_in * (horizon + 1))
    burn_in = int(burn_in)
    if not 0 <= burn_in <= horizon:
        raise ValueError(f"burn_in must lie in [0, {horizon}], got {burn_in}")
    return burn_in


@dataclass
class SimTrace:
    """Per-step record of one simulated run.

    Array attributes have one entry per server step ``k = 0..horizon``.
    ``dispatch_steps[k]`` is ``-1`` for tasks from the initial set.
    """

    config: NetworkConfig
    seed: int | None
    horizon: int
    service_law: str
    times: np.ndarray
    nodes: np.ndarray
    task_ids: np.ndarray
    k_next: np.ndarray
    init_state: np.ndarray
    final_state: np.ndarray
    states: np.ndarray | None
    burn_in: int
    queue_area: np.ndarray
    busy_time: np.ndarray
    busy_node_steps: float
    stat_start: float

    @property
    def dispatch_steps(self) -> np.ndarray:
        c = self.config.concurrency
        return np.where(self.task_ids < c, -1, self.task_ids - c)

    @property
    def delays(self) -> np.ndarray:
        """Server steps strictly between each task's dispatch and its completion."""
        return np.arange(self.horizon + 1) - self.dispatch_steps - 1

    def __len__(self) -> int:
        return self.horizon + 1

    def records(self) -> Iterable[StepRecord]:
        i_k = self.dispatch_steps
        for k in range(self.horizon + 1):
            x = None if self.states is None else tuple(self.states[k].tolist())
            yield StepRecord(k, float(self.times[k]), int(self.nodes[k]),
                             int(self.k_next[k]), int(i_k[k]), x)

    def throughput(self) -> float:
        elapsed = self.times[-1] - self.stat_start
        if elapsed <= 0:
            return float("nan")
        return (self.horizon - self.burn_in) / elapsed

    def mean_queue_lengths(self) -> np.ndarray:
        elapsed = self.times[-1] - self.stat_start
        return self.queue_area / elapsed

    def busy_fractions(self) -> np.ndarray:
        elapsed = self.times[-1] - self.stat_start
        return self.busy_time / elapsed


def _initial_nodes(cfg: NetworkConfig, rng: np.random.Generator, initial, budget) -> np.ndarray:
    c, n = cfg.concurrency, cfg.n
    if not isinstance(initial, str):
        x = check_state(initial, n, c)
        return np.repeat(np.arange(n), x)
    if initial == "multiset":
        return np.sort(rng.choice(n, size=c, p=cfg.p))
    if initial == "distinct":
        if c > n:
            raise ValueError(f"distinct initial set needs C <= n, got C={c}, n={n}")
        return np.sort(rng.choice(n, size=c, replace=False, p=cfg.p))
    if initial == "stationary":
        budget = enum_budget() if budget is None else budget
        if state_count(n, c) <= budget:
            table = stationary_distribution(cfg, c, budget)
            x = table.states[rng.choice(len(table), p=table.probs)]
            return np.repeat(np.arange(n), x)
        # long burn-in from a multiset start instead of exact sampling
        warm = 20 * c * n
        start = np.sort(rng.choice(n, size=c, p=cfg.p))
        out = _run(cfg, rng, start, warm, 0, "exponential", False)
        return np.repeat(np.arange(n), out[5])
    raise ValueError(f"initial must be one of {INITIAL_MODES} or a state vector")


def _run(cfg, rng, init_nodes, horizon, burn_in, service_law, record_states):
    c = cfg.concurrency
    routes = rng.choice(cfg.n, size=horizon + 1, p=cfg.p).astype(np.int64)
    if service_law == "exponential":
        work = rng.standard_exponential(c + horizon + 1)
    else:
        work = np.ones(c + horizon + 1)
    out = run_closed_network(
        np.ascontiguousarray(cfg.mu, dtype=np.float64),
        np.ascontiguousarray(init_nodes, dtype=np.int64),
        routes, work, horizon, burn_in, record_states,
    )
    return out + (routes,)


def simulate(
    cfg: NetworkConfig,
    horizon: int,
    seed: int | None = None,
    service_law: str = "exponential",
    initial="multiset",
    burn_in=None,
    record_states: bool | None = None,
    budget: int | None = None,
) -> SimTrace:
    """Simulate ``horizon + 1`` server steps of the closed network.

    Parameters
    ----------
    cfg : NetworkConfig
    horizon : int
        Last server step ``T``; steps ``0..T`` are recorded.
    seed : int or SeedSequence, optional
    service_law : {"exponential", "deterministic"}
        Deterministic service takes exactly ``1 / mu_i``.
    initial : {"multiset", "distinct", "stationary"} or state vector
        How the ``C`` initial tasks are placed: independent draws from ``p``,
        draws without replacement, a draw from the stationary law, or an
        explicit queue vector.
    burn_in : int or float, optional
        Steps (or fraction of steps) excluded from stationary estimators.
        Defaults to 10% of the run.
    record_states : bool, optional
        Keep the queue vector after every step.  Defaults to on unless the
        snapshot array would exceed ``STATE_RECORD_LIMIT`` entries.
    """
    if service_law not in SERVICE_LAWS:
        raise ValueError(f"service_law must be one of {SERVICE_LAWS}, got {service_law!r}")
    if int(horizon) != horizon or horizon < 1:
        raise ValueError(f"horizon must be an integer >= 1, got {horizon!r}")
    horizon = int(horizon)
    burn = _resolve_burn_in(burn_in, horizon)
    if record_states is None:
        record_states = (horizon + 1) * cfg.n <= STATE_RECORD_LIMIT

    rng = np.random.default_rng(seed)
    init_nodes = _initial_nodes(cfg, rng, initial, budget)
    (times, nodes, task_ids, states, init_state, final_state,
     queue_area, busy_time, busy_nodes, stat_start, routes) = _run(
        cfg, rng, init_nodes, horizon, burn, service_law, record_states)
    return SimTrace(
        config=cfg,
        seed=seed if isinstance(seed, (int, np.integer)) or seed is None else None,
        horizon=horizon,
        service_law=service_law,
        times=times,
        nodes=nodes,
        task_ids=task_ids,
        k_next=routes.astype(np.int32),
        init_state=init_state,
        final_state=final_state,
        states=states if record_states else None,
        burn_in=burn,
        queue_area=queue_area,
        busy_time=busy_time,
        busy_node_steps=busy_nodes,
        stat_start=stat_start,
    )


@dataclass
class DelayStats:
    """Delay and queue statistics of one run, or of several merged runs.

    Delays are counted in server steps.  Nodes without any completed task
    in the measurement window report ``nan`` for their mean delay.
    """

    mean_delay: np.ndarray
    counts: np.ndarray
    histograms: list
    mean_queue: np.ndarray
    tau_max: int
    tau_c: float
    tau_sum: np.ndarray
    throughput: float
    censored: np.ndarray
    steps: int
    elapsed: float
    extra: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.mean_delay.size

    def cluster_means(self, groups: Sequence[Sequence[int]]) -> np.ndarray:
        """Task-weighted mean delay over each group of nodes."""
        out = []
        for g in groups:
            g = np.asarray(g)
            total = self.counts[g].sum()
            out.append(self.tau_sum[g].sum() / total if total else np.nan)
        return np.array(out)

    def histogram_rows(self):
        for node, hist in enumerate(self.histograms):
            for d in np.flatnonzero(hist):
                yield node, int(d), int(hist[d])

    @classmethod
    def merge(cls, parts: Sequence["DelayStats"]) -> "DelayStats":
        """Pool replications: task-weighted delays, time-weighted queues."""
        parts = list(parts)
        if not parts:
            raise ValueError("nothing to merge")
        counts = sum(p.counts for p in parts)
        tau_sum = sum(p.tau_sum for p in parts)
        with np.errstate(invalid="ignore", divide="ignore"):
            mean_delay = np.where(counts > 0, tau_sum / np.maximum(counts, 1), np.nan)
        width = max(max((h.size for h in p.histograms), default=0) for p in parts)
        hists = []
        for node in range(parts[0].n):
            h = np.zeros(width, dtype=np.int64)
            for p in parts:
                src = p.histograms[node]
                h[: src.size] += src
            hists.append(h)
        elapsed = sum(p.elapsed for p in parts)
        steps = sum(p.steps for p in parts)
        return cls(
            mean_delay=mean_delay,
            counts=counts,
            histograms=hists,
            mean_queue=sum(p.mean_queue * p.elapsed for p in parts) / elapsed,
            tau_max=max(p.tau_max for p in parts),
            tau_c=sum(p.tau_c * p.steps for p in parts) / steps,
            tau_sum=tau_sum,
            throughput=steps / elapsed,
            censored=sum(p.censored for p in parts),
            steps=steps,
            elapsed=elapsed,
        )


def delay_stats(trace: SimTrace) -> DelayStats:
    """Per-node delay statistics of a run.

    Tasks dispatched during the burn-in window (and the initial tasks, when a
    burn-in is in force) are skipped.  Tasks still in flight at the horizon
    are left out of the means and reported as ``censored``.
    """
    n, c = trace.config.n, trace.config.concurrency
    burn = trace.burn_in
    i_k = trace.dispatch_steps
    delays = trace.delays
    keep = i_k >= burn if burn > 0 else np.ones(i_k.size, dtype=bool)
    nodes = trace.nodes[keep].astype(np.int64)
    d = delays[keep]

    counts = np.bincount(nodes, minlength=n)
    tau_sum = np.bincount(nodes, weights=d, minlength=n)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_delay = np.where(counts > 0, tau_sum / np.maximum(counts, 1), np.nan)
    hists = [np.bincount(d[nodes == i]) if counts[i] else np.zeros(0, dtype=np.int64)
             for i in range(n)]

    # in-flight tasks at the horizon, attributed to the node holding them
    completed = np.zeros(c + trace.horizon + 1, dtype=bool)
    completed[trace.task_ids] = True
    first_counted = 0 if burn == 0 else c + burn
    pending = np.flatnonzero(~completed[first_counted:]) + first_counted
    holder = np.empty(c + trace.horizon + 1, dtype=np.int64)
    holder[c:] = trace.k_next
    holder[:c] = np.repeat(np.arange(n), trace.init_state)
    censored = np.bincount(holder[pending], minlength=n)

    steps = trace.horizon + 1 - burn
    elapsed = float(trace.times[-1] - trace.stat_start)
    return DelayStats(
        mean_delay=mean_delay,
        counts=counts,
        histograms=hists,
        mean_queue=trace.mean_queue_lengths(),
        tau_max=int(d.max()) if d.size else 0,
        tau_c=trace.busy_node_steps / steps,
        tau_sum=tau_sum,
        throughput=trace.throughput(),
        censored=censored,
        steps=steps,
        elapsed=elapsed,
    )


def run_replications(
    cfg: NetworkConfig,
    horizon: int,
    seeds: Sequence[int],
    jobs: int = 1,
    **kwargs,
) -> DelayStats:
    """Simulate one run per seed and merge their delay statistics."""
    kwargs.setdefault("record_states", False)

    def one(seed):
        return delay_stats(simulate(cfg, horizon, seed=seed, **kwargs))

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(one, seeds))
    else:
        parts = [one(s) for s in seeds]
    return DelayStats.merge(parts)


@dataclass
class TransientCurve:
    """Monte-Carlo mean delay of the task dispatched at step ``k`` to one node."""

    node: int
    mean: np.ndarray
    count: np.ndarray
    sumsq: np.ndarray

    @property
    def k(self) -> np.ndarray:
        return np.arange(self.mean.size)

    @property
    def missing(self) -> np.ndarray:
        return np.flatnonzero(self.count == 0)

    @property
    def stderr(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            var = self.sumsq / self.count - self.mean**2
            var = var * self.count / (self.count - 1)
            return np.sqrt(var / self.count)


def transient_delay_curve(
    cfg: NetworkConfig,
    horizon: int,
    node: int,
    replications: int,
    seed=None,
    initial="multiset",
    service_law: str = "exponential",
) -> TransientCurve:
    """Average, over independent runs, the delay of the task sent to ``node`` at step ``k``.

    Runs are extended past ``horizon`` until every task dispatched at a step
    ``<= horizon`` has completed, so the curve is not truncated.  Steps at
    which ``node`` was never selected come back as ``nan``.
    """
    if replications < 1:
        raise ValueError("replications must be >= 1")
    if not 0 <= node < cfg.n:
        raise IndexError(f"node {node} out of range for n={cfg.n}")
    total = np.zeros(horizon + 1)
    sumsq = np.zeros(horizon + 1)
    count = np.zeros(horizon + 1, dtype=np.int64)
    children = np.random.SeedSequence(seed).spawn(replications)
    for child in children:
        extend = max(horizon, 10 * cfg.concurrency)
        while True:
            trace = simulate(cfg, horizon + extend, seed=child, initial=initial,
                             service_law=service_law, burn_in=0, record_states=False)
            c = cfg.concurrency
            # every task dispatched at steps 0..horizon must have completed
            done = np.zeros(horizon + 1, dtype=bool)
            ids = trace.task_ids[trace.task_ids >= c] - c
            done[ids[ids <= horizon]] = True
            if done.all():
                break
            extend *= 2
        i_k = trace.dispatch_steps
        mask = (trace.nodes == node) & (i_k >= 0) & (i_k <= horizon)
        d = trace.delays[mask]
        np.add.at(total, i_k[mask], d)
        np.add.at(sumsq, i_k[mask], d.astype(float) ** 2)
        np.add.at(count, i_k[mask], 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(count > 0, total / np.maximum(count, 1), np.nan)
    return TransientCurve(node=node, mean=mean, count=count, sumsq=sumsq)


def _tabulate(rows: np.ndarray, weights: np.ndarray | None, n: int, population: int,
              budget: int | None) -> DistributionTable:
    states = enumerate_states(n, population, budget=budget)
    radix = population + 1
    code_of = (radix ** np.arange(n - 1, -1, -1)).astype(np.int64)
    table_codes = states @ code_of
    order = np.argsort(table_codes)
    pos = np.searchsorted(table_codes[order], rows @ code_of)
    mass = np.bincount(order[pos], weights=weights, minlength=len(states)).astype(float)
    return DistributionTable(states, mass / mass.sum(), population)


def empirical_state_distribution(trace: SimTrace, budget: int | None = None) -> DistributionTable:
    """Holding-time-weighted frequency of each queue vector after the burn-in."""
    if trace.states is None:
        raise ValueError("trace was simulated without record_states")
    cfg = trace.config
    b = trace.burn_in
    held = np.diff(trace.times[b:])
    return _tabulate(trace.states[b:-1].astype(np.int64), held, cfg.n, cfg.concurrency, budget)


def arrival_states(trace: SimTrace) -> np.ndarray:
    """Queue vector left by the other tasks at every dispatch instant."""
    if trace.states is None:
        raise ValueError("trace was simulated without record_states")
    seen = trace.states.astype(np.int64)
    seen[np.arange(seen.shape[0]), trace.k_next] -= 1
    return seen


def empirical_arrival_distribution(
    cfg: NetworkConfig,
    horizon: int,
    seed=None,
    burn_in=None,
    budget: int | None = None,
    service_law: str = "exponential",
) -> DistributionTable:
    """Frequency of the states seen by dispatched tasks, excluding themselves."""
    population = cfg.concurrency - 1
    if state_count(cfg.n, population) > (enum_budget() if budget is None else budget):
        raise CapacityError(
            f"arrival state space for n={cfg.n}, C-1={population} exceeds the budget")
    trace = simulate(cfg, horizon, seed=seed, burn_in=burn_in, record_states=True,
                     service_law=service_law)
    seen = arrival_states(trace)[trace.burn_in:]
    return _tabulate(seen, None, cfg.n, population, budget)


def write_trace(trace: SimTrace, path, queues_path=None) -> None:
    """Write ``k,t,j,k_next,i_k`` rows and a queue-snapshot sidecar CSV."""
    from .io import write_csv

    i_k = trace.dispatch_steps
    rows = zip(range(trace.horizon + 1), trace.times.tolist(), trace.nodes.tolist(),
               trace.k_next.tolist(), i_k.tolist())
    write_csv(path, ["k", "t", "j", "k_next", "i_k"], rows)
    if trace.states is not None:
        if queues_path is None:
            queues_path = str(path).rsplit(".", 1)[0] + ".queues.csv"
        header = ["k"] + [f"x_{i}" for i in range(trace.config.n)]
        write_csv(queues_path, header,
                  ([k] + row for k, row in enumerate(trace.states.tolist())))


def write_histograms(stats: DelayStats, path) -> None:
    from .io import write_csv

    write_csv(path, ["node", "delay_steps", "count"], stats.histogram_rows())
