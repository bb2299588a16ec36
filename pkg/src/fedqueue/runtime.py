"""Asynchronous and synchronous federated SGD driven by simulated queue dynamics.

Server step ``k`` applies the gradient of the task completing at step ``k``
and immediately dispatches a new task on the updated model.  Gradients are
evaluated when a task is dispatched, on the model the client received, and
stored until the task completes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .io import write_csv
from .network import NetworkConfig
from .objectives import Objective
from .simulation import simulate

#: Completion step recorded for tasks still running at the horizon.
NEVER = np.iinfo(np.int64).max


@dataclass
class GradientLedger:
    """Every task of a run with its stored, scaled gradient.

    ``grads[t]`` is ``-g / (n p_i)`` for task ``t`` sent to node ``i`` on the
    model of step ``dispatch[t] + 1`` (``-1`` marks initial tasks, which
    use the starting model).  ``completion[t]`` is the step at which the
    task was applied, or ``NEVER``.
    """

    nodes: np.ndarray
    dispatch: np.ndarray
    completion: np.ndarray
    grads: np.ndarray

    def drop(self, task: int) -> "GradientLedger":
        """Copy without task ``task`` (fault injection for audits)."""
        keep = np.arange(self.nodes.size) != task
        return GradientLedger(self.nodes[keep], self.dispatch[keep],
                              self.completion[keep], self.grads[keep])

    def members(self, k: int) -> np.ndarray:
        """Tasks in flight at step ``k >= 1``: dispatched by ``k - 2``, applied at ``k`` or later."""
        return np.flatnonzero((self.dispatch <= k - 2) & (self.completion >= k))


@dataclass
class TrainRun:
    """History of one training run.

    ``grad_norm_sq[k]`` and ``f_values[k]`` describe the model after ``k``
    updates; ``times[k]`` is the physical time at which that model appeared.
    """

    algorithm: str
    eta: float
    p: np.ndarray | None
    seed: object
    steps: np.ndarray
    times: np.ndarray
    grad_norm_sq: np.ndarray
    f_values: np.ndarray
    final: np.ndarray
    iterates: np.ndarray | None = None
    virtual: np.ndarray | None = None
    ledger: GradientLedger | None = None
    extra: dict = field(default_factory=dict)

    def metric_rows(self):
        for k, t, g, f in zip(self.steps, self.times, self.grad_norm_sq, self.f_values):
            yield int(k), float(t), float(g), float(f)


def write_metrics(run: TrainRun, path) -> None:
    write_csv(path, ["step", "time", "grad_norm_sq", "f_value"], run.metric_rows())


def _metrics(obj: Objective, models: np.ndarray, every: int):
    idx = np.unique(np.r_[np.arange(0, len(models), every), len(models) - 1])
    grads = np.array([np.sum(obj.gradient(models[k]) ** 2) for k in idx])
    values = np.array([obj.value(models[k]) for k in idx])
    return idx, grads, values


def _seeds(seed):
    sim, grad = np.random.SeedSequence(seed).spawn(2)
    return sim, np.random.default_rng(grad)


def _check_eta(eta):
    if not eta > 0:
        raise ValueError(f"eta must be positive, got {eta}")


def run_generalized_async_sgd(
    obj: Objective,
    cfg: NetworkConfig,
    plan,
    T: int,
    seed=None,
    service_law: str = "exponential",
    initial="multiset",
    w0=None,
    metrics_every: int = 1,
) -> TrainRun:
    """Asynchronous SGD with importance-weighted client sampling.

    Parameters
    ----------
    obj : Objective
    cfg : NetworkConfig
        Service rates and concurrency; its sampling vector is replaced by
        the plan's.
    plan : SamplingPlan or (p, eta)
    T : int
        Last server step; ``T + 1`` updates are applied.
    seed : int or SeedSequence
        Drives both the queue dynamics and the gradient noise.
    """
    p, eta = (plan.p, plan.eta) if hasattr(plan, "eta") else plan
    _check_eta(eta)
    if obj.n != cfg.n:
        raise ValueError(f"objective has {obj.n} clients, network has {cfg.n} nodes")
    net = cfg.with_p(p)
    p = net.p
    n, c, d = net.n, net.concurrency, obj.dim
    sim_seed, rng = _seeds(seed)
    trace = simulate(net, T, seed=sim_seed, service_law=service_law, initial=initial,
                     record_states=False)

    weight = 1.0 / (n * p)
    tasks = c + T + 1
    nodes = np.r_[np.repeat(np.arange(n), trace.init_state), trace.k_next].astype(np.int64)
    dispatch = np.r_[np.full(c, -1), np.arange(T + 1)].astype(np.int64)
    completion = np.full(tasks, NEVER, dtype=np.int64)
    completion[trace.task_ids] = np.arange(T + 1)
    grads = np.empty((tasks, d))

    w = np.array(obj.initial_point() if w0 is None else w0, dtype=float)
    iterates = np.empty((T + 2, d))
    virtual = np.empty((T + 2, d))
    iterates[0] = virtual[0] = w
    for t in range(c):
        grads[t] = -weight[nodes[t]] * obj.stochastic_gradient(nodes[t], w, rng)
    mu = w + eta * grads[:c].sum(axis=0)
    virtual[1] = mu

    for k in range(T + 1):
        w = w + eta * grads[trace.task_ids[k]]
        iterates[k + 1] = w
        new = c + k
        grads[new] = -weight[nodes[new]] * obj.stochastic_gradient(nodes[new], w, rng)
        if k + 2 <= T + 1:
            mu = mu + eta * grads[new]
            virtual[k + 2] = mu

    idx, gns, fv = _metrics(obj, iterates, metrics_every)
    times = np.r_[0.0, trace.times][idx]
    return TrainRun(
        algorithm="generalized-async-sgd", eta=float(eta), p=p.copy(), seed=seed,
        steps=idx, times=times, grad_norm_sq=gns, f_values=fv, final=w,
        iterates=iterates, virtual=virtual,
        ledger=GradientLedger(nodes, dispatch, completion, grads),
        extra={"clients": trace.nodes.copy(), "dispatch_steps": trace.dispatch_steps},
    )


def run_async_sgd(obj: Objective, cfg: NetworkConfig, eta: float, T: int, seed=None,
                  **kw) -> TrainRun:
    """Asynchronous SGD with uniform client sampling."""
    p = np.full(cfg.n, 1.0 / cfg.n)
    run = run_generalized_async_sgd(obj, cfg, (p, eta), T, seed, **kw)
    run.algorithm = "async-sgd"
    return run


def check_virtual_identity(run: TrainRun) -> float:
    """Largest ``||mu_k - w_k - eta * sum(ledger_k)|| / (1 + ||w_k||)`` over ``k >= 1``."""
    if run.virtual is None or run.ledger is None:
        raise ValueError("run carries no virtual iterates or ledger")
    led = run.ledger
    worst = 0.0
    active = _active_sets(led, len(run.iterates) - 1)
    for k, members in active:
        gap = run.virtual[k] - run.iterates[k] - run.eta * led.grads[members].sum(axis=0)
        worst = max(worst, float(np.linalg.norm(gap) / (1.0 + np.linalg.norm(run.iterates[k]))))
    return worst


def ledger_sizes(run: TrainRun) -> np.ndarray:
    """``|G_k|`` for ``k = 1..T+1``."""
    return np.array([m.size for _, m in _active_sets(run.ledger, len(run.iterates) - 1)])


def _active_sets(led: GradientLedger, last: int):
    # sweep k upward, adding tasks at k = dispatch + 2 and removing after completion
    enter = np.argsort(led.dispatch, kind="stable")
    leave = np.argsort(led.completion, kind="stable")
    active: set[int] = set()
    a = b = 0
    for k in range(1, last + 1):
        while a < enter.size and led.dispatch[enter[a]] <= k - 2:
            active.add(int(enter[a]))
            a += 1
        while b < leave.size and led.completion[leave[b]] < k:
            active.discard(int(leave[b]))
            b += 1
        yield k, np.array(sorted(active), dtype=np.int64)


def run_fedbuff(obj: Objective, cfg: NetworkConfig, eta: float, Z: int, T_updates: int,
                seed=None, service_law: str = "exponential", initial="multiset",
                w0=None) -> TrainRun:
    """Buffered asynchronous aggregation.

    Every ``Z``-th completed task triggers one update with the plain mean of
    the buffered gradients.  Tasks are dispatched by ``cfg.p``.
    """
    _check_eta(eta)
    if int(Z) != Z or Z < 1:
        raise ValueError(f"buffer size Z must be a positive integer, got {Z}")
    if T_updates < 1:
        raise ValueError("T_updates must be >= 1")
    n, c, d = cfg.n, cfg.concurrency, obj.dim
    horizon = Z * T_updates - 1
    sim_seed, rng = _seeds(seed)
    trace = simulate(cfg, max(horizon, 1), seed=sim_seed, service_law=service_law,
                     initial=initial, record_states=False)

    tasks = c + horizon + 1
    nodes = np.r_[np.repeat(np.arange(n), trace.init_state), trace.k_next[:horizon + 1]]
    version = np.zeros(tasks, dtype=np.int64)
    grads = np.empty((tasks, d))
    w = np.array(obj.initial_point() if w0 is None else w0, dtype=float)
    for t in range(c):
        grads[t] = obj.stochastic_gradient(nodes[t], w, rng)

    models = [w.copy()]
    update_steps = []
    staleness = []
    buffer_nodes = []
    current = 0
    pending = []
    for k in range(horizon + 1):
        tid = trace.task_ids[k]
        pending.append(tid)
        if len(pending) == Z:
            w = w - eta * grads[pending].mean(axis=0)
            staleness.append(current - version[pending])
            buffer_nodes.append(nodes[pending].copy())
            current += 1
            models.append(w.copy())
            update_steps.append(k)
            pending = []
        new = c + k
        version[new] = current
        grads[new] = obj.stochastic_gradient(nodes[new], w, rng)

    models = np.array(models)
    idx, gns, fv = _metrics(obj, models, 1)
    times = np.r_[0.0, trace.times[update_steps]]
    return TrainRun(
        algorithm="fedbuff", eta=float(eta), p=cfg.p.copy(), seed=seed,
        steps=idx, times=times, grad_norm_sq=gns, f_values=fv, final=w, iterates=models,
        extra={"staleness": np.array(staleness), "buffer_nodes": np.array(buffer_nodes),
               "update_steps": np.array(update_steps)},
    )


def run_fedavg(obj: Objective, cfg: NetworkConfig, eta: float, clients: int, local_steps: int,
               rounds: int, seed=None, service_law: str = "exponential", w0=None) -> TrainRun:
    """Synchronous rounds of local SGD averaged over uniformly sampled clients.

    A round lasts as long as its slowest sampled client needs for
    ``local_steps`` service draws.
    """
    _check_eta(eta)
    n, d = cfg.n, obj.dim
    if not 1 <= clients <= n:
        raise ValueError(f"clients per round must lie in [1, {n}]")
    if local_steps < 1 or rounds < 1:
        raise ValueError("local_steps and rounds must be >= 1")
    rng = np.random.default_rng(seed)
    w = np.array(obj.initial_point() if w0 is None else w0, dtype=float)
    models = [w.copy()]
    durations = np.empty(rounds)
    picks = np.empty((rounds, clients), dtype=np.int64)
    for r in range(rounds):
        chosen = np.sort(rng.choice(n, size=clients, replace=False))
        if service_law == "exponential":
            work = rng.standard_exponential((clients, local_steps)).sum(axis=1)
        else:
            work = np.full(clients, float(local_steps))
        durations[r] = np.max(work / cfg.mu[chosen])
        local = np.empty((clients, d))
        for a, i in enumerate(chosen):
            v = w.copy()
            for _ in range(local_steps):
                v = v - eta * obj.stochastic_gradient(i, v, rng)
            local[a] = v
        w = local.mean(axis=0)
        models.append(w.copy())
        picks[r] = chosen
    models = np.array(models)
    idx, gns, fv = _metrics(obj, models, 1)
    return TrainRun(
        algorithm="fedavg", eta=float(eta), p=None, seed=seed,
        steps=idx, times=np.r_[0.0, np.cumsum(durations)], grad_norm_sq=gns, f_values=fv,
        final=w, iterates=models, extra={"durations": durations, "clients": picks},
    )


@dataclass
class UnbiasednessCheck:
    deviation: float
    envelope: float
    samples: int

    @property
    def passed(self) -> bool:
        return self.deviation <= self.envelope


def check_unbiased_sampling(obj: Objective, p, w, N: int, seed=None,
                            reweight: bool = True) -> UnbiasednessCheck:
    """Distance between the sampled-client gradient average and ``grad f(w)``.

    Draws ``N`` clients ``K ~ p`` and averages ``grad f_K(w) / (n p_K)``
    (or the plain ``grad f_K(w)`` when ``reweight`` is off).  The envelope
    is three empirical standard errors of that average.
    """
    p = np.asarray(p, dtype=float)
    if p.size != obj.n or np.any(p <= 0) or abs(p.sum() - 1) > 1e-12:
        raise ValueError("p must be a positive probability vector over the clients")
    rng = np.random.default_rng(seed)
    counts = np.bincount(rng.choice(obj.n, size=N, p=p), minlength=obj.n)
    g = obj.client_gradients(np.asarray(w, dtype=float))
    x = g / (obj.n * p)[:, None] if reweight else g
    freq = counts / N
    mean = freq @ x
    spread = float(freq @ np.sum(x**2, axis=1) - mean @ mean)
    envelope = 3.0 * np.sqrt(max(spread, 0.0) / N)
    return UnbiasednessCheck(float(np.linalg.norm(mean - obj.gradient(w))), float(envelope), N)


__all__ = [
    "GradientLedger", "TrainRun", "run_generalized_async_sgd", "run_async_sgd",
    "run_fedbuff", "run_fedavg", "check_virtual_identity", "ledger_sizes",
    "check_unbiased_sampling", "UnbiasednessCheck", "write_metrics",
]
