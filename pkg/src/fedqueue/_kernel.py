"""Compiled event loop for the closed FIFO network."""

import numpy as np
from numba import njit

# Ids: initial tasks are 0..C-1, the task dispatched at server step k is C + k.


@njit(cache=True, nogil=True)
def run_closed_network(mu, init_nodes, routes, work, horizon, burn_in, record_states):
    """Advance the network through ``horizon + 1`` completions.

    ``work[tid]`` is the service requirement of task ``tid`` (service time is
    ``work[tid] / mu[node]``); ``routes[k]`` is the node receiving the task
    dispatched right after completion ``k``.  Ties between equal completion
    times go to the lowest node index.
    """
    n = mu.size
    c = init_nodes.size
    steps = horizon + 1

    queue = np.empty((n, c), dtype=np.int64)
    head = np.zeros(n, dtype=np.int64)
    size = np.zeros(n, dtype=np.int64)
    due = np.full(n, np.inf)

    for tid in range(c):
        node = init_nodes[tid]
        queue[node, (head[node] + size[node]) % c] = tid
        size[node] += 1
    init_state = size.copy()
    for node in range(n):
        if size[node] > 0:
            due[node] = work[queue[node, head[node]]] / mu[node]

    times = np.empty(steps)
    nodes = np.empty(steps, dtype=np.int32)
    task_ids = np.empty(steps, dtype=np.int64)
    if record_states:
        states = np.empty((steps, n), dtype=np.int32)
    else:
        states = np.empty((0, n), dtype=np.int32)

    queue_area = np.zeros(n)
    busy_time = np.zeros(n)
    busy_nodes = 0.0
    stat_start = 0.0
    last_t = 0.0

    for k in range(steps):
        j = 0
        t = due[0]
        for node in range(1, n):
            if due[node] < t:
                t = due[node]
                j = node

        if k > burn_in:
            dt = t - last_t
            for node in range(n):
                queue_area[node] += size[node] * dt
                if size[node] > 0:
                    busy_time[node] += dt
        elif k == burn_in:
            stat_start = t
        last_t = t

        tid = queue[j, head[j]]
        head[j] = (head[j] + 1) % c
        size[j] -= 1
        if size[j] > 0:
            due[j] = t + work[queue[j, head[j]]] / mu[j]
        else:
            due[j] = np.inf
        times[k] = t
        nodes[k] = j
        task_ids[k] = tid

        r = routes[k]
        new = c + k
        queue[r, (head[r] + size[r]) % c] = new
        size[r] += 1
        if size[r] == 1:
            due[r] = t + work[new] / mu[r]

        if k >= burn_in:
            active = 0
            for node in range(n):
                if size[node] > 0:
                    active += 1
            busy_nodes += active
        if record_states:
            for node in range(n):
                states[k, node] = size[node]

    return (times, nodes, task_ids, states, init_state, size.copy(),
            queue_area, busy_time, busy_nodes, stat_start)
