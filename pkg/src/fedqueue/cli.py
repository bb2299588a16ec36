"""Command-line entry point: ``fedqueue <verb> --config FILE --out DIR``.

Every run writes ``manifest.json`` into the output directory, also when it
fails.  Exit codes: 0 success, 1 failed checks or runtime error, 2 invalid
config, 3 state space over the enumeration budget.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bounds import (
    SimulatedDelayOracle, baseline_bounds, bound_coefficients, default_cap,
    default_grid, optimize_sampling, physical_time_bound, three_cluster_delay_bounds,
    two_cluster_delay_bounds,
)
from .config import ALIASES, KINDS, ConfigError, ExperimentConfig, parse_config, read_config_data
from .io import write_csv, write_json
from .network import CapacityError, arrival_distribution, busy_probabilities, expected_queue_lengths
from .objectives import LogisticObjective, QuadraticObjective
from .runtime import (
    check_virtual_identity, ledger_sizes, run_async_sgd, run_fedavg, run_fedbuff,
    run_generalized_async_sgd, write_metrics,
)
from .simulation import (
    empirical_arrival_distribution, run_replications, simulate, transient_delay_curve,
    write_histograms, write_trace,
)
from .verify import SUITES, run_suite

logger = logging.getLogger("fedqueue")


def _floats(values):
    return [None if v is None or (isinstance(v, float) and np.isnan(v)) else float(v) for v in values]


# -- simulation verbs --------------------------------------------------------


def _sim_kwargs(cfg: ExperimentConfig) -> dict:
    kw = {"service_law": cfg.get("service_law", "exponential"),
          "initial": cfg.get("initial", "multiset")}
    if "burn_in" in cfg.options:
        kw["burn_in"] = cfg.options["burn_in"]
    return kw


def _delay_summary(cfg: ExperimentConfig, net, stats) -> dict:
    summary = {
        "mean_delay": _floats(stats.mean_delay),
        "mean_queue": _floats(stats.mean_queue),
        "exact_mean_queue": _floats(expected_queue_lengths(net, net.concurrency)),
        "completed": stats.counts,
        "censored": stats.censored,
        "throughput": stats.throughput,
        "tau_max": stats.tau_max,
        "tau_c": stats.tau_c,
        "tau_sum": stats.tau_sum,
        "steps": stats.steps,
    }
    if cfg.clusters is not None:
        groups = cfg.clusters.groups
        summary["cluster_mean_delay"] = _floats(stats.cluster_means(groups))
        summary["cluster_mean_queue"] = _floats([stats.mean_queue[g].mean() for g in groups])
    return summary


def _simulate(cfg: ExperimentConfig, out: Path, jobs: int, p=None) -> tuple[dict, list]:
    net = cfg.resolved_network(p)
    horizon = int(cfg.require("horizon"))
    kw = _sim_kwargs(cfg)
    files = []
    if cfg.get("write_trace", False):
        for s in cfg.seeds:
            trace = simulate(net, horizon, seed=s, **kw)
            path = out / f"trace_seed{s}.csv"
            write_trace(trace, path)
            files.append(path.name)
    stats = run_replications(net, horizon, cfg.seeds, jobs=jobs, **kw)
    return _delay_summary(cfg, net, stats), files + [stats]


def cmd_simulate(cfg, out, jobs):
    summary, extra = _simulate(cfg, out, jobs)
    stats = extra.pop()
    write_histograms(stats, out / "histograms.csv")
    write_json(out / "summary.json", summary)
    return extra + ["histograms.csv", "summary.json"], True


def cmd_saturate2(cfg, out, jobs):
    spec = cfg.clusters
    if spec is None or len(spec.sizes) != 2:
        raise ConfigError("clusters: saturate2 needs exactly two clusters (fast first)")
    p_fast = float(cfg.get("p_fast", spec.uniform_prob))
    summary, extra = _simulate(cfg, out, jobs, p=p_fast)
    stats = extra.pop()
    write_histograms(stats, out / "histograms.csv")
    b = two_cluster_delay_bounds(spec.n, spec.sizes[0], spec.mu[0], spec.mu[1],
                                 cfg.concurrency, p_fast)
    summary["p_fast"] = p_fast
    summary["closed_form"] = dict(vars(b))
    files = extra + ["histograms.csv"]
    if cfg.get("compare_uniform", False) and p_fast != spec.uniform_prob:
        base, _ = _simulate(cfg, out, jobs, p=spec.uniform_prob)
        summary["uniform_cluster_mean_delay"] = base["cluster_mean_delay"]
        summary["delay_reduction"] = [u / v for u, v in zip(base["cluster_mean_delay"],
                                                             summary["cluster_mean_delay"])]
    write_json(out / "summary.json", summary)
    return files + ["summary.json"], True


def cmd_saturate3(cfg, out, jobs):
    spec = cfg.clusters
    if spec is None or len(spec.sizes) != 3:
        raise ConfigError("clusters: saturate3 needs exactly three clusters (fast, medium, slow)")
    summary, extra = _simulate(cfg, out, jobs)
    stats = extra.pop()
    write_histograms(stats, out / "histograms.csv")
    net = cfg.resolved_network()
    busy = float(busy_probabilities(net)[: spec.sizes[0]].mean())
    nf, nm = spec.sizes[0], spec.sizes[0] + spec.sizes[1]
    b = three_cluster_delay_bounds(spec.n, nf, nm, *spec.mu, cfg.concurrency, busy)
    summary["prob_fast_busy"] = busy
    summary["closed_form"] = dict(vars(b))
    write_json(out / "summary.json", summary)
    return extra + ["histograms.csv", "summary.json"], True


def cmd_transient(cfg, out, jobs):
    net = cfg.resolved_network()
    node = int(cfg.get("node", 0))
    horizon = int(cfg.require("horizon"))
    curve = transient_delay_curve(net, horizon, node, int(cfg.get("replications", 100)),
                                  seed=cfg.seeds[0], initial=cfg.get("initial", "multiset"),
                                  service_law=cfg.get("service_law", "exponential"))
    rows = zip(curve.k, curve.mean, curve.stderr, curve.count)
    write_csv(out / "transient.csv", ["k", "mean", "stderr", "count"], rows)
    write_json(out / "summary.json", {"node": node, "missing": curve.missing,
                                      "final_mean": float(np.nanmean(curve.mean[horizon // 2:]))})
    return ["transient.csv", "summary.json"], True


def cmd_arrival(cfg, out, jobs):
    net = cfg.resolved_network()
    horizon = int(cfg.require("horizon"))
    exact = arrival_distribution(net)
    tol = float(cfg.get("tolerance", 0.02))
    report, rows, ok = [], [], True
    for s in cfg.seeds:
        emp = empirical_arrival_distribution(net, horizon, seed=s,
                                             service_law=cfg.get("service_law", "exponential"))
        tv = emp.total_variation(exact)
        ok &= tv <= tol
        report.append({"seed": s, "total_variation": tv})
        for state, mass in exact:
            rows.append((s, " ".join(map(str, state)), emp[state], mass))
    write_csv(out / "arrival.csv", ["seed", "state", "empirical", "exact"], rows)
    write_json(out / "summary.json", {"runs": report, "tolerance": tol, "passed": ok})
    return ["arrival.csv", "summary.json"], ok


# -- bound verbs ---------------------------------------------------------------


def _fast_rates(cfg):
    return [float(v) for v in np.atleast_1d(cfg.get("mu_f", cfg.clusters.mu[0]))]


def _spec_with(cfg, mu_f):
    from .bounds import ClusterSpec

    spec = cfg.clusters
    return ClusterSpec(spec.sizes, (mu_f,) + spec.mu[1:])


def _grid(cfg, spec):
    if "values" in cfg.grid:
        return np.asarray(cfg.grid["values"], dtype=float)
    return default_grid(spec, int(cfg.grid.get("points", 50)))


def _oracle(cfg, spec, service_law=None):
    return SimulatedDelayOracle(
        spec, cfg.bound.C, horizon=int(cfg.get("oracle_horizon", 100_000)), seed=cfg.seeds[0],
        service_law=service_law or cfg.get("service_law", "exponential"))


def _need_bound(cfg):
    if cfg.bound is None or cfg.clusters is None:
        raise ConfigError("bound, clusters: both sections are required for bound verbs")


def _plan_rows(mu_f, plan):
    sw = plan.sweep
    u = plan.uniform_bound
    for p, eta, value in zip(sw.grid, sw.eta, sw.bound):
        yield mu_f, p, eta, value, u, 1.0 - value / u


SWEEP_HEADER = ["mu_f", "p", "eta", "bound", "bound_uniform", "improvement"]


def _optimize(cfg, out, jobs, physical):
    _need_bound(cfg)
    rows, best = [], []
    for mu_f in _fast_rates(cfg):
        spec = _spec_with(cfg, mu_f)
        oracle = _oracle(cfg, spec)
        if physical:
            plan = physical_time_bound(cfg.bound, spec, float(cfg.get("time_budget", 1000.0)),
                                       oracle, grid=_grid(cfg, spec), jobs=jobs)
        else:
            plan = optimize_sampling(cfg.bound, spec, oracle, grid=_grid(cfg, spec), jobs=jobs)
        rows.extend(_plan_rows(mu_f, plan))
        best.append({"mu_f": mu_f, "p_fast": plan.cluster_prob, "eta": plan.eta,
                     "bound": plan.bound_value, "bound_uniform": plan.uniform_bound,
                     "improvement": plan.improvement, "uniform": plan.cluster_prob == spec.uniform_prob,
                     "skipped": plan.sweep.skipped})
    write_csv(out / "sweep.csv", SWEEP_HEADER, rows)
    write_json(out / "optimize.json", {"plans": best})
    return ["sweep.csv", "optimize.json"], True


def cmd_optimize(cfg, out, jobs):
    return _optimize(cfg, out, jobs, physical=False)


def cmd_physical(cfg, out, jobs):
    return _optimize(cfg, out, jobs, physical=True)


def cmd_bound(cfg, out, jobs):
    """Bound against the step size for several sampling probabilities."""
    _need_bound(cfg)
    eta_spec = cfg.grid.get("eta", {"min": 1e-5, "max": 1e-1, "points": 50})
    etas = np.geomspace(eta_spec["min"], eta_spec["max"], int(eta_spec["points"]))
    rows = []
    for mu_f in _fast_rates(cfg):
        spec = _spec_with(cfg, mu_f)
        oracle = _oracle(cfg, spec)
        pu = spec.probabilities(spec.uniform_prob)
        cu = bound_coefficients(cfg.bound, pu, oracle(pu))
        for prob in _grid(cfg, spec):
            if not 0 < prob < spec.max_prob:
                continue
            p = spec.probabilities(prob)
            prof = oracle(p)
            c1, c2, c3 = bound_coefficients(cfg.bound, p, prof)
            cap = default_cap(cfg.bound, p, prof)
            for eta in etas:
                if eta > cap:
                    continue
                g = c1 / eta + c2 * eta + c3 * eta**2
                gu = cu[0] / eta + cu[1] * eta + cu[2] * eta**2
                rows.append((mu_f, prob, eta, g, gu, 1.0 - g / gu))
    write_csv(out / "sweep.csv", SWEEP_HEADER, rows)
    return ["sweep.csv"], True


def cmd_compare(cfg, out, jobs):
    """Optimized bound against FedBuff and AsyncSGD, using deterministic service by default."""
    _need_bound(cfg)
    law = cfg.get("service_law", "deterministic")
    rows = []
    for mu_f in _fast_rates(cfg):
        spec = _spec_with(cfg, mu_f)
        oracle = _oracle(cfg, spec, service_law=law)
        plan = optimize_sampling(cfg.bound, spec, oracle, grid=_grid(cfg, spec), jobs=jobs)
        st = oracle.stats(spec.probabilities(spec.uniform_prob))
        base = baseline_bounds(cfg.bound, st.tau_max, st.tau_c, float(st.tau_sum.sum() / st.steps),
                               spec.n, exponential=(law == "exponential"))
        rows.append((mu_f, plan.bound_value, base.fedbuff, base.asyncsgd,
                     1.0 - plan.bound_value / base.fedbuff, 1.0 - plan.bound_value / base.asyncsgd))
    write_csv(out / "compare.csv", ["mu_f", "generalized", "fedbuff", "asyncsgd",
                                    "improvement_fedbuff", "improvement_asyncsgd"], rows)
    return ["compare.csv"], True


# -- training --------------------------------------------------------------------


def _objective(cfg, n):
    spec = dict(cfg.objective)
    kind = spec.pop("kind", "quadratic")
    dim = int(spec.pop("dim", 10))
    sigma2 = float(spec.pop("sigma2", 0.0))
    seed = spec.pop("seed", 0)
    if kind == "quadratic":
        spread = float(spec.pop("spread", 1.0))
        if spread == 0:
            return QuadraticObjective.homogeneous(n, dim, sigma2)
        return QuadraticObjective.heterogeneous(n, dim, spread, sigma2, seed=seed)
    if kind == "logistic":
        return LogisticObjective.synthetic(n, dim, sigma2=sigma2, seed=seed, **spec)
    raise ConfigError(f"objective.kind: must be quadratic or logistic, got {kind!r}")


def cmd_train(cfg, out, jobs):
    net = cfg.resolved_network()
    obj = _objective(cfg, net.n)
    algo = cfg.get("algorithm", "generalized")
    eta = float(cfg.require("eta"))
    law = cfg.get("service_law", "exponential")
    files, report, ok = [], [], True
    for s in cfg.seeds:
        if algo == "generalized":
            run = run_generalized_async_sgd(obj, net, (net.p, eta), int(cfg.require("T")), s, law)
        elif algo == "async":
            run = run_async_sgd(obj, net, eta, int(cfg.require("T")), s, service_law=law)
        elif algo == "fedbuff":
            run = run_fedbuff(obj, net, eta, int(cfg.get("buffer", 10)), int(cfg.require("T")), s, law)
        elif algo == "fedavg":
            run = run_fedavg(obj, net, eta, int(cfg.get("clients", net.n)),
                             int(cfg.get("local_steps", 1)), int(cfg.require("T")), s, law)
        else:
            raise ConfigError("algorithm: must be generalized, async, fedbuff or fedavg")
        path = f"metrics_seed{s}.csv"
        write_metrics(run, out / path)
        files.append(path)
        entry = {"seed": s, "final_grad_norm_sq": run.grad_norm_sq[-1],
                 "min_grad_norm_sq": run.grad_norm_sq.min(), "final_f": run.f_values[-1]}
        if run.ledger is not None:
            res = check_virtual_identity(run)
            sizes = np.unique(ledger_sizes(run))
            entry.update(identity_residual=res, ledger_sizes=sizes)
            ok &= res <= 1e-9 and sizes.size == 1
        report.append(entry)
    write_json(out / "summary.json", {"algorithm": algo, "runs": report})
    return files + ["summary.json"], ok


COMMANDS = {
    "simulate": cmd_simulate,
    "transient": cmd_transient,
    "arrival-check": cmd_arrival,
    "bound": cmd_bound,
    "optimize": cmd_optimize,
    "physical-time": cmd_physical,
    "train": cmd_train,
    "compare": cmd_compare,
    "saturate2": cmd_saturate2,
    "saturate3": cmd_saturate3,
}


# -- driver ----------------------------------------------------------------------


def _parse_seeds(text):
    try:
        return [int(s) for s in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers: {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedqueue", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in ("run",) + KINDS:
        sp = sub.add_parser(verb, help="run the experiment kind named in the config" if verb == "run"
                            else f"{verb} experiment")
        sp.add_argument("--config", required=True, help="YAML experiment config")
        sp.add_argument("--out", help="output directory (default: config 'out' or ./out)")
        sp.add_argument("--seed", type=_parse_seeds, help="seed list overriding the config")
        sp.add_argument("--jobs", type=int, default=1, help="parallel workers")
    vp = sub.add_parser("verify", help="run cross-module oracle suites")
    vp.add_argument("suite", choices=sorted(SUITES) + ["all"])
    vp.add_argument("--seed", type=int, default=0)
    vp.add_argument("--out", help="directory for the manifest")
    return parser


def _verify(args) -> int:
    checks = run_suite(args.suite, seed=args.seed)
    width = max(len(c.suite) + len(c.name) for c in checks) + 3
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {(c.suite + ' / ' + c.name).ljust(width)} {c.detail}")
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    if args.out:
        write_json(Path(args.out) / "manifest.json", {
            "verb": "verify", "suite": args.suite, "seeds": [args.seed], "version": __version__,
            "status": "failed" if failed else "ok",
            "failures": [f"{c.suite}/{c.name}" for c in failed]})
    return 1 if failed else 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    if args.verb == "verify":
        return _verify(args)

    out = Path(args.out or "out")
    manifest = {"verb": args.verb, "config": str(args.config), "version": __version__,
                "status": "failed", "outputs": []}
    code = 1
    try:
        raw = read_config_data(args.config)
        if args.verb != "run":
            kind = raw.setdefault("kind", args.verb)
            if ALIASES.get(kind, kind) != args.verb:
                raise ConfigError(f"kind: config declares {kind!r} but the verb is {args.verb!r}")
        if args.seed:
            raw["seeds"] = args.seed
        cfg = parse_config(raw)
        if args.out is None and cfg.out:
            out = Path(cfg.out)
        manifest.update(kind=cfg.kind, config_sha256=cfg.digest(), seeds=cfg.seeds)
        out.mkdir(parents=True, exist_ok=True)
        files, ok = COMMANDS[cfg.kind](cfg, out, max(1, args.jobs))
        manifest["outputs"] = [str(f) for f in files]
        manifest["status"] = "ok" if ok else "failed"
        if not ok:
            manifest["error"] = "one or more checks failed; see summary.json"
        code = 0 if ok else 1
    except ConfigError as exc:
        manifest["error"] = f"invalid config: {exc}"
        print(f"error: invalid config: {exc}", file=sys.stderr)
        code = 2
    except CapacityError as exc:
        manifest["error"] = f"capacity: {exc}"
        print(f"error: {exc}", file=sys.stderr)
        code = 3
    except Exception as exc:  # noqa: BLE001 - any failure still leaves a manifest
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        logger.exception("experiment failed")
        code = 1
    write_json(out / "manifest.json", manifest)
    return code


if __name__ == "__main__":
    sys.exit(main())
