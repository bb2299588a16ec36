"""YAML experiment configs and their validation.

A config is a mapping with a ``kind`` plus optional sections::

    kind: saturate2
    network:            # explicit network
      mu: [1.2, 1.2, 1.0, 1.0]
      p: uniform        # or a list
      concurrency: 100
    clusters:           # or nodes grouped by speed (first cluster = fast)
      sizes: [5, 5]
      mu: [1.2, 1.0]
      concurrency: 1000
    bound: {L: 1, B: 20, A: 100, T: 10000}
    seeds: [1]

Kind-specific scalars (``horizon``, ``service_law``, ...) sit at top level.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .bounds import BoundParams, ClusterSpec
from .network import NetworkConfig

KINDS = (
    "simulate", "transient", "arrival-check", "bound", "optimize", "physical-time",
    "train", "compare", "saturate2", "saturate3",
)

# file-level spellings accepted for each verb
ALIASES = {
    "bound-sweep": "bound",
    "optimize-sampling": "optimize",
    "compare-baselines": "compare",
    "saturation-2c": "saturate2",
    "saturation-3c": "saturate3",
}


class ConfigError(ValueError):
    """Invalid experiment config; the message names the offending field."""


@dataclass
class ExperimentConfig:
    kind: str
    seeds: list
    network: NetworkConfig | None = None
    clusters: ClusterSpec | None = None
    concurrency: int | None = None
    bound: BoundParams | None = None
    objective: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)
    out: str | None = None
    raw: dict = field(default_factory=dict)

    def get(self, key, default=None):
        return self.options.get(key, default)

    def require(self, key):
        if key not in self.options:
            raise ConfigError(f"{key}: required for kind {self.kind!r}")
        return self.options[key]

    def resolved_network(self, p=None) -> NetworkConfig:
        """The explicit network, or the cluster network at first-cluster probability ``p``."""
        if self.network is not None:
            return self.network if p is None else self.network.with_p(p)
        if self.clusters is None:
            raise ConfigError("network: a network or clusters section is required")
        spec = self.clusters
        if p is None:
            p = self.options.get("p_fast", spec.uniform_prob)
        try:
            return spec.network(p, self.concurrency)
        except ValueError as exc:
            raise ConfigError(f"clusters: {exc}") from None

    def digest(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()


def _network(section) -> NetworkConfig:
    if not isinstance(section, dict):
        raise ConfigError("network: expected a mapping")
    for key in ("mu", "concurrency"):
        if key not in section:
            raise ConfigError(f"network.{key}: missing")
    mu = np.asarray(section["mu"], dtype=float)
    p = section.get("p", "uniform")
    if isinstance(p, str):
        if p != "uniform":
            raise ConfigError(f"network.p: unknown keyword {p!r} (use 'uniform' or a list)")
        p = np.full(mu.size, 1.0 / mu.size)
    try:
        return NetworkConfig(mu, p, section["concurrency"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"network.{exc}") from None


def _clusters(section) -> tuple[ClusterSpec, int | None]:
    if not isinstance(section, dict):
        raise ConfigError("clusters: expected a mapping")
    for key in ("sizes", "mu"):
        if key not in section:
            raise ConfigError(f"clusters.{key}: missing")
    try:
        spec = ClusterSpec(tuple(section["sizes"]), tuple(section["mu"]))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"clusters: {exc}") from None
    c = section.get("concurrency")
    if c is not None and (int(c) != c or c < 1):
        raise ConfigError(f"clusters.concurrency: must be a positive integer, got {c!r}")
    return spec, None if c is None else int(c)


def _bound(section, concurrency) -> BoundParams:
    if not isinstance(section, dict):
        raise ConfigError("bound: expected a mapping")
    s = dict(section)
    s.setdefault("C", concurrency)
    for key in ("L", "A", "T", "C"):
        if s.get(key) is None:
            raise ConfigError(f"bound.{key}: missing")
    try:
        if "B" in s:
            if "G2" in s or "sigma2" in s:
                raise ConfigError("bound: give either B or (G2, sigma2), not both")
            return BoundParams.from_B(s["L"], s["B"], s["A"], s["T"], int(s["C"]), s.get("rho2", 0.0))
        return BoundParams(L=s["L"], G2=s.get("G2", 0.0), sigma2=s.get("sigma2", 0.0),
                           A=s["A"], T=s["T"], C=int(s["C"]), rho2=s.get("rho2", 0.0))
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bound.{exc}") from None


SECTIONS = {"kind", "seeds", "network", "clusters", "bound", "objective", "grid", "out"}


def parse_config(data: dict) -> ExperimentConfig:
    """Validate a decoded config mapping."""
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be a mapping")
    kind = data.get("kind")
    kind = ALIASES.get(kind, kind)
    if kind not in KINDS:
        raise ConfigError(f"kind: must be one of {', '.join(KINDS)}; got {data.get('kind')!r}")
    seeds = data.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = [seeds]
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("seeds: must be a non-empty list of integers")
    if any(not isinstance(s, int) or isinstance(s, bool) or s < 0 for s in seeds):
        raise ConfigError("seeds: every seed must be a non-negative integer")

    network = _network(data["network"]) if "network" in data else None
    clusters, concurrency = (None, None)
    if "clusters" in data:
        clusters, concurrency = _clusters(data["clusters"])
    if network is not None:
        concurrency = network.concurrency
    bound = _bound(data["bound"], concurrency) if "bound" in data else None
    for name in ("objective", "grid"):
        if name in data and not isinstance(data[name], dict):
            raise ConfigError(f"{name}: expected a mapping")
    options = {k: v for k, v in data.items() if k not in SECTIONS}
    if "service_law" in options and options["service_law"] not in ("exponential", "deterministic"):
        raise ConfigError("service_law: must be 'exponential' or 'deterministic'")
    return ExperimentConfig(
        kind=kind, seeds=list(seeds), network=network, clusters=clusters,
        concurrency=concurrency, bound=bound, objective=dict(data.get("objective", {})),
        grid=dict(data.get("grid", {})), options=options, out=data.get("out"), raw=data,
    )


def read_config_data(path) -> dict:
    """Decode a YAML config file without validating it."""
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config: file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config: not valid YAML ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be a mapping")
    return data


def load_config(path) -> ExperimentConfig:
    return parse_config(read_config_data(path))
