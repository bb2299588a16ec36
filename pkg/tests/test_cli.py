import json
import subprocess
import sys
from pathlib import Path

import pytest
import yaml

from fedqueue.cli import main
from fedqueue.config import ConfigError, load_config, parse_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

TINY = {
    "simulate": {"kind": "simulate", "network": {"mu": [2.0, 1.0], "p": "uniform", "concurrency": 3},
                 "horizon": 5000, "seeds": [1, 2], "write_trace": True},
    "transient": {"kind": "transient", "network": {"mu": [10, 10, 1, 1], "concurrency": 4},
                  "initial": "distinct", "horizon": 40, "replications": 20, "seeds": [3]},
    "arrival-check": {"kind": "arrival-check", "network": {"mu": [1.0, 0.5], "p": [0.5, 0.5],
                                                           "concurrency": 2},
                      "horizon": 200000, "seeds": [3]},
    "bound": {"kind": "bound", "clusters": {"sizes": [5, 5], "mu": [4.0, 1.0], "concurrency": 3},
              "bound": {"L": 1, "B": 1, "A": 1, "T": 1000},
              "grid": {"values": [0.05, 0.1, 0.15], "eta": {"min": 1e-3, "max": 0.1, "points": 5}},
              "oracle_horizon": 5000, "seeds": [1]},
    "optimize": {"kind": "optimize", "clusters": {"sizes": [5, 5], "mu": [4.0, 1.0], "concurrency": 3},
                 "bound": {"L": 1, "B": 20, "A": 100, "T": 10000}, "mu_f": [2, 4],
                 "grid": {"points": 6}, "oracle_horizon": 5000, "seeds": [1]},
    "physical-time": {"kind": "physical-time",
                      "clusters": {"sizes": [5, 5], "mu": [4.0, 1.0], "concurrency": 3},
                      "bound": {"L": 1, "B": 20, "A": 100, "T": 10000}, "time_budget": 100,
                      "grid": {"points": 6}, "oracle_horizon": 5000, "seeds": [1]},
    "compare": {"kind": "compare", "clusters": {"sizes": [5, 5], "mu": [4.0, 1.0], "concurrency": 3},
                "bound": {"L": 1, "B": 20, "A": 100, "T": 10000}, "grid": {"points": 6},
                "oracle_horizon": 5000, "seeds": [1]},
    "train": {"kind": "train", "network": {"mu": [4, 1, 1], "concurrency": 3},
              "objective": {"kind": "quadratic", "dim": 3, "sigma2": 0.1}, "eta": 0.05, "T": 300,
              "seeds": [1]},
    "saturate2": {"kind": "saturate2", "clusters": {"sizes": [2, 2], "mu": [1.2, 1.0],
                                                    "concurrency": 40},
                  "horizon": 20000, "p_fast": 0.2, "compare_uniform": True, "seeds": [1]},
    "saturate3": {"kind": "saturate3", "clusters": {"sizes": [1, 1, 1], "mu": [10.0, 1.2, 1.0],
                                                    "concurrency": 30},
                  "horizon": 20000, "seeds": [1]},
}

OUTPUTS = {
    "simulate": ["summary.json", "histograms.csv"],
    "transient": ["transient.csv", "summary.json"],
    "arrival-check": ["arrival.csv", "summary.json"],
    "bound": ["sweep.csv"],
    "optimize": ["sweep.csv", "optimize.json"],
    "physical-time": ["sweep.csv", "optimize.json"],
    "compare": ["compare.csv"],
    "train": ["metrics_seed1.csv", "summary.json"],
    "saturate2": ["summary.json", "histograms.csv"],
    "saturate3": ["summary.json", "histograms.csv"],
}


def write_config(tmp_path, data, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return path


def run_cli(tmp_path, data, out="out", verb=None):
    cfg = write_config(tmp_path, data)
    code = main([verb or data["kind"], "--config", str(cfg), "--out", str(tmp_path / out)])
    manifest = json.loads((tmp_path / out / "manifest.json").read_text())
    return code, manifest


@pytest.mark.parametrize("kind", sorted(TINY))
def test_every_verb_runs_and_writes_manifest(tmp_path, kind):
    code, manifest = run_cli(tmp_path, TINY[kind])
    assert code == 0, manifest
    assert manifest["status"] == "ok" and manifest["kind"] == kind
    assert len(manifest["config_sha256"]) == 64
    for name in OUTPUTS[kind]:
        assert (tmp_path / "out" / name).exists()
        assert name in manifest["outputs"]


def test_run_verb_dispatches_on_kind(tmp_path):
    code, manifest = run_cli(tmp_path, TINY["simulate"], verb="run")
    assert code == 0 and manifest["kind"] == "simulate"


@pytest.mark.parametrize("kind", ["simulate", "train", "optimize"])
def test_reruns_are_byte_identical(tmp_path, kind):
    run_cli(tmp_path, TINY[kind], out="a")
    run_cli(tmp_path, TINY[kind], out="b")
    for name in OUTPUTS[kind]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_override(tmp_path):
    cfg = write_config(tmp_path, TINY["simulate"])
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o"), "--seed", "7,8"]) == 0
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["seeds"] == [7, 8]


def test_simulate_summary_contents(tmp_path):
    run_cli(tmp_path, TINY["simulate"])
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert len(summary["mean_delay"]) == 2
    assert sum(summary["exact_mean_queue"]) == pytest.approx(3)
    header = (tmp_path / "out" / "trace_seed1.csv").read_text().splitlines()[0]
    assert header == "k,t,j,k_next,i_k"


def test_bad_probabilities_exit_code_two(tmp_path):
    out = tmp_path / "bad"
    code = main(["simulate", "--config", str(CONFIGS / "bad_p.yaml"), "--out", str(out)])
    assert code == 2
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "failed"
    assert "network.p: probabilities sum to 0.9" in manifest["error"]


def test_kind_and_verb_must_agree(tmp_path):
    code, manifest = run_cli(tmp_path, TINY["simulate"], verb="train")
    assert code == 2 and "kind" in manifest["error"]


def test_capacity_exit_code_three(tmp_path, monkeypatch):
    monkeypatch.setenv("FEDQUEUE_ENUM_BUDGET", "1")
    code, manifest = run_cli(tmp_path, TINY["arrival-check"])
    assert code == 3 and manifest["error"].startswith("capacity")


def test_runtime_failure_still_writes_manifest(tmp_path):
    data = dict(TINY["simulate"])
    data.pop("horizon")
    code, manifest = run_cli(tmp_path, data)
    assert code == 2 and "horizon" in manifest["error"]
    data = dict(TINY["train"], objective={"kind": "logistic", "dim": 2, "bogus": 1})
    code, manifest = run_cli(tmp_path, data, out="o2")
    assert code == 1 and manifest["status"] == "failed" and "bogus" in manifest["error"]


def test_missing_config_file(tmp_path):
    code = main(["simulate", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path / "o")])
    assert code == 2


def test_verify_gamma_suite(tmp_path, capsys):
    assert main(["verify", "gamma", "--out", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    assert "7/7 checks passed" in text and text.count("PASS") == 7
    assert json.loads((tmp_path / "manifest.json").read_text())["status"] == "ok"


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "fedqueue.cli", "--version"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip()


# -- config parsing ----------------------------------------------------------------------


def test_shipped_configs_parse():
    for path in CONFIGS.glob("*.yaml"):
        if path.name == "bad_p.yaml":
            with pytest.raises(ConfigError):
                load_config(path)
        else:
            assert load_config(path).kind


@pytest.mark.parametrize("data,field", [
    ({"kind": "nope"}, "kind"),
    ({"kind": "simulate", "seeds": [-1]}, "seeds"),
    ({"kind": "simulate", "seeds": []}, "seeds"),
    ({"kind": "simulate", "network": {"mu": [1.0]}}, "network.concurrency"),
    ({"kind": "simulate", "network": {"mu": [1.0, 1.0], "p": "skewed", "concurrency": 2}}, "network.p"),
    ({"kind": "simulate", "network": {"mu": [1.0, -1.0], "concurrency": 2}}, "network.mu"),
    ({"kind": "bound", "clusters": {"sizes": [1, 1], "mu": [2, 1], "concurrency": 2},
      "bound": {"L": 1, "B": 1, "G2": 1, "A": 1, "T": 10}}, "bound"),
    ({"kind": "bound", "clusters": {"sizes": [1], "mu": [2]}}, "clusters"),
    ({"kind": "simulate", "service_law": "pareto"}, "service_law"),
])
def test_config_errors_name_the_field(data, field):
    with pytest.raises(ConfigError, match=f"^{field}"):
        parse_config(data)


def test_aliases_and_cluster_network():
    cfg = parse_config({"kind": "saturation-2c", "clusters": {"sizes": [2, 3], "mu": [2.0, 1.0],
                                                              "concurrency": 5}})
    assert cfg.kind == "saturate2"
    net = cfg.resolved_network(0.1)
    assert net.p[:2].tolist() == [0.1, 0.1] and net.p[2:].sum() == pytest.approx(0.8)
    assert cfg.resolved_network().p.tolist() == [0.2] * 5
