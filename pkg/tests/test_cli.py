import csv
import json
from pathlib import Path

import pytest

from tokenwalk.algorithms import ConfigError
from tokenwalk.cli import EXIT_INVALID, EXIT_OK, EXIT_SOLVER, EXIT_THEOREM, main
from tokenwalk.data import parse_libsvm
from tokenwalk.experiment import ExperimentConfig, load_config
from tokenwalk.losses import LossModel, SolverError

EXPERIMENTS = Path(__file__).resolve().parents[1] / "experiments"

BASE = {
    "name": "t",
    "synthetic": {"kind": "regression", "n_rows": 300, "p": 4},
    "n_agents": 6,
    "zeta": 0.7,
    "max_events": 40,
    "compute_model": "constant",
    "compute_constant": 1e-4,
    "tau": 0.5,
}


@pytest.fixture
def write_cfg(tmp_path):
    def write(**kw):
        path = tmp_path / f"cfg{len(list(tmp_path.glob('cfg*')))}.json"
        path.write_text(json.dumps({**BASE, **kw}))
        return str(path)

    return write


@pytest.fixture(autouse=True)
def out_root(tmp_path, monkeypatch):
    root = tmp_path / "runs"
    monkeypatch.setenv("TOKENWALK_OUT_DIR", str(root))
    return root


@pytest.mark.parametrize("path", sorted(EXPERIMENTS.glob("*.json")), ids=lambda p: p.stem)
def test_shipped_configs_load(path):
    cfg = load_config(path)
    assert cfg.to_dict()["name"] == cfg.name


def test_shipped_config_is_echoed(out_root):
    assert main(["run", str(EXPERIMENTS / "race_cpusmall.json"), "--max-events", "5"]) == EXIT_OK
    m = json.loads((out_root / "race_cpusmall" / "manifest.json").read_text())["config"]
    assert (m["n_agents"], m["zeta"], m["n_walks"], m["tau"], m["algorithm"]) == (20, 0.7, 5, 0.1, "apibcd")
    labels = {e["label"]: e for e in m["algorithms"]}
    assert labels["I-BCD"]["tau"] == 1.0 and labels["WPG"]["alpha"] == 0.5


@pytest.mark.parametrize("kw, match", [
    (dict(tau=0), "tau"),
    (dict(n_walks=7), "exceeds"),
    (dict(zeta=1.5), "zeta"),
    (dict(colour="red"), "unknown config keys"),
    (dict(synthetic=None), "dataset"),
])
def test_validation_messages(kw, match):
    with pytest.raises(ConfigError, match=match):
        ExperimentConfig.from_dict({**BASE, **kw})


def test_run_zero_events_header_only(write_cfg, out_root):
    assert main(["run", write_cfg(max_events=0)]) == EXIT_OK
    assert (out_root / "t" / "trace.csv").read_text() == (
        "event,sim_time_s,comm_units,walk_id,agent,objective,train_metric,test_metric\n"
    )


def test_rerun_from_manifest_is_byte_identical(write_cfg, out_root):
    assert main(["run", write_cfg(algorithm="apibcd", n_walks=3), "--name", "a"]) == EXIT_OK
    assert main(["run", str(out_root / "a" / "manifest.json"), "--name", "b"]) == EXIT_OK
    a, b = (out_root / "a" / "trace.csv").read_bytes(), (out_root / "b" / "trace.csv").read_bytes()
    assert a == b and len(a.splitlines()) == 41
    shards = json.loads((out_root / "a" / "shards.json").read_text())
    assert sorted(shards) == [str(i) for i in range(6)]


def test_precedence_file_then_set_then_flags(write_cfg, out_root):
    path = write_cfg(tau=0.5, seed=1)
    assert main(["run", path, "--set", "tau=2.0", "--set", "seed=3", "--seed", "4"]) == EXIT_OK
    m = json.loads((out_root / "t" / "manifest.json").read_text())
    assert m["config"]["tau"] == 2.0 and m["seed"] == 4


def test_out_dir_flag_beats_environment(write_cfg, tmp_path, out_root):
    assert main(["run", write_cfg(), "--out-dir", str(tmp_path / "elsewhere")]) == EXIT_OK
    assert (tmp_path / "elsewhere" / "t" / "trace.csv").exists() and not out_root.exists()


def test_exit_codes(write_cfg, tmp_path, monkeypatch):
    assert main(["run", write_cfg(tau=-1)]) == EXIT_INVALID
    assert main(["run", str(tmp_path / "missing.json")]) == EXIT_INVALID
    assert main(["run", write_cfg(), "--set", "oops"]) == EXIT_INVALID

    def broken(self, *a, **kw):
        raise SolverError("no convergence", 1.0)

    monkeypatch.setattr(LossModel, "prox", broken)
    assert main(["run", write_cfg()]) == EXIT_SOLVER


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_compare_single_algorithm_matches_run(write_cfg, out_root):
    path = write_cfg(algorithms=[{"algorithm": "ibcd", "tau": 0.5}])
    assert main(["compare", path]) == EXIT_OK
    rows = read_rows(out_root / "t" / "comparison.csv")
    assert main(["run", path, "--algorithm", "ibcd", "--name", "solo"]) == EXIT_OK
    solo = read_rows(out_root / "solo" / "trace.csv")
    assert [{k: v for k, v in r.items() if k != "algorithm"} for r in rows] == solo


def test_compare_reduction_rows_and_order(write_cfg, out_root):
    path = write_cfg(algorithms=[
        {"label": "ibcd", "algorithm": "ibcd"},
        {"label": "api1", "algorithm": "apibcd", "n_walks": 1, "fresh_tokens": True},
        {"label": "wpg", "algorithm": "wpg", "alpha": 0.5},
    ], inner_tol=1e-12)
    assert main(["compare", path]) == EXIT_OK
    rows = read_rows(out_root / "t" / "comparison.csv")
    by = {}
    for r in rows:
        by.setdefault(r["algorithm"], []).append(r)
    assert list(by) == ["ibcd", "api1", "wpg"]
    assert [r["objective"] for r in by["ibcd"]] == [r["objective"] for r in by["api1"]]
    assert [int(r["event"]) for r in by["wpg"]] == list(range(1, 41))


def test_verify_vacuous_and_passing(write_cfg, out_root):
    assert main(["verify", "thm1", write_cfg(max_events=0)]) == EXIT_OK
    path = write_cfg(seeds=[0, 1], max_events=300)
    assert main(["verify", "thm2", path, "--n-walks", "3"]) == EXIT_OK
    report = json.loads((out_root / "t" / "verify_thm2.json").read_text())
    assert report["passed"] and len(report["runs"]) == 2
    assert all(r["iterations"] == 300 and r["min_slack"] >= 0 for r in report["runs"])


def test_verify_sentinel_is_flagged(out_root):
    path = str(EXPERIMENTS / "verify_sentinel.json")
    assert main(["verify", "thm1", path, "--inner-tol", "1e-2"]) == EXIT_THEOREM
    report = json.loads((out_root / "verify_sentinel" / "verify_thm1.json").read_text())
    assert report["runs"][0]["violations"] > 0


def test_gendata(tmp_path):
    out = tmp_path / "g" / "d.libsvm"
    assert main(["gendata", str(out), "--n-rows", "30", "--p", "5", "--seed", "2"]) == EXIT_OK
    first = out.read_text()
    truth = json.loads(Path(f"{out}.truth.json").read_text())
    assert len(truth["x_true"]) == 5 and truth["seed"] == 2
    ds = parse_libsvm(first, n_features=5)
    assert ds.n_rows == 30
    assert main(["gendata", str(out), "--n-rows", "30", "--p", "5", "--seed", "2"]) == EXIT_OK
    assert out.read_text() == first
    empty = tmp_path / "e.libsvm"
    assert main(["gendata", str(empty), "--n-rows", "0", "--task", "classification"]) == EXIT_OK
    assert empty.read_text() == ""
