import csv
import json

import numpy as np
import pytest

from greedyctrl.cli import main
from greedyctrl.greedy import GreedyResult, OfflineConfig, greedy_offline
from greedyctrl.model import ParameterGrid, save_matrix, system_from_spec
from greedyctrl.online import online_control

HEAT_SMALL = {"system": {"builder": "heat", "dim": 10, "T": 0.1, "box": [[1, 2]]},
              "grid": {"k": 20}, "epsilon": 1e-6}


def write_config(path, cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


def read_csv(path):
    with open(path) as f:
        return list(csv.reader(f))


@pytest.fixture(autouse=True)
def no_env_out(monkeypatch):
    monkeypatch.delenv("GREEDYCTRL_OUT", raising=False)


def test_offline_writes_artifacts(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", HEAT_SMALL)
    out = tmp_path / "out"
    assert main(["offline", "--config", cfg, "--out", str(out)]) == 0
    for name in ("result.json", "history.csv", "bounds.json", "cost.csv"):
        assert (out / name).exists()
    rows = read_csv(out / "history.csv")
    assert rows[0] == ["n", "sigma_greedy", "sigma_canonical"]
    res = GreedyResult.load(out / "result.json")
    assert len(rows) == res.n + 2
    assert "n=" in capsys.readouterr().out


def test_offline_null_criterion(tmp_path):
    cfg = write_config(tmp_path / "c.json", dict(HEAT_SMALL, epsilon=100.0))
    out = tmp_path / "out"
    assert main(["offline", "--config", cfg, "--out", str(out)]) == 0
    assert GreedyResult.load(out / "result.json").n == 0


@pytest.mark.parametrize("bad", [
    "{not json",
    json.dumps(dict(HEAT_SMALL, colour="blue")),
    json.dumps(dict(HEAT_SMALL, system={"builder": "heat", "dim": 0, "T": 0.1, "box": [[1, 2]]})),
    json.dumps(dict(HEAT_SMALL, system={"builder": "heat", "dim": 10, "T": 0.1, "box": [[2, 1]]})),
    json.dumps(dict(HEAT_SMALL, grid={"k": 20, "spacing": 3})),
    json.dumps({"system": HEAT_SMALL["system"], "grid": {"k": 5}}),
    json.dumps(dict(HEAT_SMALL, epsilon=-1)),
])
def test_offline_bad_config(tmp_path, bad):
    (tmp_path / "c.json").write_text(bad)
    out = tmp_path / "out"
    assert main(["offline", "--config", str(tmp_path / "c.json"), "--out", str(out)]) == 2
    assert not out.exists()


def test_offline_missing_config(tmp_path):
    assert main(["offline", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 2


def test_offline_cap_exit(tmp_path):
    cfg = write_config(tmp_path / "c.json", dict(HEAT_SMALL, max_snapshots=1))
    out = tmp_path / "out"
    assert main(["offline", "--config", cfg, "--out", str(out)]) == 4
    assert GreedyResult.load(out / "result.json").termination == "cap"


def test_offline_uncontrollable_exit(tmp_path):
    save_matrix(tmp_path / "A.txt", np.diag([-1.0, -2.0]))
    save_matrix(tmp_path / "B.txt", np.array([[1.0], [0.0]]))
    save_matrix(tmp_path / "x0.txt", np.ones((2, 1)))
    save_matrix(tmp_path / "x1.txt", np.zeros((2, 1)))
    cfg = {"system": {"builder": "files", "T": 1.0, "box": [[0.5, 1.0]],
                      "files": {"A": "A.txt", "B": ["B.txt"], "x0": "x0.txt", "x1": "x1.txt"}},
           "grid": {"k": 3}, "epsilon": 1e-6, "steps": 50, "bounds_sample": 0}
    path = write_config(tmp_path / "c.json", cfg)
    assert main(["offline", "--config", path, "--out", str(tmp_path / "out")]) == 3


def test_env_overrides_out(tmp_path, monkeypatch):
    cfg = write_config(tmp_path / "c.json", HEAT_SMALL)
    monkeypatch.setenv("GREEDYCTRL_OUT", str(tmp_path / "env"))
    assert main(["offline", "--config", cfg, "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "env" / "result.json").exists()
    assert not (tmp_path / "flag").exists()


def test_flags_and_threads(tmp_path):
    cfg = write_config(tmp_path / "c.json", HEAT_SMALL)
    out = tmp_path / "out"
    assert main(["--threads", "1", "offline", "--config", cfg, "--out", str(out), "--nt", "300",
                 "--reuse-snapshots"]) == 0
    res = GreedyResult.load(out / "result.json")
    assert res.steps == 300 and res.config["reuse_snapshots"] is True


def test_affine_flag_rejected_for_heat(tmp_path):
    cfg = write_config(tmp_path / "c.json", HEAT_SMALL)
    assert main(["offline", "--config", cfg, "--out", str(tmp_path / "o"), "--affine"]) == 2


@pytest.fixture(scope="module")
def heat_result(tmp_path_factory):
    out = tmp_path_factory.mktemp("heat")
    cfg = out / "c.json"
    cfg.write_text(json.dumps(HEAT_SMALL))
    assert main(["offline", "--config", str(cfg), "--out", str(out)]) == 0
    return out / "result.json"


def test_online_outputs(tmp_path, heat_result, capsys):
    out = tmp_path / "on"
    assert main(["online", "--result", str(heat_result), "--nu", "1.4142135", "--out", str(out)]) == 0
    assert "endpoint_error=" in capsys.readouterr().out
    control = read_csv(out / "control.csv")
    assert control[0] == ["t", "u1"]
    traj = read_csv(out / "trajectory.csv")
    assert traj[0] == ["t"] + [f"x{i}" for i in range(1, 11)]
    assert len(traj) == len(control)
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary) >= {"nu", "alpha", "endpoint_error", "elapsed"}


def test_online_errors(tmp_path, heat_result):
    assert main(["online", "--result", str(tmp_path / "missing.json"), "--nu", "1.5"]) == 2
    out = tmp_path / "on"
    assert main(["online", "--result", str(heat_result), "--nu", "2.5", "--out", str(out)]) == 2
    assert not out.exists()


def test_online_roundtrip_bitwise(tmp_path):
    sys = system_from_spec(HEAT_SMALL["system"])
    res = greedy_offline(sys, OfflineConfig(1e-6, ParameterGrid.uniform(sys.box, 20)))
    res.save(tmp_path / "r.json")
    back = GreedyResult.load(tmp_path / "r.json")
    for nu in ([1.2345], res.selected[0].nu):
        a = online_control(sys, nu, res)
        b = online_control(system_from_spec(back.system_spec), nu, back)
        assert np.array_equal(a.alpha, b.alpha)
        assert np.array_equal(a.control.samples, b.control.samples)
        assert a.endpoint_error == b.endpoint_error


def test_bench_small_wave(tmp_path):
    out = tmp_path / "b"
    assert main(["bench", "wave", "--small", "--out", str(out)]) == 0
    rows = read_csv(out / "curves.csv")[1:]
    greedy = np.array([float(r[1]) for r in rows])
    canonical = np.array([float(r[2]) for r in rows])
    assert np.all(greedy[1:] <= canonical[1:])
    assert (out / "online" / "control.csv").exists()


def test_bench_unknown(tmp_path):
    assert main(["bench", "plate", "--out", str(tmp_path / "x")]) == 2


def test_cost_command(capsys, heat_result):
    assert main(["cost", "--N", "50", "--k", "100", "--n", "3", "--T", "0.1", "--dt", "0.001"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "quantity,value"
    table = dict(line.split(",") for line in lines[1:])
    assert float(table["offline"]) < float(table["naive"])
    assert main(["cost", "--N", "50"]) == 2
    assert main(["cost", "--result", str(heat_result)]) == 0
    assert "offline_measured_sweeps" in capsys.readouterr().out
