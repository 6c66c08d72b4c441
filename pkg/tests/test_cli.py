import json
import subprocess
import sys

import pytest

from flexep.cli import main


@pytest.fixture()
def loads_file(tmp_path):
    path = tmp_path / "loads.jsonl"
    path.write_text('{"step":0,"layer":0,"counts":[10,20,30,40]}\n')
    return path


def test_plan_writes_allocation_and_placement(loads_file, tmp_path, capsys):
    out = tmp_path / "plan.json"
    rc = main(
        [
            "plan",
            "--loads",
            str(loads_file),
            "-n",
            "5",
            "-c",
            "4",
            "-f",
            "2",
            "--out",
            str(out),
        ]
    )
    assert rc == 0
    obj = json.loads(out.read_text())
    assert obj["allocation"]["replicas"] == [2, 4, 6, 8]
    assert len(obj["placement"]["slots"]) == 4
    err = capsys.readouterr().err
    assert "replicas" in err


def test_plan_infeasible_exit_2(loads_file, capsys):
    rc = main(["plan", "--loads", str(loads_file), "-n", "1", "-c", "1"])
    assert rc == 2
    assert "cannot hold one replica per expert" in capsys.readouterr().err


def test_recover_prob_exact_row(loads_file, capsys):
    rc = main(
        [
            "recover-prob",
            "--loads",
            str(loads_file),
            "-n",
            "5",
            "-c",
            "4",
            "-f",
            "2",
            "--k",
            "3",
            "--strategies",
            "mro",
        ]
    )
    assert rc == 0
    out = capsys.readouterr().out
    assert "3,mro,7,10,0.700000" in out


def test_recover_prob_k_zero_and_k_n(loads_file, capsys):
    rc = main(
        [
            "recover-prob",
            "--loads",
            str(loads_file),
            "-n",
            "5",
            "-c",
            "4",
            "--k-max",
            "5",
        ]
    )
    assert rc == 0
    rows = capsys.readouterr().out.strip().splitlines()[1:]
    for row in rows:
        k, strat, num, den, real = row.split(",")
        if k == "0":
            assert num == den
        if k == "5":
            assert num == "0"


def test_recover_prob_cap_suggests_mc(tmp_path, capsys):
    path = tmp_path / "loads.jsonl"
    path.write_text(
        json.dumps({"step": 0, "layer": 0, "counts": [1] * 8}) + "\n"
    )
    rc = main(
        [
            "recover-prob",
            "--loads",
            str(path),
            "-n",
            "40",
            "-c",
            "1",
            "-f",
            "1",
            "--k",
            "20",
            "--strategies",
            "mro",
        ]
    )
    assert rc == 1
    assert "--mc" in capsys.readouterr().err


def test_recover_prob_mc_path(tmp_path, capsys):
    path = tmp_path / "loads.jsonl"
    path.write_text(
        json.dumps({"step": 0, "layer": 0, "counts": [1] * 8}) + "\n"
    )
    rc = main(
        [
            "recover-prob",
            "--loads",
            str(path),
            "-n",
            "40",
            "-c",
            "1",
            "-f",
            "1",
            "--k",
            "20",
            "--strategies",
            "mro",
            "--mc",
            "500",
            "--seed",
            "11",
        ]
    )
    assert rc == 0
    out = capsys.readouterr().out
    assert out.startswith("k_failed,strategy")
    assert "20,mro,,," in out


def test_dispatch_from_matrices(tmp_path, capsys):
    t = tmp_path / "t.json"
    r = tmp_path / "r.json"
    t.write_text("[[5, 5]]")
    r.write_text("[[1, 0]]")
    rc = main(["dispatch", "--t-matrix", str(t), "--r-matrix", str(r)])
    assert rc == 0
    obj = json.loads(capsys.readouterr().out)
    assert obj["ranks"][1]["D"] == [[5, 0]]
    assert obj["ranks"][0]["recv"] == [0, 5]


def test_migrate_identity_zero_cost(tmp_path, capsys):
    plan = {
        "layer": 0,
        "n_experts": 2,
        "slots": [[0, 1], [0, 1]],
    }
    old = tmp_path / "old.json"
    new = tmp_path / "new.json"
    old.write_text(json.dumps(plan))
    new.write_text(json.dumps(plan))
    rc = main(["migrate", "--old-plan", str(old), "--new-plan", str(new)])
    assert rc == 0
    obj = json.loads(capsys.readouterr().out)
    assert obj["cost"] == 0
    assert obj["transfers"] == []


def test_gen_trace_skew_values(capsys):
    rc = main(
        [
            "gen-trace",
            "--kind",
            "skew-sweep",
            "--experts",
            "8",
            "--tokens",
            "8000",
            "--ratio",
            "4",
        ]
    )
    assert rc == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["counts"][0] == 4000
    assert sum(rec["counts"]) == 8000
    assert sorted(rec["counts"][1:]) == [571, 571, 571, 571, 572, 572, 572]


def test_gen_trace_uniform(capsys):
    rc = main(
        ["gen-trace", "--kind", "skew-sweep", "--experts", "8", "--tokens", "800"]
    )
    assert rc == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["counts"] == [100] * 8


def test_gen_trace_ratio_below_one_rejected(capsys):
    rc = main(
        [
            "gen-trace",
            "--kind",
            "skew-sweep",
            "--experts",
            "8",
            "--ratio",
            "0.5",
        ]
    )
    assert rc == 2


def test_gen_trace_deterministic(tmp_path):
    a = tmp_path / "a.jsonl"
    b = tmp_path / "b.jsonl"
    for out in (a, b):
        rc = main(
            [
                "gen-trace",
                "--kind",
                "synthetic-spot",
                "--nodes",
                "10",
                "--duration",
                "600",
                "--seed",
                "9",
                "--out",
                str(out),
            ]
        )
        assert rc == 0
    assert a.read_bytes() == b.read_bytes()
    from flexep.core import parse_availability_trace

    trace = parse_availability_trace(a.read_text())
    assert trace.events[0].nodes == tuple(range(10))


def test_simulate_csv(tmp_path, capsys):
    loads = tmp_path / "loads.jsonl"
    loads.write_text('{"step":0,"layer":0,"counts":[1,1,1,1]}\n')
    avail = tmp_path / "avail.jsonl"
    avail.write_text('{"t":0,"kind":"add","nodes":[0,1]}\n')
    cfg = tmp_path / "sim.json"
    cfg.write_text(
        json.dumps(
            {
                "cluster": {"n_nodes": 2, "slots_per_node": 4, "fault_threshold": 1},
                "cost_model": {"step_overhead_s": 0.01, "reconfig_s": 1},
                "n_layers": 1,
                "n_experts": 4,
                "strategy": "adaptive",
                "batch_tokens_per_node": 100,
                "load_trace": "loads.jsonl",
                "availability_trace": "avail.jsonl",
                "duration_s": 2.0,
            }
        )
    )
    out = tmp_path / "report.csv"
    rc = main(["simulate", "--config", str(cfg), "--out", str(out)])
    assert rc == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "time_s,live,utilized,throughput,cum_samples,event"
    assert len(lines) > 1


def test_console_entry_point_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "flexep", "gen-trace", "--kind", "skew-sweep"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0
    assert proc.stdout.startswith('{"step"')
