import csv
import json

from streamsched.cli import atomic_write, main


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_rate_json_and_csv(capsys):
    code, out, _ = run(capsys, "rate", "--dag", "diamond", "--omega", "10")
    assert code == 0
    assert json.loads(out)["rates"]["t5"] == 30
    code, out, _ = run(capsys, "--format", "csv", "rate", "--dag", "linear", "--omega", "5")
    assert code == 0
    assert out.splitlines()[0] == "task,rate"


def test_global_flags_after_subcommand(capsys, tmp_path):
    code, _, _ = run(capsys, "rate", "--dag", "linear", "--omega", "5", "--out", tmp_path)
    assert code == 0
    assert (tmp_path / "rates.json").exists()


def test_model_build_synthetic_and_fixture(capsys, tmp_path):
    code, out, _ = run(capsys, "model", "build", "--synthetic", "linear:100", "--kind", "lin",
                       "--delta-omega", "50", "--tau-max", "10", "--out", tmp_path)
    assert code == 0
    doc = json.loads((tmp_path / "lin.json").read_text())
    assert doc["provenance"]["stop_reason"] == "tau_max"
    code, _, _ = run(capsys, "model", "build", "--fixture", "azure-table", "--out", tmp_path)
    assert code == 0
    code, out, _ = run(capsys, "model", "show", tmp_path / "azure-table.json")
    assert code == 0
    assert json.loads(out)["omega_hat"] == 60


def test_model_build_bad_inputs(capsys):
    assert run(capsys, "model", "build")[0] == 2
    assert run(capsys, "model", "build", "--synthetic", "cubic:3")[0] == 2
    assert run(capsys, "model", "show", "no-such-model")[0] == 2


def test_usage_errors(capsys, tmp_path):
    code, _, err = run(capsys, "map", "--dag", "linear", "--omega", "50", "--allocator", "LSA",
                       "--mapper", "SAM", "--out", tmp_path)
    assert code == 2 and "MBA" in err
    assert run(capsys, "rate", "--dag", "nowhere.json", "--omega", "1")[0] == 2
    bad = tmp_path / "cyclic.json"
    bad.write_text(json.dumps({"tasks": [{"id": "a", "kind": "pi"}, {"id": "b", "kind": "pi"}],
                               "edges": [{"from": "a", "to": "b"}, {"from": "b", "to": "a"}]}))
    assert run(capsys, "rate", "--dag", bad, "--omega", "1")[0] == 2
    bad.write_text(json.dumps({"tasks": [{"id": "a"}], "edges": [["a", "a"]]}))
    code, _, err = run(capsys, "rate", "--dag", bad, "--omega", "1")
    assert code == 2 and "malformed" in err
    assert run(capsys, "acquire", "--catalog", "D9", "--rho", "3")[0] == 2
    assert run(capsys, "simulate", "--dag", "linear", "--mapping", tmp_path / "missing.json")[0] == 2
    assert run(capsys, "no-such-command")[0] == 2


def test_infeasible_fixed_cluster(capsys, tmp_path):
    run(capsys, "acquire", "--rho", "1", "--out", tmp_path)
    code, _, err = run(capsys, "map", "--dag", "linear", "--omega", "200", "--allocator", "MBA",
                       "--cluster", tmp_path / "cluster.json", "--out", tmp_path)
    assert code == 1
    assert "infeasible" in err


def test_pipeline(capsys, tmp_path):
    assert run(capsys, "allocate", "--dag", "linear", "--omega", "50", "--allocator", "MBA",
               "--out", tmp_path)[0] == 0
    code, out, _ = run(capsys, "acquire", "--allocation", tmp_path / "allocation.json", "--catalog", "D1,D2,D3,D4",
                       "--out", tmp_path)
    assert code == 0 and json.loads(out)["vms"]
    code, out, _ = run(capsys, "map", "--dag", "linear", "--allocation", tmp_path / "allocation.json",
                       "--mapper", "SAM", "--out", tmp_path)
    assert code == 0 and json.loads(out)["slots"] >= json.loads(out)["rho"]
    code, out, _ = run(capsys, "predict", "--dag", "linear", "--mapping", tmp_path / "mapping.json",
                       "--cluster", tmp_path / "cluster.json")
    assert code == 0
    predicted = json.loads(out)["predicted_rate"]
    assert predicted > 0
    code, out, _ = run(capsys, "simulate", "--dag", "linear", "--mapping", tmp_path / "mapping.json",
                       "--cluster", tmp_path / "cluster.json", "--omega", predicted / 2,
                       "--duration", 60, "--warmup", 10, "--trace", tmp_path / "trace.csv")
    assert code == 0
    assert json.loads(out)["stable"] is True
    assert (tmp_path / "trace.csv").read_text().startswith("tuple_id,emit_time,sink_time")
    code, out, _ = run(capsys, "simulate", "--dag", "linear", "--mapping", tmp_path / "mapping.json",
                       "--cluster", tmp_path / "cluster.json", "--max-rate", "--step", 10,
                       "--duration", 60, "--warmup", 10)
    assert code == 0
    assert json.loads(out)["max_stable_rate"] > 0


def test_map_with_omega_writes_allocation(capsys, tmp_path):
    code, _, _ = run(capsys, "map", "--dag", "star", "--omega", "50", "--allocator", "lsa",
                     "--mapper", "rsm", "--out", tmp_path)
    assert code == 0
    assert json.loads((tmp_path / "allocation.json").read_text())["algorithm"] == "LSA"
    assert json.loads((tmp_path / "mapping.json").read_text())


def evaluate(capsys, out):
    return run(capsys, "evaluate", "--dag", "linear", "--rates", "50", "--duration", 60, "--warmup", 10,
               "--format", "csv", "--out", out)


def test_evaluate_summary_and_idempotence(capsys, tmp_path):
    code, out, _ = evaluate(capsys, tmp_path)
    assert code == 0
    first = (tmp_path / "summary.csv").read_text()
    assert out == first
    rows = list(csv.DictReader(first.splitlines()))
    assert len(rows) == 5
    assert {(r["allocator"], r["mapper"]) for r in rows} == {
        ("LSA", "DSM"), ("LSA", "RSM"), ("MBA", "DSM"), ("MBA", "RSM"), ("MBA", "SAM")}
    for r in rows:
        assert r["error"] == ""
        assert float(r["simulated_rate"]) > 0
    assert len(list((tmp_path / "cells").glob("*.json"))) == 5
    assert evaluate(capsys, tmp_path)[0] == 0
    assert (tmp_path / "summary.csv").read_text() == first


def test_evaluate_fixed_cluster(capsys, tmp_path):
    code, _, _ = run(capsys, "evaluate", "--dag", "linear", "--pairs", "MBA+SAM", "--fixed-cluster", "4",
                     "--duration", 60, "--warmup", 10, "--out", tmp_path)
    assert code == 0
    row = next(csv.DictReader((tmp_path / "summary.csv").read_text().splitlines()))
    assert int(row["slots"]) == 4 and float(row["planned_rate"]) > 0
    code, _, _ = run(capsys, "evaluate", "--pairs", "LSA+SAM", "--out", tmp_path)
    assert code == 2


def test_atomic_write_replaces(tmp_path):
    p = tmp_path / "x" / "f.txt"
    atomic_write(p, "one")
    atomic_write(p, "two")
    assert p.read_text() == "two"
    assert [q.name for q in p.parent.iterdir()] == ["f.txt"]
