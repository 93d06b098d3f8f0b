import csv
import json

import pytest

from hieragg.cli import EXIT_CONFIG, EXIT_OK, EXIT_VALIDATION, main, parse_range
from hieragg.hierarchy import build_nested_hierarchy, write_hierarchy


@pytest.fixture
def tree(tmp_path):
    path = tmp_path / "h.ndjson"
    with open(path, "w") as fh:
        write_hierarchy(build_nested_hierarchy(2, 2), fh)
    return path


def test_parse_range():
    assert parse_range("1..3") == [1, 2, 3]
    assert parse_range("2,5") == [2, 5]


def test_validate_ok(tree, capsys):
    assert main(["validate", "--hierarchy", str(tree)]) == EXIT_OK
    assert "depth 2" in capsys.readouterr().out


def test_validate_cycle(tmp_path, capsys):
    p = tmp_path / "bad.ndjson"
    p.write_text('{"child": "a", "parents": ["b"]}\n{"child": "b", "parents": ["a"]}\n')
    assert main(["validate", "--hierarchy", str(p)]) == EXIT_VALIDATION
    assert "cycle" in capsys.readouterr().err


def test_validate_duplicate(tmp_path):
    p = tmp_path / "dup.ndjson"
    p.write_text('{"child": "a", "parents": ["g"]}\n{"child": "a", "parents": ["h"]}\n')
    assert main(["validate", "--hierarchy", str(p)]) == EXIT_VALIDATION


def test_missing_file_is_config_error(tmp_path):
    assert main(["validate", "--hierarchy", str(tmp_path / "nope")]) == EXIT_CONFIG


def test_run_synthetic(tree, tmp_path):
    out = tmp_path / "m.csv"
    res = tmp_path / "r.ndjson"
    code = main([
        "run", "--hierarchy", str(tree), "--input", "synthetic", "--instances", "2",
        "--partitions", "4", "--capacity", "100", "--seed", "3", "--duration", "5",
        "--out", str(out), "--results", str(res),
    ])
    assert code == EXIT_OK
    rows = list(csv.DictReader(open(out)))
    assert list(rows[0]) == ["t_sec", "records_in", "records_out", "avg_latency_ms", "running_instances"]
    assert sum(int(r["records_in"]) for r in rows) == 20
    results = [json.loads(line) for line in open(res)]
    assert {"group", "sum", "count", "ts"} == set(results[0])
    assert any(r["group"] == "g0.0" for r in results)


def test_run_replay_with_changes(tree, tmp_path):
    meas = tmp_path / "in.ndjson"
    meas.write_text("".join(
        json.dumps({"sensor": f"s{i}", "value": float(i), "ts": 100 * i}) + "\n" for i in range(4)
    ))
    changes = tmp_path / "c.ndjson"
    changes.write_text('{"child": "s0", "parents": ["g1.1"], "ts": 1500}\n')
    res = tmp_path / "r.ndjson"
    assert main([
        "run", "--hierarchy", str(tree), "--input", str(meas), "--changes", str(changes),
        "--capacity", "100", "--out", str(tmp_path / "m.csv"), "--results", str(res),
    ]) == EXIT_OK
    last = {}
    for line in open(res):
        r = json.loads(line)
        last[r["group"]] = (r["sum"], r["count"])
    assert last["g1.1"] == (5.0, 3)
    assert last["g1.0"] == (1.0, 1)
    assert last["g0.0"] == (6.0, 2)


def test_run_bad_input(tree, tmp_path):
    meas = tmp_path / "in.ndjson"
    meas.write_text('{"sensor": "s0", "value": "x", "ts": 0}\n')
    assert main(["run", "--hierarchy", str(tree), "--input", str(meas)]) == EXIT_CONFIG


def test_bad_instances(tree):
    assert main(["run", "--hierarchy", str(tree), "--instances", "0"]) == EXIT_CONFIG


def test_scalability_small(tmp_path, capsys):
    out = tmp_path / "s.csv"
    code = main([
        "experiment", "scalability", "--fanout", "2", "--depths", "1..2", "--reps", "2",
        "--max-instances", "8", "--capacity", "2", "--partitions", "16", "--duration", "40",
        "--warmup", "20", "--out", str(out),
    ])
    assert code == EXIT_OK
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == 4
    assert list(rows[0]) == ["depth", "sensors", "workload", "rep", "seed", "required_instances", "median_required"]
    assert "R^2" in capsys.readouterr().err


def test_scalability_bad_warmup():
    assert main(["experiment", "scalability", "--duration", "10", "--warmup", "60"]) == EXIT_CONFIG


def test_reliability_small(tmp_path):
    out = tmp_path / "r.csv"
    code = main([
        "experiment", "reliability", "--fanout", "2", "--depth", "2", "--instances", "4", "--kill", "2",
        "--fail-at", "20", "--recover-at", "40", "--window", "10", "--duration", "80", "--out", str(out),
    ])
    assert code == EXIT_OK
    rows = list(csv.DictReader(open(out)))
    assert sum(int(r["generated"]) for r in rows) == sum(int(r["processed"]) for r in rows) == 320


def test_reliability_bad_kill():
    assert main(["experiment", "reliability", "--instances", "4", "--kill", "4", "--duration", "10",
                 "--fail-at", "1", "--recover-at", "2"]) == EXIT_CONFIG


def test_argparse_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["experiment", "scalability", "--depths", "x..y"])
    assert exc.value.code == 2
