import json
import subprocess
import sys

import jsonschema
import pytest

from biccos.cli import REPORT_SCHEMA, SUITE_SCHEMA, TIME_FIELDS, aggregate, main
from biccos.model import save_instance

from helpers import HARD_SUITE, t1


def _run(*args):
    proc = subprocess.run([sys.executable, "-m", "biccos", *map(str, args)], capture_output=True, text=True)
    return proc.returncode, proc.stdout, proc.stderr


@pytest.fixture
def t1_files(tmp_path):
    def make(c0):
        net, spec, prop = t1(c0)
        n, s = tmp_path / f"t1_{c0}.net.json", tmp_path / f"t1_{c0}.spec.json"
        save_instance(net, spec, prop, n, s)
        return n, s
    return make


def _hard_files():
    row = json.loads(HARD_SUITE.read_text())["instances"][0]
    return HARD_SUITE.parent / row["network"], HARD_SUITE.parent / row["spec"]


def _strip_times(obj):
    if isinstance(obj, dict):
        return {k: _strip_times(v) for k, v in obj.items() if k not in TIME_FIELDS}
    if isinstance(obj, list):
        return [_strip_times(v) for v in obj]
    return obj


def test_verify_positive_margin_exit_0(t1_files):
    n, s = t1_files(0.1)
    code, out, _ = _run("verify", "--network", n, "--spec", s, "--mode", "plain")
    assert code == 0
    report = json.loads(out)
    jsonschema.validate(report, REPORT_SCHEMA)
    assert report["status"] == "UNSAT"


def test_verify_counterexample_exit_2(t1_files, tmp_path):
    n, s = t1_files(-0.5)
    out_file = tmp_path / "r.json"
    code, _, _ = _run("verify", "--network", n, "--spec", s, "--report", out_file)
    assert code == 2
    report = json.loads(out_file.read_text())
    jsonschema.validate(report, REPORT_SCHEMA)
    assert report["witness_value"] < 0 and len(report["witness"]) == 1


def test_verify_timeout_exit_1():
    n, s = _hard_files()
    code, out, _ = _run("verify", "--network", n, "--spec", s, "--mode", "biccos-base", "--timeout", "1e-6")
    report = json.loads(out)
    assert code == 1 and report["status"] == "unknown" and report["bound"] is not None


@pytest.mark.parametrize("extra", [["--timeout", "-1"], ["--mode", "fast"], ["--drop-percentage", "1.5"]])
def test_bad_flags_exit_64(t1_files, extra):
    n, s = t1_files(0.1)
    code, _, err = _run("verify", "--network", n, "--spec", s, *extra)
    assert code == 64 and err


def test_missing_flag_exit_64(t1_files):
    n, _ = t1_files(0.1)
    assert _run("verify", "--network", n)[0] == 64


def test_unreadable_instance_exit_65(t1_files, tmp_path):
    n, _ = t1_files(0.1)
    bad = tmp_path / "bad.json"
    bad.write_text('{"x0": [0.0], "eps": ')
    code, _, err = _run("verify", "--network", n, "--spec", bad)
    assert code == 65 and "line 1" in err
    assert _run("verify", "--network", n, "--spec", tmp_path / "missing.json")[0] == 65


def test_reports_replay_identically(tmp_path):
    n, s = _hard_files()
    reports = []
    for i in range(2):
        out = tmp_path / f"r{i}.json"
        code = main(["verify", "--network", str(n), "--spec", str(s), "--report", str(out), "--seed", "3",
                     "--dump-cuts"])
        assert code == 0
        reports.append(_strip_times(json.loads(out.read_text())))
    assert json.dumps(reports[0], sort_keys=True) == json.dumps(reports[1], sort_keys=True)
    assert reports[0]["cut_pool"]


def test_stats_stream_lines(tmp_path):
    n, s = _hard_files()
    stream = tmp_path / "stats.jsonl"
    main(["verify", "--network", str(n), "--spec", str(s), "--mode", "plain", "--stats-stream", str(stream),
          "--report", str(tmp_path / "r.json")])
    lines = [json.loads(line) for line in stream.read_text().splitlines()]
    assert lines and [r["batch"] for r in lines] == list(range(1, len(lines) + 1))


def test_suite_rows_and_aggregates(tmp_path):
    man = json.loads(HARD_SUITE.read_text())
    small = {"instances": man["instances"][:3], "modes": ["plain", "biccos-base"]}
    path = HARD_SUITE.parent / "_three.json"
    path.write_text(json.dumps(small))
    try:
        out = tmp_path / "suite.json"
        assert main(["suite", "--manifest", str(path), "--report", str(out)]) == 0
    finally:
        path.unlink()
    report = json.loads(out.read_text())
    jsonschema.validate(report, SUITE_SCHEMA)
    assert len(report["rows"]) == 6
    assert report["aggregates"] == aggregate(report["rows"], ["plain", "biccos-base"])
    assert all(r["status"] == "UNSAT" for r in report["rows"])


def test_suite_bad_mode_exit_64():
    assert main(["suite", "--manifest", str(HARD_SUITE), "--modes", "plain,nope"]) == 64


def test_gen_writes_manifest(tmp_path):
    out = tmp_path / "gen"
    assert main(["gen", "--seed", "5", "--count", "2", "--shape", "2-8-1", "--out", str(out)]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert [r["label"] for r in man["instances"]] == ["UNSAT", "falsifiable"]
    assert main(["gen", "--count", "1", "--out", str(out), "--margin-min", "0"]) == 64
