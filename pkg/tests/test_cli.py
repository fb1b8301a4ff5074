import json
import subprocess
import sys

import pytest

from chopper.cli import main
from chopper.synth import perturb

from conftest import SMALL, tree_bytes

OUTPUTS = {"enduro.csv", "op_durations.csv", "throughput.csv", "breakdown.csv", "metrics.csv",
           "cpu_summary.json", "errors.json"}


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(SMALL))
    return p


def test_version(capsys):
    assert main(["--version"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert "chopper" in info and "kernels" in json.dumps(info["schemas"])


def test_synth_and_refuse_non_empty(cfg_file, tmp_path, capsys):
    out = tmp_path / "b"
    assert main(["synth", "--config", str(cfg_file), "--out", str(out)]) == 0
    assert (out / "kernels.jsonl").exists() and (out / "ground_truth.json").exists()
    assert main(["synth", "--config", str(cfg_file), "--out", str(out)]) == 2
    assert "--force" in capsys.readouterr().err
    assert main(["synth", "--config", str(cfg_file), "--out", str(out), "--force"]) == 0


def test_synth_bad_seed(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": "x"}))
    assert main(["synth", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "seed" in capsys.readouterr().err


def test_analyze_full_output_set(small_bundle, tmp_path):
    out = tmp_path / "r"
    assert main(["analyze", "--trace", str(small_bundle[0]), "--out", str(out)]) == 0
    names = {p.name for p in out.iterdir()}
    assert OUTPUTS <= names
    assert any(n.startswith("overlap_cdf_") for n in names)
    assert json.loads((out / "errors.json").read_text()) == []


def test_analyze_dropped_pass_is_partial(small_bundle, tmp_path):
    bad = perturb(small_bundle[0], "drop_counter_pass", 0, tmp_path / "d")
    out = tmp_path / "r"
    assert main(["analyze", "--trace", str(bad), "--out", str(out)]) == 0
    errs = json.loads((out / "errors.json").read_text())
    assert any(e["error"] == "PartialRow" and "GPU_CYCLES" in e["detail"] for e in errs)


def test_analyze_missing_dir(tmp_path):
    assert main(["analyze", "--trace", str(tmp_path / "none"), "--out", str(tmp_path / "r")]) == 1


def test_analyze_alignment_failure_exit_3(small_bundle, tmp_path):
    import shutil
    dst = tmp_path / "m"
    shutil.copytree(small_bundle[0], dst)
    text = (dst / "counters.csv").read_text().splitlines()
    head, rows = text[0], text[1:]
    first = rows[0].split(",")
    first[3] = "not_the_kernel"
    rows[0] = ",".join(first)
    (dst / "counters.csv").write_text("\n".join([head] + rows) + "\n")
    assert main(["analyze", "--trace", str(dst), "--out", str(tmp_path / "r")]) == 3


def test_breakdown_stdout(small_bundle, capsys):
    assert main(["breakdown", "--trace", str(small_bundle[0])]) == 0
    out = capsys.readouterr().out
    assert out.startswith("op,config,")


def test_report_groups(small_bundle, tmp_path, capsys):
    main(["analyze", "--trace", str(small_bundle[0]), "--out", str(tmp_path / "r")])
    capsys.readouterr()
    assert main(["report", "--metrics", str(tmp_path / "r" / "metrics.csv"), "--group-by", "phase",
                 "--stat", "sum", "--metric", "duration_ns"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "phase,metric,value" and len(lines) == 4
    assert main(["report", "--metrics", str(tmp_path / "r" / "metrics.csv"), "--group-by", "stream"]) == 2


def test_verify_pass_and_perturbed_truth(small_bundle, tmp_path, capsys):
    path, truth = small_bundle
    assert main(["verify", "--trace", str(path), "--truth", str(path / "ground_truth.json")]) == 0
    assert "FAIL" not in capsys.readouterr().out
    t = json.loads(json.dumps(truth))
    t["throughput"]["median_tokens_per_s"] *= 1 + 1e-6
    bad = tmp_path / "truth.json"
    bad.write_text(json.dumps(t))
    assert main(["verify", "--trace", str(path), "--truth", str(bad)]) == 1
    out = capsys.readouterr().out
    assert "FAIL throughput" in out and "worst offender: throughput" in out
    assert main(["verify", "--trace", str(path), "--truth", str(bad), "--tol", "1e-3"]) == 0


def test_console_script_runs(small_bundle, tmp_path):
    r = subprocess.run([sys.executable, "-m", "chopper.cli", "analyze", "--trace", str(small_bundle[0]),
                        "--out", str(tmp_path / "a")], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout == ""
    main(["analyze", "--trace", str(small_bundle[0]), "--out", str(tmp_path / "b")])
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
