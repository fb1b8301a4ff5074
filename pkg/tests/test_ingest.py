import json
import shutil

import numpy as np
import pytest

from chopper import ingest
from chopper.errors import DuplicateCounterKey, MalformedInput, TraceIOError, UtilOutOfRange, ValidationFailed
from chopper.ingest import (DEFAULT_RULES, CategoryRules, emit_canonical, load_canonical, parse_counter_csv,
                            parse_cpu_csv, parse_kernels_jsonl, parse_runtime_trace)
from chopper.model import Category, CpuSample

from conftest import tree_bytes


def test_kernel_launch_link():
    doc = {"traceEvents": [
        {"ph": "X", "cat": "kernel", "name": "gemm", "ts": 10, "dur": 5, "pid": 0, "tid": 0,
         "args": {"correlation": 7, "device": 0, "stream": 0}},
        {"ph": "X", "cat": "cuda_runtime", "name": "launch", "ts": 8, "dur": 1, "pid": 100, "tid": 1,
         "args": {"correlation": 7}},
    ]}
    (k,) = parse_runtime_trace(json.dumps(doc)).kernels
    assert (k.dispatch_ts, k.start_ts, k.end_ts, k.correlation_id) == (8000, 10000, 15000, 7)


def test_flow_events_bind_without_args():
    doc = [
        {"ph": "X", "cat": "kernel", "name": "gemm", "ts": 10, "dur": 5, "pid": 0, "tid": 3},
        {"ph": "X", "cat": "cuda_runtime", "name": "launch", "ts": 8, "dur": 1, "pid": 9, "tid": 1},
        {"ph": "s", "id": 42, "ts": 8.5, "pid": 9, "tid": 1},
        {"ph": "f", "id": 42, "ts": 10, "pid": 0, "tid": 3},
    ]
    (k,) = parse_runtime_trace(json.dumps(doc)).kernels
    assert k.correlation_id == 42 and k.dispatch_ts == 8000 and k.stream_id == 3


def test_category_rules():
    assert DEFAULT_RULES.classify("rccl_all_gather_kernel") is Category.Communication
    assert DEFAULT_RULES.classify("Memcpy DtoH") is Category.Copy
    assert DEFAULT_RULES.classify("Cijk_gemm") is Category.Compute
    glob = CategoryRules(((("*all_gather*"), Category.Communication),))
    assert glob.classify("rccl_all_gather_x") is Category.Communication
    assert glob.classify("gemm") is Category.Other


def _oracle_parse(events):
    # hand-rolled reference: correlation lives in args on both sides
    launch = {e["args"]["correlation"]: round(e["ts"] * 1000) for e in events if e["cat"] == "cuda_runtime"}
    out = {}
    for e in events:
        if e["cat"] == "kernel":
            out.setdefault(e["args"]["device"], []).append(
                (launch[e["args"]["correlation"]], e["args"]["correlation"], round(e["ts"] * 1000),
                 round((e["ts"] + e["dur"]) * 1000)))
    return {g: sorted(v) for g, v in out.items()}


def test_two_gpus_three_kernels_against_oracle():
    events = []
    rng = np.random.default_rng(3)
    for g in range(2):
        t = 0.0
        for i in range(3):
            corr = 10 * g + i
            t += float(rng.integers(5, 20))
            events.append({"ph": "X", "cat": "cuda_runtime", "name": "launch", "ts": t, "dur": 0.5,
                           "pid": 50 + g, "tid": 1, "args": {"correlation": corr}})
            events.append({"ph": "X", "cat": "kernel", "name": f"gemm{i}", "ts": t + 3, "dur": 2.25,
                           "pid": g, "tid": 0, "args": {"correlation": corr, "device": g, "stream": 0}})
    rng.shuffle(events)
    recs = parse_runtime_trace(json.dumps(events)).kernels
    assert len(recs) == 6
    got = {}
    for r in recs:
        got.setdefault(r.gpu_id, []).append((r.dispatch_ts, r.correlation_id, r.start_ts, r.end_ts))
    assert got == _oracle_parse(events)


def test_malformed_trace():
    with pytest.raises(MalformedInput):
        parse_runtime_trace(b"{not json")
    with pytest.raises(MalformedInput):
        parse_runtime_trace(json.dumps({"traceEvents": [{"ph": "X", "cat": "kernel"}]}))


HEADER = "gpu_id,pass_id,dispatch_index,kernel_name,counter_name,value\n"


def test_counter_csv():
    t = parse_counter_csv(HEADER + "0,0,0,gemm_k,GPU_CYCLES,2100000\n")
    (s,) = list(t)
    assert s.value == 2.1e6 and s.kernel_name == "gemm_k"
    with pytest.raises(DuplicateCounterKey):
        parse_counter_csv(HEADER + "0,0,0,a,X,1\n0,0,0,a,X,2\n")
    with pytest.raises(MalformedInput):
        parse_counter_csv(HEADER + "0,0,0,a,X,nan\n")
    both = parse_counter_csv(HEADER + "0,0,0,a,X,1\n0,1,0,a,Y,2\n")
    assert sorted((s.pass_id, s.counter_name) for s in both) == [(0, "X"), (1, "Y")]


def test_cpu_csv():
    head = "ts_ns,logical_core_id,util_pct\n"
    assert parse_cpu_csv(head + "1000,3,50.0\n") == [CpuSample(1000, 3, 50.0)]
    with pytest.raises(UtilOutOfRange):
        parse_cpu_csv(head + "0,0,101\n")
    four = parse_cpu_csv(head + "0,0,1\n0,1,2\n10,0,3\n10,1,4\n")
    assert len(four) == 4


def test_canonical_round_trip_bytes(small_bundle, tmp_path):
    path, _ = small_bundle
    emit_canonical(load_canonical(path), tmp_path)
    src = {k: v for k, v in tree_bytes(path).items() if k in tree_bytes(tmp_path)}
    assert tree_bytes(tmp_path) == src


def test_arrow_and_stdlib_parsers_agree(small_bundle, monkeypatch):
    raw = (small_bundle[0] / "kernels.jsonl").read_bytes()
    fast = parse_kernels_jsonl(raw)
    monkeypatch.setattr(ingest, "_kernels_via_arrow", lambda data: None)
    slow = parse_kernels_jsonl(raw)
    for c in fast.COLUMNS:
        if c not in ("name_code", "op_code"):
            assert np.array_equal(getattr(fast, c), getattr(slow, c)), c
    assert fast.name_array().tolist() == slow.name_array().tolist()


def test_missing_spec_names_path(small_bundle, tmp_path):
    dst = tmp_path / "b"
    shutil.copytree(small_bundle[0], dst)
    (dst / "hardware.json").unlink()
    with pytest.raises(TraceIOError, match="hardware.json"):
        load_canonical(dst)


def test_end_before_start_fails_validation(small_bundle, tmp_path):
    dst = tmp_path / "b"
    shutil.copytree(small_bundle[0], dst)
    lines = (dst / "kernels.jsonl").read_text().splitlines()
    row = json.loads(lines[0])
    row["end_ns"] = row["start_ns"] - 1
    lines[0] = json.dumps(row)
    (dst / "kernels.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(ValidationFailed, match="start <= end"):
        load_canonical(dst)


def test_bad_kernel_line_is_malformed(small_bundle, tmp_path):
    dst = tmp_path / "b"
    shutil.copytree(small_bundle[0], dst)
    with open(dst / "kernels.jsonl", "a") as f:
        f.write('{"gpu": 0}\n')
    with pytest.raises(MalformedInput):
        load_canonical(dst)
