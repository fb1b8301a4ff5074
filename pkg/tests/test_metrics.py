from fractions import Fraction

import numpy as np
import pandas as pd
import pytest

from chopper.errors import MissingCounter, ZeroDurationKernel
from chopper.expr import MetricExpr
from chopper.align import AlignedKernel
from chopper.metrics import (covered_length, cpu_summary, eval_metric, iteration_rollup, launch_columns,
                             merge_intervals, operation_overlap, overlap_columns, overlap_ratio,
                             split_bubble, throughput, tokens_per_iteration)
from chopper.model import (AnnotationPath, Category, CpuSample, HardwareSpec, KernelRecord, KernelTable,
                           OpType, Phase, WorkloadSpec)


def k(corr, start, end, *, gpu=0, stream=0, cat=Category.Compute, dispatch=None, it=0, phase=Phase.Forward,
      op="f_mlp_up", layer=0):
    ann = AnnotationPath(it, phase, op, OpType.gemm if cat is Category.Compute else OpType.comm, layer)
    return KernelRecord(gpu, stream, corr, f"k{corr}", cat, start if dispatch is None else dispatch,
                        start, end, ann)


def hw(gpus=1, logical=16):
    return HardwareSpec.smt(1e15, 2e9, 5.3e12, gpus, logical)


def wl(b=1, s=1024, warmup=0, sampled=1):
    return WorkloadSpec(b, s, 1, 4096, 8, 2, 128, {}, warmup, sampled)


@pytest.mark.parametrize("prev_end,dispatch,start,prep,call", [
    (100, 90, 110, 0, 10),
    (100, 105, 120, 5, 15),
    (100, 80, 95, 0, 0),
    (100, 130, 120, 20, 0),
])
def test_split_bubble_examples(prev_end, dispatch, start, prep, call):
    p, c = split_bubble(prev_end, dispatch, start)
    assert (int(p), int(c)) == (prep, call)


def test_launch_columns_ignore_comm_and_first_kernel():
    t = KernelTable.from_records([
        k(1, 100, 200, dispatch=50),
        k(2, 150, 170, stream=1, cat=Category.Communication, dispatch=120),
        k(3, 230, 300, dispatch=210),
        k(4, 320, 330, dispatch=325),
    ])
    prep, call = launch_columns(t)
    by_corr = dict(zip(t.corr.tolist(), zip(prep.tolist(), call.tolist())))
    assert by_corr == {1: (0, 0), 2: (0, 0), 3: (10, 20), 4: (20, 0)}


def test_overlap_ratio_examples():
    target = k(1, 100, 200)
    comms = [k(2, 50, 150, stream=1, cat=Category.Communication),
             k(3, 180, 220, stream=1, cat=Category.Communication)]
    assert overlap_ratio(target, comms) == pytest.approx(0.7, abs=1e-15)
    assert overlap_ratio(target, []) == 0.0
    assert overlap_ratio(target, [k(4, 0, 1000, stream=2, cat=Category.Communication)]) == 1.0


def test_overlap_ignores_same_stream_and_other_gpus():
    target = k(1, 100, 200)
    comms = [k(2, 100, 200, stream=0, cat=Category.Communication),
             k(3, 100, 200, gpu=1, stream=1, cat=Category.Communication)]
    assert overlap_ratio(target, comms) == 0.0


def test_overlap_zero_duration_raises():
    with pytest.raises(ZeroDurationKernel):
        overlap_ratio(k(1, 100, 100), [])


def test_overlap_columns_match_record_level():
    recs = [k(1, 100, 200), k(2, 50, 150, stream=1, cat=Category.Communication),
            k(3, 180, 220, stream=1, cat=Category.Communication), k(4, 300, 300)]
    t = KernelTable.from_records(recs)
    col = overlap_columns(t)
    pos = {c: i for i, c in enumerate(t.corr.tolist())}
    assert col[pos[1]] == pytest.approx(0.7, abs=1e-15)
    assert np.isnan(col[pos[2]]) and np.isnan(col[pos[4]])


def test_merge_and_cover():
    us, ue = merge_intervals(np.array([5, 0, 20, 8]), np.array([10, 6, 30, 12]))
    assert us.tolist() == [0, 20] and ue.tolist() == [12, 30]
    assert covered_length(us, ue, np.array([0, 11, 40]), np.array([40, 25, 50])).tolist() == [22, 6, 0]


@pytest.mark.parametrize("pairs,want", [
    ([(100, 1.0), (100, 0.0)], 0.5),
    ([(100, 0.3)], 0.3),
    ([(150, 0.8), (50, 0.0)], 0.6),
])
def test_operation_overlap_weighted(pairs, want):
    assert operation_overlap(pairs) == pytest.approx(want, abs=1e-15)


def test_iteration_rollup_sums_and_drops_warmup():
    recs = []
    for it, base in ((0, 0), (1, 1000)):
        recs += [k(3 * it + 1, base + 0, base + 10, it=it, dispatch=base - 1 if base else 0),
                 k(3 * it + 2, base + 15, base + 35, it=it, dispatch=base + 5),
                 k(3 * it + 3, base + 40, base + 70, it=it, dispatch=base + 30)]
    t = KernelTable.from_records(recs)
    prep, call = launch_columns(t)
    roll = iteration_rollup(t, prep, call, wl(warmup=1, sampled=1))
    assert roll["iteration"].tolist() == [1]
    assert int(roll["duration_ns"].iloc[0]) == 60
    # 930 ns bubble across the iteration boundary belongs to iteration 1's first kernel
    assert int(roll["launch_ns"].iloc[0]) == 930 + 5 + 5


def test_throughput_examples():
    roll = pd.DataFrame({"gpu": [0], "iteration": [0], "duration_ns": [500_000_000], "launch_ns": [0]})
    tp = throughput(roll, wl(b=2, s=4096), hw(gpus=8))
    assert tp.median_tokens_per_s == pytest.approx(131072.0, rel=1e-12)
    one = throughput(pd.DataFrame({"gpu": [0], "iteration": [0], "duration_ns": [10**9], "launch_ns": [0]}),
                     wl(b=1, s=1), hw(gpus=1))
    assert one.median_tokens_per_s == 1.0
    assert tokens_per_iteration(wl(b=2, s=4096), hw(gpus=8)) == 65536


def test_throughput_slow_gpu_halves():
    fast = pd.DataFrame({"gpu": [0, 1], "iteration": [0, 0], "duration_ns": [100, 100], "launch_ns": [0, 0]})
    slow = fast.assign(duration_ns=[100, 200])
    w, h = wl(), hw(gpus=2)
    assert throughput(slow, w, h).median_tokens_per_s * 2 == pytest.approx(throughput(fast, w, h).median_tokens_per_s)


def test_cpu_summary_examples():
    topo = {i: i % 8 for i in range(16)}
    s = [CpuSample(0, i, u) for i, u in enumerate([50, 100, 0, 25])]
    out = cpu_summary(s, topo)
    assert out.c_active.tolist() == [3] and out.c_min.tolist() == [1.75]
    zeros = cpu_summary([CpuSample(0, i, 0.0) for i in range(4)], topo)
    assert zeros.c_active.tolist() == [0] and zeros.c_min.tolist() == [0.0]


def test_cpu_occupancy_one_of_eight():
    topo = {i: i % 8 for i in range(16)}
    s = [CpuSample(t, c, 40.0 if c in (0, 8) else 0.0) for t in range(3) for c in range(16)]
    assert cpu_summary(s, topo).physical_occupancy == 0.125


def test_cpu_c_min_exact_on_inexact_floats():
    topo = {i: i for i in range(3)}
    s = [CpuSample(0, i, u) for i, u in enumerate([0.1, 0.2, 0.3])]
    assert cpu_summary(s, topo).c_min[0] == float(sum(map(Fraction, [0.1, 0.2, 0.3])) / 100)


def test_eval_metric_examples():
    rec = k(1, 0, 1_000_000)
    assert eval_metric(MetricExpr("X / Y"), AlignedKernel(rec, {"X": 10.0, "Y": 4.0})) == 2.5
    got = eval_metric("BYTES / dur_s", AlignedKernel(rec, {"BYTES": 5.3e9}))
    assert got == pytest.approx(5.3e12, rel=1e-12)
    with pytest.raises(MissingCounter) as e:
        eval_metric("X - Z", AlignedKernel(rec, {"X": 1.0}))
    assert "Z" in str(e.value)
