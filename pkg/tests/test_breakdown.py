import itertools
import math

import numpy as np
import pandas as pd
import pytest

from chopper.breakdown import (D0_MAX_OVERLAP, OperationFlops, attention_flops, breakdown_frame, breakdown_row,
                               compose_breakdown, d_thr, estimate_d_quantiles, gemm_flops, ovr_freq, ovr_inst,
                               ovr_overlap, ovr_util, theoretical_flops)
from chopper.errors import InsufficientData, UnknownShape, UtilizationOutOfRange, ZeroBaselineDuration
from chopper.model import HardwareSpec, WorkloadSpec

HW = HardwareSpec.smt(1.3e15, 2.1e9, 5.3e12, 1, 16)


def workload(**shapes):
    return WorkloadSpec(1, 1024, 1, 4096, 8, 2, 128, shapes, 0, 1)


def brute_attention_macs(b, heads, s, d):
    # count multiply-adds of Q K^T (s x d by d x s) and P V (s x s by s x d) one at a time
    macs = 0
    for _ in range(b * heads):
        for _i, _j, _k in itertools.product(range(s), range(s), range(d)):
            macs += 1
        for _i, _j, _k in itertools.product(range(s), range(d), range(s)):
            macs += 1
    return macs


def test_flop_examples():
    assert gemm_flops(2, 2, 2) == 16
    assert attention_flops(1, 1, 2, 2) == 32
    for shape in [(1, 1, 2, 2), (2, 3, 4, 5), (1, 2, 7, 3)]:
        assert attention_flops(*shape) == 2 * brute_attention_macs(*shape)


def test_theoretical_flops_backward_and_unknown():
    w = workload(mlp_up={"m": 8, "n": 4, "k": 2}, attn_fa={"b": 1, "heads": 2, "s": 4, "head_dim": 8})
    assert theoretical_flops("f_mlp_up", w) == 128
    assert theoretical_flops("b_mlp_up", w) == 128 * w.bwd_gemm_mult
    assert theoretical_flops("b_attn_fa", w) == attention_flops(1, 2, 4, 8) * w.bwd_attn_mult
    with pytest.raises(UnknownShape):
        theoretical_flops("f_qkv_ip", w)


def test_full_label_shape_wins():
    w = workload(mlp_up={"m": 8, "n": 4, "k": 2}, b_mlp_up={"m": 1, "n": 1, "k": 1})
    assert theoretical_flops("b_mlp_up", w) == 2


def test_factor_examples():
    assert d_thr(1.3e12, HW) == pytest.approx(1e-3, rel=1e-15)
    with pytest.raises(ValueError):
        d_thr(0.0, HW)
    assert ovr_inst(OperationFlops(100.0, 100.0)) == 1.0
    assert ovr_inst(OperationFlops(100.0, 110.0)) == pytest.approx(1.1)
    assert ovr_util(1.0) == 1.0 and ovr_util(0.5) == 2.0
    for bad in (0.0, -0.1, 1.5, math.nan):
        with pytest.raises(UtilizationOutOfRange):
            ovr_util(bad)


def test_d_quantiles_bucket_example():
    q = estimate_d_quantiles([(0.0, 100), (0.0, 102), (0.5, 110), (0.5, 112), (1.0, 120)])
    assert (q.d0, q.d50, q.method) == (101, 111, "bucket")
    assert ovr_overlap(q.d0, q.d50) == pytest.approx(111 / 101, rel=1e-15)


def test_d_quantiles_degenerate_fit():
    q = estimate_d_quantiles([(0.0, 100), (0.0, 104), (0.0, 101)])
    assert (q.d0, q.d50, q.method) == (101, 101, "mixed")
    with pytest.raises(InsufficientData):
        estimate_d_quantiles([(0.0, 1)])


def test_d_quantiles_line_fit_against_lstsq():
    pts = [(0.1, 10.0), (0.2, 11.0), (0.8, 17.5), (0.9, 18.0)]
    x, y = np.array(pts).T
    slope, icept = np.linalg.lstsq(np.vstack([x, np.ones_like(x)]).T, y, rcond=None)[0]
    q = estimate_d_quantiles(pts)
    assert q.method == "fit"
    assert q.d0 == pytest.approx(icept, rel=1e-12)
    assert q.d50 == pytest.approx(icept + 0.5 * slope, rel=1e-12)


def test_ovr_overlap_and_freq():
    assert ovr_overlap(5.0, 5.0) == 1.0
    with pytest.raises(ZeroBaselineDuration):
        ovr_overlap(0.0, 1.0)
    f, d_peak = ovr_freq(1.5, 2.1e9, HW, 1.2)
    assert d_peak == 1.0 and f == pytest.approx(1.25, rel=1e-15)
    f, _ = ovr_freq(1.0, 2.1e9, HW, 1.0)
    assert f == 1.0


def _inst(op, n, overlaps, durs, **cols):
    return pd.DataFrame({"gpu": 0, "iteration": range(n), "phase": "Forward", "layer": 0, "operation": op,
                         "op_type": "gemm", "overlap": overlaps, "duration_ns": durs, **cols})


def test_breakdown_row_product_identity():
    # factors (1 ms, 1.0, 2.0, 1.1, 1.25) multiply to 2.75 ms
    w = workload(mlp_up={"m": 1000, "n": 1000, "k": 650_000})
    flops = theoretical_flops("f_mlp_up", w)
    assert flops / HW.peak_flops == pytest.approx(1e-3, rel=1e-15)
    d_peak = 2e-3
    n = 4
    overlaps = [0.0, 0.0, 0.5, 0.5]
    d0, d50 = d_peak * 1.25, d_peak * 1.25 * 1.1
    durs = [round(d * 1e9) for d in (d0, d0, d50, d50)]
    frame = _inst("f_mlp_up", n, overlaps, durs, GPU_CYCLES=d_peak * HW.peak_gpu_freq, MFMA_FLOPS=flops,
                  mfma_util=0.5, sampled=True)
    row = breakdown_row("f_mlp_up", frame, w, HW)
    assert not row.reasons
    assert row.ovr_overlap == pytest.approx(1.1, rel=1e-12)
    assert row.ovr_freq == pytest.approx(1.25 * 1.05 / 1.1, rel=1e-12)
    assert row.residual == pytest.approx(1.0, rel=1e-12)


def test_breakdown_row_missing_counter_is_partial():
    w = workload(mlp_up={"m": 8, "n": 8, "k": 8})
    frame = _inst("f_mlp_up", 3, [0.0, 0.5, 0.0], [100, 110, 102], MFMA_FLOPS=1024.0, mfma_util=0.5)
    row = breakdown_row("f_mlp_up", frame, w, HW)
    assert any("MissingCounter" in r and "GPU_CYCLES" in r for r in row.reasons)
    assert math.isnan(row.ovr_freq) and math.isnan(row.residual)
    assert row.ovr_overlap == pytest.approx(110 / 101)


def test_breakdown_frame_empty_has_schema():
    df = breakdown_frame([])
    assert len(df) == 0 and df.columns[0] == "op"
    assert D0_MAX_OVERLAP == 0.05


def test_compose_breakdown_on_generator(small_bundle):
    from chopper.pipeline import analyze_bundle
    path, truth = small_bundle
    a = analyze_bundle(path)
    rows = compose_breakdown(a.instances, a.store.workload, a.store.hardware)
    assert sorted(r.operation for r in rows) == sorted(t["op"] for t in truth["breakdown"])
    for r in rows:
        assert r.residual == pytest.approx(1.0, rel=1e-9)
