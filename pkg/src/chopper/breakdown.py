"""Decomposition of operation duration into multiplicative overhead factors.

    d_act = d_thr * ovr_inst * ovr_util * ovr_overlap * ovr_freq * residual

``d_thr`` is the roofline time at peak throughput, ``ovr_inst`` the extra
work actually issued, ``ovr_util`` the inverse matrix-unit utilization,
``ovr_overlap`` the slowdown from concurrent communication and ``ovr_freq``
the slowdown from clocks below peak. The residual is kept explicit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import (ChopperError, InsufficientData, MissingCounter, UnknownShape,
                     UtilizationOutOfRange, ZeroBaselineDuration)
from .model import HardwareSpec, OpType, WorkloadSpec, base_operation, default_op_type

GPU_CYCLES = "GPU_CYCLES"
MFMA_FLOPS = "MFMA_FLOPS"
MFMA_UTIL = "mfma_util"

# overlap buckets for reading D_0% and D_50% off the instance distribution
D0_MAX_OVERLAP = 0.05
D50_RANGE = (0.4, 0.6)

BREAKDOWN_COLUMNS = ["op", "config", "d_thr_s", "ovr_inst", "ovr_util", "ovr_overlap", "ovr_freq",
                     "d_act_s", "residual", "quantile_method"]


# ---------------------------------------------------------------------------
# factors


def gemm_flops(m: int, n: int, k: int) -> float:
    return 2.0 * m * n * k


def attention_flops(b: int, heads: int, s: int, head_dim: int) -> float:
    # QK^T and PV: two (s x d) @ (d x s)-sized matmuls per head, 2 flops per MAC
    return 4.0 * b * heads * s * s * head_dim


def theoretical_flops(op: str, workload: WorkloadSpec) -> float:
    """Minimum FLOPs of one instance of ``op``.

    A shape keyed by the full label (``"b_mlp_up"``) is used as given.
    Otherwise the forward shape of the base label is used and backward labels
    are scaled by the workload's backward multipliers.
    """
    shapes = workload.op_shapes
    mult = 1.0
    if op in shapes:
        shape = shapes[op]
    else:
        base, direction = base_operation(op)
        if base not in shapes:
            raise UnknownShape(op)
        shape = shapes[base]
        if direction == "b":
            mult = workload.bwd_attn_mult if default_op_type(op) is OpType.fa else workload.bwd_gemm_mult
    if {"m", "n", "k"} <= shape.keys():
        flops = gemm_flops(shape["m"], shape["n"], shape["k"])
    elif {"b", "heads", "s", "head_dim"} <= shape.keys():
        flops = attention_flops(shape["b"], shape["heads"], shape["s"], shape["head_dim"])
    else:
        raise UnknownShape(op)
    return flops * mult


def d_thr(flops: float, hw: HardwareSpec) -> float:
    if not flops > 0:
        raise ValueError(f"theoretical flops must be positive, got {flops}")
    return flops / hw.peak_flops


@dataclass(frozen=True)
class OperationFlops:
    theoretical: float
    performed: float


def ovr_inst(flops: OperationFlops) -> float:
    if not (flops.theoretical > 0 and flops.performed > 0):
        raise ValueError(f"flops must be positive: {flops}")
    return flops.performed / flops.theoretical


def ovr_util(mfma_util: float) -> float:
    if not 0 < mfma_util <= 1:
        raise UtilizationOutOfRange(f"mfma_util={mfma_util!r} outside (0, 1]")
    return 1.0 / mfma_util


@dataclass(frozen=True)
class DQuantiles:
    d0: float
    d50: float
    method: str  # "bucket", "fit" or "mixed"


def _line_fit(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Least-squares ``y = a + b x``; constant ``x`` gives slope 0 through the median."""
    if np.ptp(x) == 0:
        return float(np.median(y)), 0.0
    xm, ym = x.mean(), y.mean()
    slope = float(np.sum((x - xm) * (y - ym)) / np.sum((x - xm) ** 2))
    return float(ym - slope * xm), slope


def estimate_d_quantiles(instances: Sequence[tuple[float, float]]) -> DQuantiles:
    """Durations at 0% and 50% overlap from ``(overlap, duration)`` pairs.

    Each value is the median duration of its overlap bucket; an empty bucket
    falls back to a least-squares line evaluated at 0 or 0.5.
    """
    if len(instances) < 2:
        raise InsufficientData(f"need at least 2 instances, got {len(instances)}")
    arr = np.asarray(instances, dtype=float)
    x, y = arr[:, 0], arr[:, 1]
    b0 = x <= D0_MAX_OVERLAP
    b50 = (x >= D50_RANGE[0]) & (x <= D50_RANGE[1])
    fit = None
    if b0.any():
        d0 = float(np.median(y[b0]))
    else:
        fit = _line_fit(x, y)
        d0 = fit[0]
    if b50.any():
        d50 = float(np.median(y[b50]))
    else:
        fit = fit or _line_fit(x, y)
        d50 = fit[0] + 0.5 * fit[1]
    method = "bucket" if b0.any() and b50.any() else ("fit" if not (b0.any() or b50.any()) else "mixed")
    return DQuantiles(d0, d50, method)


def ovr_overlap(d0: float, d50: float) -> float:
    if not d0 > 0:
        raise ZeroBaselineDuration(f"D_0% = {d0!r}")
    return d50 / d0


def ovr_freq(d_act: float, c_gpu: float, hw: HardwareSpec, overlap: float) -> tuple[float, float]:
    """``(ovr_freq, d_peak)`` where ``d_peak`` is the cycle count timed at peak clock."""
    d_peak = c_gpu / hw.peak_gpu_freq
    return (d_act / d_peak) / overlap, d_peak


# ---------------------------------------------------------------------------
# rows


@dataclass
class BreakdownRow:
    operation: str
    config: str
    d_thr_s: float = math.nan
    ovr_inst: float = math.nan
    ovr_util: float = math.nan
    ovr_overlap: float = math.nan
    ovr_freq: float = math.nan
    d_peak_s: float = math.nan
    d_act_s: float = math.nan
    d0_s: float = math.nan
    d50_s: float = math.nan
    residual: float = math.nan
    quantile_method: str = ""
    reasons: list[str] = field(default_factory=list)
    anomalies: list[str] = field(default_factory=list)

    @property
    def partial(self) -> bool:
        return bool(self.reasons)

    def to_dict(self) -> dict:
        return {
            "op": self.operation, "config": self.config, "d_thr_s": self.d_thr_s,
            "ovr_inst": self.ovr_inst, "ovr_util": self.ovr_util, "ovr_overlap": self.ovr_overlap,
            "ovr_freq": self.ovr_freq, "d_peak_s": self.d_peak_s, "d_act_s": self.d_act_s,
            "d0_s": self.d0_s, "d50_s": self.d50_s, "residual": self.residual,
            "quantile_method": self.quantile_method, "reasons": list(self.reasons),
            "anomalies": list(self.anomalies),
        }


def _reason(e: Exception) -> str:
    if isinstance(e, MissingCounter):
        return str(e)
    return f"{type(e).__name__}({e})"


def _median_of(values: np.ndarray, name: str) -> float:
    v = values[np.isfinite(values)]
    if not len(v):
        raise MissingCounter(name)
    return float(np.median(v))


def breakdown_row(operation: str, inst: pd.DataFrame, workload: WorkloadSpec,
                  hw: HardwareSpec) -> BreakdownRow:
    """One row from the sampled instances of a single operation.

    ``inst`` needs ``duration_ns`` and ``overlap`` columns and, when counters
    were collected, per-instance sums ``GPU_CYCLES`` and ``MFMA_FLOPS`` plus the
    registry metric ``mfma_util``. Failures leave NaN factors and a reason.
    """
    row = BreakdownRow(operation, workload.config_label)

    def col(name):
        if name not in inst:
            raise MissingCounter(name)
        return inst[name].to_numpy(dtype=float)

    def attempt(fn):
        try:
            return fn()
        except (ChopperError, ValueError, KeyError) as e:
            row.reasons.append(_reason(e))
            return None

    dur = inst["duration_ns"].to_numpy(dtype=float) * 1e-9
    if len(dur):
        row.d_act_s = float(np.median(dur))
    flops = attempt(lambda: theoretical_flops(operation, workload))
    if flops is not None:
        row.d_thr_s = d_thr(flops, hw)
        performed = attempt(lambda: _median_of(col(MFMA_FLOPS), MFMA_FLOPS))
        if performed is not None:
            row.ovr_inst = attempt(lambda: ovr_inst(OperationFlops(flops, performed))) or math.nan
    util = attempt(lambda: _median_of(col(MFMA_UTIL), MFMA_UTIL))
    if util is not None:
        row.ovr_util = attempt(lambda: ovr_util(util)) or math.nan

    pairs = list(zip(inst["overlap"].to_numpy(dtype=float).tolist(), dur.tolist()))
    pairs = [p for p in pairs if math.isfinite(p[0])]
    q = attempt(lambda: estimate_d_quantiles(pairs))
    if q is not None:
        row.d0_s, row.d50_s, row.quantile_method = q.d0, q.d50, q.method
        row.ovr_overlap = attempt(lambda: ovr_overlap(q.d0, q.d50)) or math.nan

    c_gpu = attempt(lambda: _median_of(col(GPU_CYCLES), GPU_CYCLES))
    if c_gpu is not None:
        # NaN overlap (too few instances) leaves ovr_freq NaN but d_peak defined
        row.ovr_freq, row.d_peak_s = ovr_freq(row.d_act_s, c_gpu, hw, row.ovr_overlap)

    product = row.d_thr_s * row.ovr_inst * row.ovr_util * row.ovr_overlap * row.ovr_freq
    if math.isfinite(product) and product > 0:
        row.residual = row.d_act_s / product
    if row.ovr_inst < 1:
        row.anomalies.append(f"ovr_inst<1 ({row.ovr_inst:.6g})")
    if row.ovr_overlap < 1:
        row.anomalies.append(f"ovr_overlap<1 ({row.ovr_overlap:.6g})")
    return row


def compose_breakdown(instances: pd.DataFrame, workload: WorkloadSpec,
                      hw: HardwareSpec) -> list[BreakdownRow]:
    """Rows for every gemm/fa operation over the sampled instances, ordered by label."""
    sampled = instances[(instances["iteration"] >= workload.warmup_iters)
                        & (instances["iteration"] < workload.warmup_iters + workload.sampled_iters)
                        & instances["op_type"].isin([OpType.gemm.value, OpType.fa.value])]
    return [breakdown_row(op, grp, workload, hw)
            for op, grp in sampled.groupby("operation", sort=True)]


def breakdown_frame(rows: Sequence[BreakdownRow]) -> pd.DataFrame:
    data = [{c: r.to_dict()[c] for c in BREAKDOWN_COLUMNS} for r in rows]
    return pd.DataFrame(data, columns=BREAKDOWN_COLUMNS)
