"""First-order derived metrics.

Each metric has a vectorized core working on :class:`~chopper.model.KernelTable`
columns and a record-level function for callers holding a handful of kernels.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import ZeroDurationKernel
from .expr import DURATION, MetricExpr
from .model import (COMMUNICATION, COMPUTE, COPY, Category, CpuSample, HardwareSpec,
                    KernelRecord, KernelTable, WorkloadSpec)


# ---------------------------------------------------------------------------
# launch overhead


@dataclass(frozen=True)
class LaunchOverhead:
    prep_ns: int
    call_ns: int

    @property
    def launch_ns(self) -> int:
        return self.prep_ns + self.call_ns


def split_bubble(prev_end, dispatch, start):
    """Split the bubble before each kernel into preparation and call overhead.

    The bubble ``[prev_end, start]`` is cut at the dispatch time clamped into
    that interval: host time spent before dispatch is preparation, the rest is
    call. When the host dispatches before the previous kernel ends this is
    ``prep = 0, call = start - prev_end``; when the device starts early both
    are zero. Works elementwise on ints or integer arrays.
    """
    prev_end = np.asarray(prev_end, dtype=np.int64)
    dispatch = np.asarray(dispatch, dtype=np.int64)
    start = np.asarray(start, dtype=np.int64)
    upper = np.maximum(start, prev_end)
    cut = np.clip(dispatch, prev_end, upper)
    prep = cut - prev_end
    call = upper - cut
    return prep, call


def launch_columns(table: KernelTable) -> tuple[np.ndarray, np.ndarray]:
    """Per-row ``(prep, call)`` for Compute kernels; zero elsewhere.

    The predecessor of a compute kernel is the previous compute kernel on the
    same GPU in dispatch order (across iteration boundaries). Communication
    and copy kernels never act as predecessors; they fall inside bubbles.
    """
    n = len(table)
    prep = np.zeros(n, dtype=np.int64)
    call = np.zeros(n, dtype=np.int64)
    rows = np.flatnonzero(table.cat == COMPUTE)
    if not len(rows):
        return prep, call
    gpu = table.gpu[rows]
    prev_end = np.empty(len(rows), dtype=np.int64)
    prev_end[1:] = table.end[rows[:-1]]
    first = np.ones(len(rows), dtype=bool)
    first[1:] = gpu[1:] != gpu[:-1]
    p, c = split_bubble(np.where(first, table.start[rows], prev_end),
                        table.dispatch[rows], table.start[rows])
    p[first] = 0
    c[first] = 0
    prep[rows] = p
    call[rows] = c
    return prep, call


def launch_overheads(kernels: Sequence[KernelRecord]) -> list[LaunchOverhead]:
    """Launch overhead of each Compute kernel of one GPU, in dispatch order.

    Non-compute kernels in ``kernels`` are skipped. The first compute kernel
    has no predecessor and gets zero overhead.
    """
    ks = sorted((k for k in kernels if Category(k.category) is Category.Compute),
                key=lambda k: (k.dispatch_ts, k.correlation_id))
    if len({k.gpu_id for k in ks}) > 1:
        raise ValueError("launch_overheads expects kernels of a single GPU")
    if not ks:
        return []
    prev_end = [ks[0].start_ts] + [k.end_ts for k in ks[:-1]]
    prep, call = split_bubble(prev_end, [k.dispatch_ts for k in ks], [k.start_ts for k in ks])
    prep[0] = call[0] = 0
    return [LaunchOverhead(int(p), int(c)) for p, c in zip(prep, call)]


# ---------------------------------------------------------------------------
# overlap


def merge_intervals(starts: np.ndarray, ends: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Union of half-open intervals as sorted disjoint ``(starts, ends)``."""
    starts = np.asarray(starts, dtype=np.int64)
    ends = np.asarray(ends, dtype=np.int64)
    keep = ends > starts
    starts, ends = starts[keep], ends[keep]
    if not len(starts):
        return starts, ends
    order = np.argsort(starts, kind="stable")
    s, e = starts[order], np.maximum.accumulate(ends[order])
    new = np.ones(len(s), dtype=bool)
    new[1:] = s[1:] > e[:-1]
    heads = np.flatnonzero(new)
    tails = np.append(heads[1:] - 1, len(s) - 1)
    return s[heads], e[tails]


def covered_length(u_start: np.ndarray, u_end: np.ndarray, a, b) -> np.ndarray:
    """Length of ``[a, b)`` covered by the disjoint sorted union ``u``."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if not len(u_start):
        return np.zeros(np.broadcast(a, b).shape, dtype=np.int64)
    lengths = u_end - u_start
    before = np.concatenate(([0], np.cumsum(lengths)))

    def cum(t):
        k = np.searchsorted(u_start, t, side="right") - 1
        kk = np.maximum(k, 0)
        inside = np.clip(t - u_start[kk], 0, lengths[kk])
        return np.where(k >= 0, before[kk] + inside, 0)

    return cum(b) - cum(a)


def overlap_columns(table: KernelTable) -> np.ndarray:
    """Overlap ratio of every Compute/Copy kernel; NaN elsewhere and for zero-length kernels.

    Only communication on a different stream of the same GPU counts.
    """
    out = np.full(len(table), np.nan)
    for gpu in table.gpu_ids:
        sl = table.gpu_slice(gpu)
        cat = table.cat[sl]
        stream = table.stream[sl]
        start, end = table.start[sl], table.end[sl]
        comm = cat == COMMUNICATION
        target = ((cat == COMPUTE) | (cat == COPY)) & (end > start)
        for s in np.unique(stream[target]):
            sel = comm & (stream != s)
            us, ue = merge_intervals(start[sel], end[sel])
            rows = np.flatnonzero(target & (stream == s))
            cov = covered_length(us, ue, start[rows], end[rows])
            out[sl.start + rows] = cov / (end[rows] - start[rows])
    return out


def overlap_ratio(target: KernelRecord, comm_kernels: Iterable[KernelRecord]) -> float:
    """Fraction of ``target``'s runtime covered by communication on other streams of its GPU."""
    dur = target.end_ts - target.start_ts
    if dur <= 0:
        raise ZeroDurationKernel(f"kernel {target.correlation_id} on gpu {target.gpu_id} has zero duration")
    others = [k for k in comm_kernels if k.gpu_id == target.gpu_id and k.stream_id != target.stream_id]
    us, ue = merge_intervals(np.array([k.start_ts for k in others], dtype=np.int64),
                             np.array([k.end_ts for k in others], dtype=np.int64))
    cov = covered_length(us, ue, target.start_ts, target.end_ts)
    return float(cov) / dur


def operation_overlap(instance) -> float:
    """Runtime-weighted mean overlap of an instance's member kernels.

    ``instance`` is an :class:`~chopper.align.OperationInstance` whose kernels
    carry an ``overlap`` counter entry, or an iterable of ``(runtime, ratio)``.
    """
    if hasattr(instance, "kernels"):
        pairs = [(a.kernel.end_ts - a.kernel.start_ts, a.counters["overlap"]) for a in instance.kernels]
    else:
        pairs = list(instance)
    total = sum(w for w, _ in pairs)
    if total <= 0:
        raise ZeroDurationKernel("instance has no runtime to weight overlap by")
    return sum(w * r for w, r in pairs) / total


def weighted_instance_overlap(kernel_instance: np.ndarray, runtime: np.ndarray, ratio: np.ndarray,
                              n_instances: int) -> np.ndarray:
    ok = (kernel_instance >= 0) & ~np.isnan(ratio)
    ids = kernel_instance[ok]
    w = runtime[ok].astype(float)
    num = np.bincount(ids, weights=w * ratio[ok], minlength=n_instances)
    den = np.bincount(ids, weights=w, minlength=n_instances)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / den, np.nan)


def overlap_duration_correlation(overlap: Sequence[float], duration: Sequence[float]) -> float:
    """Pearson correlation; NaN when either side is constant."""
    x = np.asarray(overlap, dtype=float)
    y = np.asarray(duration, dtype=float)
    if len(x) < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return float("nan")
    return float(np.corrcoef(x, y)[0, 1])


# ---------------------------------------------------------------------------
# iteration rollup and throughput


def iteration_rollup(table: KernelTable, prep: np.ndarray, call: np.ndarray,
                     workload: WorkloadSpec) -> pd.DataFrame:
    """Per sampled ``(gpu, iteration)``: summed compute runtime and launch overhead."""
    sel = (table.cat == COMPUTE) & table.annotated
    it = table.iteration
    sel &= (it >= workload.warmup_iters) & (it < workload.warmup_iters + workload.sampled_iters)
    df = pd.DataFrame({
        "gpu": table.gpu[sel],
        "iteration": it[sel],
        "duration_ns": (table.end - table.start)[sel],
        "prep_ns": prep[sel],
        "call_ns": call[sel],
    })
    out = df.groupby(["gpu", "iteration"], sort=True).sum().reset_index()
    out["launch_ns"] = out["prep_ns"] + out["call_ns"]
    return out[["gpu", "iteration", "duration_ns", "launch_ns", "prep_ns", "call_ns"]]


def tokens_per_iteration(workload: WorkloadSpec, hardware: HardwareSpec) -> float:
    return workload.batch_size * workload.seq_len * hardware.gpu_count * workload.token_multiplier


@dataclass(frozen=True)
class Throughput:
    per_iteration: pd.DataFrame
    median_tokens_per_s: float


def throughput(rollup: pd.DataFrame, workload: WorkloadSpec, hardware: HardwareSpec) -> Throughput:
    """Tokens/s per iteration, timed by the slowest GPU's duration plus launch overhead."""
    tokens = tokens_per_iteration(workload, hardware)
    total = rollup.assign(total_ns=rollup["duration_ns"] + rollup["launch_ns"])
    per = total.groupby("iteration", sort=True)["total_ns"].max().reset_index(name="max_total_ns")
    per["tokens"] = tokens
    per["tokens_per_s"] = tokens / (per["max_total_ns"] * 1e-9)
    med = float(np.median(per["tokens_per_s"])) if len(per) else float("nan")
    return Throughput(per, med)


# ---------------------------------------------------------------------------
# CPU utilization


@dataclass(frozen=True)
class CpuUtilSummary:
    ts: np.ndarray
    c_active: np.ndarray
    c_min: np.ndarray
    median_active: float
    median_min: float
    physical_occupancy: float
    logical_cores: int
    physical_cores: int

    def to_dict(self) -> dict:
        return {
            "ts_ns": self.ts.tolist(),
            "c_active": self.c_active.tolist(),
            "c_min": self.c_min.tolist(),
            "median_active": self.median_active,
            "median_min": self.median_min,
            "physical_occupancy": self.physical_occupancy,
            "logical_cores": self.logical_cores,
            "physical_cores": self.physical_cores,
        }


def cpu_summary(samples: Sequence[CpuSample], topology: Mapping[int, int],
                logical_cores: int | None = None) -> CpuUtilSummary:
    """Active and minimum core counts per timestamp plus physical-core occupancy.

    ``C_active`` counts cores with non-zero utilization; ``C_min`` sums the
    utilization fractions exactly and rounds once.
    """
    by_ts: dict[int, list[float]] = {}
    active_logical: set[int] = set()
    for s in samples:
        by_ts.setdefault(s.ts, []).append(s.util_pct)
        if s.util_pct > 0:
            active_logical.add(s.logical_core_id)
    ts = np.array(sorted(by_ts), dtype=np.int64)
    c_active = np.array([sum(1 for u in by_ts[t] if u > 0) for t in ts.tolist()], dtype=np.int64)
    c_min = np.array([float(sum(map(Fraction, by_ts[t])) / 100) for t in ts.tolist()], dtype=float)
    physical = set(topology.values())
    used = {topology[c] for c in active_logical if c in topology}
    return CpuUtilSummary(
        ts=ts,
        c_active=c_active,
        c_min=c_min,
        median_active=float(np.median(c_active)) if len(ts) else float("nan"),
        median_min=float(np.median(c_min)) if len(ts) else float("nan"),
        physical_occupancy=len(used) / len(physical) if physical else float("nan"),
        logical_cores=logical_cores if logical_cores is not None else len(topology),
        physical_cores=len(physical),
    )


# ---------------------------------------------------------------------------
# counter-derived metrics


def eval_metric(expr: MetricExpr | str, kernel) -> float:
    """Evaluate a registry expression against one aligned kernel."""
    if isinstance(expr, str):
        expr = MetricExpr(expr)
    env = dict(kernel.counters)
    env[DURATION] = kernel.dur_s
    return float(expr.evaluate(env))


METRIC_FRAME_COLUMNS = ["gpu", "iteration", "phase", "layer", "operation", "op_type", "metric", "value"]


def metric_frame(instances: pd.DataFrame, metrics: Sequence[str]) -> pd.DataFrame:
    """Long-form metric table: one row per (instance, metric) with a finite value."""
    keys = ["gpu", "iteration", "phase", "layer", "operation", "op_type"]
    parts = []
    for m in metrics:
        part = instances[keys].copy()
        part["metric"] = m
        part["value"] = instances[m].astype(float).to_numpy()
        parts.append(part[np.isfinite(part["value"].to_numpy())])
    if not parts:
        return pd.DataFrame(columns=METRIC_FRAME_COLUMNS)
    return pd.concat(parts, ignore_index=True)[METRIC_FRAME_COLUMNS]
