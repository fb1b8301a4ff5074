"""End-to-end analysis of one trace bundle."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd

from . import breakdown as bd
from .align import annotate_kernels, align_counter_columns, group_instances
from .errors import MissingCounter, TraceIOError, ValidationFailed
from .expr import DEFAULT_REGISTRY, DURATION, MetricExpr, parse_registry
from .ingest import (CHROME_TRACE_FILE, KERNELS_FILE, REGISTRY_FILE, DEFAULT_RULES, load_canonical,
                     load_side_inputs, load_specs, parse_runtime_trace, read_json)
from .metrics import (CpuUtilSummary, Throughput, cpu_summary, iteration_rollup, launch_columns,
                      metric_frame, overlap_columns, throughput, weighted_instance_overlap)
from .model import COMPUTE, COPY, KernelTable, TraceStore, validate_store

log = logging.getLogger(__name__)

# per-instance columns exported to the metric frame, besides registry metrics
BASE_METRICS = ("duration_ns", "runtime_ns", "overlap", "prep_ns", "call_ns", "launch_ns")


def load_bundle(directory) -> TraceStore:
    """Load a canonical bundle, or a raw runtime trace (``trace.json``) plus spec files."""
    d = Path(directory)
    if not d.is_dir():
        raise TraceIOError(d, "not a directory")
    if (d / KERNELS_FILE).exists() or not (d / CHROME_TRACE_FILE).exists():
        return load_canonical(d)
    try:
        raw = (d / CHROME_TRACE_FILE).read_bytes()
    except OSError as e:
        raise TraceIOError(d / CHROME_TRACE_FILE, e.strerror or "unreadable") from e
    trace = parse_runtime_trace(raw, DEFAULT_RULES)
    annotated = annotate_kernels(trace.kernels, trace.spans)
    hw, wl = load_specs(d)
    counters, cpu = load_side_inputs(d)
    store = TraceStore.build(annotated.kernels, hw, wl, counters, cpu)
    violations = validate_store(store)
    if violations:
        raise ValidationFailed(violations)
    return store


def load_registry(path=None, bundle=None) -> dict[str, MetricExpr]:
    """Registry from ``path``, else the bundle's ``registry.json``, else the default."""
    if path is None and bundle is not None and (Path(bundle) / REGISTRY_FILE).exists():
        path = Path(bundle) / REGISTRY_FILE
    mapping = DEFAULT_REGISTRY if path is None else read_json(path)
    return parse_registry(mapping)


@dataclass
class Analysis:
    store: TraceStore
    kernel_instance: np.ndarray
    prep_ns: np.ndarray
    call_ns: np.ndarray
    overlap: np.ndarray
    instances: pd.DataFrame
    rollup: pd.DataFrame
    throughput: Throughput
    cpu: CpuUtilSummary | None
    breakdown: list[bd.BreakdownRow]
    metrics: pd.DataFrame
    metric_names: list[str]
    errors: list[dict] = field(default_factory=list)

    @property
    def config(self) -> str:
        return self.store.workload.config_label


def _instance_sums(ids: np.ndarray, values: np.ndarray, m: int) -> np.ndarray:
    ok = ids >= 0
    # NaN members poison the sum on purpose: a partial counter total is not a total
    return np.bincount(ids[ok], weights=values[ok], minlength=m)


def analyze(store: TraceStore, registry: Mapping[str, MetricExpr] | None = None) -> Analysis:
    """Run alignment, metrics and breakdown on a validated store.

    Errors that only affect part of the output (missing counters, zero-length
    kernels, unusable breakdown inputs) are collected in ``errors``. Alignment
    errors propagate because nothing counter-based can be trusted after them.
    """
    registry = parse_registry(DEFAULT_REGISTRY) if registry is None else dict(registry)
    t: KernelTable = store.kernels
    errors: list[dict] = []

    counters = align_counter_columns(t, store.counters)
    prep, call = launch_columns(t)
    overlap = overlap_columns(t)

    target = (t.cat == COMPUTE) | (t.cat == COPY)
    zero = np.flatnonzero(target & (t.end == t.start))
    if len(zero):
        errors.append({"stage": "metrics", "error": "ZeroDurationKernel",
                       "detail": f"{len(zero)} kernels excluded from overlap",
                       "kernels": [[int(t.gpu[i]), int(t.corr[i])] for i in zero[:20]]})

    idx = group_instances(t)
    inst = idx.frame
    m = len(inst)
    ids = idx.kernel_instance
    runtime = (t.end - t.start).astype(float)
    inst["overlap"] = weighted_instance_overlap(ids, runtime, overlap, m)
    for name, col in (("prep_ns", prep), ("call_ns", call)):
        inst[name] = _instance_sums(ids, col.astype(float), m).astype(np.int64)
    inst["launch_ns"] = inst["prep_ns"] + inst["call_ns"]

    env = {DURATION: inst["runtime_ns"].to_numpy(dtype=float) * 1e-9}
    for cname in sorted(counters):
        inst[cname] = _instance_sums(ids, counters[cname], m)
        env[cname] = inst[cname].to_numpy()
    metric_names = []
    for mname in sorted(registry):
        try:
            inst[mname] = registry[mname].evaluate_array(env)
            metric_names.append(mname)
        except MissingCounter as e:
            errors.append({"stage": "metrics", "error": "MissingCounter", "metric": mname,
                           "detail": str(e)})

    rollup = iteration_rollup(t, prep, call, store.workload)
    tput = throughput(rollup, store.workload, store.hardware)

    cpu = None
    if store.cpu_samples:
        cpu = cpu_summary(store.cpu_samples, store.hardware.core_topology,
                          store.hardware.logical_core_count)

    rows = bd.compose_breakdown(inst, store.workload, store.hardware)
    for r in rows:
        if r.reasons:
            errors.append({"stage": "breakdown", "error": "PartialRow", "op": r.operation,
                           "config": r.config, "detail": "; ".join(r.reasons)})

    names = list(BASE_METRICS) + metric_names
    frame = metric_frame(inst, names)
    return Analysis(store, ids, prep, call, overlap, inst, rollup, tput, cpu, rows, frame, names, errors)


def analyze_bundle(directory, registry_path=None) -> Analysis:
    store = load_bundle(directory)
    return analyze(store, load_registry(registry_path, directory))

