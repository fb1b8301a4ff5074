"""Annotation, counter alignment and operation grouping."""

from __future__ import annotations

import bisect
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import AmbiguousSpans, ConflictingCounter, DanglingLink, MismatchedKernelSequence
from .ingest import AnnotationSpan
from .model import (COMPUTE, COPY, PHASES, UNLABELED, AnnotationPath,
                    Category, CounterSample, CounterTable, KernelRecord, KernelTable, OpType,
                    default_op_type)

CONFLICT_RTOL = 1e-9

LEVELS = ("iteration", "phase", "layer", "operation")


@dataclass
class AnnotationResult:
    kernels: list[KernelRecord]
    unannotated: list[tuple[int, int]] = field(default_factory=list)
    unlabeled: list[tuple[int, int]] = field(default_factory=list)


class _LevelIndex:
    """Spans of one level, searchable for the innermost span containing a time."""

    def __init__(self, level: str, spans: Sequence[AnnotationSpan]):
        self.level = level
        self.spans = sorted(spans, key=lambda s: (s.start_ns, -s.end_ns))
        self.starts = [s.start_ns for s in self.spans]
        self.max_end = list(np.maximum.accumulate([s.end_ns for s in self.spans])) if self.spans else []

    def find(self, t: int) -> AnnotationSpan | None:
        i = bisect.bisect_right(self.starts, t) - 1
        hits = []
        while i >= 0 and self.max_end[i] > t:
            s = self.spans[i]
            if s.start_ns <= t < s.end_ns:
                hits.append(s)
            i -= 1
        if not hits:
            return None
        best = min(hits, key=lambda s: s.end_ns - s.start_ns)
        for other in hits:
            nested = other.start_ns <= best.start_ns and best.end_ns <= other.end_ns
            if other is not best and not nested:
                raise AmbiguousSpans(self.level, best, other, t)
        return best


def annotate_kernels(kernels: Iterable[KernelRecord], spans: Iterable[AnnotationSpan]) -> AnnotationResult:
    """Label each kernel with the innermost span of every level containing its dispatch.

    Spans are half-open ``[start, end)``. Kernels outside every iteration span,
    or inside one but outside every phase span, stay unannotated. Kernels with
    no operation span get the per-phase pseudo-operation ``"unlabeled"``.
    """
    spans = list(spans)
    gpus = {s.gpu_id for s in spans}
    index: dict[tuple, _LevelIndex] = {}
    for gpu in gpus | {None}:
        scoped = [s for s in spans if s.gpu_id is None or s.gpu_id == gpu]
        for level in LEVELS:
            index[(gpu, level)] = _LevelIndex(level, [s for s in scoped if s.level == level])

    out = AnnotationResult([])
    for k in kernels:
        scope = k.gpu_id if k.gpu_id in gpus else None
        found = {lv: index[(scope, lv)].find(k.dispatch_ts) for lv in LEVELS}
        if found["iteration"] is None or found["phase"] is None:
            out.unannotated.append((k.gpu_id, k.correlation_id))
            out.kernels.append(replace(k, annotation=None))
            continue
        if found["operation"] is None:
            op = UNLABELED
            out.unlabeled.append((k.gpu_id, k.correlation_id))
        else:
            op = found["operation"].value
        cat = Category(k.category)
        if cat is Category.Communication:
            op_type = OpType.comm
        elif cat is Category.Copy:
            op_type = OpType.copy
        else:
            op_type = default_op_type(op)
        ann = AnnotationPath(
            iteration=found["iteration"].value,
            phase=found["phase"].value,
            operation=op,
            op_type=op_type,
            layer=found["layer"].value if found["layer"] is not None else None,
        )
        out.kernels.append(replace(k, annotation=ann))
    return out


# ---------------------------------------------------------------------------
# counter alignment


@dataclass(frozen=True)
class AlignedKernel:
    kernel: KernelRecord
    counters: Mapping[str, float]

    @property
    def dur_s(self) -> float:
        return (self.kernel.end_ts - self.kernel.start_ts) * 1e-9


def align_counter_columns(table: KernelTable, counters: CounterTable) -> dict[str, np.ndarray]:
    """Merge serialized counter passes onto the runtime kernels by position.

    Returns one float column per counter name, aligned with ``table`` rows;
    kernels a pass did not cover hold NaN.
    """
    df = counters.frame
    n = len(table)
    columns: dict[str, np.ndarray] = {}
    if not len(df):
        return columns
    names = table.name_array()
    for (gpu, pass_id), grp in df.groupby(["gpu_id", "pass_id"], sort=True):
        sl = table.gpu_slice(int(gpu))
        runtime = names[sl]
        idx = grp["dispatch_index"].to_numpy()
        uniq, first, pos = np.unique(idx, return_index=True, return_inverse=True)
        seq = grp["kernel_name"].to_numpy(dtype=object)
        pass_names = seq[first]
        # every row of one dispatch index must name the same kernel
        inconsistent = seq != pass_names[pos]
        if inconsistent.any():
            j = int(pos[np.flatnonzero(inconsistent)[0]])
            raise MismatchedKernelSequence(int(gpu), int(pass_id), j,
                                           runtime[j] if j < len(runtime) else None,
                                           seq[np.flatnonzero(inconsistent)[0]])
        m = min(len(runtime), len(pass_names))
        diff = np.flatnonzero(runtime[:m] != pass_names[:m])
        if len(diff) or len(runtime) != len(pass_names):
            j = int(diff[0]) if len(diff) else m
            raise MismatchedKernelSequence(
                int(gpu), int(pass_id), j,
                runtime[j] if j < len(runtime) else None,
                pass_names[j] if j < len(pass_names) else None)
        rows = sl.start + pos
        values = grp["value"].to_numpy(dtype=float)
        cnames = grp["counter_name"].to_numpy(dtype=object)
        for cname in pd.unique(cnames):
            sel = cnames == cname
            col = columns.setdefault(cname, np.full(n, np.nan))
            r, v = rows[sel], values[sel]
            prev = col[r]
            seen = ~np.isnan(prev)
            if seen.any():
                scale = np.maximum(np.abs(prev[seen]), np.abs(v[seen]))
                bad = np.abs(prev[seen] - v[seen]) > CONFLICT_RTOL * scale
                if bad.any():
                    k = int(np.flatnonzero(seen)[np.flatnonzero(bad)[0]])
                    raise ConflictingCounter(int(gpu), int(r[k] - sl.start), cname,
                                             float(prev[k]), float(v[k]))
            col[r] = v
    return columns


def align_counters(kernels: Mapping[int, Sequence[KernelRecord]] | Sequence[KernelRecord],
                   samples: Iterable[CounterSample] | CounterTable) -> list[AlignedKernel]:
    """Record-level wrapper around :func:`align_counter_columns`."""
    if isinstance(kernels, Mapping):
        kernels = [k for g in sorted(kernels) for k in kernels[g]]
    table = KernelTable.from_records(kernels)
    counters = samples if isinstance(samples, CounterTable) else CounterTable.from_samples(samples)
    cols = align_counter_columns(table, counters)
    out = []
    for i in range(len(table)):
        vals = {c: float(a[i]) for c, a in cols.items() if not np.isnan(a[i])}
        out.append(AlignedKernel(table.record(i), vals))
    return out


# ---------------------------------------------------------------------------
# operation instances


@dataclass
class OperationInstance:
    gpu_id: int
    iteration: int
    phase: str
    layer: int | None
    operation: str
    op_type: str
    kernels: list[AlignedKernel]
    duration_ns: int
    runtime_ns: int
    overlap_ratio: float = float("nan")


@dataclass(frozen=True)
class InstanceIndex:
    """Grouping of kernel rows into operation instances.

    ``kernel_instance[i]`` is the instance id of row ``i`` (or -1);
    ``frame`` has one row per instance in ``(gpu, iteration, first dispatch)`` order.
    """

    kernel_instance: np.ndarray
    frame: pd.DataFrame


INSTANCE_KEY = ("gpu", "iteration", "phase", "layer", "op_code")


def group_instances(table: KernelTable) -> InstanceIndex:
    """Group annotated Compute/Copy kernels by ``(gpu, iteration, phase, layer, operation)``.

    Duration is the span from the first start to the last end, so bubbles
    between member kernels count; communication kernels are never members.
    """
    n = len(table)
    member = table.annotated & ((table.cat == COMPUTE) | (table.cat == COPY))
    rows = np.flatnonzero(member)
    keys = [getattr(table, k)[rows] for k in INSTANCE_KEY]
    order = np.lexsort(tuple([rows] + keys[::-1]))
    rows = rows[order]
    keys = [k[order] for k in keys]
    if len(rows):
        change = np.zeros(len(rows), dtype=bool)
        change[0] = True
        for k in keys:
            change[1:] |= k[1:] != k[:-1]
        starts = np.flatnonzero(change)
    else:
        starts = np.zeros(0, dtype=np.int64)
    # reorder groups by (gpu, iteration, first row) so instances follow the timeline
    first_rows = rows[starts] if len(rows) else rows
    g_gpu = table.gpu[first_rows]
    g_iter = table.iteration[first_rows]
    g_order = np.lexsort((first_rows, g_iter, g_gpu))
    rank = np.empty(len(starts), dtype=np.int64)
    rank[g_order] = np.arange(len(starts))

    group_of_sorted = np.cumsum(change) - 1 if len(rows) else np.zeros(0, dtype=np.int64)
    kernel_instance = np.full(n, -1, dtype=np.int64)
    kernel_instance[rows] = rank[group_of_sorted]

    ids = kernel_instance[rows]
    m = len(starts)
    start_min = np.full(m, np.iinfo(np.int64).max, dtype=np.int64)
    end_max = np.full(m, np.iinfo(np.int64).min, dtype=np.int64)
    np.minimum.at(start_min, ids, table.start[rows])
    np.maximum.at(end_max, ids, table.end[rows])
    runtime = np.bincount(ids, weights=(table.end[rows] - table.start[rows]), minlength=m)
    count = np.bincount(ids, minlength=m)

    fr = first_rows[g_order]
    layer = table.layer[fr]
    labels = np.asarray(table.op_labels, dtype=object)
    op = labels[table.op_code[fr]] if m else np.zeros(0, dtype=object)
    phases = np.asarray([p.value for p in PHASES], dtype=object)
    frame = pd.DataFrame({
        "gpu": table.gpu[fr],
        "iteration": table.iteration[fr],
        "phase": phases[table.phase[fr]] if m else np.zeros(0, dtype=object),
        "layer": pd.array([None if v < 0 else int(v) for v in layer.tolist()], dtype="Int64"),
        "operation": op,
        "op_type": np.asarray([default_op_type(o).value for o in op], dtype=object),
        "n_kernels": count.astype(np.int64),
        "start_ns": start_min,
        "end_ns": end_max,
        "duration_ns": end_max - start_min,
        "runtime_ns": runtime.astype(np.int64),
    })
    return InstanceIndex(kernel_instance, frame)


def build_operation_instances(kernels: Sequence[AlignedKernel] | Sequence[KernelRecord]) -> list[OperationInstance]:
    """Record-level wrapper around :func:`group_instances`."""
    aligned = [k if isinstance(k, AlignedKernel) else AlignedKernel(k, {}) for k in kernels]
    table = KernelTable.from_records(a.kernel for a in aligned)
    # from_records sorts; map rows back to the aligned objects
    by_key = {(a.kernel.gpu_id, a.kernel.correlation_id): a for a in aligned}
    idx = group_instances(table)
    members: dict[int, list[AlignedKernel]] = defaultdict(list)
    for i in np.flatnonzero(idx.kernel_instance >= 0):
        members[int(idx.kernel_instance[i])].append(by_key[(int(table.gpu[i]), int(table.corr[i]))])
    out = []
    for j, row in enumerate(idx.frame.itertuples(index=False)):
        out.append(OperationInstance(
            gpu_id=int(row.gpu), iteration=int(row.iteration), phase=row.phase,
            layer=None if pd.isna(row.layer) else int(row.layer), operation=row.operation,
            op_type=row.op_type, kernels=members[j], duration_ns=int(row.duration_ns),
            runtime_ns=int(row.runtime_ns)))
    return out


def build_fwd_bwd_map(kernels: Iterable[KernelRecord] | KernelTable) -> dict[tuple[int, int], int]:
    """``(gpu, backward correlation) -> forward correlation`` for kernels carrying a link."""
    table = kernels if isinstance(kernels, KernelTable) else KernelTable.from_records(kernels)
    out: dict[tuple[int, int], int] = {}
    linked = np.flatnonzero(table.fwd_link >= 0)
    for gpu in np.unique(table.gpu[linked]):
        sl = table.gpu_slice(int(gpu))
        known = set(table.corr[sl].tolist())
        for i in linked[table.gpu[linked] == gpu]:
            target = int(table.fwd_link[i])
            if target not in known:
                raise DanglingLink(int(gpu), int(table.corr[i]), target)
            out[(int(gpu), int(table.corr[i]))] = target
    return out
