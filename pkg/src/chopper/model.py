"""In-memory trace model.

Kernels are held column-wise in a :class:`KernelTable` so that million-kernel
traces stay cheap; :class:`KernelRecord` is the row view handed out to callers
that want one kernel at a time.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
import pandas as pd


class Category(enum.Enum):
    Compute = "Compute"
    Communication = "Communication"
    Copy = "Copy"
    Other = "Other"


class Phase(enum.Enum):
    Forward = "Forward"
    Backward = "Backward"
    Optimizer = "Optimizer"


class OpType(enum.Enum):
    gemm = "gemm"
    vec = "vec"
    fa = "fa"
    comm = "comm"
    copy = "copy"
    other = "other"


CATEGORIES = list(Category)
PHASES = list(Phase)
OP_TYPES = list(OpType)
CATEGORY_CODE = {c: i for i, c in enumerate(CATEGORIES)}
PHASE_CODE = {p: i for i, p in enumerate(PHASES)}
OP_TYPE_CODE = {t: i for i, t in enumerate(OP_TYPES)}

COMPUTE = CATEGORY_CODE[Category.Compute]
COMMUNICATION = CATEGORY_CODE[Category.Communication]
COPY = CATEGORY_CODE[Category.Copy]

# Llama decoder operations (without the f_/b_ direction prefix).
BASE_OPERATIONS: dict[str, OpType] = {
    "ie": OpType.vec,
    "ln": OpType.vec,
    "lp": OpType.gemm,
    "attn_n": OpType.vec,
    "attn_ra": OpType.vec,
    "attn_fa": OpType.fa,
    "attn_or": OpType.vec,
    "attn_op": OpType.gemm,
    "qkv_ip": OpType.gemm,
    "qkv_s": OpType.vec,
    "qkv_t": OpType.vec,
    "qkv_re": OpType.vec,
    "qkv_c": OpType.vec,
    "mlp_n": OpType.vec,
    "mlp_ra": OpType.vec,
    "mlp_gp": OpType.gemm,
    "mlp_gs": OpType.vec,
    "mlp_up": OpType.gemm,
    "mlp_gu": OpType.vec,
    "mlp_dp": OpType.gemm,
}

UNLABELED = "unlabeled"

OPERATION_VOCABULARY: dict[str, OpType] = {
    **{f"f_{b}": t for b, t in BASE_OPERATIONS.items()},
    **{f"b_{b}": t for b, t in BASE_OPERATIONS.items()},
    "b_ga": OpType.vec,
    "opt_step": OpType.vec,
    UNLABELED: OpType.other,
}


def base_operation(label: str) -> tuple[str, str | None]:
    """Split ``"b_mlp_up"`` into ``("mlp_up", "b")``; unprefixed labels get ``None``."""
    for prefix in ("f_", "b_"):
        if label.startswith(prefix) and label[2:] in BASE_OPERATIONS:
            return label[2:], prefix[0]
    return label, None


def default_op_type(label: str) -> OpType:
    return OPERATION_VOCABULARY.get(label, OpType.other)


@dataclass(frozen=True, order=True)
class Timestamp:
    """Nanoseconds since the trace epoch."""

    value: int

    def __post_init__(self):
        if self.value < 0:
            raise ValueError(f"negative timestamp {self.value}")

    @classmethod
    def from_us(cls, us: float) -> "Timestamp":
        return cls(us_to_ns(us))


def us_to_ns(us: float) -> int:
    # round() is half-to-even, which is what we want for microsecond imports
    return int(round(us * 1000))


@dataclass(frozen=True)
class AnnotationPath:
    iteration: int
    phase: Phase
    operation: str
    op_type: OpType
    layer: int | None = None


@dataclass(frozen=True)
class KernelRecord:
    gpu_id: int
    stream_id: int
    correlation_id: int
    name: str
    category: Category
    dispatch_ts: int
    start_ts: int
    end_ts: int
    annotation: AnnotationPath | None = None
    fwd_link: int | None = None

    @property
    def runtime(self) -> int:
        return self.end_ts - self.start_ts


@dataclass(frozen=True)
class CounterSample:
    gpu_id: int
    pass_id: int
    dispatch_index: int
    kernel_name: str
    counter_name: str
    value: float


@dataclass(frozen=True)
class CpuSample:
    ts: int
    logical_core_id: int
    util_pct: float


@dataclass(frozen=True)
class HardwareSpec:
    peak_flops: float
    peak_gpu_freq: float
    peak_mem_bw: float
    gpu_count: int
    logical_core_count: int
    core_topology: Mapping[int, int]

    @property
    def physical_core_count(self) -> int:
        return len(set(self.core_topology.values()))

    def to_dict(self) -> dict:
        return {
            "peak_flops": float(self.peak_flops),
            "peak_gpu_freq": float(self.peak_gpu_freq),
            "peak_mem_bw": float(self.peak_mem_bw),
            "gpu_count": int(self.gpu_count),
            "logical_core_count": int(self.logical_core_count),
            "core_topology": {str(k): int(v) for k, v in sorted(self.core_topology.items())},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "HardwareSpec":
        return cls(
            peak_flops=float(d["peak_flops"]),
            peak_gpu_freq=float(d["peak_gpu_freq"]),
            peak_mem_bw=float(d["peak_mem_bw"]),
            gpu_count=int(d["gpu_count"]),
            logical_core_count=int(d["logical_core_count"]),
            core_topology={int(k): int(v) for k, v in d["core_topology"].items()},
        )

    @classmethod
    def smt(cls, peak_flops, peak_gpu_freq, peak_mem_bw, gpu_count, logical_cores, threads_per_core=2):
        """Topology where logical core ``i`` lives on physical core ``i mod (N / threads)``."""
        physical = logical_cores // threads_per_core
        topo = {i: i % physical for i in range(logical_cores)}
        return cls(peak_flops, peak_gpu_freq, peak_mem_bw, gpu_count, logical_cores, topo)


@dataclass(frozen=True)
class WorkloadSpec:
    batch_size: int
    seq_len: int
    layer_count: int
    hidden_dim: int
    attn_heads: int
    kv_heads: int
    head_dim: int
    op_shapes: Mapping[str, Mapping[str, int]]
    warmup_iters: int
    sampled_iters: int
    token_multiplier: float = 1.0
    tag: str = ""
    bwd_gemm_mult: float = 2.0
    bwd_attn_mult: float = 2.5

    @property
    def model_dim(self) -> int:
        return self.attn_heads * self.head_dim

    @property
    def config_label(self) -> str:
        label = f"b{self.batch_size}s{self.seq_len / 1024:g}"
        return f"{label}_{self.tag}" if self.tag else label

    def is_sampled(self, iteration: int) -> bool:
        return self.warmup_iters <= iteration < self.warmup_iters + self.sampled_iters

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "seq_len": self.seq_len,
            "layer_count": self.layer_count,
            "hidden_dim": self.hidden_dim,
            "attn_heads": self.attn_heads,
            "kv_heads": self.kv_heads,
            "head_dim": self.head_dim,
            "op_shapes": {k: dict(sorted(v.items())) for k, v in sorted(self.op_shapes.items())},
            "warmup_iters": self.warmup_iters,
            "sampled_iters": self.sampled_iters,
            "token_multiplier": float(self.token_multiplier),
            "tag": self.tag,
            "bwd_gemm_mult": float(self.bwd_gemm_mult),
            "bwd_attn_mult": float(self.bwd_attn_mult),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "WorkloadSpec":
        return cls(
            batch_size=int(d["batch_size"]),
            seq_len=int(d["seq_len"]),
            layer_count=int(d["layer_count"]),
            hidden_dim=int(d["hidden_dim"]),
            attn_heads=int(d["attn_heads"]),
            kv_heads=int(d["kv_heads"]),
            head_dim=int(d["head_dim"]),
            op_shapes={k: {kk: int(vv) for kk, vv in v.items()} for k, v in d["op_shapes"].items()},
            warmup_iters=int(d["warmup_iters"]),
            sampled_iters=int(d["sampled_iters"]),
            token_multiplier=float(d.get("token_multiplier", 1.0)),
            tag=str(d.get("tag", "")),
            bwd_gemm_mult=float(d.get("bwd_gemm_mult", 2.0)),
            bwd_attn_mult=float(d.get("bwd_attn_mult", 2.5)),
        )


def llama_op_shapes(batch_size: int, seq_len: int, hidden_dim: int, attn_heads: int,
                    kv_heads: int, head_dim: int) -> dict[str, dict[str, int]]:
    """Forward shapes of the per-layer GEMMs and attention for a Llama-style block.

    GEMM rows are tokens (``b * s``), so every GEMM scales linearly with ``b * s``
    while attention scales with ``b * s**2``.
    """
    tokens = batch_size * seq_len
    model = attn_heads * head_dim
    return {
        "qkv_ip": {"m": tokens, "n": (attn_heads + 2 * kv_heads) * head_dim, "k": model},
        "attn_op": {"m": tokens, "n": model, "k": model},
        "mlp_gp": {"m": tokens, "n": hidden_dim, "k": model},
        "mlp_up": {"m": tokens, "n": hidden_dim, "k": model},
        "mlp_dp": {"m": tokens, "n": model, "k": hidden_dim},
        "attn_fa": {"b": batch_size, "heads": attn_heads, "s": seq_len, "head_dim": head_dim},
    }


_INT = np.int64


@dataclass(frozen=True)
class KernelTable:
    """Column store of kernels, sorted by ``(gpu, dispatch, correlation)``.

    Annotation columns use ``-1`` for "absent"; ``names`` and ``op_labels`` are
    the vocabularies that ``name_code`` and ``op_code`` index into.
    """

    gpu: np.ndarray
    stream: np.ndarray
    corr: np.ndarray
    name_code: np.ndarray
    names: tuple[str, ...]
    cat: np.ndarray
    dispatch: np.ndarray
    start: np.ndarray
    end: np.ndarray
    iteration: np.ndarray
    phase: np.ndarray
    layer: np.ndarray
    op_code: np.ndarray
    op_labels: tuple[str, ...]
    op_type: np.ndarray
    fwd_link: np.ndarray
    _gpu_bounds: dict = field(default_factory=dict, repr=False, compare=False)

    COLUMNS = ("gpu", "stream", "corr", "name_code", "cat", "dispatch", "start", "end",
               "iteration", "phase", "layer", "op_code", "op_type", "fwd_link")

    @classmethod
    def from_columns(cls, *, names: Sequence[str], op_labels: Sequence[str], sort: bool = True,
                     **cols) -> "KernelTable":
        arrays = {c: np.ascontiguousarray(np.asarray(cols[c], dtype=_INT)) for c in cls.COLUMNS}
        n = len(arrays["gpu"])
        for c, a in arrays.items():
            if a.shape != (n,):
                raise ValueError(f"column {c} has shape {a.shape}, expected ({n},)")
        if sort and n:
            order = np.lexsort((arrays["corr"], arrays["dispatch"], arrays["gpu"]))
            if not np.array_equal(order, np.arange(n)):
                arrays = {c: a[order] for c, a in arrays.items()}
        for a in arrays.values():
            a.setflags(write=False)
        gpus, first = np.unique(arrays["gpu"], return_index=True)
        bounds = {}
        for i, g in enumerate(gpus):
            stop = first[i + 1] if i + 1 < len(first) else n
            bounds[int(g)] = (int(first[i]), int(stop))
        return cls(names=tuple(names), op_labels=tuple(op_labels), _gpu_bounds=bounds, **arrays)

    @classmethod
    def from_records(cls, records: Iterable[KernelRecord]) -> "KernelTable":
        records = list(records)
        names: dict[str, int] = {}
        labels: dict[str, int] = {}
        cols = {c: [] for c in cls.COLUMNS}
        for r in records:
            cols["gpu"].append(r.gpu_id)
            cols["stream"].append(r.stream_id)
            cols["corr"].append(r.correlation_id)
            cols["name_code"].append(names.setdefault(r.name, len(names)))
            cols["cat"].append(CATEGORY_CODE[Category(r.category)])
            cols["dispatch"].append(r.dispatch_ts)
            cols["start"].append(r.start_ts)
            cols["end"].append(r.end_ts)
            a = r.annotation
            if a is None:
                for c in ("iteration", "phase", "layer", "op_code", "op_type"):
                    cols[c].append(-1)
            else:
                cols["iteration"].append(a.iteration)
                cols["phase"].append(PHASE_CODE[Phase(a.phase)])
                cols["layer"].append(-1 if a.layer is None else a.layer)
                cols["op_code"].append(labels.setdefault(a.operation, len(labels)))
                cols["op_type"].append(OP_TYPE_CODE[OpType(a.op_type)])
            cols["fwd_link"].append(-1 if r.fwd_link is None else r.fwd_link)
        return cls.from_columns(names=list(names), op_labels=list(labels), **cols)

    def __len__(self) -> int:
        return len(self.gpu)

    @property
    def gpu_ids(self) -> list[int]:
        return list(self._gpu_bounds)

    def gpu_slice(self, gpu_id: int) -> slice:
        lo, hi = self._gpu_bounds.get(gpu_id, (0, 0))
        return slice(lo, hi)

    @property
    def annotated(self) -> np.ndarray:
        return self.iteration >= 0

    def name_array(self) -> np.ndarray:
        return np.asarray(self.names, dtype=object)[self.name_code]

    def record(self, i: int) -> KernelRecord:
        if self.iteration[i] >= 0:
            ann = AnnotationPath(
                iteration=int(self.iteration[i]),
                phase=PHASES[self.phase[i]],
                operation=self.op_labels[self.op_code[i]],
                op_type=OP_TYPES[self.op_type[i]],
                layer=None if self.layer[i] < 0 else int(self.layer[i]),
            )
        else:
            ann = None
        return KernelRecord(
            gpu_id=int(self.gpu[i]),
            stream_id=int(self.stream[i]),
            correlation_id=int(self.corr[i]),
            name=self.names[self.name_code[i]],
            category=CATEGORIES[self.cat[i]],
            dispatch_ts=int(self.dispatch[i]),
            start_ts=int(self.start[i]),
            end_ts=int(self.end[i]),
            annotation=ann,
            fwd_link=None if self.fwd_link[i] < 0 else int(self.fwd_link[i]),
        )

    def records(self, gpu_id: int | None = None) -> Iterator[KernelRecord]:
        idx = range(len(self)) if gpu_id is None else range(*self.gpu_slice(gpu_id).indices(len(self)))
        for i in idx:
            yield self.record(i)


class CounterTable:
    """Counter samples in file order, backed by a DataFrame.

    Columns: ``gpu_id, pass_id, dispatch_index, kernel_name, counter_name, value``.
    """

    COLUMNS = ["gpu_id", "pass_id", "dispatch_index", "kernel_name", "counter_name", "value"]

    def __init__(self, frame: pd.DataFrame | None = None):
        if frame is None:
            frame = pd.DataFrame({c: pd.Series(dtype=t) for c, t in zip(
                self.COLUMNS, ["int64", "int64", "int64", "object", "object", "float64"])})
        self.frame = frame[self.COLUMNS].reset_index(drop=True)

    @classmethod
    def from_samples(cls, samples: Iterable[CounterSample]) -> "CounterTable":
        rows = [(s.gpu_id, s.pass_id, s.dispatch_index, s.kernel_name, s.counter_name, float(s.value))
                for s in samples]
        if not rows:
            return cls()
        df = pd.DataFrame(rows, columns=cls.COLUMNS)
        return cls(df.astype({"gpu_id": "int64", "pass_id": "int64", "dispatch_index": "int64"}))

    def __len__(self) -> int:
        return len(self.frame)

    def __iter__(self) -> Iterator[CounterSample]:
        for row in self.frame.itertuples(index=False):
            yield CounterSample(int(row.gpu_id), int(row.pass_id), int(row.dispatch_index),
                                row.kernel_name, row.counter_name, float(row.value))

    def __eq__(self, other) -> bool:
        return isinstance(other, CounterTable) and self.frame.equals(other.frame)

    @property
    def counter_names(self) -> list[str]:
        return sorted(self.frame["counter_name"].unique())


@dataclass(frozen=True)
class TraceStore:
    kernels: KernelTable
    counters: CounterTable
    cpu_samples: tuple[CpuSample, ...]
    hardware: HardwareSpec
    workload: WorkloadSpec

    @classmethod
    def build(cls, kernels, hardware: HardwareSpec, workload: WorkloadSpec,
              counters=None, cpu_samples: Iterable[CpuSample] = ()) -> "TraceStore":
        if not isinstance(kernels, KernelTable):
            kernels = KernelTable.from_records(kernels)
        if counters is None:
            counters = CounterTable()
        elif not isinstance(counters, CounterTable):
            counters = CounterTable.from_samples(counters)
        return cls(kernels, counters, tuple(cpu_samples), hardware, workload)

    def kernels_of(self, gpu_id: int) -> list[KernelRecord]:
        return list(self.kernels.records(gpu_id))


@dataclass(frozen=True)
class Violation:
    rule: str
    record: str
    detail: str = ""

    def __str__(self) -> str:
        return f"[{self.rule}] {self.record}{': ' + self.detail if self.detail else ''}"


def _kernel_ref(t: KernelTable, i: int) -> str:
    return f"kernel(gpu={int(t.gpu[i])}, corr={int(t.corr[i])})"


def validate_store(store: TraceStore) -> list[Violation]:
    """Check every type invariant; returns an empty list iff the store is valid."""
    out: list[Violation] = []
    t = store.kernels
    n = len(t)

    for col, rule in (("gpu", "gpu_id >= 0"), ("stream", "stream_id >= 0"),
                      ("dispatch", "timestamp >= 0"), ("start", "timestamp >= 0"),
                      ("end", "timestamp >= 0")):
        for i in np.flatnonzero(getattr(t, col) < 0):
            out.append(Violation(rule, _kernel_ref(t, i), f"{col}={int(getattr(t, col)[i])}"))

    for i in np.flatnonzero(t.start > t.end):
        out.append(Violation("start <= end", _kernel_ref(t, i),
                             f"start={int(t.start[i])} end={int(t.end[i])}"))

    for i in np.flatnonzero((t.cat < 0) | (t.cat >= len(CATEGORIES))):
        out.append(Violation("category", _kernel_ref(t, i), f"code {int(t.cat[i])}"))

    if n > 1:
        # corr unique within gpu
        order = np.lexsort((t.corr, t.gpu))
        g, c = t.gpu[order], t.corr[order]
        dup = np.flatnonzero((g[1:] == g[:-1]) & (c[1:] == c[:-1]))
        for j in dup:
            out.append(Violation("correlation_id unique per gpu", _kernel_ref(t, order[j + 1])))

        # same-stream disjointness: adjacent check after sorting by start
        order = np.lexsort((t.end, t.start, t.stream, t.gpu))
        g, s = t.gpu[order], t.stream[order]
        st, en = t.start[order], t.end[order]
        bad = np.flatnonzero((g[1:] == g[:-1]) & (s[1:] == s[:-1]) & (en[:-1] > st[1:]))
        for j in bad:
            a, b = order[j], order[j + 1]
            out.append(Violation("same-stream kernels disjoint",
                                 f"{_kernel_ref(t, a)} & {_kernel_ref(t, b)}",
                                 f"overlap {int(t.end[a] - t.start[b])} ns on stream {int(t.stream[a])}"))

        # store order: dispatch, then correlation
        same = t.gpu[1:] == t.gpu[:-1]
        unsorted = same & ((t.dispatch[1:] < t.dispatch[:-1]) |
                           ((t.dispatch[1:] == t.dispatch[:-1]) & (t.corr[1:] < t.corr[:-1])))
        for j in np.flatnonzero(unsorted):
            out.append(Violation("dispatch order", _kernel_ref(t, j + 1)))

    ann = t.annotated
    vocab = set(OPERATION_VOCABULARY)
    for code, label in enumerate(t.op_labels):
        if label not in vocab and np.any(ann & (t.op_code == code)):
            out.append(Violation("operation in vocabulary", f"operation {label!r}"))
    for i in np.flatnonzero(ann & ((t.phase < 0) | (t.phase >= len(PHASES)))):
        out.append(Violation("phase", _kernel_ref(t, i)))
    for i in np.flatnonzero(ann & ((t.op_type < 0) | (t.op_type >= len(OP_TYPES)))):
        out.append(Violation("op_type", _kernel_ref(t, i)))
    for i in np.flatnonzero(ann & (t.layer < -1)):
        out.append(Violation("layer >= 0", _kernel_ref(t, i)))

    out.extend(_validate_counters(store.counters))
    out.extend(_validate_cpu(store.cpu_samples, store.hardware))
    out.extend(_validate_hardware(store.hardware))
    out.extend(_validate_workload(store.workload, t))
    return out


def _validate_counters(counters: CounterTable) -> list[Violation]:
    out = []
    df = counters.frame
    if not len(df):
        return out
    dup = df.duplicated(["gpu_id", "pass_id", "dispatch_index", "counter_name"])
    for i in np.flatnonzero(dup.to_numpy()):
        r = df.iloc[i]
        out.append(Violation("counter key unique",
                             f"counter(gpu={r.gpu_id}, pass={r.pass_id}, index={r.dispatch_index}, {r.counter_name})"))
    for i in np.flatnonzero(~np.isfinite(df["value"].to_numpy(dtype=float))):
        out.append(Violation("counter value finite", f"counter row {i}"))
    return out


def _validate_cpu(samples: Sequence[CpuSample], hw: HardwareSpec) -> list[Violation]:
    out = []
    for i, s in enumerate(samples):
        if not (0.0 <= s.util_pct <= 100.0):
            out.append(Violation("0 <= util_pct <= 100", f"cpu sample {i}", f"{s.util_pct}"))
        if not (0 <= s.logical_core_id < hw.logical_core_count):
            out.append(Violation("logical_core_id < N", f"cpu sample {i}", f"core {s.logical_core_id}"))
    return out


def _validate_hardware(hw: HardwareSpec) -> list[Violation]:
    out = []
    for name in ("peak_flops", "peak_gpu_freq", "peak_mem_bw", "gpu_count", "logical_core_count"):
        v = getattr(hw, name)
        if not (math.isfinite(v) and v > 0):
            out.append(Violation("hardware rates positive", f"hardware.{name}", repr(v)))
    missing = [i for i in range(hw.logical_core_count) if i not in hw.core_topology]
    if missing:
        out.append(Violation("topology covers logical cores", "hardware.core_topology",
                             f"missing {missing[:8]}"))
    return out


def _validate_workload(w: WorkloadSpec, t: KernelTable) -> list[Violation]:
    out = []
    for name in ("batch_size", "seq_len", "layer_count", "hidden_dim", "attn_heads",
                 "kv_heads", "head_dim", "sampled_iters"):
        if getattr(w, name) <= 0:
            out.append(Violation("workload fields positive", f"workload.{name}", repr(getattr(w, name))))
    if w.warmup_iters < 0:
        out.append(Violation("workload fields positive", "workload.warmup_iters", repr(w.warmup_iters)))
    for label, shape in w.op_shapes.items():
        if any(v <= 0 for v in shape.values()):
            out.append(Violation("workload fields positive", f"workload.op_shapes[{label}]"))
    needs_shape = {OP_TYPE_CODE[OpType.gemm], OP_TYPE_CODE[OpType.fa]}
    mask = t.annotated & np.isin(t.op_type, list(needs_shape)) & (t.cat == COMPUTE)
    for code in np.unique(t.op_code[mask]):
        label = t.op_labels[code]
        if label not in w.op_shapes and base_operation(label)[0] not in w.op_shapes:
            out.append(Violation("op_shapes covers gemm/fa operations", f"operation {label!r}"))
    return out
