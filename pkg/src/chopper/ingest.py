"""Readers and writers for trace bundles.

A canonical bundle is a directory holding::

    kernels.jsonl    one kernel per line, fixed key order
    counters.csv     gpu_id,pass_id,dispatch_index,kernel_name,counter_name,value
    cpu.csv          ts_ns,logical_core_id,util_pct
    hardware.json    HardwareSpec fields
    workload.json    WorkloadSpec fields

``emit_canonical(load_canonical(d))`` reproduces a generator bundle byte for byte.
Chrome-trace timelines are imported with :func:`parse_runtime_trace`.
"""

from __future__ import annotations

import bisect
import csv
import fnmatch
import io
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .errors import (DuplicateCounterKey, MalformedInput, NonFiniteValue, TraceIOError,
                     UtilOutOfRange, ValidationFailed)
from .model import (CATEGORIES, CATEGORY_CODE, OP_TYPE_CODE, OP_TYPES, OPERATION_VOCABULARY,
                    PHASE_CODE, PHASES, Category, CounterTable, CpuSample, HardwareSpec,
                    KernelRecord, KernelTable, Phase, TraceStore, WorkloadSpec, us_to_ns,
                    validate_store)

log = logging.getLogger(__name__)

KERNELS_FILE = "kernels.jsonl"
COUNTERS_FILE = "counters.csv"
CPU_FILE = "cpu.csv"
HARDWARE_FILE = "hardware.json"
WORKLOAD_FILE = "workload.json"
REGISTRY_FILE = "registry.json"
CHROME_TRACE_FILE = "trace.json"

SCHEMA_VERSIONS = {
    "kernels.jsonl": 1,
    "counters.csv": 1,
    "cpu.csv": 1,
    "hardware.json": 1,
    "workload.json": 1,
    "registry.json": 1,
    "ground_truth.json": 1,
    "breakdown.csv": 1,
}

COUNTER_HEADER = CounterTable.COLUMNS
CPU_HEADER = ["ts_ns", "logical_core_id", "util_pct"]


@dataclass(frozen=True)
class CategoryRules:
    """Ordered ``(pattern, category)`` rules; first match wins.

    Patterns containing glob metacharacters are matched with :mod:`fnmatch`,
    anything else as a case-insensitive substring.
    """

    rules: tuple[tuple[str, Category], ...]
    default: Category = Category.Other

    def classify(self, name: str) -> Category:
        low = name.lower()
        for pattern, cat in self.rules:
            p = pattern.lower()
            if any(ch in p for ch in "*?["):
                if fnmatch.fnmatchcase(low, p):
                    return cat
            elif p in low:
                return cat
        return self.default


DEFAULT_RULES = CategoryRules(
    rules=tuple((p, Category.Communication) for p in
                ("all_gather", "allgather", "ag_", "reduce_scatter", "reducescatter", "rs_",
                 "rccl", "nccl"))
    + tuple((p, Category.Copy) for p in ("memcpy", "copy"))
    + (("*", Category.Compute),),
)


# ---------------------------------------------------------------------------
# Chrome trace import


@dataclass(frozen=True)
class AnnotationSpan:
    """A labeled host-time interval ``[start_ns, end_ns]``."""

    start_ns: int
    end_ns: int
    label: str
    level: str
    value: object
    gpu_id: int | None = None


@dataclass
class RuntimeTrace:
    kernels: list[KernelRecord]
    spans: list[AnnotationSpan]
    missing_correlation: list[tuple[int, int]] = field(default_factory=list)


_ITER_RE = re.compile(r"^(?:iteration|iter|step)[\s_:#-]*(\d+)$", re.IGNORECASE)
_LAYER_RE = re.compile(r"^layer[\s_:#-]*(\d+)$", re.IGNORECASE)
_PHASE_NAMES = {
    "forward": Phase.Forward, "fwd": Phase.Forward,
    "backward": Phase.Backward, "bwd": Phase.Backward,
    "optimizer": Phase.Optimizer, "opt": Phase.Optimizer,
}

KERNEL_CATS = {"kernel", "gpu_memcpy", "gpu_memset"}
LAUNCH_CATS = {"cuda_runtime", "hip_runtime", "cuda_driver", "runtime"}
ANNOTATION_CATS = {"user_annotation"}


def classify_label(label: str) -> tuple[str, object] | None:
    """Map an annotation name onto ``(level, value)``; ``None`` if not a hierarchy label."""
    if m := _ITER_RE.match(label):
        return "iteration", int(m.group(1))
    if (p := _PHASE_NAMES.get(label.lower())) is not None:
        return "phase", p
    if m := _LAYER_RE.match(label):
        return "layer", int(m.group(1))
    if label in OPERATION_VOCABULARY:
        return "operation", label
    return None


def _load_json_bytes(data) -> object:
    if isinstance(data, (bytes, bytearray)):
        data = data.decode("utf-8")
    try:
        return json.loads(data)
    except json.JSONDecodeError as e:
        raise MalformedInput(f"trace is not valid JSON: {e}") from e


def parse_runtime_trace(data, rules: CategoryRules = DEFAULT_RULES) -> RuntimeTrace:
    """Parse a Chrome-trace timeline into kernels and annotation spans.

    Recognised subset: complete (``ph == "X"``) events for device kernels,
    host launches and ``user_annotation`` ranges, plus ``s``/``f`` flow events
    linking a launch to its kernel. Correlation comes from ``args.correlation``
    when present, otherwise from the flow id.
    """
    doc = _load_json_bytes(data)
    events = doc.get("traceEvents") if isinstance(doc, dict) else doc
    if not isinstance(events, list):
        raise MalformedInput("expected a traceEvents list")

    kernels, launches, annots, flows = [], [], [], []
    for ev in events:
        if not isinstance(ev, dict):
            raise MalformedInput(f"trace event is not an object: {ev!r}")
        ph = ev.get("ph")
        cat = str(ev.get("cat", "")).lower()
        if ph == "X":
            if "ts" not in ev:
                raise MalformedInput(f"X event without ts: {ev.get('name')!r}")
            if cat in KERNEL_CATS:
                kernels.append(ev)
            elif cat in LAUNCH_CATS:
                launches.append(ev)
            elif cat in ANNOTATION_CATS:
                annots.append(ev)
        elif ph in ("s", "f"):
            flows.append(ev)

    # flow binding: the s event sits inside its launch slice, the f event at its kernel
    def by_track(evs):
        tracks: dict = {}
        for e in evs:
            tracks.setdefault((e.get("pid"), e.get("tid")), []).append(e)
        for key, lst in tracks.items():
            lst.sort(key=lambda e: float(e["ts"]))
            tracks[key] = (lst, [float(e["ts"]) for e in lst])
        return tracks

    def enclosing(tracks, ev):
        lst, starts = tracks.get((ev.get("pid"), ev.get("tid")), ((), ()))
        ts = float(ev["ts"])
        i = bisect.bisect_right(starts, ts) - 1
        # slices on one track do not nest, so only the nearest candidate can enclose
        if i >= 0 and ts <= starts[i] + float(lst[i].get("dur", 0)):
            return lst[i]
        return None

    flow_launch: dict[int, int] = {}
    flow_kernel: dict[int, int] = {}
    if flows:
        ltracks, ktracks = by_track(launches), by_track(kernels)
        for fl in flows:
            fid = fl.get("id")
            if fid is None:
                continue
            target = enclosing(ltracks if fl["ph"] == "s" else ktracks, fl)
            if target is not None:
                (flow_launch if fl["ph"] == "s" else flow_kernel)[id(target)] = int(fid)

    def corr_of(ev, flow_map):
        args = ev.get("args") or {}
        for key in ("correlation", "correlation_id", "corr"):
            if key in args:
                return int(args[key])
        return flow_map.get(id(ev))

    launch_ts: dict[tuple, int] = {}
    launch_pid: dict[tuple, object] = {}
    for ev in launches:
        c = corr_of(ev, flow_launch)
        if c is not None:
            launch_ts[c] = us_to_ns(float(ev["ts"]))
            launch_pid[c] = ev.get("pid")

    records: list[KernelRecord] = []
    missing: list[tuple[int, int]] = []
    pid_gpus: dict[object, set] = {}
    used: dict[int, set] = {}
    pending: list[tuple] = []
    for ev in kernels:
        args = ev.get("args") or {}
        try:
            gpu = int(args.get("device", ev.get("pid", 0)))
            stream = int(args.get("stream", ev.get("tid", 0)))
            start = us_to_ns(float(ev["ts"]))
            end = us_to_ns(float(ev["ts"]) + float(ev.get("dur", 0)))
        except (TypeError, ValueError) as e:
            raise MalformedInput(f"bad kernel event {ev.get('name')!r}: {e}") from e
        corr = corr_of(ev, flow_kernel)
        pending.append((ev, gpu, stream, start, end, corr))
        if corr is not None:
            used.setdefault(gpu, set()).add(corr)

    for ev, gpu, stream, start, end, corr in pending:
        name = str(ev.get("name", ""))
        if corr is not None and corr in launch_ts:
            dispatch = launch_ts[corr]
            pid_gpus.setdefault(launch_pid[corr], set()).add(gpu)
        else:
            if corr is None:
                taken = used.setdefault(gpu, set())
                corr = max(taken, default=0) + 1
                taken.add(corr)
            dispatch = start
            missing.append((gpu, corr))
        records.append(KernelRecord(gpu, stream, corr, name, rules.classify(name),
                                    dispatch, start, end))

    spans = []
    for ev in annots:
        label = str(ev.get("name", ""))
        cls = classify_label(label)
        if cls is None:
            continue
        gpus = pid_gpus.get(ev.get("pid"), set())
        gpu = next(iter(gpus)) if len(gpus) == 1 else None
        start = us_to_ns(float(ev["ts"]))
        spans.append(AnnotationSpan(start, us_to_ns(float(ev["ts"]) + float(ev.get("dur", 0))),
                                    label, cls[0], cls[1], gpu))

    records.sort(key=lambda r: (r.gpu_id, r.dispatch_ts, r.correlation_id))
    spans.sort(key=lambda s: (s.start_ns, -s.end_ns, s.label))
    if missing:
        log.warning("%d kernel(s) without a correlated launch; dispatch set to start", len(missing))
    return RuntimeTrace(records, spans, missing)


# ---------------------------------------------------------------------------
# CSV inputs


def _as_text_stream(data) -> io.StringIO:
    if isinstance(data, (bytes, bytearray)):
        data = data.decode("utf-8")
    return io.StringIO(data)


def parse_counter_csv(data) -> CounterTable:
    """Parse a counter dump; rows keep file order."""
    text = _as_text_stream(data)
    header = text.readline().strip().split(",")
    if header != COUNTER_HEADER:
        raise MalformedInput(f"counter header must be {','.join(COUNTER_HEADER)}, got {header}")
    text.seek(0)
    try:
        df = pd.read_csv(text, dtype={"gpu_id": "int64", "pass_id": "int64", "dispatch_index": "int64",
                                      "kernel_name": str, "counter_name": str, "value": "float64"},
                         float_precision="round_trip", keep_default_na=False, na_values=[],
                         engine="c")
    except (ValueError, pd.errors.ParserError) as e:
        raise MalformedInput(f"unparseable counter csv: {e}") from e
    values = df["value"].to_numpy()
    bad = np.flatnonzero(~np.isfinite(values))
    if len(bad):
        raise NonFiniteValue(int(bad[0]), repr(values[bad[0]]))
    dup = df.duplicated(["gpu_id", "pass_id", "dispatch_index", "counter_name"]).to_numpy()
    if dup.any():
        i = int(np.flatnonzero(dup)[0])
        r = df.iloc[i]
        raise DuplicateCounterKey((int(r.gpu_id), int(r.pass_id), int(r.dispatch_index), r.counter_name), i)
    return CounterTable(df)


def parse_cpu_csv(data) -> list[CpuSample]:
    rows = csv.reader(_as_text_stream(data))
    header = next(rows, None)
    if header != CPU_HEADER:
        raise MalformedInput(f"cpu header must be {','.join(CPU_HEADER)}, got {header}")
    out = []
    for i, row in enumerate(rows):
        if not row:
            continue
        try:
            ts, core, util = int(row[0]), int(row[1]), float(row[2])
        except (ValueError, IndexError) as e:
            raise MalformedInput(f"cpu row {i}: {row!r}") from e
        if not (0.0 <= util <= 100.0):
            raise UtilOutOfRange(i, util)
        if ts < 0 or core < 0:
            raise MalformedInput(f"cpu row {i}: negative field")
        out.append(CpuSample(ts, core, util))
    return out


# ---------------------------------------------------------------------------
# canonical kernels


def _kernel_lines(t: KernelTable) -> Iterable[str]:
    names = [json.dumps(n) for n in t.names]
    labels = [json.dumps(n) for n in t.op_labels]
    cats = [c.value for c in CATEGORIES]
    phases = [p.value for p in PHASES]
    types = [o.value for o in OP_TYPES]
    cols = zip(t.gpu.tolist(), t.stream.tolist(), t.corr.tolist(), t.name_code.tolist(),
               t.cat.tolist(), t.dispatch.tolist(), t.start.tolist(), t.end.tolist(),
               t.iteration.tolist(), t.phase.tolist(), t.layer.tolist(), t.op_code.tolist(),
               t.op_type.tolist(), t.fwd_link.tolist())
    for g, s, c, nc, cat, d, st, en, it, ph, ly, oc, ot, fl in cols:
        if it >= 0:
            layer = "null" if ly < 0 else ly
            annot = (f'{{"iter":{it},"phase":"{phases[ph]}","layer":{layer},'
                     f'"op":{labels[oc]},"op_type":"{types[ot]}"}}')
        else:
            annot = "null"
        link = "null" if fl < 0 else fl
        yield (f'{{"gpu":{g},"stream":{s},"corr":{c},"name":{names[nc]},"cat":"{cats[cat]}",'
               f'"dispatch_ns":{d},"start_ns":{st},"end_ns":{en},"annot":{annot},"fwd_link":{link}}}\n')


def write_kernels_jsonl(t: KernelTable, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.writelines(_kernel_lines(t))


_INT_FIELDS = ("gpu", "stream", "corr", "dispatch_ns", "start_ns", "end_ns")


def _kernels_via_arrow(data: bytes) -> KernelTable | None:
    """Fast path for well-formed files; ``None`` means "use the strict parser"."""
    try:
        import pyarrow as pa
        import pyarrow.compute as pc
        import pyarrow.json as pj
    except ImportError:
        return None
    try:
        tb = pj.read_json(pa.BufferReader(data)).combine_chunks()
    except (pa.ArrowException, ValueError):
        return None
    sch = tb.schema
    names = set(sch.names)
    if names - {"annot", "fwd_link"} != set(_INT_FIELDS) | {"name", "cat"}:
        return None
    if any(sch.field(f).type != pa.int64() or tb[f].null_count for f in _INT_FIELDS):
        return None
    if any(sch.field(f).type != pa.string() or tb[f].null_count for f in ("name", "cat")):
        return None
    n = tb.num_rows

    def codes(arr, vocab: dict | None):
        enc = pc.dictionary_encode(arr)
        if isinstance(enc, pa.ChunkedArray):
            enc = enc.combine_chunks()
        words = enc.dictionary.to_pylist()
        idx = pc.fill_null(enc.indices, -1).to_numpy(zero_copy_only=False).astype(np.int64)
        if vocab is None:
            return idx, words
        if any(w not in vocab for w in words):
            raise KeyError
        lut = np.array([vocab[w] for w in words] + [-1], dtype=np.int64)
        return lut[idx], words

    try:
        name_code, name_words = codes(tb["name"], None)
        cat, _ = codes(tb["cat"], {c.value: i for c, i in CATEGORY_CODE.items()})
        fwd = np.full(n, -1, dtype=np.int64)
        if "fwd_link" in names:
            t = sch.field("fwd_link").type
            if t == pa.int64():
                fwd = pc.fill_null(tb["fwd_link"], -1).to_numpy().astype(np.int64)
            elif t != pa.null():
                return None
        ann = {k: np.full(n, -1, dtype=np.int64) for k in ("iteration", "phase", "layer", "op_code", "op_type")}
        labels: list[str] = []
        if "annot" in names and sch.field("annot").type != pa.null():
            st = tb["annot"].combine_chunks()
            t = st.type
            if not isinstance(t, pa.StructType) or {t.field(i).name for i in range(t.num_fields)} != \
                    {"iter", "phase", "layer", "op", "op_type"}:
                return None
            valid = st.is_valid().to_numpy(zero_copy_only=False)
            it = st.field("iter")
            if it.type != pa.int64() or pc.sum(pc.and_(st.is_valid(), it.is_null())).as_py():
                return None
            if st.field("layer").type not in (pa.int64(), pa.null()):
                return None
            for k in ("phase", "op", "op_type"):
                if st.field(k).type != pa.string():
                    return None
            ann["iteration"] = np.where(valid, pc.fill_null(it, -1).to_numpy(), -1)
            if st.field("layer").type == pa.int64():
                ann["layer"] = np.where(valid, pc.fill_null(st.field("layer"), -1).to_numpy(), -1)
            ph, _ = codes(st.field("phase"), {p.value: i for p, i in PHASE_CODE.items()})
            ot, _ = codes(st.field("op_type"), {o.value: i for o, i in OP_TYPE_CODE.items()})
            oc, labels = codes(st.field("op"), None)
            if np.any(valid & ((ph < 0) | (ot < 0) | (oc < 0))):
                return None
            ann["phase"] = np.where(valid, ph, -1)
            ann["op_type"] = np.where(valid, ot, -1)
            ann["op_code"] = np.where(valid, oc, -1)
    except KeyError:
        return None
    col = {f: tb[f].to_numpy() for f in _INT_FIELDS}
    return KernelTable.from_columns(
        names=name_words, op_labels=labels, gpu=col["gpu"], stream=col["stream"], corr=col["corr"],
        name_code=name_code, cat=cat, dispatch=col["dispatch_ns"], start=col["start_ns"], end=col["end_ns"],
        fwd_link=fwd, **ann)


def parse_kernels_jsonl(data) -> KernelTable:
    """Parse canonical kernel lines; integer fields must be JSON integers.

    Uses pyarrow's reader when it is installed and the file has the canonical
    schema; anything unusual goes through the strict stdlib parser, which also
    produces the error messages.
    """
    if isinstance(data, str):
        data = data.encode("utf-8")
    fast = _kernels_via_arrow(bytes(data)) if data.strip() else None
    if fast is not None:
        return fast
    data = data.decode("utf-8")
    lines = [ln for ln in data.split("\n") if ln.strip()]
    try:
        objs = json.loads("[" + ",".join(lines) + "]")
    except json.JSONDecodeError:
        # locate the offending line for the message
        for i, ln in enumerate(lines):
            try:
                json.loads(ln)
            except json.JSONDecodeError as e:
                raise MalformedInput(f"kernels line {i + 1}: {e}") from e
        raise
    names: dict[str, int] = {}
    labels: dict[str, int] = {}
    cat_code = {c.value: i for c, i in CATEGORY_CODE.items()}
    phase_code = {p.value: i for p, i in PHASE_CODE.items()}
    type_code = {t.value: i for t, i in OP_TYPE_CODE.items()}
    n = len(objs)
    iteration = np.full(n, -1, dtype=np.int64)
    phase = np.full(n, -1, dtype=np.int64)
    layer = np.full(n, -1, dtype=np.int64)
    op_code = np.full(n, -1, dtype=np.int64)
    op_type = np.full(n, -1, dtype=np.int64)
    try:
        gpu = [o["gpu"] for o in objs]
        stream = [o["stream"] for o in objs]
        corr = [o["corr"] for o in objs]
        name_code = [names.setdefault(o["name"], len(names)) for o in objs]
        cat = [cat_code[o["cat"]] for o in objs]
        dispatch = [o["dispatch_ns"] for o in objs]
        start = [o["start_ns"] for o in objs]
        end = [o["end_ns"] for o in objs]
        fwd = [-1 if o.get("fwd_link") is None else o["fwd_link"] for o in objs]
        for i, o in enumerate(objs):
            a = o.get("annot")
            if a is None:
                continue
            iteration[i] = a["iter"]
            phase[i] = phase_code[a["phase"]]
            layer[i] = -1 if a.get("layer") is None else a["layer"]
            op_code[i] = labels.setdefault(a["op"], len(labels))
            op_type[i] = type_code[a["op_type"]]
    except (KeyError, TypeError) as e:
        raise MalformedInput(f"kernel record missing or bad field: {e}") from e
    for col in (gpu, stream, corr, dispatch, start, end, fwd):
        if any(type(v) is not int for v in col):
            raise MalformedInput("kernel integer fields must be JSON integers")
    return KernelTable.from_columns(
        names=list(names), op_labels=list(labels), gpu=gpu, stream=stream, corr=corr,
        name_code=name_code, cat=cat, dispatch=dispatch, start=start, end=end,
        iteration=iteration, phase=phase, layer=layer, op_code=op_code, op_type=op_type,
        fwd_link=fwd)


def write_counters_csv(counters: CounterTable, path) -> None:
    df = counters.frame
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(COUNTER_HEADER)
        w.writerows(zip(df["gpu_id"].tolist(), df["pass_id"].tolist(), df["dispatch_index"].tolist(),
                        df["kernel_name"].tolist(), df["counter_name"].tolist(),
                        df["value"].astype(float).tolist()))


def write_cpu_csv(samples: Sequence[CpuSample], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CPU_HEADER)
        w.writerows((s.ts, s.logical_core_id, float(s.util_pct)) for s in samples)


def write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(obj, sort_keys=True, indent=2, allow_nan=False))
        f.write("\n")


def read_json(path) -> object:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise TraceIOError(path, e.strerror or "unreadable") from e
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise MalformedInput(f"{path}: {e}") from e


def _read_bytes(path: Path, required: bool = True) -> bytes | None:
    try:
        return path.read_bytes()
    except FileNotFoundError as e:
        if required:
            raise TraceIOError(path, "missing") from e
        return None
    except OSError as e:
        raise TraceIOError(path, e.strerror or "unreadable") from e


def load_specs(directory) -> tuple[HardwareSpec, WorkloadSpec]:
    d = Path(directory)
    try:
        hw = HardwareSpec.from_dict(read_json(d / HARDWARE_FILE))
        wl = WorkloadSpec.from_dict(read_json(d / WORKLOAD_FILE))
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        if isinstance(e, MalformedInput):
            raise
        raise MalformedInput(f"bad spec file in {d}: {e!r}") from e
    return hw, wl


def load_side_inputs(directory) -> tuple[CounterTable, list[CpuSample]]:
    d = Path(directory)
    raw = _read_bytes(d / COUNTERS_FILE, required=False)
    counters = parse_counter_csv(raw) if raw is not None else CounterTable()
    raw = _read_bytes(d / CPU_FILE, required=False)
    cpu = parse_cpu_csv(raw) if raw is not None else []
    return counters, cpu


def load_canonical(directory, *, validate: bool = True) -> TraceStore:
    """Load a canonical bundle directory into a validated :class:`TraceStore`.

    ``counters.csv`` and ``cpu.csv`` are optional; the kernel file and both
    spec files are required.
    """
    d = Path(directory)
    if not d.is_dir():
        raise TraceIOError(d, "not a directory")
    kernels = parse_kernels_jsonl(_read_bytes(d / KERNELS_FILE))
    hw, wl = load_specs(d)
    counters, cpu = load_side_inputs(d)
    store = TraceStore(kernels, counters, tuple(cpu), hw, wl)
    if validate:
        violations = validate_store(store)
        if violations:
            raise ValidationFailed(violations)
    return store


def emit_canonical(store: TraceStore, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_kernels_jsonl(store.kernels, d / KERNELS_FILE)
    write_counters_csv(store.counters, d / COUNTERS_FILE)
    write_cpu_csv(store.cpu_samples, d / CPU_FILE)
    write_json(store.hardware.to_dict(), d / HARDWARE_FILE)
    write_json(store.workload.to_dict(), d / WORKLOAD_FILE)
