"""Synthetic trace bundles with exactly known ground truth.

Random draws come from SplitMix64 so any implementation can reproduce a
bundle bit for bit from its config:

    state += 0x9E3779B97F4A7C15
    z = (state ^ (state >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    out = z ^ (z >> 31)                        (all mod 2**64)

``uniform()`` is ``(out >> 11) * 2**-53`` and ``randint(lo, hi)`` is
``lo + out % (hi - lo + 1)``. Draw order is fixed by :func:`generate`.

Compute durations are built from the overhead factors. For a gemm/fa kernel
with theoretical time ``d_thr``, work inflation ``inst``, utilization ``u``,
clock ratio ``f`` and contention factor ``r`` at planned overlap ``o``::

    d_base = d_thr * inst / u              # time at peak clock, no contention
    duration = round(d_base / f * (1 + 2 * (r - 1) * o))

so a kernel at 50% overlap runs ``r`` times longer than at 0%. ``d_base`` is
rounded up to a multiple of 8 ns and the utilization actually written to the
counters is ``d_thr * inst / d_base``. Counters are collected in serialized
passes without communication, so they describe ``d_base``:
``GPU_CYCLES = d_base * peak_freq``.
"""

from __future__ import annotations

import copy
import json
import math
import shutil
import statistics
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import pandas as pd

from .breakdown import GPU_CYCLES, MFMA_FLOPS, D0_MAX_OVERLAP, D50_RANGE, theoretical_flops
from .errors import InvalidConfig, InvalidPerturbation
from .expr import DEFAULT_REGISTRY
from .ingest import (COUNTERS_FILE, KERNELS_FILE, REGISTRY_FILE, emit_canonical, parse_counter_csv,
                     write_counters_csv, write_json)
from .model import (BASE_OPERATIONS, CATEGORY_CODE, OP_TYPE_CODE, PHASE_CODE, Category, CounterTable,
                    CpuSample, HardwareSpec, KernelTable, OpType, Phase, TraceStore, WorkloadSpec,
                    llama_op_shapes)

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB

TRUTH_FILE = "ground_truth.json"
MFMA_BUSY = "MFMA_BUSY_CYCLES"
COMPUTE_STREAM = 0
COMM_STREAM = 1
T0_NS = 10_000
BASE_QUANTUM_NS = 8


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * MIX1) & MASK64
        z = ((z ^ (z >> 27)) * MIX2) & MASK64
        return z ^ (z >> 31)

    def uniform(self) -> float:
        return (self.next() >> 11) * 2.0 ** -53

    def randint(self, lo: int, hi: int) -> int:
        if hi < lo:
            raise ValueError(f"empty range [{lo}, {hi}]")
        return lo + self.next() % (hi - lo + 1)


# ---------------------------------------------------------------------------
# config

DEFAULT_LAYER_OPS = ["attn_n", "qkv_ip", "attn_fa", "attn_op", "mlp_n", "mlp_gp", "mlp_up", "mlp_dp"]

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "gpus": 2,
    "iterations": 3,
    "warmup": 1,
    "layers": 1,
    "batch_size": 1,
    "seq_len": 1024,
    "hidden_dim": 4096,
    "attn_heads": 8,
    "kv_heads": 2,
    "head_dim": 128,
    "token_multiplier": 1.0,
    "tag": "",
    "layer_ops": DEFAULT_LAYER_OPS,
    "optimizer_kernels": 2,
    "freq_ratio": 0.8,
    "contention": 1.0,
    "gemm": {"inst": 1.0, "mfma_util": 0.5},
    "vec_duration_ns": [2000, 4000],
    "templates": {},
    "overlap": {},
    "dispatch": {"lead_max_ns": 1500, "gap_ns": [20, 400],
                 "fill_prep_ns": [2000, 8000], "fill_call_ns": [100, 600]},
    "serial_comm_ns": 0,
    "hardware": {"peak_flops": 1e15, "peak_gpu_freq": 2e9, "peak_mem_bw": 5.3e12,
                 "logical_cores": 16, "threads_per_core": 2},
    "cpu": {"samples": 8, "interval_ns": 1_000_000, "active_logical": [0, 8]},
    "counters": True,
    "truth_detail": "full",
}

_TEMPLATE_KEYS = {"inst", "mfma_util", "freq_ratio", "contention", "duration_ns"}


def _merge(base: dict, override: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict) and k not in ("templates", "overlap"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return (isinstance(v, (int, float)) and not isinstance(v, bool)) and math.isfinite(v)


@dataclass(frozen=True)
class SynthConfig:
    """Validated generator settings; see ``DEFAULTS`` for every key."""

    values: Mapping[str, Any]

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthConfig":
        if not isinstance(d, Mapping):
            raise InvalidConfig("config must be a JSON object")
        unknown = sorted(set(d) - set(DEFAULTS))
        if unknown:
            raise InvalidConfig(f"unknown config keys {unknown}")
        cfg = _merge(DEFAULTS, d)
        _check(cfg)
        return cls(cfg)

    @classmethod
    def from_file(cls, path) -> "SynthConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise InvalidConfig(f"cannot read config {path}: {e}") from e
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return copy.deepcopy(dict(self.values))

    def template(self, label: str) -> dict:
        """Effective per-op settings: defaults < base-op template < full-label template."""
        base = label[2:] if label[:2] in ("f_", "b_") else label
        t = {"freq_ratio": self["freq_ratio"], "contention": self["contention"], **self["gemm"]}
        t.update(self["templates"].get(base, {}))
        t.update(self["templates"].get(label, {}))
        return t

    def overlap_plan(self, label: str) -> list[float]:
        base = label[2:] if label[:2] in ("f_", "b_") else label
        plan = self["overlap"].get(label, self["overlap"].get(base, 0.0))
        return list(plan) if isinstance(plan, list) else [plan]


def _check(c: dict) -> None:
    def need(ok, msg):
        if not ok:
            raise InvalidConfig(msg)

    need(_is_int(c["seed"]) and 0 <= c["seed"] <= MASK64, "seed must be an integer in [0, 2**64)")
    for k in ("gpus", "iterations", "layers", "batch_size", "seq_len", "hidden_dim", "attn_heads",
              "kv_heads", "head_dim"):
        need(_is_int(c[k]) and c[k] >= 1, f"{k} must be a positive integer")
    need(_is_int(c["warmup"]) and 0 <= c["warmup"] < c["iterations"],
         "warmup must be an integer in [0, iterations)")
    need(_is_int(c["optimizer_kernels"]) and c["optimizer_kernels"] >= 0,
         "optimizer_kernels must be a non-negative integer")
    need(_is_num(c["token_multiplier"]) and c["token_multiplier"] > 0, "token_multiplier must be > 0")
    need(isinstance(c["tag"], str), "tag must be a string")
    ops = c["layer_ops"]
    need(isinstance(ops, list) and ops and all(o in BASE_OPERATIONS and o not in ("ie", "lp") for o in ops),
         f"layer_ops must be a non-empty list of per-layer operations from {sorted(BASE_OPERATIONS)}")
    need(len(set(ops)) == len(ops), "layer_ops must not repeat")
    need(_is_num(c["freq_ratio"]) and 0 < c["freq_ratio"] <= 1, "freq_ratio must be in (0, 1]")
    need(_is_num(c["contention"]) and c["contention"] > 0, "contention must be > 0")
    for label, t in [("gemm", c["gemm"])] + sorted(c["templates"].items()):
        need(isinstance(t, Mapping) and set(t) <= _TEMPLATE_KEYS, f"template {label!r} has unknown keys")
        for k, v in t.items():
            need(_is_num(v), f"template {label}.{k} must be a number")
        need(0 < t.get("mfma_util", 1) <= 1, f"template {label}.mfma_util must be in (0, 1]")
        need(0 < t.get("freq_ratio", 1) <= 1, f"template {label}.freq_ratio must be in (0, 1]")
        need(t.get("inst", 1) > 0 and t.get("contention", 1) > 0, f"template {label} factors must be > 0")
        need(t.get("duration_ns", 1) >= 1 and _is_int(t.get("duration_ns", 1)),
             f"template {label}.duration_ns must be a positive integer")
    vd = c["vec_duration_ns"]
    need(isinstance(vd, list) and len(vd) == 2 and all(_is_int(v) for v in vd) and 1 <= vd[0] <= vd[1],
         "vec_duration_ns must be [lo, hi] with 1 <= lo <= hi")
    for label, plan in c["overlap"].items():
        vals = plan if isinstance(plan, list) else [plan]
        need(vals and all(_is_num(v) and 0 <= v <= 1 for v in vals),
             f"overlap plan for {label!r} must hold values in [0, 1]")
    dp = c["dispatch"]
    need(_is_int(dp["lead_max_ns"]) and dp["lead_max_ns"] >= 1, "dispatch.lead_max_ns must be >= 1")
    for k, lo in (("gap_ns", 0), ("fill_prep_ns", 1), ("fill_call_ns", 0)):
        r = dp[k]
        need(isinstance(r, list) and len(r) == 2 and all(_is_int(v) for v in r) and lo <= r[0] <= r[1],
             f"dispatch.{k} must be [lo, hi] with {lo} <= lo <= hi")
    need(_is_int(c["serial_comm_ns"]) and c["serial_comm_ns"] >= 0, "serial_comm_ns must be >= 0")
    hw = c["hardware"]
    for k in ("peak_flops", "peak_gpu_freq", "peak_mem_bw"):
        need(_is_num(hw[k]) and hw[k] > 0, f"hardware.{k} must be > 0")
    need(_is_int(hw["logical_cores"]) and _is_int(hw["threads_per_core"]) and hw["threads_per_core"] >= 1
         and hw["logical_cores"] >= hw["threads_per_core"] and hw["logical_cores"] % hw["threads_per_core"] == 0,
         "hardware.logical_cores must be a positive multiple of threads_per_core")
    cpu = c["cpu"]
    need(_is_int(cpu["samples"]) and cpu["samples"] >= 0, "cpu.samples must be >= 0")
    need(_is_int(cpu["interval_ns"]) and cpu["interval_ns"] >= 1, "cpu.interval_ns must be >= 1")
    need(isinstance(cpu["active_logical"], list)
         and all(_is_int(i) and 0 <= i < hw["logical_cores"] for i in cpu["active_logical"])
         and len(set(cpu["active_logical"])) == len(cpu["active_logical"]),
         "cpu.active_logical must list distinct logical core ids")
    need(isinstance(c["counters"], bool), "counters must be true or false")
    need(c["truth_detail"] in ("full", "summary"), "truth_detail must be 'full' or 'summary'")


# ---------------------------------------------------------------------------
# generation


def workload_of(cfg: SynthConfig) -> WorkloadSpec:
    shapes = llama_op_shapes(cfg["batch_size"], cfg["seq_len"], cfg["hidden_dim"], cfg["attn_heads"],
                             cfg["kv_heads"], cfg["head_dim"])
    return WorkloadSpec(
        batch_size=cfg["batch_size"], seq_len=cfg["seq_len"], layer_count=cfg["layers"],
        hidden_dim=cfg["hidden_dim"], attn_heads=cfg["attn_heads"], kv_heads=cfg["kv_heads"],
        head_dim=cfg["head_dim"], op_shapes=shapes, warmup_iters=cfg["warmup"],
        sampled_iters=cfg["iterations"] - cfg["warmup"], token_multiplier=float(cfg["token_multiplier"]),
        tag=cfg["tag"])


def hardware_of(cfg: SynthConfig) -> HardwareSpec:
    h = cfg["hardware"]
    return HardwareSpec.smt(float(h["peak_flops"]), float(h["peak_gpu_freq"]), float(h["peak_mem_bw"]),
                            cfg["gpus"], h["logical_cores"], h["threads_per_core"])


def iteration_schedule(cfg: SynthConfig) -> list[tuple[str, Phase, int | None, int]]:
    """``(label, phase, layer, kernel count)`` for one iteration, in dispatch order."""
    ops = cfg["layer_ops"]
    sched = [("f_ie", Phase.Forward, None, 1)]
    for layer in range(cfg["layers"]):
        sched += [(f"f_{op}", Phase.Forward, layer, 1) for op in ops]
    for layer in reversed(range(cfg["layers"])):
        sched += [(f"b_{op}", Phase.Backward, layer, 1) for op in reversed(ops)]
    sched.append(("b_ga", Phase.Backward, None, 1))
    if cfg["optimizer_kernels"]:
        sched.append(("opt_step", Phase.Optimizer, None, cfg["optimizer_kernels"]))
    return sched


def _op_type(label: str) -> OpType:
    if label in ("b_ga", "opt_step"):
        return OpType.vec
    return BASE_OPERATIONS[label[2:]]


def _kernel_name(label: str, j: int) -> str:
    t = _op_type(label)
    if label == "opt_step":
        return f"opt_adam_{j}"
    if t is OpType.fa:
        return "flash_attn_fwd" if label.startswith("f_") else "flash_attn_bwd"
    prefix = "gemm" if t is OpType.gemm else "vec"
    return f"{prefix}_{label}"


@dataclass
class _OpModel:
    """Construction values of one gemm/fa label."""

    flops: float
    d_base_ns: float
    freq_ratio: float
    contention: float
    performed: float
    busy: float
    cycles: float


class _Columns:
    def __init__(self):
        self.cols = {c: [] for c in KernelTable.COLUMNS}
        self.names: dict[str, int] = {}
        self.labels: dict[str, int] = {}

    def add(self, gpu, stream, corr, name, cat, dispatch, start, end, it, phase, layer, label, op_type,
            fwd):
        c = self.cols
        c["gpu"].append(gpu)
        c["stream"].append(stream)
        c["corr"].append(corr)
        c["name_code"].append(self.names.setdefault(name, len(self.names)))
        c["cat"].append(CATEGORY_CODE[cat])
        c["dispatch"].append(dispatch)
        c["start"].append(start)
        c["end"].append(end)
        c["iteration"].append(it)
        c["phase"].append(PHASE_CODE[phase])
        c["layer"].append(-1 if layer is None else layer)
        c["op_code"].append(self.labels.setdefault(label, len(self.labels)))
        c["op_type"].append(OP_TYPE_CODE[op_type])
        c["fwd_link"].append(-1 if fwd is None else fwd)

    def table(self) -> KernelTable:
        return KernelTable.from_columns(names=list(self.names), op_labels=list(self.labels), **self.cols)


@dataclass
class Bundle:
    store: TraceStore
    truth: dict


def build(cfg: SynthConfig) -> Bundle:
    """Construct the store and ground truth in memory."""
    rng = SplitMix64(cfg["seed"])
    wl = workload_of(cfg)
    hw = hardware_of(cfg)
    sched = iteration_schedule(cfg)
    dp = cfg["dispatch"]
    fpeak = hw.peak_gpu_freq

    models: dict[str, _OpModel] = {}
    for label, _, _, _ in sched:
        if label in models or _op_type(label) not in (OpType.gemm, OpType.fa):
            continue
        t = cfg.template(label)
        flops = theoretical_flops(label, wl)
        performed = flops * t["inst"]
        # quantize so d_base / freq_ratio stays integral for ratios like 0.8; rounding up keeps util <= 1
        raw = flops / hw.peak_flops * 1e9 * t["inst"] / t["mfma_util"]
        d_base_ns = BASE_QUANTUM_NS * max(1, math.ceil(raw / BASE_QUANTUM_NS - 1e-9))
        cycles = d_base_ns * 1e-9 * fpeak
        busy = performed * fpeak / hw.peak_flops
        models[label] = _OpModel(flops, float(d_base_ns), t["freq_ratio"], t["contention"], performed, busy,
                                 cycles)

    vec_lo, vec_hi = cfg["vec_duration_ns"]
    cols = _Columns()
    # per-kernel construction values, parallel to emission order
    k_prep: list[int] = []
    k_call: list[int] = []
    k_cover: list[int] = []
    k_is_compute: list[bool] = []
    k_inst: list[int] = []
    instances: list[dict] = []

    for gpu in range(cfg["gpus"]):
        corr = 0
        prev_end = prev_dur = 0
        first_kernel = True
        for it in range(cfg["iterations"]):
            fwd_corr: dict[tuple[str, int | None], int] = {}
            for label, phase, layer, nk in sched:
                op_type = _op_type(label)
                plan = cfg.overlap_plan(label)
                o = plan[(gpu + it + (layer or 0)) % len(plan)] if nk == 1 else 0.0
                inst_id = len(instances)
                inst = {"gpu": gpu, "iteration": it, "phase": phase.value, "layer": layer,
                        "operation": label, "op_type": op_type.value, "kernels": [], "overlap_plan": o}
                instances.append(inst)
                for j in range(nk):
                    # --- duration
                    if label in models:
                        mdl = models[label]
                        dur = int(round(mdl.d_base_ns / mdl.freq_ratio * (1 + 2 * (mdl.contention - 1) * o)))
                    else:
                        t = cfg["templates"].get(label, cfg["templates"].get(label[2:], {}))
                        dur = int(t["duration_ns"]) if "duration_ns" in t else rng.randint(vec_lo, vec_hi)
                    dur = max(dur, 2)
                    # --- placement
                    serial = None
                    if first_kernel:
                        dispatch = T0_NS
                        start = dispatch + rng.randint(*dp["fill_call_ns"])
                        prep = call = 0
                        first_kernel = False
                    elif j == 0 and label == sched[0][0]:
                        # first op of an iteration: host refills the queue late
                        prep = rng.randint(*dp["fill_prep_ns"])
                        call = rng.randint(*dp["fill_call_ns"])
                        dispatch = prev_end + prep
                        start = dispatch + call
                    else:
                        lead = rng.randint(1, max(1, min(dp["lead_max_ns"], prev_dur - 1)))
                        gap = rng.randint(*dp["gap_ns"])
                        dispatch = prev_end - lead
                        if cfg["serial_comm_ns"] and j == 0 and phase is Phase.Backward and layer is not None \
                                and label == f"b_{cfg['layer_ops'][-1]}":
                            # reduce-scatter serialized on the compute stream, inside the bubble
                            s0 = prev_end + gap
                            serial = (s0, s0 + cfg["serial_comm_ns"])
                            gap += cfg["serial_comm_ns"] + rng.randint(*dp["gap_ns"])
                        start = prev_end + gap
                        prep, call = 0, gap
                    end = start + dur
                    if serial is not None:
                        cols.add(gpu, COMPUTE_STREAM, corr, "rccl_reduce_scatter_serial", Category.Communication,
                                 dispatch, serial[0], serial[1], it, phase, layer, label, OpType.comm, None)
                        _note(k_prep, k_call, k_cover, k_is_compute, k_inst)
                        corr += 1
                    my_corr = corr
                    fwd = None
                    if label.startswith("b_") and (label[2:], layer) in fwd_corr:
                        fwd = fwd_corr[(label[2:], layer)]
                    if label.startswith("f_") and j == 0:
                        fwd_corr[(label[2:], layer)] = my_corr
                    cols.add(gpu, COMPUTE_STREAM, my_corr, _kernel_name(label, j), Category.Compute,
                             dispatch, start, end, it, phase, layer, label, op_type, fwd)
                    cover = int(round(o * dur))
                    k_prep.append(prep)
                    k_call.append(call)
                    k_cover.append(cover)
                    k_is_compute.append(True)
                    k_inst.append(inst_id)
                    inst["kernels"].append((start, end, cover))
                    corr += 1
                    if cover > 0:
                        name = "rccl_all_gather" if phase is Phase.Forward else "rccl_reduce_scatter"
                        cols.add(gpu, COMM_STREAM, corr, name, Category.Communication, dispatch, start,
                                 start + cover, it, phase, layer, label, OpType.comm, None)
                        _note(k_prep, k_call, k_cover, k_is_compute, k_inst)
                        corr += 1
                    prev_end = end
                    prev_dur = dur

    table = cols.table()
    counters = _counters(table, models, fpeak) if cfg["counters"] else CounterTable()
    cpu = _cpu_samples(cfg, rng)
    store = TraceStore(table, counters, tuple(cpu), hw, wl)
    truth = _truth(cfg, wl, hw, models, instances, k_prep, k_call, k_is_compute, cols, cpu)
    return Bundle(store, truth)


def _note(*lists):
    prep, call, cover, is_compute, inst = lists
    prep.append(0)
    call.append(0)
    cover.append(0)
    is_compute.append(False)
    inst.append(-1)


def _counters(table: KernelTable, models: dict[str, _OpModel], fpeak: float) -> CounterTable:
    """Two serialized passes over every kernel: cycles, then flops and busy cycles."""
    n = len(table)
    names = table.name_array()
    per_label = np.array([(models[lb].cycles, models[lb].performed, models[lb].busy) if lb in models
                          else (np.nan, 0.0, 0.0) for lb in table.op_labels] + [(np.nan, 0.0, 0.0)])
    code = np.where((table.op_code >= 0) & (table.cat == CATEGORY_CODE[Category.Compute]),
                    table.op_code, len(table.op_labels))
    cycles, flops, busy = per_label[code].T.copy()
    # kernels without matrix work: cycles follow the observed clock
    plain = np.isnan(cycles)
    cycles[plain] = (table.end - table.start)[plain] * 1e-9 * fpeak
    idx = np.zeros(n, dtype=np.int64)
    for gpu in table.gpu_ids:
        sl = table.gpu_slice(gpu)
        idx[sl] = np.arange(sl.stop - sl.start)
    parts = []
    for pass_id, series in ((0, [(GPU_CYCLES, cycles)]), (1, [(MFMA_FLOPS, flops), (MFMA_BUSY, busy)])):
        for cname, values in series:
            parts.append(pd.DataFrame({"gpu_id": table.gpu, "pass_id": pass_id, "dispatch_index": idx,
                                       "kernel_name": names, "counter_name": cname, "value": values,
                                       "_order": np.arange(n)}))
    df = pd.concat(parts, ignore_index=True)
    # file order: by gpu, pass, kernel, counter
    df = df.sort_values(["gpu_id", "pass_id", "_order"], kind="stable").drop(columns="_order")
    return CounterTable(df.astype({"gpu_id": "int64", "pass_id": "int64", "dispatch_index": "int64"}))


def _cpu_samples(cfg: SynthConfig, rng: SplitMix64) -> list[CpuSample]:
    c = cfg["cpu"]
    active = set(c["active_logical"])
    out = []
    for k in range(c["samples"]):
        ts = T0_NS + k * c["interval_ns"]
        for core in range(cfg["hardware"]["logical_cores"]):
            util = float(rng.randint(1, 100)) if core in active else 0.0
            out.append(CpuSample(ts, core, util))
    return out


# ---------------------------------------------------------------------------
# ground truth


def _median(values):
    return float(statistics.median(values))


def _d_quantile_truth(pairs: list[tuple[float, float]]) -> tuple[float, float, str]:
    b0 = [d for o, d in pairs if o <= D0_MAX_OVERLAP]
    b50 = [d for o, d in pairs if D50_RANGE[0] <= o <= D50_RANGE[1]]
    xs = [o for o, _ in pairs]
    ys = [d for _, d in pairs]

    def line():
        if len(set(xs)) == 1:
            return _median(ys), 0.0
        fit = statistics.linear_regression(xs, ys)
        return fit.intercept, fit.slope

    d0 = _median(b0) if b0 else line()[0]
    d50 = _median(b50) if b50 else (lambda a, b: a + 0.5 * b)(*line())
    method = "bucket" if b0 and b50 else ("fit" if not (b0 or b50) else "mixed")
    return d0, d50, method


def _truth(cfg, wl: WorkloadSpec, hw: HardwareSpec, models, instances, k_prep, k_call, k_is_compute,
           cols: _Columns, cpu: list[CpuSample]) -> dict:
    sampled = range(wl.warmup_iters, wl.warmup_iters + wl.sampled_iters)
    inst_rows = []
    for inst in instances:
        ks = inst["kernels"]
        start = min(k[0] for k in ks)
        end = max(k[1] for k in ks)
        runtime = sum(k[1] - k[0] for k in ks)
        covered = sum(k[2] for k in ks)
        inst_rows.append({
            "gpu": inst["gpu"], "iteration": inst["iteration"], "phase": inst["phase"],
            "layer": inst["layer"], "operation": inst["operation"], "op_type": inst["op_type"],
            "duration_ns": end - start, "runtime_ns": runtime,
            # every member kernel is covered from its start, so weighted overlap = covered / runtime
            "overlap": covered / runtime,
        })
    # prep/call per instance from per-kernel construction values
    inst_ids = [i for i, _ in enumerate(instances) for _ in instances[i]["kernels"]]
    comp_prep = [p for p, c in zip(k_prep, k_is_compute) if c]
    comp_call = [p for p, c in zip(k_call, k_is_compute) if c]
    for row in inst_rows:
        row["prep_ns"] = 0
        row["call_ns"] = 0
    for i, p, c in zip(inst_ids, comp_prep, comp_call):
        inst_rows[i]["prep_ns"] += p
        inst_rows[i]["call_ns"] += c
    for row in inst_rows:
        row["launch_ns"] = row["prep_ns"] + row["call_ns"]

    rollup = {}
    for row in inst_rows:
        if row["iteration"] in sampled:
            key = (row["gpu"], row["iteration"])
            acc = rollup.setdefault(key, [0, 0])
            acc[0] += row["runtime_ns"]
            acc[1] += row["launch_ns"]
    tokens = wl.batch_size * wl.seq_len * hw.gpu_count * wl.token_multiplier
    per_iter = []
    for it in sampled:
        worst = max(d + la for (g, i), (d, la) in rollup.items() if i == it)
        per_iter.append({"iteration": it, "max_total_ns": worst, "tokens_per_s": tokens / (worst * 1e-9)})

    breakdown = []
    for label in sorted(models):
        mdl = models[label]
        rows = [r for r in inst_rows if r["operation"] == label and r["iteration"] in sampled]
        d_act = _median([r["duration_ns"] * 1e-9 for r in rows])
        t = cfg.template(label)
        d_thr = mdl.flops / hw.peak_flops
        d_peak = mdl.d_base_ns * 1e-9
        util_factor = d_peak / (d_thr * t["inst"])
        entry = {
            "op": label, "config": wl.config_label, "d_thr_s": d_thr, "ovr_inst": t["inst"],
            "ovr_util": util_factor, "d_peak_s": d_peak, "d_act_s": d_act,
            "injected_freq_ratio": t["freq_ratio"],
            # D_0% / D_50% need two sampled instances; below that the factors are undefined
            "ovr_overlap": None, "ovr_freq": None, "d0_s": None, "d50_s": None, "residual": None,
            "quantile_method": "",
        }
        if len(rows) >= 2:
            d0, d50, method = _d_quantile_truth([(r["overlap"], r["duration_ns"] * 1e-9) for r in rows])
            ovl = d50 / d0
            freq = (d_act / d_peak) / ovl
            product = d_thr * t["inst"] * util_factor * ovl * freq
            entry.update(ovr_overlap=ovl, ovr_freq=freq, d0_s=d0, d50_s=d50, residual=d_act / product,
                         quantile_method=method)
        breakdown.append(entry)

    by_ts: dict[int, list[float]] = {}
    for s in cpu:
        by_ts.setdefault(s.ts, []).append(s.util_pct)
    c_active = [sum(1 for u in by_ts[t] if u > 0) for t in sorted(by_ts)]
    c_min = [float(sum(Fraction(int(u)) for u in by_ts[t]) / 100) for t in sorted(by_ts)]
    topo = hw.core_topology
    used = {topo[s.logical_core_id] for s in cpu if s.util_pct > 0}
    cpu_truth = None
    if cpu:
        cpu_truth = {"c_active": c_active, "c_min": c_min, "median_active": _median(c_active),
                     "median_min": _median(c_min),
                     "physical_occupancy": len(used) / len(set(topo.values()))}

    truth = {
        "config": wl.config_label,
        "rollup": [{"gpu": g, "iteration": i, "duration_ns": d, "launch_ns": la}
                   for (g, i), (d, la) in sorted(rollup.items())],
        "throughput": {"tokens_per_iteration": tokens, "per_iteration": per_iter,
                       "median_tokens_per_s": _median([p["tokens_per_s"] for p in per_iter])},
        "cpu": cpu_truth,
        "breakdown": breakdown,
        "counts": {"kernels": len(cols.cols["gpu"]), "instances": len(inst_rows)},
    }
    if cfg["truth_detail"] == "full":
        truth["instances"] = inst_rows
        c = cols.cols
        truth["kernels"] = [
            {"gpu": c["gpu"][i], "corr": c["corr"][i], "prep_ns": k_prep[i], "call_ns": k_call[i]}
            for i in range(len(k_prep)) if k_is_compute[i]]
    return truth


def generate(config: SynthConfig | Mapping, out_dir) -> dict:
    """Write a canonical bundle plus ``ground_truth.json`` to ``out_dir``; returns the truth."""
    cfg = config if isinstance(config, SynthConfig) else SynthConfig.from_dict(config)
    b = build(cfg)
    out = Path(out_dir)
    emit_canonical(b.store, out)
    write_json(dict(DEFAULT_REGISTRY), out / REGISTRY_FILE)
    write_json(b.truth, out / TRUTH_FILE)
    return b.truth


# ---------------------------------------------------------------------------
# perturbations

PERTURBATIONS = ("clock_jitter", "drop_counter_pass", "shuffle_file_order")


def perturb(bundle, kind: str, seed: int, out_dir=None, *, jitter_ns: int = 1000,
            pass_id: int | None = None):
    """Copy ``bundle`` to ``out_dir`` (or modify in place) and apply one perturbation.

    ``clock_jitter`` moves dispatch timestamps by at most ``jitter_ns`` while
    keeping each GPU's dispatch order; ``drop_counter_pass`` removes one counter
    pass (default: the one holding GPU_CYCLES); ``shuffle_file_order`` permutes
    the kernel lines.
    """
    if kind not in PERTURBATIONS:
        raise InvalidPerturbation(f"unknown perturbation {kind!r}; expected one of {PERTURBATIONS}")
    src = Path(bundle)
    dst = Path(out_dir) if out_dir is not None else src
    if dst != src:
        if dst.exists():
            shutil.rmtree(dst)
        shutil.copytree(src, dst)
    rng = SplitMix64(seed)
    if kind == "shuffle_file_order":
        lines = (dst / KERNELS_FILE).read_text(encoding="utf-8").splitlines(keepends=True)
        for i in range(len(lines) - 1, 0, -1):
            j = rng.randint(0, i)
            lines[i], lines[j] = lines[j], lines[i]
        (dst / KERNELS_FILE).write_text("".join(lines), encoding="utf-8", newline="\n")
    elif kind == "drop_counter_pass":
        counters = parse_counter_csv((dst / COUNTERS_FILE).read_bytes())
        df = counters.frame
        if pass_id is None:
            holding = df.loc[df["counter_name"] == GPU_CYCLES, "pass_id"]
            if not len(holding):
                raise InvalidPerturbation("bundle has no GPU_CYCLES pass to drop")
            pass_id = int(holding.iloc[0])
        if not (df["pass_id"] == pass_id).any():
            raise InvalidPerturbation(f"bundle has no counter pass {pass_id}")
        write_counters_csv(CounterTable(df[df["pass_id"] != pass_id]), dst / COUNTERS_FILE)
    else:
        _jitter(dst, rng, jitter_ns)
    return dst


def _jitter(dst: Path, rng: SplitMix64, bound: int) -> None:
    from .ingest import parse_kernels_jsonl, write_kernels_jsonl
    if bound < 0:
        raise InvalidPerturbation("jitter bound must be >= 0")
    t = parse_kernels_jsonl((dst / KERNELS_FILE).read_bytes())
    dispatch = t.dispatch.copy()
    for gpu in t.gpu_ids:
        sl = t.gpu_slice(gpu)
        d = t.dispatch[sl]
        gaps = np.diff(d)
        room = np.maximum((gaps - 1) // 2, 0)
        for i in range(len(d)):
            # each side may take at most half the gap to its neighbour, so order is preserved
            lo = min(bound, int(d[i]) if i == 0 else int(room[i - 1]), int(d[i]))
            hi = bound if i == len(d) - 1 else min(bound, int(room[i]))
            dispatch[sl.start + i] = d[i] + rng.randint(-lo, hi)
    cols = {c: getattr(t, c) for c in KernelTable.COLUMNS}
    cols["dispatch"] = dispatch
    write_kernels_jsonl(KernelTable.from_columns(names=t.names, op_labels=t.op_labels, **cols),
                        dst / KERNELS_FILE)
