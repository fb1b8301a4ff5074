"""Comparison of pipeline output against generator ground truth."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

from .pipeline import Analysis

INSTANCE_METRICS = ("duration_ns", "runtime_ns", "overlap", "prep_ns", "call_ns", "launch_ns")
BREAKDOWN_METRICS = ("d_thr_s", "ovr_inst", "ovr_util", "ovr_overlap", "ovr_freq", "d_peak_s",
                     "d_act_s", "d0_s", "d50_s", "residual")


def rel_error(got, want) -> float:
    # None is how JSON carries an undefined value; it matches NaN
    got = math.nan if got is None else float(got)
    want = math.nan if want is None else float(want)
    if math.isnan(got) or math.isnan(want):
        return 0.0 if math.isnan(got) and math.isnan(want) else math.inf
    if got == want:
        return 0.0
    return abs(got - want) / max(abs(want), abs(got))


@dataclass
class FamilyResult:
    family: str
    checked: int = 0
    worst: float = 0.0
    worst_key: str = ""
    missing: list[str] = field(default_factory=list)

    def add(self, key: str, got, want) -> None:
        self.checked += 1
        err = rel_error(got, want)
        if err > self.worst or not self.worst_key:
            self.worst, self.worst_key = err, f"{key}: got {got!r}, truth {want!r}"

    def passed(self, tol: float) -> bool:
        return not self.missing and self.worst <= tol


def _key(*parts) -> str:
    return "/".join("-" if p is None else str(p) for p in parts)


def compare(analysis: Analysis, truth: dict) -> list[FamilyResult]:
    """Relative error per metric family; a family fails on any missing truth entry."""
    out: list[FamilyResult] = []

    if "instances" in truth:
        inst = analysis.instances
        layers = inst["layer"].astype(object).where(inst["layer"].notna(), None).tolist()
        have = {}
        for row, layer in zip(inst.itertuples(index=False), layers):
            have[_key(row.gpu, row.iteration, row.phase, layer, row.operation)] = row
        fams = {m: FamilyResult(f"instances.{m}") for m in INSTANCE_METRICS}
        for t in truth["instances"]:
            k = _key(t["gpu"], t["iteration"], t["phase"], t["layer"], t["operation"])
            row = have.get(k)
            for m, fam in fams.items():
                if row is None:
                    fam.missing.append(k)
                else:
                    fam.add(k, getattr(row, m), t[m])
        for fam in fams.values():
            if len(have) != len(truth["instances"]):
                fam.missing.append(f"instance count {len(have)} != {len(truth['instances'])}")
        out.extend(fams.values())

    if "kernels" in truth:
        t_ = analysis.store.kernels
        pos = {(int(g), int(c)): i for i, (g, c) in enumerate(zip(t_.gpu.tolist(), t_.corr.tolist()))}
        fams = {m: FamilyResult(f"kernels.{m}") for m in ("prep_ns", "call_ns")}
        for k in truth["kernels"]:
            i = pos.get((k["gpu"], k["corr"]))
            key = _key(k["gpu"], k["corr"])
            for m, fam in fams.items():
                if i is None:
                    fam.missing.append(key)
                else:
                    got = analysis.prep_ns[i] if m == "prep_ns" else analysis.call_ns[i]
                    fam.add(key, int(got), k[m])
        out.extend(fams.values())

    roll = {(int(r.gpu), int(r.iteration)): r for r in analysis.rollup.itertuples(index=False)}
    fams = {m: FamilyResult(f"rollup.{m}") for m in ("duration_ns", "launch_ns")}
    for t in truth["rollup"]:
        r = roll.get((t["gpu"], t["iteration"]))
        for m, fam in fams.items():
            if r is None:
                fam.missing.append(_key(t["gpu"], t["iteration"]))
            else:
                fam.add(_key(t["gpu"], t["iteration"]), int(getattr(r, m)), t[m])
    if len(roll) != len(truth["rollup"]):
        fams["duration_ns"].missing.append(f"rollup rows {len(roll)} != {len(truth['rollup'])}")
    out.extend(fams.values())

    fam = FamilyResult("throughput")
    per = {int(r.iteration): float(r.tokens_per_s) for r in analysis.throughput.per_iteration.itertuples()}
    for t in truth["throughput"]["per_iteration"]:
        if t["iteration"] not in per:
            fam.missing.append(str(t["iteration"]))
        else:
            fam.add(f"iteration {t['iteration']}", per[t["iteration"]], t["tokens_per_s"])
    fam.add("median", analysis.throughput.median_tokens_per_s, truth["throughput"]["median_tokens_per_s"])
    out.append(fam)

    if truth.get("cpu") is not None:
        fam = FamilyResult("cpu")
        cpu = analysis.cpu
        if cpu is None:
            fam.missing.append("cpu summary")
        else:
            tc = truth["cpu"]
            _series(fam, "c_active", cpu.c_active.tolist(), tc["c_active"])
            _series(fam, "c_min", cpu.c_min.tolist(), tc["c_min"])
            for m in ("median_active", "median_min", "physical_occupancy"):
                fam.add(m, getattr(cpu, m), tc[m])
        out.append(fam)

    rows = {r.operation: r for r in analysis.breakdown}
    fams = {m: FamilyResult(f"breakdown.{m}") for m in BREAKDOWN_METRICS}
    for t in truth["breakdown"]:
        r = rows.get(t["op"])
        for m, fam in fams.items():
            if r is None:
                fam.missing.append(t["op"])
            else:
                fam.add(t["op"], getattr(r, m), t[m])
    out.extend(fams.values())
    return out


def _series(fam: FamilyResult, name: str, got: Iterable, want: Iterable) -> None:
    got, want = list(got), list(want)
    if len(got) != len(want):
        fam.missing.append(f"{name} length {len(got)} != {len(want)}")
    for i, (g, w) in enumerate(zip(got, want)):
        fam.add(f"{name}[{i}]", g, w)
