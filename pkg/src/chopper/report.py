"""Aggregation and plot-data emission.

Nothing here draws; every figure shape is written as a CSV or JSON table with
a fixed column order so any plotting tool can consume it.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .breakdown import BREAKDOWN_COLUMNS, breakdown_frame
from .errors import TraceIOError, UnknownKey
from .ingest import write_json
from .model import COMPUTE, OP_TYPES, PHASES

GROUP_KEYS = ("gpu", "iteration", "phase", "layer", "operation", "op_type")
STATS = {
    "median": lambda s: s.median(),
    "mean": lambda s: s.mean(),
    "q25": lambda s: s.quantile(0.25),
    "q75": lambda s: s.quantile(0.75),
    "min": lambda s: s.min(),
    "max": lambda s: s.max(),
    "sum": lambda s: s.sum(),
}

ENDURO_COLUMNS = ["config", "phase", "component", "median_ns", "normalized", "tokens_per_s"]
CDF_COLUMNS = ["gpu", "overlap", "duration_ns", "normalized", "cdf"]
OP_DURATION_COLUMNS = ["config", "gpu", "iteration", "phase", "layer", "operation", "op_type",
                       "duration_ns", "runtime_ns", "overlap", "launch_ns"]
THROUGHPUT_COLUMNS = ["config", "iteration", "max_total_ns", "tokens", "tokens_per_s"]
FLOAT_FORMAT = "%.9g"


def aggregate(frame: pd.DataFrame, group_by: Sequence[str], stat: str) -> pd.DataFrame:
    """One row per (group, metric) with the requested statistic of ``value``.

    Groups are formed over ``group_by`` plus the metric name; rows with a
    missing layer form their own group rather than being dropped.
    """
    for k in group_by:
        if k not in GROUP_KEYS or k not in frame.columns:
            raise UnknownKey(k)
    if stat not in STATS:
        raise UnknownKey(stat)
    keys = list(dict.fromkeys(group_by)) + ["metric"]
    out = (frame.groupby(keys, sort=True, dropna=False)["value"]
           .agg(STATS[stat]).reset_index())
    return out[keys + ["value"]]


# ---------------------------------------------------------------------------
# end-to-end duration stack


def _segments(analysis) -> pd.DataFrame:
    """Per sampled (gpu, iteration): compute runtime split by phase and op type, plus launch."""
    t = analysis.store.kernels
    wl = analysis.store.workload
    sel = (t.cat == COMPUTE) & t.annotated
    sel &= (t.iteration >= wl.warmup_iters) & (t.iteration < wl.warmup_iters + wl.sampled_iters)
    phases = np.asarray([p.value for p in PHASES], dtype=object)
    types = np.asarray([o.value for o in OP_TYPES], dtype=object)
    df = pd.DataFrame({
        "gpu": t.gpu[sel], "iteration": t.iteration[sel],
        "phase": phases[t.phase[sel]], "component": types[t.op_type[sel]],
        "ns": (t.end - t.start)[sel],
    })
    seg = df.groupby(["gpu", "iteration", "phase", "component"], sort=True)["ns"].sum().reset_index()
    launch = analysis.rollup[["gpu", "iteration", "launch_ns"]].rename(columns={"launch_ns": "ns"})
    launch = launch.assign(phase="", component="launch")
    return pd.concat([seg, launch[seg.columns]], ignore_index=True)


def _median_sample(seg: pd.DataFrame) -> tuple[int, int] | None:
    """The (gpu, iteration) whose total is the lower median; ties broken by key."""
    totals = seg.groupby(["gpu", "iteration"], sort=True)["ns"].sum().reset_index()
    if not len(totals):
        return None
    totals = totals.sort_values(["ns", "gpu", "iteration"], kind="stable").reset_index(drop=True)
    row = totals.iloc[(len(totals) - 1) // 2]
    return int(row["gpu"]), int(row["iteration"])


def emit_enduro(analyses: Sequence, baseline: str | None = None) -> pd.DataFrame:
    """Stacked duration per config, normalized to the baseline config's total.

    Each config contributes the segments of its median (gpu, iteration) sample
    so that segments always add up to the ``total`` row exactly.
    """
    by_config = {a.config: a for a in analyses}
    if not by_config:
        return pd.DataFrame(columns=ENDURO_COLUMNS)
    configs = sorted(by_config)
    base = baseline if baseline is not None else configs[0]
    if base not in by_config:
        raise UnknownKey(base)
    stacks = {}
    for c in configs:
        seg = _segments(by_config[c])
        pick = _median_sample(seg)
        if pick is None:
            stacks[c] = pd.DataFrame(columns=["phase", "component", "ns"])
            continue
        sel = seg[(seg["gpu"] == pick[0]) & (seg["iteration"] == pick[1])]
        stacks[c] = sel[["phase", "component", "ns"]].reset_index(drop=True)
    base_total = float(stacks[base]["ns"].sum())
    rows = []
    for c in configs:
        st = stacks[c]
        tput = by_config[c].throughput.median_tokens_per_s
        for r in st.itertuples(index=False):
            rows.append([c, r.phase, r.component, int(r.ns),
                         r.ns / base_total if base_total else math.nan, tput])
        total = int(st["ns"].sum())
        rows.append([c, "", "total", total, total / base_total if base_total else math.nan, tput])
    return pd.DataFrame(rows, columns=ENDURO_COLUMNS)


# ---------------------------------------------------------------------------
# per-op tables


def sampled_instances(analysis) -> pd.DataFrame:
    inst = analysis.instances
    wl = analysis.store.workload
    return inst[(inst["iteration"] >= wl.warmup_iters)
                & (inst["iteration"] < wl.warmup_iters + wl.sampled_iters)]


def emit_cdf(instances: pd.DataFrame) -> pd.DataFrame:
    """Per-GPU empirical CDF of duration normalized to that GPU's minimum."""
    parts = []
    for gpu, grp in instances.groupby("gpu", sort=True):
        g = grp.sort_values(["duration_ns", "overlap"], kind="stable")
        dur = g["duration_ns"].to_numpy(dtype=float)
        n = len(g)
        parts.append(pd.DataFrame({
            "gpu": int(gpu), "overlap": g["overlap"].to_numpy(dtype=float),
            "duration_ns": g["duration_ns"].to_numpy(), "normalized": dur / dur.min(),
            "cdf": np.arange(1, n + 1) / n,
        }))
    if not parts:
        return pd.DataFrame(columns=CDF_COLUMNS)
    return pd.concat(parts, ignore_index=True)[CDF_COLUMNS]


def op_durations(analyses: Sequence) -> pd.DataFrame:
    parts = []
    for a in analyses:
        s = sampled_instances(a)
        parts.append(s.assign(config=a.config)[OP_DURATION_COLUMNS])
    if not parts:
        return pd.DataFrame(columns=OP_DURATION_COLUMNS)
    return pd.concat(parts, ignore_index=True)


def throughput_table(analyses: Sequence) -> pd.DataFrame:
    parts = [a.throughput.per_iteration.assign(config=a.config)[THROUGHPUT_COLUMNS] for a in analyses]
    if not parts:
        return pd.DataFrame(columns=THROUGHPUT_COLUMNS)
    return pd.concat(parts, ignore_index=True)


def wide_metrics(analyses: Sequence) -> pd.DataFrame:
    """Instance metrics with one column per metric; :func:`long_metrics` inverts it."""
    parts = []
    for a in analyses:
        cols = ["config", *GROUP_KEYS, *a.metric_names]
        parts.append(a.instances.assign(config=a.config)[cols])
    if not parts:
        return pd.DataFrame(columns=["config", *GROUP_KEYS])
    return pd.concat(parts, ignore_index=True)


def long_metrics(wide: pd.DataFrame) -> pd.DataFrame:
    """MetricFrame rows from a wide metrics table, dropping undefined values."""
    ids = [c for c in ("config", *GROUP_KEYS) if c in wide.columns]
    long = wide.melt(id_vars=ids, var_name="metric", value_name="value")
    return long[np.isfinite(long["value"].to_numpy(dtype=float))].reset_index(drop=True)


# ---------------------------------------------------------------------------
# writing


def _json_safe(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, Mapping):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.generic):
        return _json_safe(obj.item())
    return obj


def _quote(text: str) -> str:
    if any(ch in text for ch in ',"\n\r'):
        return '"' + text.replace('"', '""') + '"'
    return text


def _format_column(series: pd.Series) -> list[str]:
    # format each distinct value once; synthetic and real traces repeat values heavily
    if pd.api.types.is_float_dtype(series.dtype):
        values = series.to_numpy(dtype=float)
        uniq, inverse = np.unique(values, return_inverse=True)
        text = np.asarray(["" if u != u else FLOAT_FORMAT % u for u in uniq.tolist()], dtype=object)
        return text[inverse.reshape(-1)].tolist()
    if pd.api.types.is_integer_dtype(series.dtype) and not isinstance(series.dtype, pd.api.extensions.ExtensionDtype):
        return list(map(str, series.to_numpy().tolist()))
    codes, uniq = pd.factorize(series, use_na_sentinel=True)
    text = np.asarray([_quote(FLOAT_FORMAT % v if isinstance(v, float) else str(v)) for v in uniq.tolist()]
                      + [""], dtype=object)
    return text[codes].tolist()  # code -1 (missing) picks the trailing ""


def to_csv_text(frame: pd.DataFrame) -> str:
    """CSV with LF endings, ``%.9g`` floats and empty cells for missing values.

    Same bytes as ``DataFrame.to_csv(float_format="%.9g", na_rep="")`` but
    several times faster on million-row tables.
    """
    header = ",".join(_quote(str(c)) for c in frame.columns) + "\n"
    if not len(frame):
        return header
    cols = [_format_column(frame[c]) for c in frame.columns]
    return header + "\n".join(map(",".join, zip(*cols))) + "\n"


def write_outputs(tables: Mapping[str, object], directory) -> list[Path]:
    """Write each table to ``directory/<name>``: DataFrames as CSV, everything else as JSON."""
    d = Path(directory)
    written = []
    try:
        d.mkdir(parents=True, exist_ok=True)
        for name in sorted(tables):
            obj = tables[name]
            path = d / name
            if isinstance(obj, pd.DataFrame):
                with open(path, "w", encoding="utf-8", newline="") as f:
                    f.write(to_csv_text(obj))
            else:
                write_json(_json_safe(obj), path)
            written.append(path)
    except OSError as e:
        raise TraceIOError(getattr(e, "filename", None) or d, e.strerror or "write failed") from e
    return written


def _safe_name(op: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "_-." else "_" for ch in op)


def report_tables(analyses: Sequence, baseline: str | None = None) -> dict[str, object]:
    """Every output file of an analysis run, keyed by file name."""
    analyses = sorted(analyses, key=lambda a: a.config)
    tables: dict[str, object] = {
        "enduro.csv": emit_enduro(analyses, baseline),
        "op_durations.csv": op_durations(analyses),
        "throughput.csv": throughput_table(analyses),
        "breakdown.csv": breakdown_frame([r for a in analyses for r in a.breakdown])[BREAKDOWN_COLUMNS],
        "metrics.csv": wide_metrics(analyses),
        "cpu_summary.json": {a.config: (a.cpu.to_dict() if a.cpu is not None else None) for a in analyses},
        "errors.json": [dict(e, config=a.config) for a in analyses for e in a.errors],
    }
    ops = sorted({op for a in analyses for op in a.instances.loc[
        a.instances["op_type"].isin(["gemm", "fa"]), "operation"]})
    for op in ops:
        parts = []
        for a in analyses:
            s = sampled_instances(a)
            cdf = emit_cdf(s[s["operation"] == op])
            parts.append(cdf.assign(config=a.config)[["config"] + CDF_COLUMNS])
        tables[f"overlap_cdf_{_safe_name(op)}.csv"] = pd.concat(parts, ignore_index=True)
    return tables


def write_report(analyses: Sequence, directory, baseline: str | None = None) -> list[Path]:
    return write_outputs(report_tables(analyses, baseline), directory)
