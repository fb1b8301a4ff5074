"""``chopper`` command line.

Exit codes: 0 success; 1 validation, I/O or verification failure;
2 invalid configuration or usage; 3 alignment failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .errors import (AlignmentFailed, ChopperError, InvalidConfig, MalformedInput, ParseError,
                     TraceIOError, UnknownKey, ValidationFailed)
from .ingest import SCHEMA_VERSIONS, emit_canonical, read_json
from .pipeline import analyze, analyze_bundle, load_bundle, load_registry

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_ALIGN = 3

log = logging.getLogger("chopper")


def _stdout_or_file(text: str, dest: str | None) -> None:
    if dest in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(dest).parent.mkdir(parents=True, exist_ok=True)
        Path(dest).write_text(text, encoding="utf-8", newline="\n")


def cmd_synth(args) -> int:
    from .synth import SynthConfig, generate

    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        print(f"error: {out} exists and is not empty (use --force)", file=sys.stderr)
        return EXIT_CONFIG
    cfg = SynthConfig.from_file(args.config)
    truth = generate(cfg, out)
    log.info("wrote %d kernels to %s", truth["counts"]["kernels"], out)
    return EXIT_OK


def cmd_ingest(args) -> int:
    store = load_bundle(args.trace)
    emit_canonical(store, args.out)
    log.info("wrote canonical bundle with %d kernels to %s", len(store.kernels), args.out)
    return EXIT_OK


def cmd_analyze(args) -> int:
    from .report import write_report

    analyses = []
    for trace in args.trace:
        analyses.append(analyze_bundle(trace, args.registry))
    written = write_report(analyses, args.out, args.baseline)
    errors = sum(len(a.errors) for a in analyses)
    log.info("wrote %d files to %s (%d error entries)", len(written), args.out, errors)
    return EXIT_OK


def cmd_breakdown(args) -> int:
    from .breakdown import breakdown_frame
    from .report import FLOAT_FORMAT

    a = analyze_bundle(args.trace, args.registry)
    text = breakdown_frame(a.breakdown).to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    _stdout_or_file(text, args.out)
    return EXIT_OK


def cmd_report(args) -> int:
    import pandas as pd

    from .report import FLOAT_FORMAT, aggregate, long_metrics

    try:
        frame = long_metrics(pd.read_csv(args.metrics))
    except OSError as e:
        raise TraceIOError(args.metrics, e.strerror or "unreadable") from e
    group_by = [k for k in args.group_by.split(",") if k] if args.group_by else []
    if args.metric:
        frame = frame[frame["metric"].isin(args.metric)]
    table = aggregate(frame, group_by, args.stat)
    _stdout_or_file(table.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n"), args.out)
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import compare

    store = load_bundle(args.trace)
    analysis = analyze(store, load_registry(args.registry, args.trace))
    truth = read_json(args.truth)
    results = compare(analysis, truth)
    ok = True
    worst = None
    for r in results:
        passed = r.passed(args.tol)
        ok &= passed
        status = "PASS" if passed else "FAIL"
        extra = f" missing={len(r.missing)}" if r.missing else ""
        print(f"{status} {r.family:24s} n={r.checked:<8d} max_rel_err={r.worst:.3e}{extra}")
        if worst is None or r.worst > worst.worst:
            worst = r
    if worst is not None:
        print(f"worst offender: {worst.family} {worst.worst_key} (rel err {worst.worst:.3e})")
    return EXIT_OK if ok else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chopper", description="GPU training trace characterization.")
    p.add_argument("--version", action="store_true", help="print tool and file-format schema versions")
    sub = p.add_subparsers(dest="command")

    s = sub.add_parser("synth", help="generate a synthetic bundle with ground truth")
    s.add_argument("--config", required=True, help="SynthConfig JSON file")
    s.add_argument("--out", required=True, help="output bundle directory")
    s.add_argument("--force", action="store_true", help="write into a non-empty directory")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", help="convert a bundle (canonical or trace.json) to canonical form")
    s.add_argument("--trace", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("analyze", help="run the full pipeline and write report files")
    s.add_argument("--trace", required=True, nargs="+", help="one or more bundle directories")
    s.add_argument("--out", required=True)
    s.add_argument("--registry", help="derived-metric registry JSON")
    s.add_argument("--baseline", help="config label used to normalize enduro.csv")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("breakdown", help="print the overhead breakdown as CSV")
    s.add_argument("--trace", required=True)
    s.add_argument("--registry")
    s.add_argument("--out", help="file to write; '-' or omitted for stdout")
    s.set_defaults(func=cmd_breakdown)

    s = sub.add_parser("report", help="aggregate a metrics.csv at a chosen granularity")
    s.add_argument("--metrics", required=True, help="metrics.csv written by analyze (one column per metric)")
    s.add_argument("--group-by", default="", help="comma-separated subset of "
                   "gpu,iteration,phase,layer,operation,op_type")
    s.add_argument("--stat", default="median", help="median, mean, q25, q75, min, max or sum")
    s.add_argument("--metric", action="append", help="restrict to this metric (repeatable)")
    s.add_argument("--out", help="file to write; '-' or omitted for stdout")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("verify", help="check pipeline output against ground truth")
    s.add_argument("--trace", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--tol", type=float, default=1e-9, help="relative tolerance (default 1e-9)")
    s.add_argument("--registry")
    s.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    level = os.environ.get("CHOPPER_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.version:
        print(json.dumps({"chopper": __version__, "schemas": SCHEMA_VERSIONS}, sort_keys=True))
        return EXIT_OK
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except InvalidConfig as e:
        print(f"invalid config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (UnknownKey, ParseError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except AlignmentFailed as e:
        print(f"alignment failed: {e}", file=sys.stderr)
        return EXIT_ALIGN
    except ValidationFailed as e:
        print(f"validation failed: {e}", file=sys.stderr)
        return EXIT_FAIL
    except (TraceIOError, MalformedInput, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL
    except ChopperError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
