"""Synthesize a small training trace, analyze it, and check the numbers against ground truth.

    python demos/walkthrough.py
"""
import json
import tempfile
from pathlib import Path

from chopper.pipeline import analyze_bundle
from chopper.report import write_report
from chopper.synth import generate
from chopper.verify import compare

work = Path(tempfile.mkdtemp(prefix="chopper-demo-"))

# A two-GPU run with four iterations. The first is warmup and gets dropped from
# every median. Half of the fused-attention instances hide a collective.
config = {
    "seed": 7, "gpus": 2, "iterations": 4, "warmup": 1, "layers": 2,
    "overlap": {"attn_fa": [0.0, 0.5], "mlp_dp": 0.7},
}
truth = generate(config, work / "bundle")
print("bundle:", sorted(p.name for p in (work / "bundle").iterdir()))

analysis = analyze_bundle(work / "bundle")
print(f"{len(analysis.store.kernels)} kernels, {len(analysis.instances)} op instances")

# Per-iteration time on each GPU, split into kernel time and launch overhead.
print(analysis.rollup[["gpu", "iteration", "duration_ns", "launch_ns"]].to_string(index=False))
print(f"median throughput: {analysis.throughput.median_tokens_per_s:,.0f} tokens/s")

# Each family of derived numbers is compared with what the generator planted.
for fam in compare(analysis, truth):
    print(f"{'ok  ' if fam.passed(1e-9) else 'FAIL'} {fam.family:<28} worst rel err {fam.worst:.1e}")

files = write_report([analysis], work / "report")
print("report files:", ", ".join(p.name for p in files))
print("errors.json:", json.loads((work / "report" / "errors.json").read_text()))
