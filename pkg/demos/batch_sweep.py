"""Compare batch sizes side by side: stacked time per phase, throughput, and overlap CDFs.

Writes a report directory and prints its location.

    python demos/batch_sweep.py
"""
import tempfile
from pathlib import Path

import pandas as pd

from chopper.pipeline import analyze_bundle
from chopper.report import write_report
from chopper.synth import generate

work = Path(tempfile.mkdtemp(prefix="chopper-demo-"))
analyses = []
for bs in (1, 2, 4):
    generate({"seed": 100 + bs, "gpus": 2, "iterations": 4, "warmup": 1, "layers": 2,
              "batch_size": bs, "tag": f"bs{bs}", "overlap": {"mlp_dp": [0.0, 0.6]}}, work / f"bs{bs}")
    analyses.append(analyze_bundle(work / f"bs{bs}"))

write_report(analyses, work / "report")
for a in analyses:
    print(f"{a.config:<24} {a.throughput.median_tokens_per_s:>14,.0f} tokens/s")

# Every config's stack is normalized to the first config's total, so bars are comparable.
enduro = pd.read_csv(work / "report" / "enduro.csv")
print(enduro[enduro["component"] == "total"].to_string(index=False))
print("report:", work / "report")
