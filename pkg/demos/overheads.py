"""Where does GEMM time go? Walk one operation's duration from the ideal to the measured.

The chain runs from the FLOP-bound time through instruction overhead, MFMA
utilization, communication overlap and clock frequency. The leftover residual
should be 1 on a synthetic trace. Also shows the launch bubbles at
iteration boundaries, which is where the fill and drain cost lives.

    python demos/overheads.py
"""
import tempfile

import numpy as np

from chopper.metrics import launch_columns
from chopper.model import COMPUTE
from chopper.pipeline import analyze_bundle
from chopper.synth import generate

work = tempfile.mkdtemp(prefix="chopper-demo-")
generate({
    "seed": 3, "gpus": 2, "iterations": 5, "warmup": 1, "layers": 2,
    "freq_ratio": 0.8, "contention": 1.0,
    "gemm": {"inst": 1.1, "mfma_util": 0.6},
    "overlap": {"qkv_ip": [0.0, 0.5, 1.0], "mlp_up": 0.5},
    "serial_comm_ns": 3000, "optimizer_kernels": 3,
}, work)
a = analyze_bundle(work)

print(f"{'op':<14}{'D_thr us':>10}{'x inst':>8}{'x util':>8}{'x ovlp':>8}{'x freq':>8}{'D_act us':>10}{'resid':>8}")
for r in a.breakdown:
    if r.reasons or not r.operation.endswith(("qkv_ip", "mlp_up")):
        continue
    print(f"{r.operation:<14}{r.d_thr_s * 1e6:>10.2f}{r.ovr_inst:>8.3f}{r.ovr_util:>8.3f}"
          f"{r.ovr_overlap:>8.3f}{r.ovr_freq:>8.3f}{r.d_act_s * 1e6:>10.2f}{r.residual:>8.3f}")

# The clock ran at 80% of peak. Undoing that costs a factor of 1/0.8.
freqs = [r.ovr_freq for r in a.breakdown if not r.reasons and np.isfinite(r.ovr_freq)]
print(f"\nfrequency factor across ops: {min(freqs):.4f} .. {max(freqs):.4f}")

# Launch overhead per kernel. Inside an iteration the queue stays ahead of the
# GPU, so the bubble before each kernel is tiny. The first kernel of an
# iteration waits on the host, so that bubble is large.
t = a.store.kernels
prep, call = launch_columns(t)
compute = t.cat == COMPUTE
order = np.lexsort((t.dispatch, t.gpu))
head = np.zeros(len(t), dtype=bool)
idx = order[compute[order]]
head[idx[1:]] = (t.iteration[idx[1:]] != t.iteration[idx[:-1]]) & (t.gpu[idx[1:]] == t.gpu[idx[:-1]])
print(f"iteration heads: mean bubble {np.mean(prep[head] + call[head]) / 1e3:.1f} us over {head.sum()} kernels")
rest = compute & ~head
print(f"everything else: mean bubble {np.mean(prep[rest] + call[rest]) / 1e3:.3f} us over {rest.sum()} kernels")
