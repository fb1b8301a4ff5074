import numpy as np
import pytest

from chopper.errors import InvalidConfig, InvalidPerturbation
from chopper.ingest import load_canonical, parse_kernels_jsonl
from chopper.metrics import launch_columns
from chopper.model import COMPUTE, validate_store
from chopper.pipeline import analyze_bundle
from chopper.synth import SplitMix64, SynthConfig, build, generate, perturb

from conftest import SMALL, tree_bytes


def test_splitmix_reference_values():
    # published first outputs for seed 0 and seed 1234567
    r = SplitMix64(0)
    assert r.next() == 0xE220A8397B1DCDAF
    assert r.next() == 0x6E789E6AA1B965F4
    r = SplitMix64(1234567)
    assert [r.next() for _ in range(3)] == [6457827717110365317, 3203168211198807973, 9817491932198370423]


def test_minimal_config_is_valid(tmp_path):
    generate({"seed": 1, "gpus": 2, "iterations": 2, "warmup": 0, "layers": 1,
              "layer_ops": ["qkv_ip", "mlp_up"]}, tmp_path)
    assert validate_store(load_canonical(tmp_path, validate=False)) == []


def test_same_seed_same_bytes(tmp_path):
    generate(SMALL, tmp_path / "a")
    generate(SMALL, tmp_path / "b")
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    generate(dict(SMALL, seed=12), tmp_path / "c")
    assert tree_bytes(tmp_path / "a") != tree_bytes(tmp_path / "c")


@pytest.mark.parametrize("bad", [
    {"seed": "1"}, {"seed": -1}, {"gpus": 0}, {"warmup": 5}, {"freq_ratio": 1.5},
    {"layer_ops": ["nope"]}, {"overlap": {"mlp_up": 1.2}}, {"unknown_key": 1},
    {"gemm": {"mfma_util": 0}}, {"dispatch": {"gap_ns": [5, 1]}},
])
def test_invalid_configs(bad):
    with pytest.raises(InvalidConfig):
        SynthConfig.from_dict(dict(SMALL, **bad))


def test_overlap_plan_is_recovered(tmp_path):
    generate(dict(SMALL, overlap={"mlp_up": 0.7}), tmp_path)
    a = analyze_bundle(tmp_path)
    t = a.store.kernels
    labels = np.asarray(t.op_labels, dtype=object)
    sel = (t.cat == COMPUTE) & t.annotated
    sel &= np.isin(labels[np.maximum(t.op_code, 0)], ["f_mlp_up", "b_mlp_up"])
    assert sel.sum() > 0
    np.testing.assert_allclose(a.overlap[sel], 0.7, rtol=0, atol=1e-9)


def test_truth_summary_mode_omits_detail():
    truth = build(SynthConfig.from_dict(dict(SMALL, truth_detail="summary"))).truth
    assert "instances" not in truth and "kernels" not in truth and truth["breakdown"]


def test_shuffle_changes_file_not_store(small_bundle, tmp_path):
    dst = perturb(small_bundle[0], "shuffle_file_order", 5, tmp_path / "s")
    assert (dst / "kernels.jsonl").read_bytes() != (small_bundle[0] / "kernels.jsonl").read_bytes()
    a, b = load_canonical(small_bundle[0]).kernels, load_canonical(dst).kernels
    for c in a.COLUMNS:
        if c not in ("name_code", "op_code"):
            assert np.array_equal(getattr(a, c), getattr(b, c))


def test_clock_jitter_bounds_launch_change(small_bundle, tmp_path):
    bound = 1000
    dst = perturb(small_bundle[0], "clock_jitter", 9, tmp_path / "j", jitter_ns=bound)
    before = parse_kernels_jsonl((small_bundle[0] / "kernels.jsonl").read_bytes())
    after = load_canonical(dst).kernels
    assert np.array_equal(before.corr, after.corr)
    assert np.abs(after.dispatch - before.dispatch).max() <= bound
    lb, la = (sum(launch_columns(t)) for t in (before, after))
    assert np.abs(la - lb).max() <= bound


def test_drop_counter_pass_and_errors(small_bundle, tmp_path):
    dst = perturb(small_bundle[0], "drop_counter_pass", 0, tmp_path / "d")
    assert "GPU_CYCLES" not in (dst / "counters.csv").read_text()
    with pytest.raises(InvalidPerturbation):
        perturb(small_bundle[0], "drop_counter_pass", 0, tmp_path / "e", pass_id=99)
    with pytest.raises(InvalidPerturbation):
        perturb(small_bundle[0], "melt", 0, tmp_path / "f")
