import json
import os
from pathlib import Path

import pytest
from hypothesis import settings

from chopper.synth import generate

settings.register_profile("ci", max_examples=200, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))

SMALL = {
    "seed": 11,
    "gpus": 2,
    "iterations": 4,
    "warmup": 1,
    "layers": 2,
    "overlap": {"qkv_ip": [0.0, 0.5], "mlp_up": 0.7, "attn_fa": [0.0, 0.5, 1.0]},
}


@pytest.fixture(scope="session")
def small_bundle(tmp_path_factory) -> tuple[Path, dict]:
    out = tmp_path_factory.mktemp("small")
    truth = generate(SMALL, out)
    return out, truth


def read_truth(directory) -> dict:
    return json.loads((Path(directory) / "ground_truth.json").read_text())


def tree_bytes(directory) -> dict[str, bytes]:
    d = Path(directory)
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


# one summary line per acceptance criterion, after the normal pytest report
_acceptance: dict[str, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if not item.module.__name__.endswith("test_acceptance"):
        return
    if rep.when == "call" or rep.failed:
        doc = (item.function.__doc__ or item.name).strip().splitlines()[0]
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        prev = _acceptance.get(item.name)
        if prev is None or prev[1] == "passed":
            _acceptance[item.name] = (doc, rep.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for doc, outcome, detail in _acceptance.values():
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{status}  {doc}" + (f"  [{detail}]" if detail else ""))
