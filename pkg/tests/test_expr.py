import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from chopper.errors import DivisionByZero, MissingCounter, ParseError
from chopper.expr import DEFAULT_REGISTRY, MetricExpr, parse_registry

NAMES = ["A", "B_2", "GPU_CYCLES", "dur_s"]


def test_precedence_and_associativity():
    env = {"A": 8.0, "B": 2.0, "C": 3.0}
    assert MetricExpr("A - B - C").evaluate(env) == 3.0
    assert MetricExpr("A / B / B").evaluate(env) == 2.0
    assert MetricExpr("A + B * C").evaluate(env) == 14.0
    assert MetricExpr("(A + B) * C").evaluate(env) == 30.0
    assert MetricExpr("-A * -B").evaluate(env) == 16.0
    assert MetricExpr("A × B ÷ C").evaluate(env) == pytest.approx(16 / 3)
    assert MetricExpr("1.5e3 + .5").evaluate({}) == 1500.5


@pytest.mark.parametrize("text", ["", "A +", "(A", "A B", "A $ B", "A)", "*A"])
def test_parse_errors(text):
    with pytest.raises(ParseError):
        MetricExpr(text)


def test_missing_and_zero_division():
    with pytest.raises(MissingCounter) as e:
        MetricExpr("X - Z").evaluate({"X": 1.0})
    assert e.value.args[0] == "Z" or "Z" in str(e.value)
    with pytest.raises(DivisionByZero):
        MetricExpr("X / (Y - Y)").evaluate({"X": 1.0, "Y": 2.0})


def test_evaluate_array_marks_undefined_rows():
    out = MetricExpr("X / Y").evaluate_array({"X": np.array([1.0, 2.0, np.nan]), "Y": np.array([2.0, 0.0, 1.0])})
    assert out[0] == 0.5 and np.isnan(out[1]) and np.isnan(out[2])


def test_registry():
    reg = parse_registry(DEFAULT_REGISTRY)
    assert set(reg) == set(DEFAULT_REGISTRY)
    with pytest.raises(ParseError, match="broken"):
        parse_registry({"broken": "A +"})


numbers = st.floats(min_value=0.0, max_value=1e6, allow_nan=False).map(repr)
leaves = st.one_of(numbers, st.sampled_from(NAMES))


def _combine(children):
    return st.one_of(
        st.tuples(children, st.sampled_from("+-*/"), children).map(lambda t: f"{t[0]} {t[1]} {t[2]}"),
        children.map(lambda c: f"({c})"),
        children.map(lambda c: f"-{c}"),
    )


exprs = st.recursive(leaves, _combine, max_leaves=12)
envs = st.fixed_dictionaries({n: st.floats(min_value=-1e3, max_value=1e3, allow_nan=False) for n in NAMES})


@given(exprs, envs)
def test_matches_python_arithmetic(text, env):
    """Python's own grammar agrees with ours on + - * / and unary minus."""
    try:
        want = eval(text, {"__builtins__": {}}, dict(env))
    except ZeroDivisionError:
        with pytest.raises(ZeroDivisionError):
            MetricExpr(text).evaluate(env)
        return
    got = MetricExpr(text).evaluate(env)
    if isinstance(want, float) and math.isnan(want):
        assert math.isnan(got)
    else:
        assert got == want


@given(exprs, envs)
def test_array_evaluation_agrees_with_scalar(text, env):
    e = MetricExpr(text)
    arr = e.evaluate_array({k: np.array([v, v]) for k, v in env.items()})
    try:
        want = e.evaluate(env)
    except ZeroDivisionError:
        return
    if math.isnan(want):
        assert np.isnan(arr).all()
    else:
        assert arr.tolist() == [want, want]
