import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oodrecovery import dsl
from oodrecovery.envs import CartPole
from oracles import RefError, random_program, reference_eval

ENV = CartPole()
VIEW = ENV.spec.reward_view_schema
ACTS = ENV.spec.action_schema


def run(src, kind="reward", **inputs):
    return dsl.CompiledProgram(dsl.parse(src, kind))(inputs)


def test_precedence_and_associativity():
    assert run("return 1 + 2 * 3;") == 7.0
    assert run("return 8 / 4 / 2;") == 1.0
    assert run("return 2 - 3 - 4;") == -5.0
    assert run("return -2 * 3;") == -6.0
    assert run("return 1 < 2 == 1;") == 1.0
    assert run("return 0 or 1 and 0;") == 0.0


def test_aliases():
    assert run("return 1 && !0;") == 1.0
    assert run("return 0 || 0;") == 0.0


def test_lazy_if_and_logic_guard_domain_errors():
    assert run("return if(x > 0, 1 / x, 0);", x=0.0) == 0.0
    assert run("return x != 0;".replace("!=", ">"), x=1.0) == 1.0
    assert run("return x > 0 and log(x) < 1;", x=-1.0) == 0.0
    assert run("return x <= 0 or log(x) < 1;", x=-1.0) == 1.0


def test_let_bindings_in_order():
    assert run("let a = x * 2; let b = a + 1; return b * b;", x=1.0) == 9.0


def test_comments_and_whitespace():
    assert run("# header\nlet a = 1; # trailing\n\treturn a;") == 1.0


@pytest.mark.parametrize("src,msg", [
    ("return 1 / x;", "division by zero"),
    ("return log(x);", "log of non-positive"),
    ("return sqrt(x - 1);", "sqrt of negative"),
    ("return exp(x + 1000);", "exp overflow"),
    ("return sq(x + 1e200);", "non-finite"),
])
def test_domain_errors(src, msg):
    with pytest.raises(dsl.DslEvalError, match=msg):
        run(src, x=0.0)


def test_functions():
    assert run("return clip(5, 0, 1);") == 1.0
    assert run("return min(3, 1, 2);") == 1.0
    assert run("return max(3, 1, 2, 9);") == 9.0
    assert run("return sq(-3);") == 9.0
    assert run("return abs(-2) + tanh(0) + sin(0) + cos(0);") == 3.0


@pytest.mark.parametrize("src,line,col,msg", [
    ("return (1 + 2;", 1, 8, "unclosed"),
    ("return 1 +;", 1, 11, "expected an expression"),
    ("let if = 2; return 1;", 1, 5, "reserved word"),
    ("x = 1; return x;", 1, 1, "must start with 'let'"),
    ("return 1;\nreturn 2;", 2, 1, "after the return"),
    ("return 1", 1, 9, "expected ';'"),
    ("return 1 $ 2;", 1, 10, "unexpected character"),
    ("let a = 1;\nlet b = (a *\n  2;\nreturn b;", 2, 9, "unclosed"),
])
def test_syntax_errors_report_position(src, line, col, msg):
    with pytest.raises(dsl.DslSyntaxError, match=msg) as ei:
        dsl.parse(src, "reward")
    assert (ei.value.line, ei.value.col) == (line, col)


def test_validation_unknown_identifier():
    p = dsl.parse("return heigth * 2;", "reward")
    with pytest.raises(dsl.DslValidationError, match="unknown identifier 'heigth'"):
        dsl.validate(p, VIEW, ACTS)


def test_validation_eval_cannot_see_actions():
    p = dsl.parse("return force > 0;", "eval")
    problems = dsl.check(p, VIEW, ACTS)
    assert any("only the state" in m for m in problems)


def test_validation_eval_must_be_flag_shaped():
    p = dsl.parse("return abs_theta;", "eval")
    assert any("0/1" in m for m in dsl.check(p, VIEW, ACTS))
    ok = dsl.parse("let up = abs_theta < 0.5; return if(up, 1, 0);", "eval")
    assert dsl.check(ok, VIEW, ACTS) == []


def test_validation_arity_and_unknown_function():
    assert any("clip takes 3" in m for m in dsl.check(dsl.parse("return clip(x, 1);", "reward"), VIEW, ACTS))
    assert any("unknown function 'pow'" in m for m in dsl.check(dsl.parse("return pow(x, 2);", "reward"), VIEW, ACTS))


def test_validation_shadowing():
    p = dsl.parse("let theta = 1; return theta;", "reward")
    assert any("shadows" in m for m in dsl.check(p, VIEW, ACTS))


def test_reward_may_use_actions():
    p = dsl.parse("return cos_theta - 0.01 * sq(force);", "reward")
    cp = dsl.compile_program(p, VIEW, ACTS)
    assert cp.reward(ENV.reward_view([0, 0, 0, 0]), {"force": 1.0}) == pytest.approx(0.99)


def test_eval_flag_values():
    p = dsl.parse("return abs_theta < 0.5 and abs_theta_dot < 2;", "eval")
    assert dsl.eval_flag(p, ENV.reward_view([0, 0, math.pi, 0])) == 0
    assert dsl.eval_flag(p, ENV.reward_view([0, 0, 0.1, 0.5])) == 1


def test_eval_flag_rejects_reward_program():
    with pytest.raises(dsl.DslError):
        dsl.eval_flag(dsl.parse("return 1;", "reward"), {})


def test_program_file_header():
    p = dsl.parse("return abs_theta < 0.5;", "eval")
    text = dsl.dump_program_file(p)
    assert text.startswith("# kind: eval\n")
    assert dsl.parse_program_file(text, "eval") == p
    with pytest.raises(dsl.DslSyntaxError):
        dsl.parse_program_file("return 1;")
    with pytest.raises(dsl.DslValidationError):
        dsl.parse_program_file(text, "reward")


def test_digest_ignores_formatting():
    a = dsl.parse("return 1+x;", "reward")
    b = dsl.parse("# c\nreturn (1 + x) ;", "reward")
    assert a.digest() == b.digest()


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_to_source_roundtrip(seed):
    src = random_program(np.random.default_rng(seed), ["a", "b"])
    p = dsl.parse(src, "reward")
    assert dsl.parse(dsl.to_source(p), "reward") == p


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-5, 5), st.floats(-5, 5))
def test_agrees_with_reference_interpreter(seed, a, b):
    src = random_program(np.random.default_rng(seed), ["a", "b"])
    try:
        ref = reference_eval(src, {"a": a, "b": b})
    except RefError:
        ref = "error"
    try:
        got = dsl.CompiledProgram(dsl.parse(src, "reward"))({"a": a, "b": b})
    except dsl.DslEvalError:
        got = "error"
    assert got == ref


def test_compiled_program_is_reentrant():
    cp = dsl.compile_program(dsl.parse("let y = x * 2; return y;", "reward"))
    assert cp({"x": 1.0}) == 2.0 and cp({"x": 3.0}) == 6.0
