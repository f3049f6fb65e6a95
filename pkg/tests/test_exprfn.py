import math

import numpy as np
import pytest

from modules.errors import ExpressionError
from modules.exprfn import (
    FUNCTIONS, Bindings, ConstantFunction, ParsedFunction, evaluate, evaluate_array, format_constants,
    is_zero_function, parse, parse_constants, parse_vector, to_source, vector_eval,
)


@pytest.mark.parametrize("source, expected", [
    ("2+3*4", 14.0),
    ("(2+3)*4", 20.0),
    ("-2^2", -4.0),
    ("2^-1", 0.5),
    ("2^3^2", 512.0),
    ("8/4/2", 1.0),
    ("1 < 2", 1.0),
    ("3 <= 2", 0.0),
    ("exp(0) + sqrt(16) + abs(-2)", 7.0),
])
def test_precedence(source, expected):
    assert evaluate(parse(source), {}) == pytest.approx(expected)


def test_variables_and_constants():
    e = parse("alpha*x + y - t")
    assert evaluate(e, {"alpha": 2.0}, x=3.0, y=1.0, t=0.5) == pytest.approx(6.5)


def test_if_only_evaluates_selected_branch():
    e = parse("if(x > 0, 1/x, 0)")
    values = evaluate_array(e, {}, np.array([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(values, [0.0, 0.0, 0.5])


def test_vector_function():
    f = ParsedFunction("vmax*y; 0", "vmax=-5")
    assert f.is_vector
    np.testing.assert_allclose(f(np.array([[0.3, 2.0]])), [[-10.0, 0.0]])
    assert vector_eval(parse_vector("x; 2*x"), {}, x=1.5) == (1.5, 3.0)


def test_syntax_error_offset():
    with pytest.raises(ExpressionError) as info:
        parse("1 + * 2")
    assert info.value.offset == 4


@pytest.mark.parametrize("source, message", [
    ("foo(1)", "Unknown function"),
    ("exp(1, 2)", "takes 1 argument"),
    ("if(1, 2)", "takes 3 argument"),
    ("exp", "without arguments"),
    ("(1 + 2", r"Expected '\)'"),
    ("", "Empty expression"),
    ("1 $ 2", "Unexpected character"),
])
def test_parse_errors(source, message):
    with pytest.raises(ExpressionError, match=message):
        parse(source)


def test_function_table():
    assert sorted(FUNCTIONS) == ["abs", "cos", "exp", "if", "log", "sin", "sqrt"]
    for name in ("tan", "min", "max"):
        with pytest.raises(ExpressionError, match="Unknown function"):
            parse(f"{name}(1)")


def test_unbound_constant():
    with pytest.raises(ExpressionError, match="Unbound constant"):
        evaluate(parse("beta*x"), {"alpha": 1.0})
    with pytest.raises(ExpressionError, match="Unbound constant"):
        ParsedFunction("beta*x", "alpha=1")


def test_non_finite_reports_location():
    with pytest.raises(ExpressionError) as info:
        evaluate_array(parse("1/x"), {}, np.array([1.0, 0.0]), 0.25, 2.0)
    assert info.value.location == (0.0, 0.25, 2.0)


def test_constants_parsing():
    b = parse_constants("alpha=2, v=-5,  g = -2")
    assert dict(b) == {"alpha": 2.0, "v": -5.0, "g": -2.0}
    assert parse_constants(format_constants(b)) == b
    assert len(parse_constants("")) == 0
    with pytest.raises(ExpressionError, match="reserved"):
        Bindings({"x": 1.0})
    with pytest.raises(ExpressionError, match="function name"):
        Bindings({"exp": 1.0})
    with pytest.raises(ExpressionError, match="not a number"):
        parse_constants("a=one")
    with pytest.raises(ExpressionError, match="name=value"):
        parse_constants("a")


@pytest.mark.parametrize("source", [
    "g*(1 + ((exp(v*x/alpha) - 1)/(exp(v/alpha) - 1) - 1)*(1 - exp(-beta*t^2)))",
    "if(abs(a*y) < 1e-6, -x, sin(x)^2 - cos(y)/2)",
    "-2^-x",
])
def test_to_source_parses_back_to_same_values(source):
    constants = {"g": -2.0, "v": -5.0, "alpha": 2.0, "beta": 10.0, "a": 1.5}
    e = parse(source)
    again = parse(to_source(e))
    assert again == e
    x = np.linspace(0.1, 1.0, 7)
    np.testing.assert_array_equal(evaluate_array(e, constants, x, 0.3, 0.4),
                                  evaluate_array(again, constants, x, 0.3, 0.4))


def test_function_objects():
    points = np.array([[0.0], [0.5], [1.0]])
    f = ParsedFunction("alpha*x*t", {"alpha": 2.0})
    np.testing.assert_allclose(f(points, 3.0), [0.0, 3.0, 6.0])
    assert f == ParsedFunction(" alpha*x*t ", "alpha=2")
    c = ConstantFunction(2.5)
    np.testing.assert_array_equal(c(points), [2.5, 2.5, 2.5])
    np.testing.assert_array_equal(ConstantFunction([0.0, -1.0])(points), [[0.0, -1.0]] * 3)
    assert is_zero_function(None)
    assert is_zero_function(ConstantFunction(0.0))
    assert is_zero_function(ParsedFunction("0; 0"))
    assert not is_zero_function(ParsedFunction("x"))
    with pytest.raises(ExpressionError):
        ConstantFunction(math.inf)
