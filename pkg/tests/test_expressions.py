"""Expression parser: grammar, precedence, errors, array evaluation.

Oracle: Python's own parser.  Every string this grammar accepts is,
after rewriting "^" to "**", a Python expression with identical
precedence (right-associative power binding tighter than unary minus,
then unary sign, then * /, then + -), so eval() against a numpy
namespace decides randomized cases independently of our descent order.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sclab.expressions import (
    CONSTANTS,
    FUNCTIONS,
    VARIABLES,
    ExpressionError,
    parse_expression,
)


def oracle_eval(text, x1=0.0, x2=0.0, x3=0.0):
    # 0-d arrays so the oracle walks numpy's array code paths, like the
    # evaluator does; scalar and array pow can disagree by an ulp
    env = {"x1": np.asarray(x1), "x2": np.asarray(x2),
           "x3": np.asarray(x3), "pi": np.pi}
    env.update(FUNCTIONS)
    with np.errstate(all="ignore"):
        return float(eval(text.replace("^", "**"), {"__builtins__": {}}, env))


class TestGrammar:
    def test_number_literal(self):
        assert parse_expression("2.5")() == 2.5

    def test_exponent_literals(self):
        assert parse_expression("1e-4")() == 1e-4
        assert parse_expression("2.5e+2")() == 250.0
        assert parse_expression("3E2")() == 300.0

    def test_pi_constant(self):
        assert parse_expression("pi")() == np.pi
        assert parse_expression("2*pi")() == 2.0 * np.pi

    def test_additive_left_associative(self):
        assert parse_expression("1-2-3")() == -4.0
        assert parse_expression("1-2+3")() == 2.0

    def test_multiplicative_left_associative(self):
        assert parse_expression("8/4/2")() == 1.0
        assert parse_expression("8/4*2")() == 4.0

    def test_precedence_mul_over_add(self):
        assert parse_expression("2+3*4")() == 14.0
        assert parse_expression("(2+3)*4")() == 20.0

    def test_power_right_associative(self):
        # 2^(3^2) = 512, not (2^3)^2 = 64
        assert parse_expression("2^3^2")() == 512.0

    def test_power_binds_tighter_than_unary_minus(self):
        assert parse_expression("-2^2")() == -4.0
        assert parse_expression("(-2)^2")() == 4.0

    def test_signed_exponent(self):
        assert parse_expression("2^-2")() == 0.25
        assert parse_expression("2^+2")() == 4.0

    def test_unary_minus_stacks(self):
        assert parse_expression("--3")() == 3.0
        assert parse_expression("-+-3")() == 3.0

    def test_unary_binds_below_power_above_product(self):
        # term = signed * signed, so each factor may carry its own sign
        assert parse_expression("2*-3")() == -6.0
        assert parse_expression("-2*3")() == -6.0

    def test_functions(self):
        assert parse_expression("sin(0)")() == 0.0
        assert parse_expression("cos(0)")() == 1.0
        assert parse_expression("exp(0)")() == 1.0
        assert parse_expression("sin(pi/2)")() == pytest.approx(1.0, abs=1e-15)

    def test_nested_calls_and_parens(self):
        got = parse_expression("exp(-(sin(1)^2 + cos(1)^2))")()
        assert got == pytest.approx(np.exp(-1.0), rel=1e-15)

    def test_whitespace_insensitive(self):
        a = parse_expression(" 1 + 2 * x1 ")(x1=3.0)
        b = parse_expression("1+2*x1")(x1=3.0)
        assert float(a) == float(b) == 7.0


class TestVariables:
    def test_variables_recorded(self):
        expr = parse_expression("0.2*sin(x1)+x3")
        assert expr.variables == frozenset({"x1", "x3"})
        assert parse_expression("1+pi").variables == frozenset()

    def test_missing_variable_rejected(self):
        expr = parse_expression("x1+x2")
        with pytest.raises(ValueError, match="needs x2"):
            expr(x1=1.0)

    def test_unused_variables_ignored(self):
        assert parse_expression("x1")(x1=2.0, x2=None) == 2.0

    def test_array_broadcasting(self):
        expr = parse_expression("sin(x1)*cos(x2)")
        x1 = np.linspace(0.0, 1.0, 5)[:, None]
        x2 = np.linspace(0.0, 2.0, 7)[None, :]
        got = expr(x1=x1, x2=x2)
        assert got.shape == (5, 7)
        np.testing.assert_allclose(got, np.sin(x1) * np.cos(x2), rtol=1e-15)

    def test_all_three_variables(self):
        expr = parse_expression("x1+2*x2+4*x3")
        assert float(expr(x1=1.0, x2=1.0, x3=1.0)) == 7.0


class TestErrors:
    def test_unknown_name_position(self):
        with pytest.raises(ExpressionError, match="'y1' at position 8"):
            parse_expression("0.2*sin(y1)")

    def test_unexpected_character(self):
        with pytest.raises(ExpressionError, match=r"'\$' at position 2"):
            parse_expression("1+$")

    def test_trailing_input(self):
        with pytest.raises(ExpressionError, match="trailing input"):
            parse_expression("1 2")
        with pytest.raises(ExpressionError, match="at position 5"):
            parse_expression("(1+2))")

    def test_unclosed_paren(self):
        with pytest.raises(ExpressionError, match="end of input"):
            parse_expression("sin(x1")

    def test_empty_input(self):
        with pytest.raises(ExpressionError, match="unexpected end of input"):
            parse_expression("")

    def test_dangling_operator(self):
        with pytest.raises(ExpressionError, match="unexpected end of input"):
            parse_expression("1+")

    def test_function_requires_parens(self):
        with pytest.raises(ExpressionError):
            parse_expression("sin x1")

    def test_bad_number(self):
        with pytest.raises(ExpressionError, match="bad number"):
            parse_expression("1.2.3")

    def test_position_attribute(self):
        with pytest.raises(ExpressionError) as info:
            parse_expression("x1 + x9")
        assert info.value.position == 5


def texts(max_leaves=12):
    """Random grammar-conforming strings, built bottom up."""
    leaf = st.one_of(
        st.sampled_from(list(VARIABLES) + list(CONSTANTS)),
        st.floats(min_value=0.1, max_value=4.0,
                  allow_nan=False).map(lambda v: format(v, ".4g")),
    )

    def grow(inner):
        binary = st.tuples(inner, st.sampled_from("+-*/"), inner) \
            .map(lambda t: f"({t[0]}{t[1]}{t[2]})")
        call = st.tuples(st.sampled_from(sorted(FUNCTIONS)), inner) \
            .map(lambda t: f"{t[0]}({t[1]})")
        power = st.tuples(inner, st.floats(min_value=0.5, max_value=2.0,
                                           allow_nan=False)) \
            .map(lambda t: f"({t[0]})^{format(t[1], '.3g')}")
        negated = inner.map(lambda s: f"-({s})")
        return st.one_of(binary, call, power, negated)

    return st.recursive(leaf, grow, max_leaves=max_leaves)


class TestAgainstPythonEval:
    @settings(max_examples=200, deadline=None)
    @given(text=texts(), x1=st.floats(-3.0, 3.0), x2=st.floats(-3.0, 3.0),
           x3=st.floats(-3.0, 3.0))
    def test_matches_python_semantics(self, text, x1, x2, x3):
        expr = parse_expression(text)
        with np.errstate(all="ignore"):
            got = float(expr(x1=x1, x2=x2, x3=x3))
        want = oracle_eval(text, x1, x2, x3)
        # any precedence or associativity bug lands far outside 1e-12;
        # the slack only absorbs scalar-vs-array ulp noise in libm calls
        assert np.isclose(got, want, rtol=1e-12, atol=0.0, equal_nan=True)

    @settings(max_examples=100, deadline=None)
    @given(text=texts())
    def test_parse_is_stable(self, text):
        a, b = parse_expression(text), parse_expression(text)
        assert a.variables == b.variables
        assert a._root == b._root

    def test_handwritten_against_oracle(self):
        cases = ["0.2*sin(x1)", "1 - x1^2/2", "exp(-x1^2 - x2^2)",
                 "cos(2*pi*x1) * sin(pi*x2) + 1e-3"]
        for text in cases:
            expr = parse_expression(text)
            for x1, x2 in ((0.0, 0.0), (0.3, -1.2), (2.0, 0.7)):
                assert float(expr(x1=x1, x2=x2)) == oracle_eval(text, x1, x2)
