import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rcbf.errors import ParseError, SpaceMismatchError
from rcbf.polyalg import (
    Polynomial,
    VariableSpace,
    basis_exponents,
    basis_size,
    grlex_key,
    parse_polynomial,
    poly_arith,
)

SP = VariableSpace((("x", 2), ("u", 1), ("t", 1)))
X1 = Polynomial.variable(SP, "x1")
X2 = Polynomial.variable(SP, "x2")
U = Polynomial.variable(SP, "u")
T = Polynomial.variable(SP, "t")


def rand_poly(rng, max_terms=5, max_deg=3, bound=10.0):
    coeffs = {}
    for _ in range(rng.integers(1, max_terms + 1)):
        exps = tuple(int(v) for v in rng.integers(0, max_deg + 1, size=SP.nvars))
        if sum(exps) > max_deg + 1:
            continue
        coeffs[exps] = float(rng.uniform(-bound, bound))
    return Polynomial(SP, coeffs)


class TestArithmetic:
    def test_difference_of_squares(self):
        assert (X1 + 1) * (X1 - 1) == X1 * X1 - 1

    def test_additive_inverse_is_zero(self):
        p = X1 * X2 + 3 * U - 0.5
        assert (p + p.scale(-1.0)).is_zero

    def test_multiplicative_identity(self):
        p = T - X1 * X1 - X2 * X2
        assert p * Polynomial.constant(SP, 1.0) == p

    def test_poly_arith_dispatch(self):
        p, q = X1 + 2, X2 - 1
        assert poly_arith(p, q, "add") == p + q
        assert poly_arith(p, q, "sub") == p - q
        assert poly_arith(p, q, "mul") == p * q
        assert poly_arith(p, 3.0, "scale") == p.scale(3.0)

    def test_space_mismatch_rejected(self):
        other = VariableSpace((("x", 2),))
        with pytest.raises(SpaceMismatchError):
            X1 + Polynomial.variable(other, "x1")

    def test_degree_of_product(self):
        p = X1 * X1 + X2
        q = U * U * U - 2
        assert (p * q).degree() == p.degree() + q.degree()


class TestDifferentiate:
    def test_power_rule(self):
        p = T - X1 * X1 - X2 * X2
        assert p.differentiate("x1") == X1 * (-2.0)

    def test_constant_derivative_is_zero(self):
        assert Polynomial.constant(SP, 5.0).differentiate("x2").is_zero

    def test_box_constraint_gradient(self):
        c = U * U - 25.0
        assert c.differentiate("u") == U * 2.0


class TestEvaluate:
    def test_boundary_point_near_zero(self):
        p = T - X1 * X1 - X2 * X2
        val = p.evaluate({"x": [0.0, 0.3162], "t": 0.1})
        assert abs(val) < 5e-5

    def test_zero_polynomial(self):
        assert Polynomial.zero(SP).evaluate({"x": [1, 2], "u": 3, "t": 4}) == 0.0

    def test_quartic_at_boundary_minimizer(self):
        p = -X2 * X2 * (1 - X2 * X2)
        assert p.evaluate({"x": [0.0, math.sqrt(0.1)], "u": 0, "t": 0}) == pytest.approx(
            -0.09, abs=1e-12
        )

    def test_missing_variable_raises(self):
        with pytest.raises(SpaceMismatchError):
            (X1 * U).evaluate({"x": [1.0, 2.0]})

    def test_evaluate_many_matches_scalar(self):
        p = X1 * X2 * X2 + 2 * U - T
        rng = np.random.default_rng(0)
        pts = rng.uniform(-2, 2, size=(50, 4))
        vec = p.evaluate_many({"x": pts[:, :2], "u": pts[:, 2], "t": pts[:, 3]})
        for row, v in zip(pts, vec):
            assert v == pytest.approx(
                p.evaluate({"x": row[:2], "u": row[2], "t": row[3]}), abs=1e-12
            )


class TestSubstitute:
    def test_fix_parameter(self):
        p = T - X1 * X1 - X2 * X2
        assert p.substitute({"t": 1.1}) == 1.1 - X1 * X1 - X2 * X2

    def test_empty_bindings_identity(self):
        p = X1 * U - T
        assert p.substitute({}) == p

    def test_identity_binding(self):
        p = X1 * X1 * U + T
        assert p.substitute({"x1": X1}) == p

    def test_projection_after_fixing(self):
        p = T * X1 + X2
        q = p.substitute({"t": 2.0})
        sub = SP.subspace(["x", "u"])
        assert set(q.project(sub).space.names) == {"x1", "x2", "u"}


class TestText:
    def test_parse_human_form(self):
        p = parse_polynomial("t - x1^2 - x2^2", SP)
        assert p == T - X1 * X1 - X2 * X2

    def test_parse_double_star_and_implicit_coeff(self):
        p = parse_polynomial("0.5*x2 - 0.5*x2**3 - x1", SP)
        assert p == X2 * 0.5 - X2 * X2 * X2 * 0.5 - X1

    def test_bad_token_raises(self):
        with pytest.raises(ParseError):
            parse_polynomial("x1 $ 2", SP)

    def test_unknown_variable_raises(self):
        with pytest.raises(SpaceMismatchError):
            parse_polynomial("y1 + 1", SP)


class TestBasis:
    def test_sizes(self):
        assert len(basis_exponents(4, 2)) == basis_size(4, 2) == 15
        assert len(basis_exponents(2, 4)) == 15
        assert basis_size(4, 4) == 70

    def test_grlex_sorted_and_unique(self):
        exps = basis_exponents(3, 3)
        keys = [grlex_key(e) for e in exps]
        assert keys == sorted(keys)
        assert len(set(exps)) == len(exps)
        assert exps[0] == (0, 0, 0)

    def test_active_subset(self):
        exps = basis_exponents(4, 2, active=[1, 3])
        assert all(e[0] == 0 and e[2] == 0 for e in exps)
        assert len(exps) == basis_size(2, 2)


# ----------------------------------------------------------------- properties

coeff_st = st.floats(min_value=-10, max_value=10, allow_nan=False, width=64)
exps_st = st.tuples(*(st.integers(0, 2) for _ in range(4)))
poly_st = st.dictionaries(exps_st, coeff_st, min_size=1, max_size=5).map(
    lambda d: Polynomial(SP, d)
)
point_st = st.lists(st.floats(-10, 10, allow_nan=False, width=64), min_size=4, max_size=4)


@settings(max_examples=60, deadline=None)
@given(poly_st, poly_st, st.integers(0, 3))
def test_product_rule(p, q, var):
    lhs = (p * q).differentiate(var)
    rhs = p.differentiate(var) * q + p * q.differentiate(var)
    assert (lhs - rhs).is_zero


@settings(max_examples=60, deadline=None)
@given(poly_st, poly_st, point_st)
def test_evaluation_homomorphism(p, q, pt):
    asg = {"x": pt[:2], "u": pt[2], "t": pt[3]}
    lhs = (p * q).evaluate(asg)
    rhs = p.evaluate(asg) * q.evaluate(asg)
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-6)


@settings(max_examples=60, deadline=None)
@given(poly_st)
def test_serialization_round_trip(p):
    q = parse_polynomial(p.to_text(), SP)
    assert dict(q.items()) == dict(p.items())


@settings(max_examples=60, deadline=None)
@given(poly_st, st.floats(-5, 5, allow_nan=False, width=64), point_st)
def test_substitution_evaluation_commutes(p, c, pt):
    fixed = p.substitute({"t": c})
    asg = {"x": pt[:2], "u": pt[2]}
    lhs = fixed.evaluate({**asg, "t": 0.0})
    rhs = p.evaluate({**asg, "t": c})
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-6)
