"""Polynomial algebra and expectation rewriter tests."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from momentplan import polyalg as pa
from momentplan.distmoments import GaussianSpec, gaussian_moments


def roster2():
    return pa.VariableRoster.make(random=("w1", "w2"))


def var(roster, name):
    return pa.Polynomial.variable(roster, name)


def std_normal_table(order=12):
    # order 12 covers squares of the hypothesis-generated polynomials
    return gaussian_moments(GaussianSpec((0.0, 0.0), ((1.0, 0.0), (0.0, 1.0))), order)


class TestPolynomialArithmetic:
    def test_difference_of_squares(self):
        r = roster2()
        w1, w2 = var(r, "w1"), var(r, "w2")
        product = pa.poly_mul(w1 + w2, w1 - w2)
        assert product == w1 * w1 - w2 * w2

    def test_multiply_by_one(self):
        r = roster2()
        p = var(r, "w1") ** 2 + var(r, "w2") ** 2
        assert pa.poly_mul(p, pa.Polynomial.constant(r, 1.0)) == p

    def test_binomial_square(self):
        r = roster2()
        w1, w2 = var(r, "w1"), var(r, "w2")
        sq = pa.poly_pow(w1 + w2, 2)
        assert sq == w1 * w1 + 2.0 * (w1 * w2) + w2 * w2

    def test_power_zero_is_one(self):
        r = roster2()
        p = var(r, "w1") + 3.0
        assert pa.poly_pow(p, 0) == pa.Polynomial.constant(r, 1.0)

    def test_scalar_power(self):
        r = roster2()
        p = 2.0 * var(r, "w1")
        cubed = pa.poly_pow(p, 3)
        assert cubed.terms == {(3, 0): 8.0}

    def test_worked_example_expansion(self):
        r = roster2()
        p = var(r, "w1") ** 2 + var(r, "w2") ** 2
        sq = pa.poly_pow(p, 2)
        assert sq.terms == {(4, 0): 1.0, (2, 2): 2.0, (0, 4): 1.0}

    def test_zero_coefficients_pruned(self):
        r = roster2()
        p = var(r, "w1") - var(r, "w1")
        assert p.is_zero()
        assert p.terms == {}

    def test_degree(self):
        r = roster2()
        p = var(r, "w1") ** 3 * var(r, "w2") + 1.0
        assert p.degree == 4

    def test_roster_mismatch_tag_conflict(self):
        a = pa.VariableRoster.make(random=("x",))
        b = pa.VariableRoster.make(deterministic=("x",))
        with pytest.raises(pa.RosterMismatchError):
            pa.poly_mul(pa.Polynomial.variable(a, "x"), pa.Polynomial.variable(b, "x"))

    def test_roster_union_zero_extension(self):
        a = pa.VariableRoster.make(random=("w1",))
        b = pa.VariableRoster.make(random=("w2",))
        p = pa.poly_mul(pa.Polynomial.variable(a, "w1"), pa.Polynomial.variable(b, "w2"))
        assert set(p.roster.names) == {"w1", "w2"}
        assert p.degree == 2


class TestSubstitute:
    def test_expansion_of_shift(self):
        r = pa.VariableRoster.make(random=("w1",))
        p = pa.Polynomial.variable(r, "w1") ** 2
        sub_roster = pa.VariableRoster.make(deterministic=("g_x", "x_t"))
        expr = pa.Polynomial.variable(sub_roster, "g_x") - pa.Polynomial.variable(
            sub_roster, "x_t"
        )
        q = pa.substitute(p, {"w1": expr})
        vals = {"g_x": 3.0, "x_t": 1.0}
        assert q.evaluate(vals) == pytest.approx((3.0 - 1.0) ** 2)
        assert q.degree == 2 and len(q.terms) == 3

    def test_empty_assignment_identity(self):
        r = roster2()
        p = var(r, "w1") * var(r, "w2") + 5.0
        assert pa.substitute(p, {}) == p

    def test_substitute_to_zero(self):
        r = roster2()
        p = var(r, "w1") + var(r, "w2")
        q = pa.substitute(p, {"w1": 0.0, "w2": 0.0})
        assert q.is_zero()

    def test_unknown_variable_rejected(self):
        r = roster2()
        with pytest.raises(pa.PolynomialError):
            pa.substitute(var(r, "w1"), {"nope": 1.0})


class TestExpectation:
    def test_worked_example(self):
        r = roster2()
        p = var(r, "w1") ** 2 + var(r, "w2") ** 2
        expr = pa.expectation(pa.poly_pow(p, 2))
        assert expr.terms.keys() == {(((4, 0)),), (((2, 2)),), (((0, 4)),)}
        assert expr.terms[((4, 0),)].constant_value() == 1.0
        assert expr.terms[((2, 2),)].constant_value() == 2.0
        assert pa.evaluate(expr, std_normal_table()) == pytest.approx(8.0)

    def test_deterministic_polynomial_degenerates(self):
        r = pa.VariableRoster.make(deterministic=("a", "b"))
        p = pa.Polynomial.variable(r, "a") * pa.Polynomial.variable(r, "b") + 2.0
        expr = pa.expectation(p)
        assert set(expr.terms) == {()}
        assert pa.evaluate(expr, {}, {"a": 3.0, "b": 4.0}) == pytest.approx(14.0)

    def test_independence_factoring(self):
        r = roster2()
        p = var(r, "w1") ** 2 * var(r, "w2") ** 3
        deps = pa.DependencyStructure.independent(("w1", "w2"))
        expr = pa.expectation(p, deps)
        (key,) = expr.terms
        assert key == ((2, 0), (0, 3))  # factors in graded-lex order
        # E[w1^2] * E[w2^3] = 1 * 0 on standard normals
        assert pa.evaluate(expr, std_normal_table()) == pytest.approx(0.0)

    def test_factoring_preserves_value_on_consistent_tables(self):
        r = roster2()
        rng = np.random.default_rng(7)
        table = std_normal_table()
        for _ in range(20):
            terms = {
                (rng.integers(0, 3), rng.integers(0, 3)): float(rng.normal())
                for _ in range(4)
            }
            p = pa.Polynomial(r, terms)
            joint = pa.expectation(p)
            split = pa.expectation(p, pa.DependencyStructure.independent(("w1", "w2")))
            assert pa.evaluate(joint, table) == pytest.approx(
                pa.evaluate(split, table), abs=1e-12
            )

    def test_blocks_must_cover(self):
        r = roster2()
        with pytest.raises(pa.PolynomialError):
            pa.expectation(var(r, "w1"), pa.DependencyStructure((("w1",),)))

    def test_mean_variance_expressions(self):
        r = roster2()
        w1 = var(r, "w1")
        mean_e, second_e = pa.mean_variance_expressions(w1)
        t = std_normal_table()
        assert pa.evaluate(mean_e, t) == pytest.approx(0.0)
        assert pa.evaluate(second_e, t) == pytest.approx(1.0)

    def test_constant_variance_zero(self):
        r = roster2()
        c = pa.Polynomial.constant(r, 4.0)
        mean_e, second_e = pa.mean_variance_expressions(c)
        t = std_normal_table()
        m = pa.evaluate(mean_e, t)
        s = pa.evaluate(second_e, t)
        assert m == pytest.approx(4.0)
        assert s - m * m == pytest.approx(0.0)

    def test_missing_moment_reported(self):
        r = roster2()
        expr = pa.expectation(var(r, "w1") ** 2)
        with pytest.raises(pa.MissingMomentError) as exc:
            pa.evaluate(expr, {})
        assert exc.value.multi_index == (2, 0)

    def test_missing_det_value_reported(self):
        r = pa.VariableRoster.make(random=("w1",), deterministic=("a",))
        p = pa.Polynomial.variable(r, "a") * pa.Polynomial.variable(r, "w1")
        expr = pa.expectation(p)
        with pytest.raises(pa.MissingValueError):
            pa.evaluate(expr, {(0,): 1.0, (1,): 0.5}, {})


class TestRender:
    def test_moment_tokens(self):
        r = roster2()
        expr = pa.expectation(var(r, "w1") ** 2 * var(r, "w2") ** 3)
        assert pa.render(expr, "c") == "E_w1_2_x_w2_3"
        assert pa.render(expr, "plain") == "E[w1^2*w2^3]"

    def test_zero_expression(self):
        r = roster2()
        expr = pa.expectation(pa.Polynomial.zero(r))
        assert pa.render(expr, "plain") == "0"
        assert pa.render(expr, "c") == "0"

    def test_worked_example_render(self):
        r = roster2()
        p = var(r, "w1") ** 2 + var(r, "w2") ** 2
        expr = pa.expectation(pa.poly_pow(p, 2))
        text = pa.render(expr, "plain")
        assert text == "E[w2^4] + 2*E[w1^2*w2^2] + E[w1^4]"
        assert text.count("E[") == 3

    def test_render_round_trips_through_evaluate(self):
        r = roster2()
        rng = np.random.default_rng(3)
        table = std_normal_table()
        for _ in range(10):
            terms = {
                (rng.integers(0, 3), rng.integers(0, 3)): float(rng.normal())
                for _ in range(3)
            }
            p = pa.Polynomial(r, terms)
            expr = pa.expectation(p * p)
            rendered = pa.render(expr, "plain")
            env = {}
            for key in expr.terms:
                token = "*".join(
                    pa._moment_token(f, expr.random_names, "plain") for f in key
                )
                value = 1.0
                for f in key:
                    value *= table.entries[f]
                if token:
                    env[token] = value
            # substitute longest tokens first so substrings cannot collide
            text = rendered
            for token in sorted(env, key=len, reverse=True):
                text = text.replace(token, repr(env[token]))
            assert pa.evaluate(expr, table) == pytest.approx(eval(text), rel=1e-12)

    def test_unknown_dialect(self):
        r = roster2()
        expr = pa.expectation(var(r, "w1"))
        with pytest.raises(pa.PolynomialError):
            pa.render(expr, "fortran")


coeff = st.floats(min_value=-4.0, max_value=4.0, allow_nan=False)
exponent_pairs = st.tuples(st.integers(0, 3), st.integers(0, 3))
poly_terms = st.dictionaries(exponent_pairs, coeff, min_size=0, max_size=5)


def make_poly(terms):
    return pa.Polynomial(roster2(), terms)


class TestAlgebraLaws:
    @given(poly_terms, poly_terms)
    @settings(max_examples=60, deadline=None)
    def test_multiplication_commutes(self, ta, tb):
        a, b = make_poly(ta), make_poly(tb)
        left = (a * b).terms
        right = (b * a).terms
        assert left.keys() == right.keys()
        for k in left:
            assert left[k] == pytest.approx(right[k], rel=1e-12, abs=1e-12)

    @given(poly_terms, poly_terms, poly_terms)
    @settings(max_examples=40, deadline=None)
    def test_distributivity_up_to_rounding(self, ta, tb, tc):
        a, b, c = make_poly(ta), make_poly(tb), make_poly(tc)
        lhs = a * (b + c)
        rhs = a * b + a * c
        point = {"w1": 0.7, "w2": -1.3}
        assert lhs.evaluate(point) == pytest.approx(rhs.evaluate(point), abs=1e-9)

    @given(poly_terms, poly_terms, coeff, coeff)
    @settings(max_examples=40, deadline=None)
    def test_expectation_linearity(self, ta, tb, alpha, beta):
        a, b = make_poly(ta), make_poly(tb)
        table = std_normal_table()
        combo = alpha * a + beta * b
        lhs = pa.evaluate(pa.expectation(combo), table)
        rhs = alpha * pa.evaluate(pa.expectation(a), table) + beta * pa.evaluate(
            pa.expectation(b), table
        )
        assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-9)

    @given(poly_terms)
    @settings(max_examples=40, deadline=None)
    def test_power_consistency_variance_nonnegative(self, ta):
        p = make_poly(ta)
        table = std_normal_table()
        second = pa.evaluate(pa.expectation(pa.poly_pow(p, 2)), table)
        mean = pa.evaluate(pa.expectation(p), table)
        assert second - mean * mean >= -1e-9 * max(1.0, abs(second))


class TestMonteCarloOracle:
    def test_worked_example_against_sampling(self):
        # E[(w1^2+w2^2)^2] on independent standard normals: exact value 8.
        rng = np.random.default_rng(42)
        w = rng.standard_normal((200_000, 2))
        vals = (w[:, 0] ** 2 + w[:, 1] ** 2) ** 2
        se = vals.std() / math.sqrt(vals.size)
        assert abs(vals.mean() - 8.0) < 3 * se

    def test_random_polynomials_match_sampling(self):
        # Scaled-down version of the oracle-equivalence sweep (full-size
        # version runs in the acceptance suite).
        rng = np.random.default_rng(11)
        table = std_normal_table()
        r = roster2()
        samples = rng.standard_normal((300_000, 2))
        for _ in range(10):
            terms = {
                (int(rng.integers(0, 3)), int(rng.integers(0, 3))): float(rng.normal())
                for _ in range(4)
            }
            p = pa.Polynomial(r, terms)
            vals = np.zeros(samples.shape[0])
            for (e1, e2), cval in p.terms.items():
                vals += cval * samples[:, 0] ** e1 * samples[:, 1] ** e2
            analytic = pa.evaluate(pa.expectation(p), table)
            se = vals.std() / math.sqrt(vals.size)
            assert abs(vals.mean() - analytic) < 4 * se + 1e-12
