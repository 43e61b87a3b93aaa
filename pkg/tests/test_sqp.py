"""Generic SQP solver tests on small analytic problems (BFGS mode)."""

import numpy as np
import pytest

from momentplan import sqp


def make_nlp(n, n_eq, n_ineq, fun, lb=None, ub=None, eq_struct=None, in_struct=None,
             blocks=None):
    lb = np.full(n, -np.inf) if lb is None else np.asarray(lb, dtype=float)
    ub = np.full(n, np.inf) if ub is None else np.asarray(ub, dtype=float)
    if eq_struct is None:
        rows = np.repeat(np.arange(n_eq), n)
        cols = np.tile(np.arange(n), n_eq)
        eq_struct = (rows, cols)
    if in_struct is None:
        rows = np.repeat(np.arange(n_ineq), n)
        cols = np.tile(np.arange(n), n_ineq)
        in_struct = (rows, cols)
    return sqp.DenseNLP(
        n_vars=n,
        n_eq=n_eq,
        n_ineq=n_ineq,
        lb=lb,
        ub=ub,
        eq_jac_structure=eq_struct,
        ineq_jac_structure=in_struct,
        evaluate=fun,
        hessian_blocks=blocks,
    )


class TestEqualityConstrainedQuadratic:
    def test_projects_onto_plane(self):
        # min ||x||^2 s.t. x0 + x1 + x2 = 3; solution (1, 1, 1)
        def fun(z, deriv):
            eq = np.array([z.sum() - 3.0])
            return sqp.NLPEval(
                objective=float(z @ z),
                eq=eq,
                ineq=np.zeros(0),
                gradient=2 * z if deriv else None,
                eq_jac_values=np.ones(3) if deriv else None,
                ineq_jac_values=np.zeros(0) if deriv else None,
            )

        nlp = make_nlp(3, 1, 0, fun)
        res = sqp.solve_sqp(nlp, np.array([5.0, -2.0, 0.5]), sqp.SQPConfig(hessian="bfgs"))
        assert res.status == sqp.STATUS_CONVERGED
        assert res.z == pytest.approx(np.ones(3), abs=1e-6)


class TestInequalityAndBounds:
    def test_active_inequality(self):
        # min (x-2)^2 + (y-1)^2 s.t. x + y <= 2, x, y >= 0 -> (1.5, 0.5)
        def fun(z, deriv):
            return sqp.NLPEval(
                objective=float((z[0] - 2) ** 2 + (z[1] - 1) ** 2),
                eq=np.zeros(0),
                ineq=np.array([z[0] + z[1] - 2.0]),
                gradient=np.array([2 * (z[0] - 2), 2 * (z[1] - 1)]) if deriv else None,
                eq_jac_values=np.zeros(0) if deriv else None,
                ineq_jac_values=np.ones(2) if deriv else None,
            )

        nlp = make_nlp(2, 0, 1, fun, lb=[0.0, 0.0])
        res = sqp.solve_sqp(nlp, np.array([0.0, 0.0]), sqp.SQPConfig(hessian="bfgs"))
        assert res.status == sqp.STATUS_CONVERGED
        assert res.z == pytest.approx([1.5, 0.5], abs=1e-5)
        assert res.ineq_multipliers[0] > 0  # constraint is active

    def test_bound_active_solution(self):
        # min (x + 1)^2 with x >= 0 -> x = 0
        def fun(z, deriv):
            return sqp.NLPEval(
                objective=float((z[0] + 1.0) ** 2),
                eq=np.zeros(0),
                ineq=np.zeros(0),
                gradient=np.array([2 * (z[0] + 1)]) if deriv else None,
                eq_jac_values=np.zeros(0) if deriv else None,
                ineq_jac_values=np.zeros(0) if deriv else None,
            )

        nlp = make_nlp(1, 0, 0, fun, lb=[0.0], ub=[5.0])
        res = sqp.solve_sqp(nlp, np.array([3.0]), sqp.SQPConfig(hessian="bfgs"))
        assert res.status == sqp.STATUS_CONVERGED
        assert res.z[0] == pytest.approx(0.0, abs=1e-8)


class TestNonconvexBFGS:
    def test_rosenbrock_in_box(self):
        def fun(z, deriv):
            x, y = z
            f = (1 - x) ** 2 + 100 * (y - x * x) ** 2
            g = None
            if deriv:
                g = np.array(
                    [-2 * (1 - x) - 400 * x * (y - x * x), 200 * (y - x * x)]
                )
            return sqp.NLPEval(
                objective=float(f),
                eq=np.zeros(0),
                ineq=np.zeros(0),
                gradient=g,
                eq_jac_values=np.zeros(0) if deriv else None,
                ineq_jac_values=np.zeros(0) if deriv else None,
            )

        nlp = make_nlp(2, 0, 0, fun, lb=[-2, -2], ub=[2, 2])
        res = sqp.solve_sqp(
            nlp, np.array([-1.2, 1.0]), sqp.SQPConfig(hessian="bfgs", max_iterations=400)
        )
        assert res.status == sqp.STATUS_CONVERGED
        assert res.z == pytest.approx([1.0, 1.0], abs=1e-4)

    def test_nonlinear_equality(self):
        # min x + y s.t. x^2 + y^2 = 2 -> (-1, -1)
        def fun(z, deriv):
            return sqp.NLPEval(
                objective=float(z.sum()),
                eq=np.array([z @ z - 2.0]),
                ineq=np.zeros(0),
                gradient=np.ones(2) if deriv else None,
                eq_jac_values=2 * z if deriv else None,
                ineq_jac_values=np.zeros(0) if deriv else None,
            )

        nlp = make_nlp(2, 1, 0, fun)
        res = sqp.solve_sqp(nlp, np.array([2.0, 0.3]), sqp.SQPConfig(hessian="bfgs"))
        assert res.status == sqp.STATUS_CONVERGED
        assert res.z == pytest.approx([-1.0, -1.0], abs=1e-5)
        assert res.max_eq_violation <= 1e-6


class TestInfeasibility:
    def test_inconsistent_constraints_reported(self):
        # x = -5 is unreachable within [0, 1]
        def fun(z, deriv):
            return sqp.NLPEval(
                objective=float(z[0] ** 2),
                eq=np.array([z[0] + 5.0]),
                ineq=np.zeros(0),
                gradient=np.array([2 * z[0]]) if deriv else None,
                eq_jac_values=np.ones(1) if deriv else None,
                ineq_jac_values=np.zeros(0) if deriv else None,
            )

        nlp = make_nlp(1, 1, 0, fun, lb=[0.0], ub=[1.0])
        res = sqp.solve_sqp(nlp, np.array([0.5]), sqp.SQPConfig(hessian="bfgs", max_iterations=50))
        assert res.status == sqp.STATUS_INFEASIBLE
        # the reported iterate stays in bounds and the violation is honest
        assert 0.0 <= res.z[0] <= 1.0
        assert res.max_eq_violation > 4.0


class TestFiniteDifferences:
    def test_fd_matches_analytic(self):
        def fun(z, deriv):
            x, y = z
            return sqp.NLPEval(
                objective=float(x * x * y + y ** 3),
                eq=np.array([x * y - 1.0]),
                ineq=np.array([x + y - 3.0]),
                gradient=np.array([2 * x * y, x * x + 3 * y * y]) if deriv else None,
                eq_jac_values=np.array([y, x]) if deriv else None,
                ineq_jac_values=np.ones(2) if deriv else None,
            )

        nlp = make_nlp(2, 1, 1, fun)
        z = np.array([1.3, -0.7])
        grad, eq_jac, in_jac = sqp.finite_difference_gradients(nlp, z)
        ev = fun(z, True)
        assert grad == pytest.approx(ev.gradient, rel=1e-6)
        assert eq_jac[0] == pytest.approx(ev.eq_jac_values, rel=1e-6)
        assert in_jac[0] == pytest.approx(ev.ineq_jac_values, rel=1e-6)


class TestDeterminism:
    def test_identical_runs(self):
        def fun(z, deriv):
            return sqp.NLPEval(
                objective=float((z - np.arange(4)) @ (z - np.arange(4))),
                eq=np.array([z.sum() - 1.0]),
                ineq=np.zeros(0),
                gradient=2 * (z - np.arange(4)) if deriv else None,
                eq_jac_values=np.ones(4) if deriv else None,
                ineq_jac_values=np.zeros(0) if deriv else None,
            )

        nlp = make_nlp(4, 1, 0, fun)
        r1 = sqp.solve_sqp(nlp, np.zeros(4), sqp.SQPConfig(hessian="bfgs"))
        r2 = sqp.solve_sqp(nlp, np.zeros(4), sqp.SQPConfig(hessian="bfgs"))
        assert np.array_equal(r1.z, r2.z)
        assert r1.iterations == r2.iterations
