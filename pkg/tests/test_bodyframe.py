"""Body-frame constraint construction and moment propagation tests."""

import math

import numpy as np
import pytest

from momentplan import bodyframe as bf
from momentplan import distmoments as dm
from momentplan import polyalg as pa


def identity_ellipsoid():
    return bf.CollisionEllipsoid(((1.0, 0.0), (0.0, 1.0)))


def std_table():
    return dm.gaussian_moments(dm.GaussianSpec((0.0, 0.0), ((1, 0), (0, 1))), 4)


def point_mass_table(x, y):
    spec = dm.GaussianSpec((x, y), ((0.0, 0.0), (0.0, 0.0)))
    return dm.gaussian_moments(spec, 4)


class TestGeometryConstructions:
    def test_symmetric_ellipsoid(self):
        e = bf.ellipsoid_from_geometry(1.0, 1.0, 1.0)
        assert e.q_array == pytest.approx(0.25 * np.eye(2))

    def test_zero_radius_limit(self):
        e = bf.ellipsoid_from_geometry(2.0, 1.0, 0.0)
        assert e.q_array == pytest.approx(np.diag([0.25, 1.0]))

    def test_rectangular_case(self):
        e = bf.ellipsoid_from_geometry(2.0, 1.0, 0.5)
        assert e.q_array == pytest.approx(np.diag([1 / 6.25, 1 / 2.25]))

    def test_nonpositive_rejected(self):
        with pytest.raises(bf.GeometryError):
            bf.ellipsoid_from_geometry(0.0, 1.0, 1.0)

    def test_pd_preserved_for_random_inputs(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            a, b, r = rng.uniform(0.05, 5.0, 3)
            e = bf.ellipsoid_from_geometry(a, b, r)
            assert np.linalg.eigvalsh(e.q_array).min() > 0

    def test_square_agent_single_circle(self):
        g = bf.agent_circles(2.0, 2.0)
        assert g.radius == 1.0
        assert g.offsets == (0.0,)

    def test_rectangular_agent_three_circles(self):
        g = bf.agent_circles(4.0, 2.0)
        assert g.radius == 1.0
        assert g.offsets == (-1.0, 0.0, 1.0)

    def test_degenerate_agent_rejected(self):
        with pytest.raises(bf.GeometryError):
            bf.agent_circles(1.0, 2.0)

    def test_circle_union_coverage_by_sampling(self):
        # Dense point-sampling oracle over the rectangle.  The inscribed
        # circles cover the full centerline; the worst uncovered point is a
        # corner at distance (sqrt(2) - 1) * W/2 beyond the union, for the
        # square and the elongated agent alike.
        for length, width in ((4.0, 2.0), (2.0, 2.0)):
            g = bf.agent_circles(length, width)
            centers = np.array([[o, 0.0] for o in g.offsets])
            xs = np.linspace(-length / 2, length / 2, 201)
            ys = np.linspace(-width / 2, width / 2, 101)
            pts = np.stack(np.meshgrid(xs, ys), axis=-1).reshape(-1, 2)
            dists = np.linalg.norm(pts[:, None, :] - centers[None, :, :], axis=2).min(axis=1)
            defect = (dists - g.radius).max()
            expected = (math.sqrt(2.0) - 1.0) * width / 2.0
            assert defect == pytest.approx(expected, rel=1e-3)
            # centerline fully covered and every circle inside the rectangle
            line = np.stack([xs, np.zeros_like(xs)], axis=1)
            line_d = np.linalg.norm(line[:, None] - centers[None], axis=2).min(axis=1)
            assert line_d.max() <= g.radius + 1e-12
            assert abs(centers[:, 0]).max() + g.radius <= length / 2 + 1e-12


class TestBodyFrameConstraint:
    def test_identity_frame(self):
        p = bf.body_frame_constraint(identity_ellipsoid(), bf.Pose(0, 0, 0))
        assert p.terms == {(2, 0): 1.0, (0, 2): 1.0, (0, 0): -1.0}

    def test_rotation_invariance_isotropic(self):
        p0 = bf.body_frame_constraint(identity_ellipsoid(), bf.Pose(0, 0, 0))
        p90 = bf.body_frame_constraint(identity_ellipsoid(), bf.Pose(0, 0, math.pi / 2))
        for k in set(p0.terms) | set(p90.terms):
            assert p90.terms.get(k, 0.0) == pytest.approx(p0.terms.get(k, 0.0), abs=1e-12)

    def test_translation(self):
        p = bf.body_frame_constraint(identity_ellipsoid(), bf.Pose(1, 0, 0))
        point = {"gx": 1.0, "gy": 0.0}
        assert p.evaluate(point) == pytest.approx(-1.0)
        point = {"gx": 3.0, "gy": 0.0}
        assert p.evaluate(point) == pytest.approx(3.0)

    def test_heading_wrap_reporting(self):
        p = bf.Pose(0, 0, 3 * math.pi)
        assert p.heading_wrapped == pytest.approx(math.pi)
        assert bf.Pose(0, 0, -0.5).heading_wrapped == pytest.approx(-0.5)


class TestConstraintMeanVariance:
    def test_chi_square_oracle(self):
        # Q = I, standard normal agent at the origin pose: the constraint is
        # a chi-square(2) minus one, so mean 1 and variance 4.
        mean, var = bf.constraint_mean_variance(
            identity_ellipsoid(), bf.Pose(0, 0, 0), std_table()
        )
        assert mean == pytest.approx(1.0, rel=1e-12)
        assert var == pytest.approx(4.0, rel=1e-12)

    def test_point_mass_agent(self):
        mean, var = bf.constraint_mean_variance(
            identity_ellipsoid(), bf.Pose(0, 0, 0), point_mass_table(3.0, 0.0)
        )
        assert mean == pytest.approx(8.0)
        assert var == pytest.approx(0.0, abs=1e-12)

    def test_translation_equivariance(self):
        ell = bf.CollisionEllipsoid(((0.2, 0.03), (0.03, 0.4)))
        spec = dm.GaussianSpec((5.0, 2.0), ((0.3, 0.1), (0.1, 0.5)))
        t0 = dm.gaussian_moments(spec, 4)
        m0, v0 = bf.constraint_mean_variance(ell, bf.Pose(1.0, -2.0, 0.7), t0)
        shift = np.array([13.0, -7.0])
        spec2 = dm.GaussianSpec.make(spec.mean_array + shift, spec.cov_array)
        t1 = dm.gaussian_moments(spec2, 4)
        m1, v1 = bf.constraint_mean_variance(
            ell, bf.Pose(1.0 + shift[0], -2.0 + shift[1], 0.7), t1
        )
        assert m1 == pytest.approx(m0, rel=1e-9)
        assert v1 == pytest.approx(v0, rel=1e-9)

    def test_rotation_invariance_isotropic(self):
        ell = bf.CollisionEllipsoid(((0.3, 0.0), (0.0, 0.3)))
        table = dm.gaussian_moments(
            dm.GaussianSpec((2.0, 1.0), ((0.4, 0.1), (0.1, 0.2))), 4
        )
        rng = np.random.default_rng(3)
        ref = bf.constraint_mean_variance(ell, bf.Pose(0.5, -0.5, 0.0), table)
        for _ in range(20):
            theta = rng.uniform(-math.pi, math.pi)
            got = bf.constraint_mean_variance(ell, bf.Pose(0.5, -0.5, theta), table)
            assert got[0] == pytest.approx(ref[0], rel=1e-10)
            assert got[1] == pytest.approx(ref[1], rel=1e-10)

    def test_order_too_low_rejected(self):
        t = dm.gaussian_moments(dm.GaussianSpec((0, 0), ((1, 0), (0, 1))), 2)
        with pytest.raises(bf.GeometryError):
            bf.constraint_mean_variance(identity_ellipsoid(), bf.Pose(0, 0, 0), t)

    def test_monte_carlo_agreement(self):
        # Random poses and Gaussian agents: analytic mean/variance of the
        # constraint match sample statistics within 3 standard errors.
        rng = np.random.default_rng(17)
        n = 10_000_000
        for trial in range(3):
            pose = bf.Pose(*rng.uniform(-2, 2, 2), rng.uniform(-math.pi, math.pi))
            mean_vec = rng.uniform(-3, 3, 2)
            a_mat = rng.uniform(-0.6, 0.6, (2, 2))
            cov = a_mat @ a_mat.T + 0.05 * np.eye(2)
            qroot = rng.uniform(-0.5, 0.5, (2, 2))
            q = qroot @ qroot.T + 0.1 * np.eye(2)
            ell = bf.CollisionEllipsoid.make(q)
            table = dm.gaussian_moments(dm.GaussianSpec.make(mean_vec, cov), 4)
            mean, var = bf.constraint_mean_variance(ell, pose, table)
            g = rng.multivariate_normal(mean_vec, cov, size=n)
            c, s = math.cos(pose.theta), math.sin(pose.theta)
            rot = np.array([[c, s], [-s, c]])
            a = (g - [pose.x, pose.y]) @ rot.T
            vals = (
                q[0, 0] * a[:, 0] ** 2
                + 2 * q[0, 1] * a[:, 0] * a[:, 1]
                + q[1, 1] * a[:, 1] ** 2
                - 1.0
            )
            se_mean = vals.std() / math.sqrt(n)
            assert abs(vals.mean() - mean) < 3 * se_mean
            centered = (vals - vals.mean()) ** 2
            se_var = centered.std() / math.sqrt(n)
            assert abs(vals.var() - var) < 3 * se_var


class TestCompiledChannelModel:
    def build(self):
        ell = bf.CollisionEllipsoid(((0.08, 0.01), (0.01, 0.2)))
        specs = [
            dm.GaussianSpec((8.0, 3.0), ((0.3, 0.1), (0.1, 0.5))),
            dm.GaussianSpec((6.0, -2.0), ((0.2, 0.0), (0.0, 0.2))),
        ]
        tables = [[dm.gaussian_moments(s, 4) for s in specs] for _ in range(4)]
        return bf.CompiledChannelModel(ell, (0.6, 0.4), tables), ell, tables

    def test_matches_reference_path(self):
        model, ell, tables = self.build()
        rng = np.random.default_rng(0)
        px, py = rng.uniform(-2, 2, (2, 4))
        th = rng.uniform(-3, 3, 4)
        mean, var, _, _ = model.evaluate(px, py, th, gradients=False)
        for t in range(4):
            for i in range(2):
                m_ref, v_ref = bf.constraint_mean_variance(
                    ell, bf.Pose(px[t], py[t], th[t]), tables[t][i]
                )
                assert mean[t, i] == pytest.approx(m_ref, rel=1e-10)
                assert var[t, i] == pytest.approx(v_ref, rel=1e-9)

    def test_gradients_match_finite_differences(self):
        model, _, _ = self.build()
        rng = np.random.default_rng(1)
        px, py = rng.uniform(-2, 2, (2, 4))
        th = rng.uniform(-3, 3, 4)
        _, _, gm, gv = model.evaluate(px, py, th)
        h = 1e-6
        for axis, (dx, dy, dth) in enumerate([(h, 0, 0), (0, h, 0), (0, 0, h)]):
            mp, vp, _, _ = model.evaluate(px + dx, py + dy, th + dth, gradients=False)
            mm, vm, _, _ = model.evaluate(px - dx, py - dy, th - dth, gradients=False)
            assert np.allclose((mp - mm) / (2 * h), gm[:, :, axis], rtol=1e-4, atol=1e-6)
            assert np.allclose((vp - vm) / (2 * h), gv[:, :, axis], rtol=1e-4, atol=1e-5)


class TestSymbolicDerivation:
    def test_pre_derived_expressions_cached(self):
        e1 = bf._constraint_moment_expressions()
        e2 = bf._constraint_moment_expressions()
        assert e1 is e2

    def test_symbolic_constraint_against_direct(self):
        # The cached symbolic constraint with numbers substituted must match
        # the directly constructed numeric polynomial.
        p_sym = bf._symbolic_constraint()
        pose = bf.Pose(1.2, -0.4, 0.6)
        ell = bf.CollisionEllipsoid(((0.5, 0.1), (0.1, 0.7)))
        q = ell.q_array
        mean = np.array([2.0, 1.0])
        assignment = {
            "q11": q[0, 0],
            "q12": q[0, 1],
            "q22": q[1, 1],
            "cth": math.cos(pose.theta),
            "sth": math.sin(pose.theta),
            "dx": mean[0] - pose.x,
            "dy": mean[1] - pose.y,
        }
        collapsed = p_sym.substitute(assignment)
        direct = bf.body_frame_constraint(ell, pose)
        for gx, gy in [(0.0, 0.0), (1.0, -1.0), (0.5, 2.0)]:
            # collapsed takes centered coordinates
            lhs = collapsed.evaluate({"gx": gx - mean[0], "gy": gy - mean[1]})
            rhs = direct.evaluate({"gx": gx, "gy": gy})
            assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)
