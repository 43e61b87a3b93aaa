"""Collision-ellipsoid constraint in the planned body frame.

The ego vehicle at pose (x, y, theta) carries an ellipsoid {a : a^T Q a <= 1}
in its body frame.  An agent position g in the global frame maps to the body
frame as a = R(theta)^T (g - y), so the scalar constraint random variable is
the degree-2 polynomial Q(a) - 1 in g with pose-dependent coefficients.  Its
mean and variance are closed-form in moments of g up to order four; those
expressions are derived once with the polynomial expectation rewriter and
then evaluated numerically.

For numerical accuracy the derivation uses agent coordinates centered on the
component mean, with the mean-to-ego displacement as a deterministic symbol:
expanding powers of raw global coordinates would cancel catastrophically at
the degree-8 monomials of the second moment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import polyalg
from .distmoments import MomentTable, all_multi_indices
from .polyalg import (
    DependencyStructure,
    Exponents,
    MomentExpression,
    Polynomial,
    VariableRoster,
)

__all__ = [
    "GeometryError",
    "Pose",
    "CollisionEllipsoid",
    "AgentGeometry",
    "ellipsoid_from_geometry",
    "agent_circles",
    "body_frame_constraint",
    "constraint_mean_variance",
    "central_moment_table",
    "CompiledChannelModel",
]

VAR_TOL = 1e-9  # allowed negative variance before clamping (cancellation slack)


class GeometryError(ValueError):
    """Invalid geometric construction inputs."""


@dataclass(frozen=True)
class Pose:
    """Planned ego pose: position in meters, heading in radians."""

    x: float
    y: float
    theta: float

    def __post_init__(self):
        if not all(map(math.isfinite, (self.x, self.y, self.theta))):
            raise GeometryError(f"pose entries must be finite: {self}")

    @property
    def heading_wrapped(self) -> float:
        """Heading wrapped to (-pi, pi] for reporting; trig uses the raw value."""
        w = math.fmod(self.theta + math.pi, 2.0 * math.pi)
        if w <= 0.0:
            w += 2.0 * math.pi
        return w - math.pi


@dataclass(frozen=True)
class CollisionEllipsoid:
    """Body-frame exclusion set {a : a^T Q a <= 1}; Q symmetric PD (1/m^2)."""

    q: tuple[tuple[float, float], tuple[float, float]]

    def __post_init__(self):
        m = np.asarray(self.q, dtype=float)
        if m.shape != (2, 2):
            raise GeometryError(f"Q must be 2x2, got {m.shape}")
        if abs(m[0, 1] - m[1, 0]) > 1e-12:
            raise GeometryError(f"Q not symmetric within 1e-12: {m}")
        eigs = np.linalg.eigvalsh(0.5 * (m + m.T))
        if eigs.min() <= 0.0:
            raise GeometryError(f"Q must be positive definite, eigenvalues {eigs}")

    @property
    def q_array(self) -> np.ndarray:
        return np.asarray(self.q, dtype=float)

    @staticmethod
    def make(q) -> "CollisionEllipsoid":
        m = np.asarray(q, dtype=float)
        return CollisionEllipsoid(((m[0, 0], m[0, 1]), (m[1, 0], m[1, 1])))


@dataclass(frozen=True)
class AgentGeometry:
    """Circles fitted to an agent: shared radius plus longitudinal offsets."""

    radius: float
    offsets: tuple[float, ...]

    def __post_init__(self):
        if self.radius <= 0:
            raise GeometryError(f"circle radius must be positive, got {self.radius}")
        if not all(math.isfinite(o) for o in self.offsets):
            raise GeometryError(f"offsets must be finite: {self.offsets}")


def ellipsoid_from_geometry(
    ego_half_length: float, ego_half_width: float, r: float
) -> CollisionEllipsoid:
    """Axis-aligned ellipsoid inflated by an agent-circle radius.

    Q = diag(1/(a+r)^2, 1/(b+r)^2): a circle center outside the ellipsoid
    cannot overlap the ego box inscribed in the (a, b) ellipse.  This is a
    deliberate over-approximation; the chance constraint it feeds is an
    upper bound either way.
    """
    if ego_half_length <= 0 or ego_half_width <= 0 or r < 0:
        raise GeometryError(
            f"need positive half-dimensions and nonnegative radius, got "
            f"({ego_half_length}, {ego_half_width}, {r})"
        )
    return CollisionEllipsoid(
        ((1.0 / (ego_half_length + r) ** 2, 0.0), (0.0, 1.0 / (ego_half_width + r) ** 2))
    )


def agent_circles(agent_length: float, agent_width: float) -> AgentGeometry:
    """Fit circles of radius width/2 along the agent's longitudinal axis.

    A square agent gets one centered circle; otherwise three circles at
    offsets {-(L-W)/2, 0, +(L-W)/2}.  The union covers the full centerline
    and is inscribed in the footprint; rectangle corners stick out by up to
    (sqrt(2)-1) * W/2, which the inflated ellipsoid absorbs.
    """
    if agent_width <= 0 or agent_length < agent_width:
        raise GeometryError(
            f"need length >= width > 0, got L={agent_length}, W={agent_width}"
        )
    r = agent_width / 2.0
    if agent_length == agent_width:
        return AgentGeometry(r, (0.0,))
    half_span = (agent_length - agent_width) / 2.0
    return AgentGeometry(r, (-half_span, 0.0, half_span))


# -- symbolic derivation (done once, cached) -----------------------------------

_RANDOM = ("gx", "gy")  # centered agent position deviation
_DET = ("q11", "q12", "q22", "cth", "sth", "dx", "dy")  # dx,dy = mean - ego position


def _symbolic_constraint() -> Polynomial:
    """Q(R^T((g_centered + mean) - y)) - 1 with (dx, dy) = mean - position."""
    roster = VariableRoster.make(random=_RANDOM, deterministic=_DET)
    gx = Polynomial.variable(roster, "gx")
    gy = Polynomial.variable(roster, "gy")
    c = Polynomial.variable(roster, "cth")
    s = Polynomial.variable(roster, "sth")
    dx = Polynomial.variable(roster, "dx")
    dy = Polynomial.variable(roster, "dy")
    q11 = Polynomial.variable(roster, "q11")
    q12 = Polynomial.variable(roster, "q12")
    q22 = Polynomial.variable(roster, "q22")
    ux = gx + dx
    uy = gy + dy
    # a = R(theta)^T u
    ax_ay = {"ax": c * ux + s * uy, "ay": -1.0 * s * ux + c * uy}
    quad_roster = VariableRoster.make(deterministic=("ax", "ay"))
    ax_sym = Polynomial.variable(quad_roster, "ax")
    ay_sym = Polynomial.variable(quad_roster, "ay")
    quad = ax_sym * ax_sym * q11 + 2.0 * (ax_sym * ay_sym) * q12 + ay_sym * ay_sym * q22
    return polyalg.substitute(quad, ax_ay) - 1.0


@lru_cache(maxsize=1)
def _constraint_moment_expressions() -> tuple[MomentExpression, MomentExpression]:
    """Pre-derived E[p] and E[p^2] over central moment symbols of (gx, gy)."""
    p = _symbolic_constraint()
    deps = DependencyStructure.joint(_RANDOM)
    return polyalg.mean_variance_expressions(p, deps)


def body_frame_constraint(ellipsoid: CollisionEllipsoid, pose: Pose) -> Polynomial:
    """The constraint polynomial Q(R(theta)^T (g - y)) - 1 in global-frame g."""
    roster = VariableRoster.make(random=("gx", "gy"))
    gx = Polynomial.variable(roster, "gx")
    gy = Polynomial.variable(roster, "gy")
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    q = ellipsoid.q_array
    ax = c * (gx - pose.x) + s * (gy - pose.y)
    ay = -s * (gx - pose.x) + c * (gy - pose.y)
    quad_roster = VariableRoster.make(deterministic=("ax", "ay"))
    ax_sym = Polynomial.variable(quad_roster, "ax")
    ay_sym = Polynomial.variable(quad_roster, "ay")
    quad = (
        q[0, 0] * (ax_sym * ax_sym)
        + 2.0 * q[0, 1] * (ax_sym * ay_sym)
        + q[1, 1] * (ay_sym * ay_sym)
    )
    return polyalg.substitute(quad, {"ax": ax, "ay": ay}) - 1.0


def central_moment_table(table: MomentTable) -> tuple[np.ndarray, dict[Exponents, float]]:
    """Mean vector plus central moments E[(g - mean)^alpha] up to the order."""
    m = table.mean()
    central: dict[Exponents, float] = {}
    for alpha in all_multi_indices(table.dimension, table.order):
        total = 0.0
        a, b = alpha
        for i in range(a + 1):
            for j in range(b + 1):
                total += (
                    math.comb(a, i)
                    * math.comb(b, j)
                    * ((-m[0]) ** (a - i))
                    * ((-m[1]) ** (b - j))
                    * table.entries[(i, j)]
                )
        central[alpha] = total
    central[(0, 0)] = 1.0
    return m, central


def constraint_mean_variance(
    ellipsoid: CollisionEllipsoid, pose: Pose, agent_moments: MomentTable
) -> tuple[float, float]:
    """Exact mean and variance of the body-frame constraint random variable.

    Requires a dimension-2 moment table of order >= 4.  Variance is clamped
    at zero; a residual below -VAR_TOL (scaled) indicates an inconsistent
    table and raises.
    """
    if agent_moments.dimension != 2:
        raise GeometryError("agent moment table must be 2-dimensional")
    if agent_moments.order < 4:
        raise GeometryError(
            f"moment table order {agent_moments.order} < 4; the constraint "
            "variance needs moments up to order four"
        )
    mean_expr, second_expr = _constraint_moment_expressions()
    m, central = central_moment_table(agent_moments)
    q = ellipsoid.q_array
    det_values = {
        "q11": q[0, 0],
        "q12": q[0, 1],
        "q22": q[1, 1],
        "cth": math.cos(pose.theta),
        "sth": math.sin(pose.theta),
        "dx": m[0] - pose.x,
        "dy": m[1] - pose.y,
    }
    mean = polyalg.evaluate(mean_expr, central, det_values)
    second = polyalg.evaluate(second_expr, central, det_values)
    var = second - mean * mean
    if var < -VAR_TOL * max(1.0, abs(second)):
        raise GeometryError(f"inconsistent moments: negative variance {var}")
    return mean, max(var, 0.0)


# -- compiled evaluation for the planner hot path -------------------------------

_POSE_VARS = ("cth", "sth", "dx", "dy")


def _collapse_q(expr: MomentExpression, q: np.ndarray) -> dict[Exponents, dict[Exponents, float]]:
    """Fix the ellipsoid entries, leaving polynomials in (cth, sth, dx, dy).

    Returns {moment multi-index over (gx, gy): {pose exponents: coeff}}.
    """
    out: dict[Exponents, dict[Exponents, float]] = {}
    q_values = {"q11": q[0, 0], "q12": q[0, 1], "q22": q[1, 1]}
    for key, coeff_poly in expr.terms.items():
        if len(key) > 1:
            raise GeometryError("joint dependency expected: single moment factor per key")
        alpha = key[0] if key else (0, 0)
        collapsed = coeff_poly.substitute(q_values)
        bucket = out.setdefault(alpha, {})
        names = collapsed.roster.names
        pos = [names.index(v) for v in _POSE_VARS]
        for exps, c in collapsed.terms.items():
            pose_exps = tuple(exps[i] for i in pos)
            bucket[pose_exps] = bucket.get(pose_exps, 0.0) + c
    return out


def _downward_closure(support: set[Exponents]) -> list[Exponents]:
    """All exponent tuples componentwise below the support (for derivatives)."""
    import itertools

    closed: set[Exponents] = set()
    for e in support:
        for combo in itertools.product(*(range(k + 1) for k in e)):
            closed.add(combo)
    return sorted(closed, key=polyalg.grlex_key)


class CompiledChannelModel:
    """Pose polynomials for one agent channel (one ellipsoid, one prediction).

    For every timestep t and mixture component i the constraint mean and
    second moment collapse to numeric-coefficient polynomials in
    (cos theta, sin theta, dx, dy), stored as coefficient tensors over a
    shared monomial basis.  Evaluation and analytic pose gradients are then
    vectorized over the horizon.  Instances are immutable shared data.
    """

    def __init__(
        self,
        ellipsoid: CollisionEllipsoid,
        weights: Sequence[float],
        component_tables: Sequence[Sequence[MomentTable]],
    ):
        q = ellipsoid.q_array
        mean_expr, second_expr = _constraint_moment_expressions()
        mean_c = _collapse_q(mean_expr, q)
        second_c = _collapse_q(second_expr, q)
        support = {e for bucket in mean_c.values() for e in bucket}
        support |= {e for bucket in second_c.values() for e in bucket}
        basis = _downward_closure(support)
        index = {e: i for i, e in enumerate(basis)}
        self.basis = np.array(basis, dtype=np.int64)  # (nb, 4)
        nb = len(basis)

        horizon = len(component_tables)
        n_comp = len(weights)
        self.weights = np.asarray(weights, dtype=float)
        self.means = np.zeros((horizon, n_comp, 2))
        w_mean = np.zeros((horizon, n_comp, nb))
        w_second = np.zeros((horizon, n_comp, nb))
        for t in range(horizon):
            if len(component_tables[t]) != n_comp:
                raise GeometryError("component count must be constant over the horizon")
            for i, table in enumerate(component_tables[t]):
                m, central = central_moment_table(table)
                self.means[t, i] = m
                for alpha, bucket in mean_c.items():
                    mom = central[alpha]
                    for exps, c in bucket.items():
                        w_mean[t, i, index[exps]] += mom * c
                for alpha, bucket in second_c.items():
                    mom = central[alpha]
                    for exps, c in bucket.items():
                        w_second[t, i, index[exps]] += mom * c
        self.w_mean = w_mean
        self.w_second = w_second

        # Derivative coefficient tensors: d/dv maps exponent e -> e - delta_v
        # scaled by e_v; the basis is downward closed so targets exist.
        flat_m = w_mean.reshape(-1, nb)
        flat_s = w_second.reshape(-1, nb)
        self._dops = []
        self.d_mean = []
        self.d_second = []
        for v in range(4):
            rows, cols, vals = [], [], []
            for j, e in enumerate(basis):
                if e[v] == 0:
                    continue
                tgt = list(e)
                tgt[v] -= 1
                rows.append(index[tuple(tgt)])
                cols.append(j)
                vals.append(float(e[v]))
            d = sp.csr_matrix((vals, (rows, cols)), shape=(nb, nb))
            self._dops.append(d)
            self.d_mean.append((flat_m @ d.T).reshape(horizon, n_comp, nb))
            self.d_second.append((flat_s @ d.T).reshape(horizon, n_comp, nb))
        # Second-derivative tensors, filled lazily (only the solver's
        # curvature model needs them).
        self._d2_mean: dict[tuple[int, int], np.ndarray] | None = None
        self._d2_second: dict[tuple[int, int], np.ndarray] | None = None
        self.max_degree = int(self.basis.max(initial=0))

    def _second_tensors(self):
        if self._d2_mean is None:
            T, nc, nb = self.w_mean.shape
            d2m, d2s = {}, {}
            for i in range(4):
                for j in range(i, 4):
                    op = self._dops[j]
                    d2m[(i, j)] = (
                        self.d_mean[i].reshape(-1, nb) @ op.T
                    ).reshape(T, nc, nb)
                    d2s[(i, j)] = (
                        self.d_second[i].reshape(-1, nb) @ op.T
                    ).reshape(T, nc, nb)
            self._d2_mean, self._d2_second = d2m, d2s
        return self._d2_mean, self._d2_second

    @property
    def horizon(self) -> int:
        return self.w_mean.shape[0]

    @property
    def n_components(self) -> int:
        return self.w_mean.shape[1]

    def _monomials(self, px, py, theta):
        """Basis monomials and their factors; shapes (T, nc, nb)."""
        T, nc = self.horizon, self.n_components
        c = np.cos(theta)
        s = np.sin(theta)
        dx = self.means[:, :, 0] - px[:, None]
        dy = self.means[:, :, 1] - py[:, None]
        deg = self.max_degree
        powers = []
        for base, per_comp in ((c, False), (s, False), (dx, True), (dy, True)):
            if per_comp:
                p = np.ones((T, nc, deg + 1))
                for k in range(1, deg + 1):
                    p[:, :, k] = p[:, :, k - 1] * base
            else:
                p1 = np.ones((T, deg + 1))
                for k in range(1, deg + 1):
                    p1[:, k] = p1[:, k - 1] * base
                p = np.broadcast_to(p1[:, None, :], (T, nc, deg + 1))
            powers.append(p)
        e = self.basis
        phi = (
            powers[0][:, :, e[:, 0]]
            * powers[1][:, :, e[:, 1]]
            * powers[2][:, :, e[:, 2]]
            * powers[3][:, :, e[:, 3]]
        )
        return phi, c, s

    def evaluate(
        self, px: np.ndarray, py: np.ndarray, theta: np.ndarray, gradients: bool = True
    ):
        """Constraint mean/variance per (step, component), with pose gradients.

        Returns (mean, var, grad_mean, grad_var); gradient arrays have shape
        (T, nc, 3) ordered (d/dx, d/dy, d/dtheta), or None when gradients is
        False.  Variance is clamped at zero; the clamp also zeroes the
        gradient (the clamped branch is constant).
        """
        phi, c, s = self._monomials(
            np.asarray(px, dtype=float), np.asarray(py, dtype=float), np.asarray(theta, dtype=float)
        )
        mean = np.einsum("tib,tib->ti", self.w_mean, phi)
        second = np.einsum("tib,tib->ti", self.w_second, phi)
        var_raw = second - mean * mean
        var = np.maximum(var_raw, 0.0)
        if not gradients:
            return mean, var, None, None
        gm = np.empty((*mean.shape, 3))
        gs = np.empty((*mean.shape, 3))
        # partials wrt the polynomial variables
        m_c = np.einsum("tib,tib->ti", self.d_mean[0], phi)
        m_s = np.einsum("tib,tib->ti", self.d_mean[1], phi)
        m_dx = np.einsum("tib,tib->ti", self.d_mean[2], phi)
        m_dy = np.einsum("tib,tib->ti", self.d_mean[3], phi)
        s_c = np.einsum("tib,tib->ti", self.d_second[0], phi)
        s_s = np.einsum("tib,tib->ti", self.d_second[1], phi)
        s_dx = np.einsum("tib,tib->ti", self.d_second[2], phi)
        s_dy = np.einsum("tib,tib->ti", self.d_second[3], phi)
        # dx = mean_x - px so d/dpx = -d/d(dx); theta via cos/sin chain rule
        gm[:, :, 0] = -m_dx
        gm[:, :, 1] = -m_dy
        gm[:, :, 2] = -s[:, None] * m_c + c[:, None] * m_s
        gs[:, :, 0] = -s_dx
        gs[:, :, 1] = -s_dy
        gs[:, :, 2] = -s[:, None] * s_c + c[:, None] * s_s
        gvar = gs - 2.0 * mean[:, :, None] * gm
        gvar[var_raw < 0.0] = 0.0
        return mean, var, gm, gvar

    def evaluate_with_hessians(self, px, py, theta):
        """Values, pose gradients, and pose Hessians of mean and variance.

        Returns (mean, var, grad_mean, grad_var, hess_mean, hess_var); the
        Hessians have shape (T, nc, 3, 3) over (x, y, theta).  Where the
        variance clamp is active its gradient and Hessian are zero.
        """
        px = np.asarray(px, dtype=float)
        py = np.asarray(py, dtype=float)
        theta = np.asarray(theta, dtype=float)
        mean, var, gm, gvar = self.evaluate(px, py, theta, gradients=True)
        phi, c, s = self._monomials(px, py, theta)
        d2m_t, d2s_t = self._second_tensors()
        T, nc = mean.shape

        def poly_hess(first, second_tensors):
            hp = np.zeros((T, nc, 4, 4))
            for (i, j), tensor in second_tensors.items():
                val = np.einsum("tib,tib->ti", tensor, phi)
                hp[:, :, i, j] = val
                if i != j:
                    hp[:, :, j, i] = val
            f_c = np.einsum("tib,tib->ti", first[0], phi)
            f_s = np.einsum("tib,tib->ti", first[1], phi)
            h = np.zeros((T, nc, 3, 3))
            cb = c[:, None]
            sb = s[:, None]
            h[:, :, 0, 0] = hp[:, :, 2, 2]
            h[:, :, 0, 1] = h[:, :, 1, 0] = hp[:, :, 2, 3]
            h[:, :, 1, 1] = hp[:, :, 3, 3]
            h_xt = sb * hp[:, :, 0, 2] - cb * hp[:, :, 1, 2]
            h_yt = sb * hp[:, :, 0, 3] - cb * hp[:, :, 1, 3]
            h[:, :, 0, 2] = h[:, :, 2, 0] = h_xt
            h[:, :, 1, 2] = h[:, :, 2, 1] = h_yt
            h[:, :, 2, 2] = (
                sb**2 * hp[:, :, 0, 0]
                - 2.0 * sb * cb * hp[:, :, 0, 1]
                + cb**2 * hp[:, :, 1, 1]
                - cb * f_c
                - sb * f_s
            )
            return h

        hm = poly_hess(self.d_mean, d2m_t)
        hs = poly_hess(self.d_second, d2s_t)
        hvar = (
            hs
            - 2.0 * np.einsum("tia,tib->tiab", gm, gm)
            - 2.0 * mean[:, :, None, None] * hm
        )
        raw = np.einsum("tib,tib->ti", self.w_second, phi) - mean * mean
        hvar[raw < 0.0] = 0.0
        return mean, var, gm, gvar, hm, hvar
