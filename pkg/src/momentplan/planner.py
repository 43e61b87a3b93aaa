"""Chance-constrained contouring planner: NLP assembly, solve, verification.

Decision variables are stage-interleaved, z = [u_0, x_1, u_1, x_2, ...,
u_{T-1}, x_T], with the fixed initial state x_0 kept out of the problem.
Equalities are the RK4 dynamics links (the x_1 link to the fixed initial
state counted separately from the T-1 inter-state links), inequalities are
per-step mixture risk bounds plus per-component validity conditions, and
simple bounds box the states and controls.

Risk rows are scaled by 1/epsilon so the solver's feasibility tolerance
translates into a relative risk tolerance; a converged plan satisfies
sum_i w_i Conc_i <= epsilon_t (1 + kkt_tol), comfortably inside the
epsilon + 1e-9 contract checked by check_feasibility.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import distmoments, mpcc, sqp
from .bodyframe import (
    CollisionEllipsoid,
    CompiledChannelModel,
    Pose,
    agent_circles,
    constraint_mean_variance,
    ellipsoid_from_geometry,
)
from .distmoments import MixturePrediction, MomentTable, all_multi_indices
from .mpcc import (
    CostParams,
    EgoState,
    N_CONTROLS,
    N_STATES,
    ReferencePath,
    VehicleParams,
)
from .riskbounds import ConcKind, RiskAllocation, uniform_allocation

__all__ = [
    "PlanError",
    "AgentChannel",
    "PlanProblem",
    "PlanResult",
    "FeasibilityReport",
    "SolverSettings",
    "assemble_nlp",
    "initial_guess",
    "solve",
    "check_feasibility",
    "load_problem",
]

FORMULATIONS = ("chance", "mean")

_VP_KAPPA = math.sqrt(5.0 / 3.0)
_GAUSS_KAPPA = 2.0 / 3.0
_KAPPA = {ConcKind.CANTELLI: 0.0, ConcKind.VP: _VP_KAPPA, ConcKind.GAUSS: _GAUSS_KAPPA}
_SCALE = {ConcKind.CANTELLI: 1.0, ConcKind.VP: 4.0 / 9.0}

# Risk rows enter the NLP as (sum_i w_i Conc_i - eps) / RISK_ROW_SCALE, so the
# solver's 1e-6 feasibility tolerance equals an absolute risk slack of 1e-9,
# matching the converged-plan contract, while keeping row norms moderate.
RISK_ROW_SCALE = 1e-3


class PlanError(ValueError):
    """Inconsistent planning problem."""


@dataclass(frozen=True)
class AgentChannel:
    """One collision channel: an agent circle's prediction and ellipsoid."""

    prediction: MixturePrediction
    ellipsoid: CollisionEllipsoid


def _default_state_bounds() -> tuple[np.ndarray, np.ndarray]:
    lo = np.array([-np.inf, -np.inf, -np.inf, 0.0, -0.55, 0.0])
    hi = np.array([np.inf, np.inf, np.inf, 14.0, 0.55, np.inf])
    return lo, hi


def _default_control_bounds() -> tuple[np.ndarray, np.ndarray]:
    return np.array([-4.0, -0.8]), np.array([4.0, 0.8])


@dataclass
class PlanProblem:
    """The assembled chance-constrained contouring problem."""

    initial_state: EgoState
    path: ReferencePath
    channels: tuple[AgentChannel, ...] = ()
    horizon: int = 50
    dt: float = 0.1
    allocation: RiskAllocation | None = None
    conc_kind: ConcKind = ConcKind.VP
    cost: CostParams = field(default_factory=CostParams)
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    state_lower: np.ndarray = field(default_factory=lambda: _default_state_bounds()[0])
    state_upper: np.ndarray = field(default_factory=lambda: _default_state_bounds()[1])
    control_lower: np.ndarray = field(default_factory=lambda: _default_control_bounds()[0])
    control_upper: np.ndarray = field(default_factory=lambda: _default_control_bounds()[1])
    formulation: str = "chance"

    def __post_init__(self):
        if self.horizon < 1 or self.dt <= 0:
            raise PlanError("horizon must be >= 1 and dt positive")
        if self.formulation not in FORMULATIONS:
            raise PlanError(f"formulation must be one of {FORMULATIONS}")
        for ch in self.channels:
            if ch.prediction.horizon < self.horizon:
                raise PlanError(
                    f"prediction horizon {ch.prediction.horizon} shorter than {self.horizon}"
                )
        if self.formulation == "chance" and self.channels:
            if self.allocation is None:
                raise PlanError("chance formulation requires a risk allocation")
            if self.allocation.epsilon.shape != (self.horizon, len(self.channels)):
                raise PlanError(
                    f"allocation grid {self.allocation.epsilon.shape} must match "
                    f"(horizon, channels) = ({self.horizon}, {len(self.channels)})"
                )
        lo, hi = np.asarray(self.state_lower), np.asarray(self.state_upper)
        if lo.shape != (N_STATES,) or hi.shape != (N_STATES,) or np.any(lo > hi):
            raise PlanError("state bounds must be ordered 6-vectors")
        clo, chi = np.asarray(self.control_lower), np.asarray(self.control_upper)
        if clo.shape != (N_CONTROLS,) or chi.shape != (N_CONTROLS,) or np.any(clo > chi):
            raise PlanError("control bounds must be ordered 2-vectors")

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    @property
    def n_components(self) -> int:
        return self.channels[0].prediction.n_components if self.channels else 0


@dataclass
class SolverSettings:
    """Planner-level solver configuration (wraps the SQP settings)."""

    max_iterations: int = 200
    kkt_tolerance: float = 1e-6
    qp_eps: float = 1e-8
    # Curvature model: "gauss-newton" re-derives the cost's Gauss-Newton
    # blocks at every iterate (reliable on the strongly curved contouring
    # cost); "bfgs" runs the damped block BFGS recursion instead.
    hessian: str = "gauss-newton"
    polish: bool = True
    soft_constraints: bool = False  # quadratic penalty instead of hard risk rows
    soft_penalty: float = 1e4
    verbose: bool = False


@dataclass
class PlanResult:
    """A solved (or best-effort) trajectory plan with its risk accounting."""

    states: np.ndarray  # (T, 6): x_1..x_T
    controls: np.ndarray  # (T, 2): u_0..u_{T-1}
    status: str
    cost: float
    solve_time_ms: float
    iterations: int
    kkt_residual: float
    dynamics_residual: float
    bound_violation: float
    risk_values: np.ndarray  # (T, n_ch, n_comp) weighted per-component bounds
    risk_per_step: np.ndarray  # (T,) summed over channels and components
    conc_star: np.ndarray  # (T, n_ch, n_comp)
    total_risk_bound: float
    epsilon: np.ndarray | None  # (T, n_ch) or None for the mean formulation
    formulation: str = "chance"
    message: str = ""

    @property
    def converged(self) -> bool:
        return self.status == sqp.STATUS_CONVERGED

    def to_json_dict(self) -> dict:
        return {
            "status": self.status,
            "formulation": self.formulation,
            "cost": self.cost,
            "solve_time_ms": self.solve_time_ms,
            "iterations": self.iterations,
            "kkt_residual": self.kkt_residual,
            "dynamics_residual": self.dynamics_residual,
            "bound_violation": self.bound_violation,
            "total_risk_bound": self.total_risk_bound,
            "success_definition": "status == converged under the configured tolerances",
            "states": self.states.tolist(),
            "controls": self.controls.tolist(),
            "risk_per_step": self.risk_per_step.tolist(),
            "risk_values": self.risk_values.tolist(),
            "conc_star": self.conc_star.tolist(),
            "epsilon": None if self.epsilon is None else self.epsilon.tolist(),
            "message": self.message,
        }

    def save_json(self, dest: str | Path) -> None:
        with open(dest, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)

    def save_csv(self, dest: str | Path) -> None:
        """Trajectory table: row t holds state x_t and the control u_{t-1}."""
        header = "t,x,y,theta,v,delta,s_traveled,u_a,u_delta,risk_bound_t"
        rows = [header]
        for t in range(self.states.shape[0]):
            s = self.states[t]
            u = self.controls[t]
            rows.append(
                f"{t + 1},{s[0]:.9g},{s[1]:.9g},{s[2]:.9g},{s[3]:.9g},{s[4]:.9g},"
                f"{s[5]:.9g},{u[0]:.9g},{u[1]:.9g},{self.risk_per_step[t]:.9g}"
            )
        Path(dest).write_text("\n".join(rows) + "\n")


# -- batched bicycle dynamics ---------------------------------------------------


def _bicycle_batch(states: np.ndarray, controls: np.ndarray, veh: VehicleParams):
    theta, v, delta = states[:, 2], states[:, 3], states[:, 4]
    k = veh.l_r / (veh.l_f + veh.l_r)
    tan_d = np.tan(delta)
    beta = np.arctan(k * tan_d)
    out = np.empty_like(states)
    out[:, 0] = v * np.cos(theta + beta)
    out[:, 1] = v * np.sin(theta + beta)
    out[:, 2] = v / veh.l_r * np.sin(beta)
    out[:, 3] = controls[:, 0]
    out[:, 4] = controls[:, 1]
    out[:, 5] = v
    return out


def _bicycle_jac_batch(states: np.ndarray, veh: VehicleParams):
    n = states.shape[0]
    theta, v, delta = states[:, 2], states[:, 3], states[:, 4]
    k = veh.l_r / (veh.l_f + veh.l_r)
    tan_d = np.tan(delta)
    beta = np.arctan(k * tan_d)
    dbeta = k * (1.0 + tan_d**2) / (1.0 + (k * tan_d) ** 2)
    sin_tb = np.sin(theta + beta)
    cos_tb = np.cos(theta + beta)
    a = np.zeros((n, N_STATES, N_STATES))
    a[:, 0, 2] = -v * sin_tb
    a[:, 0, 3] = cos_tb
    a[:, 0, 4] = -v * sin_tb * dbeta
    a[:, 1, 2] = v * cos_tb
    a[:, 1, 3] = sin_tb
    a[:, 1, 4] = v * cos_tb * dbeta
    a[:, 2, 3] = np.sin(beta) / veh.l_r
    a[:, 2, 4] = v / veh.l_r * np.cos(beta) * dbeta
    a[:, 5, 3] = 1.0
    b = np.zeros((n, N_STATES, N_CONTROLS))
    b[:, 3, 0] = 1.0
    b[:, 4, 1] = 1.0
    return a, b


def _rk4_batch(states, controls, dt, veh, with_jac: bool):
    eye = np.eye(N_STATES)
    k1 = _bicycle_batch(states, controls, veh)
    x2 = states + 0.5 * dt * k1
    k2 = _bicycle_batch(x2, controls, veh)
    x3 = states + 0.5 * dt * k2
    k3 = _bicycle_batch(x3, controls, veh)
    x4 = states + dt * k3
    k4 = _bicycle_batch(x4, controls, veh)
    value = states + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    if not with_jac:
        return value, None, None
    a1, b1 = _bicycle_jac_batch(states, veh)
    a2, b2 = _bicycle_jac_batch(x2, veh)
    a3, b3 = _bicycle_jac_batch(x3, veh)
    a4, b4 = _bicycle_jac_batch(x4, veh)
    dk1x, dk1u = a1, b1
    dk2x = a2 @ (eye + 0.5 * dt * dk1x)
    dk2u = a2 @ (0.5 * dt * dk1u) + b2
    dk3x = a3 @ (eye + 0.5 * dt * dk2x)
    dk3u = a3 @ (0.5 * dt * dk2u) + b3
    dk4x = a4 @ (eye + dt * dk3x)
    dk4u = a4 @ (dt * dk3u) + b4
    jx = eye + dt / 6.0 * (dk1x + 2 * dk2x + 2 * dk3x + dk4x)
    ju = dt / 6.0 * (dk1u + 2 * dk2u + 2 * dk3u + dk4u)
    return value, jx, ju


# -- contouring cost (vectorized over the horizon) -------------------------------


def _contour_terms(path: ReferencePath, states: np.ndarray):
    s = states[:, 5]
    xr, yr = mpcc.path_point(path, s)
    th = mpcc.path_heading(path, s)
    thr = mpcc.path_heading_rate(path, s)
    txr = mpcc._eval_cubic_d1(path.cx, s)
    tyr = mpcc._eval_cubic_d1(path.cy, s)
    sin_t, cos_t = np.sin(th), np.cos(th)
    xb = states[:, 0] - xr
    yb = states[:, 1] - yr
    dev = sin_t * xb - cos_t * yb
    lag = -cos_t * xb - sin_t * yb
    d_dev = np.zeros((states.shape[0], N_STATES))
    d_lag = np.zeros((states.shape[0], N_STATES))
    d_dev[:, 0] = sin_t
    d_dev[:, 1] = -cos_t
    d_dev[:, 5] = -thr * lag - (sin_t * txr - cos_t * tyr)
    d_lag[:, 0] = -cos_t
    d_lag[:, 1] = -sin_t
    d_lag[:, 5] = thr * dev + (cos_t * txr + sin_t * tyr)
    return dev, lag, d_dev, d_lag


# -- NLP assembly -----------------------------------------------------------------


class PlanNLP:
    """The assembled NLP plus its bookkeeping (counts, layout, models)."""

    def __init__(self, problem: PlanProblem, settings: SolverSettings | None = None):
        self.problem = problem
        self.settings = settings or SolverSettings()
        T = problem.horizon
        self.T = T
        self.n_vars = T * (N_STATES + N_CONTROLS)
        self.n_channels = problem.n_channels
        nc = problem.n_components

        # Constraint census (the x_1 link to the fixed initial state is an
        # initial-condition equality; the T-1 inter-state links are the
        # dynamics equalities proper).
        self.n_initial_condition_equalities = 1
        self.n_dynamics_equalities = T - 1
        hard_rows = not self.settings.soft_constraints
        if problem.formulation == "chance":
            self.n_risk_rows = T * self.n_channels if hard_rows else 0
            self.n_concstar_rows = T * self.n_channels * nc if hard_rows else 0
            self.n_exclusion_rows = 0
        else:
            self.n_risk_rows = 0
            self.n_concstar_rows = 0
            self.n_exclusion_rows = T * self.n_channels * nc if hard_rows else 0
        self.n_eq = T * N_STATES
        self.n_ineq = self.n_risk_rows + self.n_concstar_rows + self.n_exclusion_rows

        self.models = [self._build_model(ch) for ch in problem.channels]
        if problem.formulation == "chance" and problem.channels:
            self.eps = np.asarray(problem.allocation.epsilon, dtype=float)
        else:
            self.eps = None

        self.lb, self.ub = self._variable_bounds()
        self.eq_structure = self._eq_structure()
        self.ineq_structure = self._ineq_structure()
        self.hessian_blocks = [
            slice(8 * t, 8 * (t + 1)) for t in range(T)
        ]

    # layout helpers -------------------------------------------------------

    @staticmethod
    def control_slice(t: int) -> slice:
        return slice(8 * t, 8 * t + 2)

    @staticmethod
    def state_slice(t: int) -> slice:
        """Block of x_{t+1} for stage t (0-based)."""
        return slice(8 * t + 2, 8 * (t + 1))

    def split(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        zz = z.reshape(self.T, 8)
        return zz[:, 2:].copy(), zz[:, :2].copy()

    def join(self, states: np.ndarray, controls: np.ndarray) -> np.ndarray:
        zz = np.empty((self.T, 8))
        zz[:, :2] = controls
        zz[:, 2:] = states
        return zz.ravel()

    def _build_model(self, ch: AgentChannel) -> CompiledChannelModel:
        pred = ch.prediction
        T = self.T
        if self.problem.formulation == "mean":
            tables = [
                [_point_mass_table(pred.tables[t][i].mean()) for i in range(pred.n_components)]
                for t in range(T)
            ]
        else:
            tables = [list(pred.tables[t]) for t in range(T)]
        return CompiledChannelModel(ch.ellipsoid, pred.weights, tables)

    def _variable_bounds(self):
        lb = np.empty(self.n_vars)
        ub = np.empty(self.n_vars)
        p = self.problem
        for t in range(self.T):
            lb[self.control_slice(t)] = p.control_lower
            ub[self.control_slice(t)] = p.control_upper
            lb[self.state_slice(t)] = p.state_lower
            ub[self.state_slice(t)] = p.state_upper
        return lb, ub

    def _eq_structure(self):
        rows, cols = [], []
        for t in range(self.T):
            base = t * N_STATES
            st_next = self.state_slice(t)
            for i in range(N_STATES):
                rows.append(base + i)
                cols.append(st_next.start + i)
            u = self.control_slice(t)
            for i in range(N_STATES):
                for j in range(N_CONTROLS):
                    rows.append(base + i)
                    cols.append(u.start + j)
            if t >= 1:
                st_prev = self.state_slice(t - 1)
                for i in range(N_STATES):
                    for j in range(N_STATES):
                        rows.append(base + i)
                        cols.append(st_prev.start + j)
        return np.array(rows), np.array(cols)

    def _eq_values(self, jx, ju):
        vals = []
        for t in range(self.T):
            vals.append(np.ones(N_STATES))
            vals.append(-ju[t].ravel())
            if t >= 1:
                vals.append(-jx[t].ravel())
        return np.concatenate(vals) if vals else np.zeros(0)

    def _ineq_structure(self):
        rows, cols = [], []
        row = 0
        nc = self.problem.n_components
        for t in range(self.T):
            st = self.state_slice(t)
            pose_cols = [st.start, st.start + 1, st.start + 2]
            for _ch in range(self.n_risk_rows // self.T if self.T else 0):
                rows.extend([row] * 3)
                cols.extend(pose_cols)
                row += 1
        for t in range(self.T):
            st = self.state_slice(t)
            pose_cols = [st.start, st.start + 1, st.start + 2]
            n_per_t = (self.n_concstar_rows + self.n_exclusion_rows) // self.T if self.T else 0
            for _k in range(n_per_t):
                rows.extend([row] * 3)
                cols.extend(pose_cols)
                row += 1
        return np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64)

    # evaluation -----------------------------------------------------------

    def _conc_values(self, mean, var, with_grad, gm=None, gvar=None):
        """Bound values and validity margins per (t, component), with partials."""
        kind = self.problem.conc_kind
        scale = _SCALE.get(kind)
        if kind in (ConcKind.CANTELLI, ConcKind.VP):
            denom = var + mean * mean + 1e-300
            val = scale * var / denom
            if with_grad:
                dmu = scale * (-2.0 * mean * var) / denom**2
                dvar = scale * (mean * mean) / denom**2
        else:
            denom = mean * mean + 1e-300
            val = (2.0 / 9.0) * var / denom
            if with_grad:
                dmu = -(4.0 / 9.0) * var / (denom * (mean + np.sign(mean + 1e-300) * 1e-300))
                dvar = (2.0 / 9.0) / denom
        kappa = _KAPPA[kind]
        sigma = np.sqrt(np.maximum(var, 0.0))
        star = -mean + kappa * sigma
        if not with_grad:
            return val, star, None, None
        gval = dmu[..., None] * gm + dvar[..., None] * gvar
        if kappa == 0.0:
            gstar = -gm
        else:
            inv_sigma = kappa / (2.0 * np.sqrt(np.maximum(var, 1e-16)))
            gstar = -gm + inv_sigma[..., None] * gvar
        return val, star, gval, gstar

    def evaluate(self, z: np.ndarray, with_derivatives: bool) -> sqp.NLPEval:
        p = self.problem
        T = self.T
        states, controls = self.split(z)
        prev = np.vstack([p.initial_state.to_array(), states[:-1]])
        f_val, jx, ju = _rk4_batch(prev, controls, p.dt, p.vehicle, with_derivatives)
        eq = (states - f_val).ravel()

        dev, lag, d_dev, d_lag = _contour_terms(p.path, states)
        r = p.cost.r_array
        ru = controls @ r
        v_err = states[:, 3] - p.cost.v_ref
        objective = float(
            p.cost.c_contour * (dev @ dev)
            + p.cost.c_lag * (lag @ lag)
            + np.einsum("ti,ti->", ru, controls)
            + p.cost.c_speed * (v_err @ v_err)
        )

        grad = None
        if with_derivatives:
            gstate = (
                2.0 * p.cost.c_contour * dev[:, None] * d_dev
                + 2.0 * p.cost.c_lag * lag[:, None] * d_lag
            )
            gstate[:, 3] += 2.0 * p.cost.c_speed * v_err
            gctrl = 2.0 * ru
            grad = self.join(gstate, gctrl)

        soft_pen = 0.0
        soft_grad = np.zeros((T, N_STATES)) if with_derivatives else None
        risk_vals = []
        risk_jacs = []
        star_vals = []
        star_jacs = []
        px, py, th = states[:, 0], states[:, 1], states[:, 2]
        for ch_idx, model in enumerate(self.models):
            mean, var, gm, gvar = model.evaluate(px, py, th, gradients=with_derivatives)
            if p.formulation == "mean":
                vals = -mean  # exclusion: component mean stays outside the ellipsoid
                star_vals.append(vals)
                if with_derivatives:
                    star_jacs.append(-gm)
                continue
            val, star, gval, gstar = self._conc_values(mean, var, with_derivatives, gm, gvar)
            w = model.weights
            eps_t = self.eps[:, ch_idx]
            total = ((val @ w) - eps_t) / RISK_ROW_SCALE
            if self.settings.soft_constraints:
                viol = np.maximum(total, 0.0)
                soft_pen += self.settings.soft_penalty * float(viol @ viol)
                star_viol = np.maximum(star, 0.0)
                soft_pen += self.settings.soft_penalty * float((star_viol * star_viol).sum())
                if with_derivatives:
                    gtotal = np.einsum("tic,i->tc", gval, w) / RISK_ROW_SCALE
                    soft_grad[:, :3] += (
                        2.0 * self.settings.soft_penalty * viol[:, None] * gtotal
                    )
                    soft_grad[:, :3] += (
                        2.0
                        * self.settings.soft_penalty
                        * np.einsum("ti,tic->tc", star_viol, gstar)
                    )
            else:
                risk_vals.append(total)
                star_vals.append(star)
                if with_derivatives:
                    risk_jacs.append(np.einsum("tic,i->tc", gval, w) / RISK_ROW_SCALE)
                    star_jacs.append(gstar)

        objective += soft_pen
        if with_derivatives and soft_pen != 0.0:
            gs = self.join(soft_grad, np.zeros((T, N_CONTROLS)))
            grad = grad + gs

        # Row order: risk rows (t-major, channel), then conc*/exclusion rows
        # (t-major, channel, component), matching _ineq_structure.
        if self.n_ineq:
            chunks = []
            if risk_vals:
                chunks.append(np.stack(risk_vals, axis=1).ravel())
            if star_vals:
                chunks.append(
                    np.stack(star_vals, axis=1).reshape(T, -1).ravel()
                )
            ineq = np.concatenate(chunks)
        else:
            ineq = np.zeros(0)

        eq_jac_values = None
        ineq_jac_values = None
        if with_derivatives:
            eq_jac_values = self._eq_values(jx, ju)
            jac_chunks = []
            if risk_jacs:
                jac_chunks.append(np.stack(risk_jacs, axis=1).reshape(-1))
            if star_jacs:
                jac_chunks.append(
                    np.stack(star_jacs, axis=1).reshape(T, -1, 3).reshape(-1)
                )
            ineq_jac_values = (
                np.concatenate(jac_chunks) if jac_chunks else np.zeros(0)
            )
        return sqp.NLPEval(
            objective=objective,
            eq=eq,
            ineq=ineq,
            gradient=grad,
            eq_jac_values=eq_jac_values,
            ineq_jac_values=ineq_jac_values,
        )

    def as_dense_nlp(self) -> sqp.DenseNLP:
        return sqp.DenseNLP(
            n_vars=self.n_vars,
            n_eq=self.n_eq,
            n_ineq=self.n_ineq,
            lb=self.lb,
            ub=self.ub,
            eq_jac_structure=self.eq_structure,
            ineq_jac_structure=self.ineq_structure,
            evaluate=self.evaluate,
            hessian_blocks=self.hessian_blocks,
            hessian_model=self.lagrangian_hessian,
        )

    def gauss_newton_hessian(self, z: np.ndarray) -> list[np.ndarray]:
        """Per-stage Gauss-Newton curvature of the cost (PD after small reg)."""
        p = self.problem
        states, _ = self.split(z)
        dev, lag, d_dev, d_lag = _contour_terms(p.path, states)
        blocks = []
        for t in range(self.T):
            h = np.eye(8) * 1e-2
            h[:2, :2] += 2.0 * p.cost.r_array
            hx = (
                2.0 * p.cost.c_contour * np.outer(d_dev[t], d_dev[t])
                + 2.0 * p.cost.c_lag * np.outer(d_lag[t], d_lag[t])
            )
            hx[3, 3] += 2.0 * p.cost.c_speed
            h[2:, 2:] += hx
            blocks.append(h)
        return blocks

    def _conc_second_partials(self, mean, var):
        """Second partials of the bound value in (mean, variance)."""
        kind = self.problem.conc_kind
        if kind in (ConcKind.CANTELLI, ConcKind.VP):
            k = _SCALE[kind]
            d = var + mean * mean + 1e-300
            v_mm = -2.0 * k * var * (d - 4.0 * mean * mean) / d**3
            v_mv = -2.0 * k * mean * (d - 2.0 * var) / d**3
            v_vv = -2.0 * k * mean * mean / d**3
        else:
            m = mean + np.sign(mean + 1e-300) * 1e-300
            v_mm = (4.0 / 3.0) * var / m**4
            v_mv = -(4.0 / 9.0) / m**3
            v_vv = np.zeros_like(var)
        return v_mm, v_mv, v_vv

    def lagrangian_hessian(
        self, z: np.ndarray, eq_mult: np.ndarray, ineq_mult: np.ndarray
    ) -> list[np.ndarray]:
        """Cost Gauss-Newton blocks plus exact risk-constraint curvature.

        The dynamics equalities are quasi-linear at this scale and keep no
        curvature term; the risk and validity rows carry their analytic pose
        Hessians weighted by the QP multipliers.  Blocks are eigenvalue
        clipped so the quadratic subproblem stays convex.
        """
        blocks = self.gauss_newton_hessian(z)
        if self.n_ineq and ineq_mult is not None and ineq_mult.size == self.n_ineq:
            states, _ = self.split(z)
            px, py, th = states[:, 0], states[:, 1], states[:, 2]
            n_ch = len(self.models)
            nc = self.problem.n_components
            kappa = _KAPPA[self.problem.conc_kind]
            risk_mult = (
                ineq_mult[: self.n_risk_rows].reshape(self.T, n_ch)
                if self.n_risk_rows
                else None
            )
            star_offset = self.n_risk_rows
            star_mult = ineq_mult[star_offset:].reshape(self.T, n_ch, nc) if (
                self.n_concstar_rows or self.n_exclusion_rows
            ) else None
            pose_h = np.zeros((self.T, 3, 3))
            for ch_idx, model in enumerate(self.models):
                mean, var, gm, gvar, hm, hvar = model.evaluate_with_hessians(px, py, th)
                if self.problem.formulation == "mean":
                    # exclusion rows: value = -mean
                    pose_h += np.einsum("ti,tiab->tab", star_mult[:, ch_idx, :], -hm)
                    continue
                val_m, val_v, v_mm, v_mv, v_vv = self._conc_first_second(mean, var)
                h_val = (
                    val_m[..., None, None] * hm
                    + val_v[..., None, None] * hvar
                    + v_mm[..., None, None] * np.einsum("tia,tib->tiab", gm, gm)
                    + v_mv[..., None, None]
                    * (
                        np.einsum("tia,tib->tiab", gm, gvar)
                        + np.einsum("tia,tib->tiab", gvar, gm)
                    )
                    + v_vv[..., None, None] * np.einsum("tia,tib->tiab", gvar, gvar)
                )
                if risk_mult is not None:
                    w = model.weights
                    row_h = np.einsum("i,tiab->tab", w, h_val) / RISK_ROW_SCALE
                    pose_h += risk_mult[:, ch_idx][:, None, None] * row_h
                if star_mult is not None and self.n_concstar_rows:
                    sigma = np.sqrt(np.maximum(var, 1e-16))
                    h_star = -hm
                    if kappa != 0.0:
                        h_star = h_star + kappa * (
                            hvar / (2.0 * sigma[..., None, None])
                            - np.einsum("tia,tib->tiab", gvar, gvar)
                            / (4.0 * sigma[..., None, None] ** 3)
                        )
                    pose_h += np.einsum(
                        "ti,tiab->tab", star_mult[:, ch_idx, :], h_star
                    )
            for t in range(self.T):
                blocks[t][2:5, 2:5] += pose_h[t]
        # Convexify: clip each block's eigenvalues from below.
        out = []
        for h in blocks:
            h = 0.5 * (h + h.T)
            vals, vecs = np.linalg.eigh(h)
            floor = 1e-8 * max(1.0, float(vals.max()))
            vals = np.maximum(vals, floor)
            out.append((vecs * vals) @ vecs.T)
        return out

    def _conc_first_second(self, mean, var):
        kind = self.problem.conc_kind
        if kind in (ConcKind.CANTELLI, ConcKind.VP):
            k = _SCALE[kind]
            d = var + mean * mean + 1e-300
            val_m = k * (-2.0 * mean * var) / d**2
            val_v = k * (mean * mean) / d**2
        else:
            m = mean + np.sign(mean + 1e-300) * 1e-300
            val_m = -(4.0 / 9.0) * var / m**3
            val_v = (2.0 / 9.0) / (m * m)
        v_mm, v_mv, v_vv = self._conc_second_partials(mean, var)
        return val_m, val_v, v_mm, v_mv, v_vv


def _point_mass_table(mean: np.ndarray) -> MomentTable:
    entries = {
        alpha: float(mean[0] ** alpha[0] * mean[1] ** alpha[1])
        for alpha in all_multi_indices(2, distmoments.PREDICTION_ORDER)
    }
    return MomentTable(2, distmoments.PREDICTION_ORDER, entries)


def assemble_nlp(problem: PlanProblem, settings: SolverSettings | None = None) -> PlanNLP:
    """Build the NLP for a planning problem (validates shapes on the way)."""
    return PlanNLP(problem, settings)


def initial_guess(
    problem: PlanProblem, controls: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Constant-control RK4 rollout from the initial state.

    With no controls given, a small family of constant inputs is rolled out
    and the cheapest rollout (by cost) is kept; u = 0 is always a candidate.
    The guess satisfies the dynamics equalities exactly by construction.
    """
    T = problem.horizon
    if controls is not None:
        controls = np.broadcast_to(np.asarray(controls, dtype=float), (T, N_CONTROLS)).copy()
        controls = np.clip(controls, problem.control_lower, problem.control_upper)
        return _rollout(problem, controls), controls
    best = None
    for steer_rate in (0.0, -0.1, 0.1, -0.2, 0.2):
        for accel in (0.0, -1.0):
            u = np.clip(
                np.tile([accel, steer_rate], (T, 1)),
                problem.control_lower,
                problem.control_upper,
            )
            states = _rollout(problem, u)
            if not np.all(np.isfinite(states)):
                continue
            # Only bound-respecting rollouts keep the guess exactly feasible.
            if np.any(states < problem.state_lower - 1e-12) or np.any(
                states > problem.state_upper + 1e-12
            ):
                continue
            cost = _plain_cost(problem, states, u)
            if best is None or cost < best[0]:
                best = (cost, states, u)
    if best is None:
        u = np.zeros((T, N_CONTROLS))
        return _rollout(problem, u), u
    return best[1], best[2]


def _rollout(problem: PlanProblem, controls: np.ndarray) -> np.ndarray:
    states = np.empty((problem.horizon, N_STATES))
    x = problem.initial_state.to_array()
    for t in range(problem.horizon):
        x = _rk4_batch(x[None, :], controls[t : t + 1], problem.dt, problem.vehicle, False)[0][0]
        states[t] = x
    return states


def _polish(nlp: PlanNLP, z: np.ndarray) -> np.ndarray:
    """Newton feasibility refinement on the near-active constraint rows.

    The SQP tolerance leaves active constraints satisfied only to ~1e-6 in
    scaled units; two least-norm Newton corrections push the dynamics, risk
    and validity residuals to ~1e-12 without measurably moving the cost.
    """
    import scipy.sparse as sp

    z = z.copy()
    eq_rows, eq_cols = nlp.eq_structure
    in_rows, in_cols = nlp.ineq_structure
    for _ in range(3):
        ev = nlp.evaluate(z, True)
        active = ev.ineq > -1e-5 if ev.ineq.size else np.zeros(0, dtype=bool)
        resid = np.concatenate([ev.eq, np.maximum(ev.ineq[active], 0.0)])
        if np.abs(resid).max(initial=0.0) < 1e-12:
            break
        jeq = sp.csr_matrix(
            (ev.eq_jac_values, (eq_rows, eq_cols)), shape=(nlp.n_eq, nlp.n_vars)
        )
        stack = [jeq]
        if active.any():
            jin = sp.csr_matrix(
                (ev.ineq_jac_values, (in_rows, in_cols)), shape=(nlp.n_ineq, nlp.n_vars)
            )
            stack.append(jin[np.flatnonzero(active)])
        jac = sp.vstack(stack).toarray()
        target = np.concatenate([-ev.eq, -np.maximum(ev.ineq[active], 0.0)])
        gram = jac @ jac.T
        gram[np.diag_indices_from(gram)] += 1e-12
        try:
            d = jac.T @ np.linalg.solve(gram, target)
        except np.linalg.LinAlgError:
            return z
        if np.abs(d).max(initial=0.0) > 1e-3:
            return z
        z_new = np.clip(z + d, nlp.lb, nlp.ub)
        z = z_new
    return z


def solve(problem: PlanProblem, settings: SolverSettings | None = None) -> PlanResult:
    """Assemble and solve; deterministic given identical inputs and settings."""
    settings = settings or SolverSettings()
    t0 = time.perf_counter()
    nlp = assemble_nlp(problem, settings)
    states0, controls0 = initial_guess(problem)
    z0 = nlp.join(states0, controls0)
    cfg = sqp.SQPConfig(
        max_iterations=settings.max_iterations,
        kkt_tolerance=settings.kkt_tolerance,
        qp_eps=settings.qp_eps,
        hessian="model" if settings.hessian == "gauss-newton" else "bfgs",
        verbose=settings.verbose,
    )
    init_h = nlp.gauss_newton_hessian(z0) if settings.hessian != "gauss-newton" else None
    res = sqp.solve_sqp(nlp.as_dense_nlp(), z0, cfg, initial_hessian=init_h)
    z = res.z
    if settings.polish and res.status == sqp.STATUS_CONVERGED:
        z = _polish(nlp, z)
    elapsed = (time.perf_counter() - t0) * 1e3

    states, controls = nlp.split(z)
    result = _build_result(problem, nlp, states, controls, res, elapsed)
    if result.status == sqp.STATUS_CONVERGED and not _invariants_hold(result, problem):
        result.status = sqp.STATUS_MAX_ITER
        result.message = (result.message + "; converged iterate failed invariants").strip("; ")
    return result


def _build_result(problem, nlp, states, controls, res, elapsed) -> PlanResult:
    ev = nlp.evaluate(nlp.join(states, controls), False)
    dyn_res = float(np.abs(ev.eq).max()) if ev.eq.size else 0.0
    bound_viol = float(
        max(
            np.maximum(nlp.lb - nlp.join(states, controls), 0.0).max(initial=0.0),
            np.maximum(nlp.join(states, controls) - nlp.ub, 0.0).max(initial=0.0),
        )
    )
    T = problem.horizon
    n_ch = problem.n_channels
    nc = problem.n_components
    risk_values = np.zeros((T, n_ch, nc))
    conc_star = np.zeros((T, n_ch, nc))
    px, py, th = states[:, 0], states[:, 1], states[:, 2]
    for ch_idx, model in enumerate(nlp.models):
        mean, var, _, _ = model.evaluate(px, py, th, gradients=False)
        if problem.formulation == "mean":
            conc_star[:, ch_idx, :] = -mean  # exclusion margins
            continue
        val, star, _, _ = nlp._conc_values(mean, var, False)
        risk_values[:, ch_idx, :] = np.clip(val, 0.0, 1.0) * model.weights[None, :]
        conc_star[:, ch_idx, :] = star
    risk_per_step = risk_values.sum(axis=(1, 2))
    # Objective re-computed without any soft penalty contribution.
    cost = _plain_cost(problem, states, controls)
    eps = nlp.eps.copy() if nlp.eps is not None else None
    return PlanResult(
        states=states,
        controls=controls,
        status=res.status,
        cost=cost,
        solve_time_ms=elapsed,
        iterations=res.iterations,
        kkt_residual=res.kkt_residual,
        dynamics_residual=dyn_res,
        bound_violation=bound_viol,
        risk_values=risk_values,
        risk_per_step=risk_per_step,
        conc_star=conc_star,
        total_risk_bound=float(risk_per_step.sum()),
        epsilon=eps,
        formulation=problem.formulation,
        message=res.message,
    )


def _plain_cost(problem: PlanProblem, states: np.ndarray, controls: np.ndarray) -> float:
    dev, lag, _, _ = _contour_terms(problem.path, states)
    r = problem.cost.r_array
    v_err = states[:, 3] - problem.cost.v_ref
    return float(
        problem.cost.c_contour * (dev @ dev)
        + problem.cost.c_lag * (lag @ lag)
        + np.einsum("ti,ij,tj->", controls, r, controls)
        + problem.cost.c_speed * (v_err @ v_err)
    )


def _invariants_hold(result: PlanResult, problem: PlanProblem) -> bool:
    if result.dynamics_residual > 1e-6 or result.bound_violation > 1e-6:
        return False
    if problem.formulation == "chance" and problem.channels:
        per_channel = result.risk_values.sum(axis=2)
        if np.any(per_channel > result.epsilon + 1e-9):
            return False
        if np.any(result.conc_star > 1e-9):
            return False
    if problem.formulation == "mean" and problem.channels:
        if np.any(result.conc_star > 1e-6):
            return False
    return True


@dataclass
class FeasibilityReport:
    """Independent re-evaluation of every constraint on a trajectory."""

    dynamics_residual: float
    bound_violation: float
    risk_margin: float  # max over steps of (sum of bounds - epsilon); <= tol is good
    conc_star_max: float
    exclusion_margin: float
    feasible: bool
    notes: str = ""


def check_feasibility(
    result: PlanResult,
    problem: PlanProblem,
    risk_tol: float = 1e-9,
    residual_tol: float = 1e-6,
) -> FeasibilityReport:
    """Re-evaluate all constraints independently of the solver's own numbers.

    Dynamics are re-integrated step by step with the scalar RK4; risk bounds
    are recomputed through the uncompiled moment-expression path.
    """
    x = problem.initial_state.to_array()
    dyn = 0.0
    for t in range(problem.horizon):
        x_next = mpcc.rk4_step(x, result.controls[t], problem.dt, problem.vehicle)
        dyn = max(dyn, float(np.abs(result.states[t] - x_next).max()))
        x = result.states[t]
    bound = 0.0
    for t in range(problem.horizon):
        bound = max(
            bound,
            float(np.maximum(problem.state_lower - result.states[t], 0.0).max()),
            float(np.maximum(result.states[t] - problem.state_upper, 0.0).max()),
            float(np.maximum(problem.control_lower - result.controls[t], 0.0).max()),
            float(np.maximum(result.controls[t] - problem.control_upper, 0.0).max()),
        )
    risk_margin = -np.inf
    star_max = -np.inf
    excl = -np.inf
    from .riskbounds import conc  # local import avoids cycle at module load

    for t in range(problem.horizon):
        pose = Pose(result.states[t, 0], result.states[t, 1], result.states[t, 2])
        for ch_idx, ch in enumerate(problem.channels):
            pred = ch.prediction
            total = 0.0
            for i in range(pred.n_components):
                mean, var = constraint_mean_variance(
                    ch.ellipsoid, pose, pred.tables[t][i]
                )
                if problem.formulation == "mean":
                    m = pred.tables[t][i].mean()
                    pm_mean, _ = constraint_mean_variance(
                        ch.ellipsoid, pose, _point_mass_table(m)
                    )
                    excl = max(excl, -pm_mean)
                    continue
                b = conc(mean, var, problem.conc_kind)
                star_max = max(star_max, b.conc_star)
                total += pred.weights[i] * b.value
            if problem.formulation == "chance" and problem.channels:
                risk_margin = max(
                    risk_margin, total - problem.allocation.epsilon[t, ch_idx]
                )
    feasible = dyn <= residual_tol and bound <= residual_tol
    if problem.formulation == "chance" and problem.channels:
        feasible = feasible and risk_margin <= risk_tol and star_max <= risk_tol
    if problem.formulation == "mean" and problem.channels:
        feasible = feasible and excl <= residual_tol
    return FeasibilityReport(
        dynamics_residual=dyn,
        bound_violation=bound,
        risk_margin=float(risk_margin),
        conc_star_max=float(star_max),
        exclusion_margin=float(excl),
        feasible=bool(feasible),
    )


# -- problem files -----------------------------------------------------------------


def expand_agent(
    prediction: MixturePrediction,
    agent_length: float,
    agent_width: float,
    ego_half_length: float,
    ego_half_width: float,
) -> list[AgentChannel]:
    """Split an agent into circle channels with matching ellipsoids.

    Circle centers are offset from the predicted agent center along its
    mean direction of motion (per timestep); each circle is then treated as
    a separate agent, and the caller splits the agent's risk budget evenly
    across the returned channels.
    """
    geom = agent_circles(agent_length, agent_width)
    ellipsoid = ellipsoid_from_geometry(ego_half_length, ego_half_width, geom.radius)
    if len(geom.offsets) == 1 and geom.offsets[0] == 0.0:
        return [AgentChannel(prediction, ellipsoid)]
    # Mean heading per step from the weighted mixture mean trajectory.
    means = np.array(
        [
            np.einsum("i,ij->j", prediction.weights, np.array([tb.mean() for tb in row]))
            for row in prediction.tables
        ]
    )
    diffs = np.vstack([np.diff(means, axis=0), means[-1] - means[-2]])
    norms = np.linalg.norm(diffs, axis=1, keepdims=True)
    dirs = np.where(norms > 1e-9, diffs / np.maximum(norms, 1e-9), np.array([[1.0, 0.0]]))
    channels = []
    for off in geom.offsets:
        channels.append(AgentChannel(prediction.shifted(dirs * off), ellipsoid))
    return channels


def load_problem(source: dict | str | Path, base_dir: str | Path | None = None) -> PlanProblem:
    """Build a PlanProblem from a problem JSON file.

    The file references a path file and per-agent prediction files (relative
    paths resolve against the problem file's directory).  See the README for
    the schema and defaults.
    """
    if isinstance(source, (str, Path)):
        base_dir = Path(source).parent if base_dir is None else Path(base_dir)
        with open(source) as fh:
            source = json.load(fh)
    base_dir = Path(base_dir) if base_dir is not None else Path(".")
    known = {
        "horizon", "dt", "initial_state", "path_file", "path", "agents", "ego",
        "per_step_epsilon", "total_budget", "conc", "formulation", "cost",
        "vehicle", "state_bounds", "control_bounds",
    }
    unknown = set(source) - known
    if unknown:
        raise PlanError(f"unknown problem keys: {sorted(unknown)}")
    horizon = int(source.get("horizon", 50))
    dt = float(source.get("dt", 0.1))
    init = source.get("initial_state", {})
    state = EgoState(
        x=float(init.get("x", 0.0)),
        y=float(init.get("y", 0.0)),
        theta=float(init.get("theta", 0.0)),
        v=float(init.get("v", 7.0)),
        delta=float(init.get("delta", 0.0)),
        s_traveled=float(init.get("s", 0.0)),
    )
    if "path" in source:
        path = mpcc.load_path(source["path"])
    else:
        path = mpcc.load_path(base_dir / source["path_file"])
    ego = source.get("ego", {})
    half_l = float(ego.get("half_length", 2.4))
    half_w = float(ego.get("half_width", 1.0))
    channels: list[AgentChannel] = []
    budget_shares: list[int] = []  # circles per agent, for the epsilon split
    for agent in source.get("agents", []):
        if "prediction" in agent:
            pred = distmoments.load_prediction_spec(agent["prediction"])
        else:
            pred = distmoments.load_prediction_spec(base_dir / agent["prediction_file"])
        length = float(agent.get("length", agent.get("width", 2.0)))
        width = float(agent.get("width", 2.0))
        chans = expand_agent(pred, length, width, half_l, half_w)
        channels.extend(chans)
        budget_shares.extend([len(chans)] * len(chans))
    formulation = source.get("formulation", "chance")
    allocation = None
    if formulation == "chance" and channels:
        eps_step = float(source.get("per_step_epsilon", 0.0005))
        eps = np.empty((horizon, len(channels)))
        for j, share in enumerate(budget_shares):
            eps[:, j] = eps_step / share
        allocation = RiskAllocation(eps, float(eps.sum()))
    cost_spec = source.get("cost", {})
    cost = CostParams(
        c_contour=float(cost_spec.get("c_contour", 20.0)),
        c_lag=float(cost_spec.get("c_lag", 1.0)),
        c_speed=float(cost_spec.get("c_speed", 1.0)),
        r_matrix=tuple(
            tuple(row) for row in cost_spec.get("r_matrix", ((1.0, 0.0), (0.0, 100.0)))
        ),
        v_ref=float(cost_spec.get("v_ref", 7.0)),
    )
    veh_spec = source.get("vehicle", {})
    vehicle = VehicleParams(
        l_f=float(veh_spec.get("l_f", 1.2)), l_r=float(veh_spec.get("l_r", 1.4))
    )
    kwargs = {}
    if "state_bounds" in source:
        kwargs["state_lower"] = np.asarray(source["state_bounds"]["lower"], dtype=float)
        kwargs["state_upper"] = np.asarray(source["state_bounds"]["upper"], dtype=float)
    if "control_bounds" in source:
        kwargs["control_lower"] = np.asarray(source["control_bounds"]["lower"], dtype=float)
        kwargs["control_upper"] = np.asarray(source["control_bounds"]["upper"], dtype=float)
    return PlanProblem(
        initial_state=state,
        path=path,
        channels=tuple(channels),
        horizon=horizon,
        dt=dt,
        allocation=allocation,
        conc_kind=ConcKind.parse(source.get("conc", "vp")),
        cost=cost,
        vehicle=vehicle,
        formulation=formulation,
        **kwargs,
    )
