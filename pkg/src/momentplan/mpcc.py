"""Contouring-control primitives: reference path, bicycle model, stage cost.

The reference path is a pair of cubics in an arc-length-like parameter
s in [0, L].  Exact arc-length parameterization of a cubic has no closed
form; paths are generated on s in [0, 1], their length L computed by
adaptive quadrature, and coefficients rescaled so the parameter range is
[0, L].  Contouring deviation and lag error use the traveled distance
integrator s as the approximate path parameter.

The ego vehicle is a kinematic bicycle with state
(x, y, theta, v, delta, s_traveled) and controls (accel, steer rate),
discretized by classical RK4 with zero-order-hold controls.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.integrate import quad

__all__ = [
    "PathError",
    "ReferencePath",
    "EgoState",
    "Control",
    "VehicleParams",
    "CostParams",
    "path_point",
    "path_heading",
    "arc_length_scale",
    "contouring_errors",
    "bicycle_derivative",
    "bicycle_jacobian",
    "rk4_step",
    "rk4_jacobian",
    "stage_cost",
    "load_path",
    "save_path",
]

N_STATES = 6
N_CONTROLS = 2


class PathError(ValueError):
    """Degenerate or inconsistent reference path."""


@dataclass(frozen=True)
class ReferencePath:
    """Cubic reference path: coefficients per power of s, plus length L (m)."""

    cx: tuple[float, float, float, float]
    cy: tuple[float, float, float, float]
    length: float

    def __post_init__(self):
        if self.length <= 0:
            raise PathError(f"path length must be positive, got {self.length}")
        grid = np.linspace(0.0, self.length, 1000)
        tx, ty = _tangent(self.cx, self.cy, grid)
        norms = np.hypot(tx, ty)
        if norms.min() < 1e-9:
            raise PathError(
                f"path tangent vanishes near s={grid[int(norms.argmin())]:.4f}"
            )


def _eval_cubic(c: Sequence[float], s):
    s = np.asarray(s, dtype=float)
    return c[0] + s * (c[1] + s * (c[2] + s * c[3]))


def _eval_cubic_d1(c: Sequence[float], s):
    s = np.asarray(s, dtype=float)
    return c[1] + s * (2.0 * c[2] + s * (3.0 * c[3]))


def _eval_cubic_d2(c: Sequence[float], s):
    s = np.asarray(s, dtype=float)
    return 2.0 * c[2] + 6.0 * c[3] * s


def _tangent(cx, cy, s):
    return _eval_cubic_d1(cx, s), _eval_cubic_d1(cy, s)


def path_point(path: ReferencePath, s):
    """Reference position at parameter s (polynomial extrapolation outside [0, L])."""
    return _eval_cubic(path.cx, s), _eval_cubic(path.cy, s)


def path_heading(path: ReferencePath, s):
    """Path heading Theta(s) via the two-argument arctangent of the tangent."""
    tx, ty = _tangent(path.cx, path.cy, s)
    return np.arctan2(ty, tx)


def path_heading_rate(path: ReferencePath, s):
    """dTheta/ds = (x' y'' - y' x'') / (x'^2 + y'^2)."""
    tx, ty = _tangent(path.cx, path.cy, s)
    ax = _eval_cubic_d2(path.cx, s)
    ay = _eval_cubic_d2(path.cy, s)
    return (tx * ay - ty * ax) / (tx * tx + ty * ty)


def arc_length_scale(
    cx: Sequence[float], cy: Sequence[float], tol: float = 1e-8
) -> ReferencePath:
    """Rescale a unit-parameter cubic so its parameter spans [0, L].

    L is the arc length of the s in [0, 1] curve by adaptive quadrature;
    coefficient k is scaled by L^-k.  The resulting parameter tracks true
    arc length only approximately (the standard contouring approximation).
    """
    cx = tuple(float(v) for v in cx)
    cy = tuple(float(v) for v in cy)

    def speed(s):
        tx, ty = _tangent(cx, cy, s)
        return math.hypot(tx, ty)

    length, err = quad(speed, 0.0, 1.0, epsabs=tol, epsrel=tol, limit=200)
    if not math.isfinite(length) or length <= 0 or err > max(1e-6, 100 * tol * length):
        raise PathError(f"arc-length quadrature failed: L={length}, err={err}")
    sx = tuple(c / length**k for k, c in enumerate(cx))
    sy = tuple(c / length**k for k, c in enumerate(cy))
    return ReferencePath(sx, sy, length)


@dataclass(frozen=True)
class EgoState:
    """Bicycle state: pose, speed, steering angle, traveled distance."""

    x: float
    y: float
    theta: float
    v: float
    delta: float
    s_traveled: float

    def to_array(self) -> np.ndarray:
        return np.array(
            [self.x, self.y, self.theta, self.v, self.delta, self.s_traveled]
        )

    @staticmethod
    def from_array(a: Sequence[float]) -> "EgoState":
        a = np.asarray(a, dtype=float)
        return EgoState(*a.tolist())


@dataclass(frozen=True)
class Control:
    """Acceleration (m/s^2) and steering rate (rad/s)."""

    accel: float
    steer_rate: float

    def to_array(self) -> np.ndarray:
        return np.array([self.accel, self.steer_rate])

    @staticmethod
    def from_array(a: Sequence[float]) -> "Control":
        a = np.asarray(a, dtype=float)
        return Control(float(a[0]), float(a[1]))


@dataclass(frozen=True)
class VehicleParams:
    """Distances from the center of gravity to the front/rear axles (m)."""

    l_f: float = 1.2
    l_r: float = 1.4

    def __post_init__(self):
        if self.l_f <= 0 or self.l_r <= 0:
            raise PathError("axle distances must be positive")


@dataclass(frozen=True)
class CostParams:
    """Stage-cost weights: contouring, lag, speed tracking, control effort."""

    c_contour: float = 20.0
    c_lag: float = 1.0
    c_speed: float = 1.0
    r_matrix: tuple[tuple[float, float], tuple[float, float]] = ((1.0, 0.0), (0.0, 100.0))
    v_ref: float = 7.0

    def __post_init__(self):
        if min(self.c_contour, self.c_lag, self.c_speed) < 0:
            raise PathError("cost weights must be nonnegative")
        r = np.asarray(self.r_matrix, dtype=float)
        if abs(r[0, 1] - r[1, 0]) > 1e-12 or np.linalg.eigvalsh(r).min() <= 0:
            raise PathError("control weight matrix must be symmetric positive definite")

    @property
    def r_array(self) -> np.ndarray:
        return np.asarray(self.r_matrix, dtype=float)


def contouring_errors(state: EgoState, path: ReferencePath) -> tuple[float, float]:
    """Contouring deviation and lag error at the state's traveled distance.

    With xbar = x - x_ref(s), ybar = y - y_ref(s) and Theta = Theta(s):
        deviation = sin(Theta) xbar - cos(Theta) ybar
        lag       = -cos(Theta) xbar - sin(Theta) ybar
    """
    xr, yr = path_point(path, state.s_traveled)
    th = path_heading(path, state.s_traveled)
    xb = state.x - xr
    yb = state.y - yr
    dev = math.sin(th) * xb - math.cos(th) * yb
    lag = -math.cos(th) * xb - math.sin(th) * yb
    return dev, lag


def _beta(delta: float, params: VehicleParams) -> float:
    return math.atan(params.l_r / (params.l_f + params.l_r) * math.tan(delta))


def bicycle_derivative(
    state: np.ndarray | EgoState, control: np.ndarray | Control, params: VehicleParams
) -> np.ndarray:
    """Continuous-time kinematic bicycle model; steering must stay below pi/2."""
    xs = state.to_array() if isinstance(state, EgoState) else np.asarray(state, dtype=float)
    us = control.to_array() if isinstance(control, Control) else np.asarray(control, dtype=float)
    theta, v, delta = xs[2], xs[3], xs[4]
    if abs(delta) >= math.pi / 2:
        raise PathError(f"steering angle {delta} outside (-pi/2, pi/2)")
    b = _beta(delta, params)
    return np.array(
        [
            v * math.cos(theta + b),
            v * math.sin(theta + b),
            v / params.l_r * math.sin(b),
            us[0],
            us[1],
            v,
        ]
    )


def bicycle_jacobian(
    state: np.ndarray, control: np.ndarray, params: VehicleParams
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic Jacobians (d f/d state, d f/d control) of the bicycle model."""
    xs = np.asarray(state, dtype=float)
    theta, v, delta = xs[2], xs[3], xs[4]
    k = params.l_r / (params.l_f + params.l_r)
    tan_d = math.tan(delta)
    b = math.atan(k * tan_d)
    # d beta / d delta = k sec^2(delta) / (1 + k^2 tan^2 delta)
    db = k * (1.0 + tan_d * tan_d) / (1.0 + (k * tan_d) ** 2)
    sin_tb = math.sin(theta + b)
    cos_tb = math.cos(theta + b)
    a = np.zeros((N_STATES, N_STATES))
    a[0, 2] = -v * sin_tb
    a[0, 3] = cos_tb
    a[0, 4] = -v * sin_tb * db
    a[1, 2] = v * cos_tb
    a[1, 3] = sin_tb
    a[1, 4] = v * cos_tb * db
    a[2, 3] = math.sin(b) / params.l_r
    a[2, 4] = v / params.l_r * math.cos(b) * db
    a[5, 3] = 1.0
    bmat = np.zeros((N_STATES, N_CONTROLS))
    bmat[3, 0] = 1.0
    bmat[4, 1] = 1.0
    return a, bmat


def rk4_step(
    state: np.ndarray | EgoState, control: np.ndarray | Control, dt: float, params: VehicleParams
) -> np.ndarray | EgoState:
    """One classical RK4 step with zero-order-hold control."""
    if dt <= 0:
        raise PathError(f"dt must be positive, got {dt}")
    as_state = isinstance(state, EgoState)
    xs = state.to_array() if as_state else np.asarray(state, dtype=float)
    us = control.to_array() if isinstance(control, Control) else np.asarray(control, dtype=float)
    k1 = bicycle_derivative(xs, us, params)
    k2 = bicycle_derivative(xs + 0.5 * dt * k1, us, params)
    k3 = bicycle_derivative(xs + 0.5 * dt * k2, us, params)
    k4 = bicycle_derivative(xs + dt * k3, us, params)
    out = xs + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return EgoState.from_array(out) if as_state else out


def rk4_jacobian(
    state: np.ndarray, control: np.ndarray, dt: float, params: VehicleParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """RK4 step value plus analytic Jacobians wrt state and control."""
    xs = np.asarray(state, dtype=float)
    us = np.asarray(control, dtype=float)
    eye = np.eye(N_STATES)

    k1 = bicycle_derivative(xs, us, params)
    a1, b1 = bicycle_jacobian(xs, us, params)
    x2 = xs + 0.5 * dt * k1
    k2 = bicycle_derivative(x2, us, params)
    a2, b2 = bicycle_jacobian(x2, us, params)
    x3 = xs + 0.5 * dt * k2
    k3 = bicycle_derivative(x3, us, params)
    a3, b3 = bicycle_jacobian(x3, us, params)
    x4 = xs + dt * k3
    k4 = bicycle_derivative(x4, us, params)
    a4, b4 = bicycle_jacobian(x4, us, params)

    dk1_dx = a1
    dk1_du = b1
    dk2_dx = a2 @ (eye + 0.5 * dt * dk1_dx)
    dk2_du = a2 @ (0.5 * dt * dk1_du) + b2
    dk3_dx = a3 @ (eye + 0.5 * dt * dk2_dx)
    dk3_du = a3 @ (0.5 * dt * dk2_du) + b3
    dk4_dx = a4 @ (eye + dt * dk3_dx)
    dk4_du = a4 @ (dt * dk3_du) + b4

    value = xs + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    jx = eye + dt / 6.0 * (dk1_dx + 2 * dk2_dx + 2 * dk3_dx + dk4_dx)
    ju = dt / 6.0 * (dk1_du + 2 * dk2_du + 2 * dk3_du + dk4_du)
    return value, jx, ju


def stage_cost(
    state: EgoState, control: Control, cost: CostParams, path: ReferencePath
) -> float:
    """Contouring + lag + control effort + speed deviation penalty."""
    dev, lag = contouring_errors(state, path)
    u = control.to_array()
    return float(
        cost.c_contour * dev * dev
        + cost.c_lag * lag * lag
        + u @ cost.r_array @ u
        + cost.c_speed * (state.v - cost.v_ref) ** 2
    )


# -- path files -----------------------------------------------------------------


def load_path(source: dict | str | Path) -> ReferencePath:
    """Read a path file: eight cubic coefficients plus a `prescaled` flag.

    Unscaled files (prescaled false) are arc-length scaled on load;
    prescaled files must carry their length.
    """
    if not isinstance(source, dict):
        with open(source) as fh:
            source = json.load(fh)
    try:
        cx = [float(v) for v in source["cx"]]
        cy = [float(v) for v in source["cy"]]
        prescaled = bool(source["prescaled"])
    except KeyError as e:
        raise PathError(f"path file missing key {e}") from None
    if len(cx) != 4 or len(cy) != 4:
        raise PathError("cx and cy must each list 4 coefficients")
    if prescaled:
        if "length" not in source:
            raise PathError("prescaled path file must carry its length")
        return ReferencePath(tuple(cx), tuple(cy), float(source["length"]))
    return arc_length_scale(cx, cy)


def save_path(path: ReferencePath, dest: str | Path) -> None:
    payload = {
        "cx": list(path.cx),
        "cy": list(path.cy),
        "prescaled": True,
        "length": path.length,
    }
    with open(dest, "w") as fh:
        json.dump(payload, fh, indent=2)
