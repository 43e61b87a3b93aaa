"""Scenario generation, Monte Carlo validation, and batch experiments.

Scenarios are seeded perturbations of a canonical U-turn: the ego follows a
cubic U-turn path while an oncoming two-mode agent crosses the turn's apex
region.  Batch runs sweep risk levels and prediction formulations
(deterministic mean-exclusion, Gaussian mixture, truncated Gaussian
mixture), record per-run results, and reduce them to success rates and
cost ratios.  Monte Carlo estimation of the per-step collision probability
is the validation oracle for every analytic bound the planner reports.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import distmoments, mpcc, planner
from .bodyframe import CollisionEllipsoid, ellipsoid_from_geometry
from .distmoments import (
    GaussianMixture,
    GaussianSpec,
    MixturePrediction,
    interpolate_prediction,
    sample_component,
    truncate_prediction,
)
from .mpcc import EgoState, ReferencePath
from .planner import AgentChannel, PlanProblem, PlanResult, SolverSettings
from .riskbounds import ConcKind, conc, uniform_allocation

__all__ = [
    "Scenario",
    "RunRecord",
    "BatchMetrics",
    "ValidationReport",
    "make_uturn_scenario",
    "canonical_scenario",
    "scenario_problem",
    "min_clearance",
    "monte_carlo_risk",
    "validate_plan",
    "batch_experiment",
    "emit_trajectory_plot",
    "emit_metric_plots",
]

DEFAULT_EPS_GRID = tuple(np.logspace(-4, -2, 10))
# Desk-scale sweep used by the acceptance batch: 5 levels bracketing the
# canonical scenario's binding range.
DESK_EPS_GRID = tuple(np.logspace(np.log10(2e-4), np.log10(2e-3), 5))
FORMULATIONS = ("deterministic", "gmm", "truncated-gmm")
TRUNCATION_K = 2.0

# Canonical U-turn in the unit parameter: out along +x, loop, back at y = 12.
_BASE_CX = (0.0, 70.0, -70.0, 0.0)
_BASE_CY = (0.0, 0.0, 36.0, -24.0)

# Canonical oncoming agent: one vehicle, two intent modes, approaching the
# ego's return lane from the north-east.  The main mode converges on the
# lane exit and binds the risk constraint over the last second of the
# horizon; the secondary mode brakes early and stays north-east.  Binding
# from outside the turn keeps the constant-control initial rollout and the
# path-following optimum in one connected feasible basin.
_AGENT_START_MEANS = ((26.0, 17.0), (26.0, 17.0))
_AGENT_END_MEANS = ((4.8, 12.3), (18.0, 15.5))
_AGENT_WEIGHTS = (0.65, 0.35)
_AGENT_SIGMA_START = 0.08
_AGENT_SIGMA_END = 0.16
_AGENT_SIZE = 2.2  # square footprint -> a single circle
_EGO_HALF_LENGTH = 2.4
_EGO_HALF_WIDTH = 1.0


@dataclass(frozen=True)
class Scenario:
    """A reproducible planning scenario: path, ego start, agent endpoints."""

    seed: int
    path: ReferencePath
    initial_state: EgoState
    agent_start: GaussianMixture
    agent_end: GaussianMixture
    agent_size: float
    eps_grid: tuple[float, ...]

    def describe(self) -> dict:
        return {
            "seed": self.seed,
            "path": {"cx": self.path.cx, "cy": self.path.cy, "length": self.path.length},
            "eps_grid": list(self.eps_grid),
        }


def _agent_endpoints() -> tuple[GaussianMixture, GaussianMixture]:
    cov_s = ((_AGENT_SIGMA_START**2, 0.0), (0.0, (_AGENT_SIGMA_START * 0.8) ** 2))
    cov_e = ((_AGENT_SIGMA_END**2, 0.0), (0.0, (_AGENT_SIGMA_END * 0.8) ** 2))
    start = GaussianMixture(
        _AGENT_WEIGHTS,
        tuple(GaussianSpec(m, cov_s) for m in _AGENT_START_MEANS),
    )
    end = GaussianMixture(
        _AGENT_WEIGHTS,
        tuple(GaussianSpec(m, cov_e) for m in _AGENT_END_MEANS),
    )
    return start, end


def make_uturn_scenario(
    seed: int,
    perturbation_scale: float = 0.8,
    eps_grid: Sequence[float] = DEFAULT_EPS_GRID,
) -> Scenario:
    """Seeded U-turn scenario: canonical cubic plus uniform coefficient noise.

    Degenerate draws (vanishing tangent) are retried with fresh noise from
    the same stream, up to a bounded number of attempts.
    """
    rng = np.random.default_rng(seed)
    for _ in range(32):
        noise_x = rng.uniform(-perturbation_scale, perturbation_scale, size=3)
        noise_y = rng.uniform(-perturbation_scale, perturbation_scale, size=3)
        cx = (0.0,) + tuple(b + n for b, n in zip(_BASE_CX[1:], noise_x))
        cy = (0.0,) + tuple(b + n for b, n in zip(_BASE_CY[1:], noise_y))
        try:
            path = mpcc.arc_length_scale(cx, cy)
        except mpcc.PathError:
            continue
        heading0 = float(mpcc.path_heading(path, 0.0))
        state = EgoState(x=0.0, y=0.0, theta=heading0, v=7.0, delta=0.0, s_traveled=0.0)
        start, end = _agent_endpoints()
        return Scenario(
            seed=seed,
            path=path,
            initial_state=state,
            agent_start=start,
            agent_end=end,
            agent_size=_AGENT_SIZE,
            eps_grid=tuple(float(e) for e in eps_grid),
        )
    raise mpcc.PathError(f"could not draw a non-degenerate path for seed {seed}")


def canonical_scenario(eps_grid: Sequence[float] = DEFAULT_EPS_GRID) -> Scenario:
    """The unperturbed bundled scenario (seed 0, zero noise)."""
    return make_uturn_scenario(0, perturbation_scale=0.0, eps_grid=eps_grid)


def scenario_prediction(scenario: Scenario, horizon: int, formulation: str) -> MixturePrediction:
    pred = interpolate_prediction(scenario.agent_start, scenario.agent_end, horizon)
    if formulation == "truncated-gmm":
        pred = truncate_prediction(pred, TRUNCATION_K)
    return pred


def scenario_problem(
    scenario: Scenario,
    eps_step: float,
    formulation: str,
    conc_kind: ConcKind = ConcKind.VP,
    horizon: int = 50,
    dt: float = 0.1,
) -> PlanProblem:
    """Instantiate a planning problem for one scenario and formulation."""
    if formulation not in FORMULATIONS:
        raise ValueError(f"formulation must be one of {FORMULATIONS}")
    pred = scenario_prediction(scenario, horizon, formulation)
    ellipsoid = ellipsoid_from_geometry(
        _EGO_HALF_LENGTH, _EGO_HALF_WIDTH, scenario.agent_size / 2.0
    )
    channels = (AgentChannel(pred, ellipsoid),)
    state_upper = planner._default_state_bounds()[1].copy()
    state_upper[5] = scenario.path.length
    if formulation == "deterministic":
        return PlanProblem(
            initial_state=scenario.initial_state,
            path=scenario.path,
            channels=channels,
            horizon=horizon,
            dt=dt,
            allocation=None,
            conc_kind=conc_kind,
            state_upper=state_upper,
            formulation="mean",
        )
    allocation = uniform_allocation(eps_step * horizon, horizon, 1)
    return PlanProblem(
        initial_state=scenario.initial_state,
        path=scenario.path,
        channels=channels,
        horizon=horizon,
        dt=dt,
        allocation=allocation,
        conc_kind=conc_kind,
        state_upper=state_upper,
        formulation="chance",
    )


def min_clearance(result: PlanResult, problem: PlanProblem) -> float:
    """Smallest distance from the planned positions to any component mean."""
    best = math.inf
    pos = result.states[:, :2]
    for ch in problem.channels:
        for t in range(problem.horizon):
            for table in ch.prediction.tables[t]:
                d = float(np.linalg.norm(pos[t] - table.mean()))
                best = min(best, d)
    return best


# -- Monte Carlo risk estimation ----------------------------------------------------


def monte_carlo_risk(
    prediction: MixturePrediction,
    states: np.ndarray,
    ellipsoid: CollisionEllipsoid,
    n_samples: int = 100_000,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Unbiased per-step estimates of P(Q(a_t) <= 1) with binomial errors.

    Samples each mixture by component draw (truncated components by exact
    rejection), maps the draws into the body frame of the planned pose, and
    counts quadratic-form membership.  Returns (p_hat, standard_error).
    """
    T = states.shape[0]
    if prediction.horizon < T:
        raise ValueError("prediction shorter than the trajectory")
    if prediction.specs is None:
        raise ValueError("Monte Carlo validation requires retained specs")
    q = ellipsoid.q_array
    rng = np.random.default_rng(seed)
    p_hat = np.zeros(T)
    se = np.zeros(T)
    weights = np.asarray(prediction.weights)
    for t in range(T):
        counts = rng.multinomial(n_samples, weights)
        hits = 0
        pose = states[t]
        c, s = math.cos(pose[2]), math.sin(pose[2])
        rot = np.array([[c, s], [-s, c]])  # R(theta)^T
        for comp, n_comp in enumerate(counts):
            if n_comp == 0:
                continue
            draws = sample_component(prediction.specs[t][comp], int(n_comp), rng)
            body = (draws - pose[:2]) @ rot.T
            quad = (
                q[0, 0] * body[:, 0] ** 2
                + 2.0 * q[0, 1] * body[:, 0] * body[:, 1]
                + q[1, 1] * body[:, 1] ** 2
            )
            hits += int(np.count_nonzero(quad <= 1.0))
        p = hits / n_samples
        p_hat[t] = p
        se[t] = math.sqrt(max(p * (1.0 - p), 0.0) / n_samples)
    return p_hat, se


@dataclass
class ValidationReport:
    """Soundness of a plan's analytic bounds against sampling."""

    empirical: np.ndarray  # (T,) per-step collision probability estimates
    standard_error: np.ndarray
    bound: np.ndarray  # (T,) analytic per-step bounds (sum over channels)
    epsilon: np.ndarray | None
    sound_vs_bound: bool  # empirical <= bound + 3 SE everywhere
    sound_vs_epsilon: bool  # empirical <= epsilon + 3 SE everywhere (chance runs)
    theorem_chain_ok: bool  # component-wise bounds <= aggregate-moment bounds

    def to_json_dict(self) -> dict:
        return {
            "empirical": self.empirical.tolist(),
            "standard_error": self.standard_error.tolist(),
            "bound": self.bound.tolist(),
            "epsilon": None if self.epsilon is None else self.epsilon.tolist(),
            "sound_vs_bound": self.sound_vs_bound,
            "sound_vs_epsilon": self.sound_vs_epsilon,
            "theorem_chain_ok": self.theorem_chain_ok,
        }


def validate_plan(
    result: PlanResult,
    problem: PlanProblem,
    n_samples: int = 100_000,
    seed: int = 0,
) -> ValidationReport:
    """Monte Carlo soundness sweep for a solved plan.

    Also checks, on every step, that the component-wise mixture bound does
    not exceed the bound computed from aggregate mixture moments (the
    tightening that motivates bounding components individually).
    """
    T = problem.horizon
    empirical = np.zeros(T)
    se_total = np.zeros(T)
    for ch in problem.channels:
        p, se = monte_carlo_risk(
            ch.prediction, result.states, ch.ellipsoid, n_samples, seed
        )
        empirical += p
        se_total = np.sqrt(se_total**2 + se**2)
    bound = result.risk_per_step
    chain_ok = True
    if problem.formulation == "chance":
        from .bodyframe import Pose, constraint_mean_variance

        for t in range(T):
            pose = Pose(result.states[t, 0], result.states[t, 1], result.states[t, 2])
            for ch in problem.channels:
                agg = ch.prediction.mixture_table(t)
                mean, var = constraint_mean_variance(ch.ellipsoid, pose, agg)
                agg_bound = conc(mean, var, problem.conc_kind)
                component_sum = 0.0
                for i in range(ch.prediction.n_components):
                    m_i, v_i = constraint_mean_variance(
                        ch.ellipsoid, pose, ch.prediction.tables[t][i]
                    )
                    component_sum += (
                        ch.prediction.weights[i] * conc(m_i, v_i, problem.conc_kind).value
                    )
                if agg_bound.valid and component_sum > agg_bound.value + 1e-12:
                    chain_ok = False
    eps = None
    sound_eps = True
    if problem.formulation == "chance" and problem.channels:
        eps = problem.allocation.epsilon.sum(axis=1)
        sound_eps = bool(np.all(empirical <= eps + 3.0 * se_total))
    sound_bound = bool(np.all(empirical <= bound + 3.0 * se_total))
    return ValidationReport(
        empirical=empirical,
        standard_error=se_total,
        bound=bound,
        epsilon=eps,
        sound_vs_bound=sound_bound,
        sound_vs_epsilon=sound_eps,
        theorem_chain_ok=chain_ok,
    )


# -- batch experiments -----------------------------------------------------------


@dataclass
class RunRecord:
    seed: int
    eps: float
    formulation: str
    status: str
    converged: bool
    cost: float
    solve_time_ms: float
    min_clearance: float
    total_risk_bound: float

    def to_json_dict(self) -> dict:
        return self.__dict__.copy()


@dataclass
class BatchMetrics:
    """Per-run records plus per-epsilon aggregates."""

    records: list[RunRecord]
    eps_grid: tuple[float, ...]
    formulations: tuple[str, ...]
    success_rate: dict[str, dict[float, float]] = field(default_factory=dict)
    mean_cost_ratio: dict[float, float] = field(default_factory=dict)
    mean_solve_time_ms: float = 0.0

    def aggregate(self) -> None:
        self.success_rate = {}
        for form in self.formulations:
            rates = {}
            for eps in self.eps_grid:
                runs = [r for r in self.records if r.formulation == form and r.eps == eps]
                rates[eps] = (
                    sum(r.converged for r in runs) / len(runs) if runs else float("nan")
                )
            self.success_rate[form] = rates
        self.mean_cost_ratio = {}
        if "gmm" in self.formulations and "truncated-gmm" in self.formulations:
            for eps in self.eps_grid:
                ratios = []
                by_seed = {}
                for r in self.records:
                    if r.eps == eps:
                        by_seed.setdefault(r.seed, {})[r.formulation] = r
                for seed in sorted(by_seed):
                    pair = by_seed[seed]
                    g, tg = pair.get("gmm"), pair.get("truncated-gmm")
                    if g and tg and g.converged and tg.converged and g.cost > 0:
                        ratios.append(tg.cost / g.cost)
                self.mean_cost_ratio[eps] = (
                    float(np.mean(ratios)) if ratios else float("nan")
                )
        solved = [r.solve_time_ms for r in self.records]
        self.mean_solve_time_ms = float(np.mean(solved)) if solved else 0.0

    def to_csv(self) -> str:
        """Aggregate CSV, deterministic given the records."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(
            ["seed", "eps", "formulation", "status", "cost", "solve_time_ms",
             "min_clearance", "total_risk_bound"]
        )
        for r in sorted(self.records, key=lambda r: (r.seed, r.eps, r.formulation)):
            writer.writerow(
                [r.seed, f"{r.eps:.12g}", r.formulation, r.status, f"{r.cost:.12g}",
                 f"{r.solve_time_ms:.3f}", f"{r.min_clearance:.12g}",
                 f"{r.total_risk_bound:.12g}"]
            )
        return buf.getvalue()


def _run_one(args) -> RunRecord:
    seed, perturbation, eps, formulation, conc_name, horizon, settings_kwargs = args
    scenario = make_uturn_scenario(seed, perturbation)
    problem = scenario_problem(
        scenario, eps, formulation, ConcKind.parse(conc_name), horizon
    )
    settings = SolverSettings(**settings_kwargs)
    result = planner.solve(problem, settings)
    return RunRecord(
        seed=seed,
        eps=eps,
        formulation=formulation,
        status=result.status,
        converged=result.converged,
        cost=result.cost,
        solve_time_ms=result.solve_time_ms,
        min_clearance=min_clearance(result, problem),
        total_risk_bound=result.total_risk_bound,
    )


def batch_experiment(
    seeds: Sequence[int],
    eps_grid: Sequence[float],
    formulations: Sequence[str] = ("gmm", "truncated-gmm"),
    perturbation: float = 0.8,
    conc_kind: ConcKind = ConcKind.VP,
    horizon: int = 50,
    settings: SolverSettings | None = None,
    workers: int = 1,
    out_dir: str | Path | None = None,
) -> BatchMetrics:
    """Cross-product run over scenarios, risk levels, and formulations.

    Individual solve failures are recorded, never fatal.  With workers > 1
    the runs execute in separate processes; aggregation is a deterministic
    sequential reduce, so results do not depend on worker count.
    """
    settings = settings or SolverSettings()
    sk = settings.__dict__.copy()
    tasks = []
    for seed in seeds:
        for eps in eps_grid:
            for form in formulations:
                if form == "deterministic":
                    tasks.append((seed, perturbation, 0.0, form, conc_kind.value, horizon, sk))
                else:
                    tasks.append((seed, perturbation, float(eps), form, conc_kind.value, horizon, sk))
    records: list[RunRecord] = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for rec in pool.map(_run_one, tasks):
                records.append(rec)
    else:
        for task in tasks:
            try:
                records.append(_run_one(task))
            except Exception as exc:  # record, never abort the batch
                seed, _, eps, form = task[0], task[1], task[2], task[3]
                records.append(
                    RunRecord(seed, eps, form, f"error: {exc}", False, float("nan"),
                              0.0, float("nan"), float("nan"))
                )
    # Deterministic: deduplicate eps for deterministic runs, keep input order.
    metrics = BatchMetrics(
        records=records,
        eps_grid=tuple(float(e) for e in eps_grid),
        formulations=tuple(formulations),
    )
    metrics.aggregate()
    if out_dir is not None:
        out = Path(out_dir)
        (out / "runs").mkdir(parents=True, exist_ok=True)
        for i, rec in enumerate(
            sorted(records, key=lambda r: (r.seed, r.eps, r.formulation))
        ):
            with open(out / "runs" / f"run_{i:04d}.json", "w") as fh:
                json.dump(rec.to_json_dict(), fh, indent=2)
        (out / "aggregate.csv").write_text(metrics.to_csv())
        plots = out / "plots"
        plots.mkdir(exist_ok=True)
        emit_metric_plots(metrics, plots / "metrics.svg")
    return metrics


# -- plots -------------------------------------------------------------------------


def _ellipse_points(mean: np.ndarray, cov: np.ndarray, n_std: float = 2.0, n: int = 64):
    vals, vecs = np.linalg.eigh(cov)
    vals = np.maximum(vals, 0.0)
    angles = np.linspace(0.0, 2.0 * math.pi, n)
    circle = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    pts = circle * (n_std * np.sqrt(vals))[None, :]
    return pts @ vecs.T + mean[None, :]


def emit_trajectory_plot(
    result: PlanResult,
    problem: PlanProblem,
    dest: str | Path,
    extra_results: Sequence[tuple[str, PlanResult]] = (),
) -> None:
    """Trajectory overlay with the reference path and 2-sigma prediction ellipses."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(8, 6))
    s_grid = np.linspace(0.0, problem.path.length, 400)
    xr, yr = mpcc.path_point(problem.path, s_grid)
    ax.plot(xr, yr, "k--", lw=1, label="reference path")
    ax.plot(result.states[:, 0], result.states[:, 1], "b.-", ms=3, lw=1.2, label="plan")
    for name, other in extra_results:
        ax.plot(other.states[:, 0], other.states[:, 1], ".-", ms=3, lw=1.2, label=name)
    for ch in problem.channels:
        pred = ch.prediction
        for t in range(0, problem.horizon, max(1, problem.horizon // 10)):
            for i in range(pred.n_components):
                table = pred.tables[t][i]
                pts = _ellipse_points(table.mean(), table.central_second_moment())
                ax.plot(pts[:, 0], pts[:, 1], "r-", lw=0.6, alpha=0.5)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal")
    ax.legend(loc="best", fontsize=8)
    ax.set_title(f"status={result.status}  cost={result.cost:.3f}")
    fig.savefig(dest, format="svg")
    plt.close(fig)


def emit_metric_plots(metrics: BatchMetrics, dest: str | Path) -> None:
    """Success-rate and cost-ratio curves over the risk-level grid."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    eps = list(metrics.eps_grid)
    for form, rates in metrics.success_rate.items():
        ax1.plot(eps, [rates[e] for e in eps], "o-", label=form)
    ax1.set_xscale("log")
    ax1.set_xlabel("per-step epsilon")
    ax1.set_ylabel("success rate")
    ax1.set_ylim(-0.05, 1.05)
    if metrics.success_rate:
        ax1.legend(fontsize=8)
    if metrics.mean_cost_ratio:
        ax2.plot(eps, [metrics.mean_cost_ratio.get(e, float("nan")) for e in eps], "s-")
        ax2.axhline(1.0, color="k", lw=0.5)
    ax2.set_xscale("log")
    ax2.set_xlabel("per-step epsilon")
    ax2.set_ylabel("mean cost ratio (truncated / gmm)")
    fig.tight_layout()
    fig.savefig(dest, format="svg")
    plt.close(fig)
