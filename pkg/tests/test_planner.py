"""Planner assembly, solve, and feasibility-check tests."""

import json
import math

import numpy as np
import pytest

from momentplan import distmoments as dm
from momentplan import harness, mpcc, planner, sqp
from momentplan.bodyframe import ellipsoid_from_geometry
from momentplan.mpcc import CostParams, EgoState
from momentplan.riskbounds import ConcKind, uniform_allocation


def straight_path(scale=80.0):
    return mpcc.arc_length_scale((0.0, scale, 0.0, 0.0), (0.0, 0.0, 0.0, 0.0))


def far_agent_prediction(horizon, y=60.0):
    cov = ((0.02, 0.0), (0.0, 0.02))
    mix = dm.GaussianMixture(
        (0.7, 0.3),
        (dm.GaussianSpec((10.0, y), cov), dm.GaussianSpec((20.0, y + 3), cov)),
    )
    return dm.interpolate_prediction(mix, mix, horizon)


def chance_problem(horizon=20, eps=5e-4, prediction=None, **kw):
    path = straight_path()
    pred = prediction or far_agent_prediction(horizon)
    ell = ellipsoid_from_geometry(2.4, 1.0, 1.1)
    alloc = uniform_allocation(eps * horizon, horizon, 1)
    return planner.PlanProblem(
        initial_state=EgoState(0, 0, 0, 7.0, 0, 0),
        path=path,
        channels=(planner.AgentChannel(pred, ell),),
        horizon=horizon,
        dt=0.1,
        allocation=alloc,
        conc_kind=ConcKind.VP,
        cost=CostParams(v_ref=7.0),
        **kw,
    )


class TestAssembly:
    def test_constraint_census_matches_spec_counts(self):
        # T = 50, one agent channel, 3 mixture components
        cov = ((0.02, 0.0), (0.0, 0.02))
        mix = dm.GaussianMixture(
            (0.5, 0.3, 0.2),
            tuple(dm.GaussianSpec((10.0 + k, 50.0), cov) for k in range(3)),
        )
        pred = dm.interpolate_prediction(mix, mix, 50)
        ell = ellipsoid_from_geometry(2.4, 1.0, 1.0)
        prob = planner.PlanProblem(
            initial_state=EgoState(0, 0, 0, 7.0, 0, 0),
            path=straight_path(),
            channels=(planner.AgentChannel(pred, ell),),
            horizon=50,
            allocation=uniform_allocation(0.025, 50, 1),
        )
        nlp = planner.assemble_nlp(prob)
        assert nlp.n_risk_rows == 50
        assert nlp.n_concstar_rows == 150
        assert nlp.n_dynamics_equalities == 49  # inter-state links
        assert nlp.n_initial_condition_equalities == 1
        assert nlp.n_eq == 50 * 6

    def test_no_agents_reduces_to_deterministic_mpcc(self):
        prob = planner.PlanProblem(
            initial_state=EgoState(0, 0, 0, 7.0, 0, 0), path=straight_path(), horizon=10
        )
        nlp = planner.assemble_nlp(prob)
        assert nlp.n_ineq == 0

    def test_point_mass_prediction_degenerates_to_exclusion(self):
        # zero-variance prediction: bound is 0 for positive constraint mean,
        # so the risk row goes slack and conc* becomes a hard exclusion
        horizon = 5
        cov = ((0.0, 0.0), (0.0, 0.0))
        mix = dm.GaussianMixture((1.0,), (dm.GaussianSpec((3.0, 40.0), cov),))
        pred = dm.interpolate_prediction(mix, mix, horizon)
        prob = chance_problem(horizon=horizon, prediction=pred, conc_kind=ConcKind.CANTELLI)
        nlp = planner.assemble_nlp(prob)
        states, controls = planner.initial_guess(prob)
        ev = nlp.evaluate(nlp.join(states, controls), False)
        risk_rows = ev.ineq[: nlp.n_risk_rows]
        star_rows = ev.ineq[nlp.n_risk_rows :]
        assert np.all(risk_rows < 0)  # bound identically zero, eps slack remains
        assert np.allclose(
            risk_rows, (0.0 - prob.allocation.epsilon[:, 0]) / planner.RISK_ROW_SCALE
        )
        assert np.all(star_rows < 0)  # -mean of Q(a)-1, agent far away

    def test_allocation_shape_enforced(self):
        with pytest.raises(planner.PlanError):
            chance_problem(horizon=20, allocation_override=True) if False else (
                planner.PlanProblem(
                    initial_state=EgoState(0, 0, 0, 7, 0, 0),
                    path=straight_path(),
                    channels=(
                        planner.AgentChannel(
                            far_agent_prediction(20), ellipsoid_from_geometry(2, 1, 1)
                        ),
                    ),
                    horizon=20,
                    allocation=uniform_allocation(0.01, 19, 1),
                )
            )

    def test_prediction_horizon_must_cover(self):
        with pytest.raises(planner.PlanError):
            planner.PlanProblem(
                initial_state=EgoState(0, 0, 0, 7, 0, 0),
                path=straight_path(),
                channels=(
                    planner.AgentChannel(
                        far_agent_prediction(10), ellipsoid_from_geometry(2, 1, 1)
                    ),
                ),
                horizon=20,
                allocation=uniform_allocation(0.01, 20, 1),
            )


class TestInitialGuess:
    def test_guess_satisfies_dynamics_exactly(self):
        prob = chance_problem(horizon=15)
        states, controls = planner.initial_guess(prob)
        nlp = planner.assemble_nlp(prob)
        ev = nlp.evaluate(nlp.join(states, controls), False)
        assert np.abs(ev.eq).max() < 1e-10

    def test_explicit_controls_rollout(self):
        prob = chance_problem(horizon=10)
        states, controls = planner.initial_guess(prob, controls=np.array([0.5, 0.0]))
        assert np.allclose(controls[:, 0], 0.5)
        assert states[-1, 3] > prob.initial_state.v  # accelerated

    def test_stationary_initial_state(self):
        prob = planner.PlanProblem(
            initial_state=EgoState(0, 0, 0, 0.0, 0, 0), path=straight_path(), horizon=8
        )
        states, controls = planner.initial_guess(prob, controls=np.zeros(2))
        assert np.allclose(states, states[0])


class TestGradients:
    def test_constraint_and_cost_gradients_match_fd(self):
        prob = chance_problem(horizon=6, prediction=far_agent_prediction(6, y=8.0))
        nlp_obj = planner.assemble_nlp(prob)
        nlp = nlp_obj.as_dense_nlp()
        rng = np.random.default_rng(0)
        states, controls = planner.initial_guess(prob)
        z0 = nlp_obj.join(states, controls)
        for _ in range(4):
            z = z0 + rng.uniform(-0.3, 0.3, z0.shape)
            z = np.clip(z, nlp.lb + 1e-3, np.minimum(nlp.ub, 1e6) + 0.0)
            ev = nlp.evaluate(z, True)
            fd_grad, fd_eq, fd_in = sqp.finite_difference_gradients(nlp, z)
            rel = np.abs(ev.gradient - fd_grad) / np.maximum(1.0, np.abs(fd_grad))
            assert rel.max() < 1e-4
            import scipy.sparse as sp

            eq_jac = sp.csr_matrix(
                (ev.eq_jac_values, nlp.eq_jac_structure), shape=(nlp.n_eq, nlp.n_vars)
            ).toarray()
            rel_eq = np.abs(eq_jac - fd_eq) / np.maximum(1.0, np.abs(fd_eq))
            assert rel_eq.max() < 1e-4
            in_jac = sp.csr_matrix(
                (ev.ineq_jac_values, nlp.ineq_jac_structure),
                shape=(nlp.n_ineq, nlp.n_vars),
            ).toarray()
            rel_in = np.abs(in_jac - fd_in) / np.maximum(1.0, np.abs(fd_in))
            assert rel_in.max() < 1e-4


class TestSolve:
    def test_straight_path_zero_cost_fixed_point(self):
        prob = planner.PlanProblem(
            initial_state=EgoState(0, 0, 0, 7.0, 0, 0),
            path=straight_path(),
            horizon=50,
            cost=CostParams(v_ref=7.0),
        )
        res = planner.solve(prob)
        assert res.converged
        assert res.cost <= 1e-6
        for t in range(50):
            dev, lag = mpcc.contouring_errors(EgoState.from_array(res.states[t]), prob.path)
            assert abs(dev) < 1e-4 and abs(lag) < 1e-4

    def test_far_agent_risk_constraints_slack(self):
        prob = chance_problem(horizon=20)
        res = planner.solve(prob)
        assert res.converged
        assert res.cost <= 1e-6
        assert np.all(res.risk_per_step <= prob.allocation.epsilon.sum(axis=1))
        assert res.total_risk_bound <= prob.allocation.total_budget

    def test_determinism(self):
        prob = chance_problem(horizon=20)
        r1 = planner.solve(prob)
        r2 = planner.solve(prob)
        assert np.array_equal(r1.states, r2.states)
        assert np.array_equal(r1.controls, r2.controls)
        assert r1.iterations == r2.iterations

    def test_converged_invariants(self):
        sc = harness.canonical_scenario()
        prob = harness.scenario_problem(sc, 0.0005, "gmm", horizon=50)
        res = planner.solve(prob)
        assert res.converged
        assert res.dynamics_residual <= 1e-6
        assert res.bound_violation <= 1e-6
        per_channel = res.risk_values.sum(axis=2)
        assert np.all(per_channel <= res.epsilon + 1e-9)
        assert np.all(res.conc_star <= 1e-9)
        rep = planner.check_feasibility(res, prob)
        assert rep.feasible

    def test_epsilon_monotonicity(self):
        sc = harness.canonical_scenario()
        costs = []
        for eps in (4e-4, 7e-4, 1.2e-3):
            prob = harness.scenario_problem(sc, eps, "truncated-gmm", horizon=50)
            res = planner.solve(prob)
            assert res.converged
            costs.append(res.cost)
        assert costs[0] >= costs[1] - 1e-6
        assert costs[1] >= costs[2] - 1e-6

    def test_boole_consistency(self):
        sc = harness.canonical_scenario()
        prob = harness.scenario_problem(sc, 0.0005, "gmm", horizon=50)
        res = planner.solve(prob)
        assert res.total_risk_bound == pytest.approx(res.risk_per_step.sum(), rel=1e-12)
        assert res.total_risk_bound <= prob.allocation.total_budget + 1e-9


class TestCheckFeasibility:
    def test_perturbed_trajectory_flagged(self):
        prob = chance_problem(horizon=15)
        res = planner.solve(prob)
        assert res.converged
        bad_states = res.states.copy()
        bad_states[7, 0] += 0.05
        bad = planner.PlanResult(**{**res.__dict__, "states": bad_states})
        rep = planner.check_feasibility(bad, prob)
        assert rep.dynamics_residual > 1e-3
        assert not rep.feasible

    def test_conc_star_violation_flagged(self):
        # drive the trajectory into the agent: validity condition breaks
        horizon = 8
        pred = far_agent_prediction(horizon, y=0.0)  # agent on the ego path
        prob = chance_problem(horizon=horizon, prediction=pred)
        states, controls = planner.initial_guess(prob)
        fake = planner.solve(chance_problem(horizon=horizon))  # shape template
        bad = planner.PlanResult(**{**fake.__dict__})
        bad.states = states
        bad.controls = controls
        rep = planner.check_feasibility(bad, prob)
        assert rep.conc_star_max > 0
        assert not rep.feasible


class TestSoftConstraints:
    def test_soft_mode_runs_without_hard_rows(self):
        prob = chance_problem(horizon=10)
        settings = planner.SolverSettings(soft_constraints=True)
        nlp = planner.assemble_nlp(prob, settings)
        assert nlp.n_ineq == 0
        res = planner.solve(prob, settings)
        assert res.cost <= 1e-6  # agent far away; penalty inactive


class TestProblemFiles:
    def test_load_problem_round_trip(self, tmp_path):
        path_file = tmp_path / "path.json"
        mpcc.save_path(straight_path(), path_file)
        pred_spec = {
            "steps": 20,
            "start": [
                {"weight": 1.0, "mean": [10, 60], "cov": [[0.02, 0], [0, 0.02]]}
            ],
            "end": [{"weight": 1.0, "mean": [10, 60], "cov": [[0.02, 0], [0, 0.02]]}],
        }
        pred_file = tmp_path / "pred.json"
        pred_file.write_text(json.dumps(pred_spec))
        problem = {
            "horizon": 20,
            "dt": 0.1,
            "initial_state": {"x": 0, "y": 0, "theta": 0, "v": 7},
            "path_file": "path.json",
            "agents": [{"prediction_file": "pred.json", "length": 2.2, "width": 2.2}],
            "per_step_epsilon": 0.0005,
            "conc": "vp",
        }
        prob_file = tmp_path / "problem.json"
        prob_file.write_text(json.dumps(problem))
        prob = planner.load_problem(prob_file)
        assert prob.horizon == 20
        assert prob.n_channels == 1
        assert prob.conc_kind is ConcKind.VP
        assert prob.allocation.epsilon[0, 0] == pytest.approx(0.0005)

    def test_unknown_keys_rejected(self, tmp_path):
        with pytest.raises(planner.PlanError):
            planner.load_problem({"horizont": 50}, base_dir=tmp_path)

    def test_multi_circle_agent_expansion(self):
        pred = far_agent_prediction(10)
        channels = planner.expand_agent(pred, 4.4, 2.2, 2.4, 1.0)
        assert len(channels) == 3
        # circle channels share the ellipsoid and differ by mean offsets
        m0 = channels[0].prediction.tables[0][0].mean()
        m1 = channels[1].prediction.tables[0][0].mean()
        assert np.linalg.norm(m0 - m1) == pytest.approx(1.1, abs=1e-6)


class TestResultSerialization:
    def test_json_and_csv(self, tmp_path):
        prob = chance_problem(horizon=10)
        res = planner.solve(prob)
        jpath = tmp_path / "result.json"
        cpath = tmp_path / "result.csv"
        res.save_json(jpath)
        res.save_csv(cpath)
        data = json.loads(jpath.read_text())
        assert data["status"] == "converged"
        assert len(data["states"]) == 10
        lines = cpath.read_text().strip().splitlines()
        assert lines[0] == "t,x,y,theta,v,delta,s_traveled,u_a,u_delta,risk_bound_t"
        assert len(lines) == 11
