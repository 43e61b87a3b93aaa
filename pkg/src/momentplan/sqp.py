"""Sequential quadratic programming for dense nonlinear programs.

The solver contract is a first-derivative NLP:

    minimize    f(z)
    subject to  c_eq(z) = 0,  c_in(z) <= 0,  lb <= z <= ub

supplied through a single combined evaluation callback (values, gradient,
and Jacobian values on a fixed sparsity structure).  The solver is SQP with
an l1 merit line search, a second-order correction step against the Maratos
effect, and a block-diagonal curvature model: either damped (Powell) BFGS
or a caller-supplied Hessian model re-evaluated at every iterate (e.g. a
Gauss-Newton model of a least-squares cost, which converges far better on
strongly curved tracking problems).  Quadratic subproblems go to OSQP,
set up once and updated in place across iterations.

Iteration order is fixed and nothing is randomized: identical inputs give
identical results.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import osqp
import scipy.sparse as sp

__all__ = [
    "NLPEval",
    "DenseNLP",
    "SQPConfig",
    "SQPResult",
    "solve_sqp",
    "finite_difference_gradients",
]

STATUS_CONVERGED = "converged"
STATUS_MAX_ITER = "max-iterations"
STATUS_INFEASIBLE = "infeasible"


@dataclass
class NLPEval:
    """One evaluation of the NLP at a point."""

    objective: float
    eq: np.ndarray
    ineq: np.ndarray
    gradient: np.ndarray | None = None
    eq_jac_values: np.ndarray | None = None
    ineq_jac_values: np.ndarray | None = None


@dataclass
class DenseNLP:
    """First-derivative NLP with fixed Jacobian sparsity.

    evaluate(z, with_derivatives) returns an NLPEval; Jacobian values align
    with the (rows, cols) structure arrays, which must not change between
    calls (entries may be numerically zero).  hessian_model, when given,
    returns per-block curvature matrices at a point and takes precedence
    over BFGS when the solver is configured to use it.
    """

    n_vars: int
    n_eq: int
    n_ineq: int
    lb: np.ndarray
    ub: np.ndarray
    eq_jac_structure: tuple[np.ndarray, np.ndarray]
    ineq_jac_structure: tuple[np.ndarray, np.ndarray]
    evaluate: Callable[[np.ndarray, bool], NLPEval]
    # Optional partition of variables for the block-diagonal Hessian; one
    # block covering everything recovers a dense BFGS.
    hessian_blocks: Sequence[slice] | None = None
    # hessian_model(z, eq_multipliers, ineq_multipliers) -> per-block PSD
    # curvature matrices (e.g. Gauss-Newton of the cost plus multiplier-
    # weighted constraint curvature).
    hessian_model: (
        Callable[[np.ndarray, np.ndarray, np.ndarray], list[np.ndarray]] | None
    ) = None


@dataclass
class SQPConfig:
    """Solver settings; defaults target the planner's problem scale."""

    max_iterations: int = 200
    kkt_tolerance: float = 1e-6
    qp_eps: float = 1e-8
    qp_max_iter: int = 8000
    hessian: str = "model"  # "model" when the NLP provides one, else "bfgs"
    merit_penalty_init: float = 1.0
    armijo_coeff: float = 1e-4
    min_step: float = 1e-12
    init_hessian_scale: float = 1.0
    # Infinity-norm trust region on the step, adapted to line-search outcomes;
    # tames the long-range steps the quadratic model proposes early on.
    trust_init: float = 5.0
    trust_max: float = 100.0
    trust_min: float = 0.2
    verbose: bool = False


@dataclass
class SQPResult:
    z: np.ndarray
    status: str
    iterations: int
    objective: float
    kkt_residual: float
    max_eq_violation: float
    max_ineq_violation: float
    eq_multipliers: np.ndarray
    ineq_multipliers: np.ndarray
    solve_time_ms: float
    message: str = ""


def _violation(ev: NLPEval) -> float:
    v = 0.0
    if ev.eq.size:
        v = float(np.abs(ev.eq).max())
    if ev.ineq.size:
        v = max(v, float(np.maximum(ev.ineq, 0.0).max()))
    return v


def _l1_infeasibility(ev: NLPEval) -> float:
    return float(np.abs(ev.eq).sum() + np.maximum(ev.ineq, 0.0).sum())


class _BlockBFGS:
    """Damped BFGS restricted to a fixed block-diagonal structure."""

    def __init__(self, blocks: Sequence[slice], n: int, scale: float):
        self.blocks = list(blocks)
        covered = np.zeros(n, dtype=bool)
        for b in self.blocks:
            covered[b] = True
        if not covered.all():
            raise ValueError("hessian blocks must cover every variable")
        self.mats = [np.eye(b.stop - b.start) * scale for b in self.blocks]

    def set_blocks(self, mats: Sequence[np.ndarray]) -> None:
        if len(mats) != len(self.mats):
            raise ValueError("wrong number of hessian blocks")
        self.mats = [np.array(m, dtype=float) for m in mats]

    def update(self, s: np.ndarray, y: np.ndarray) -> None:
        for b, mat in zip(self.blocks, self.mats):
            sb = s[b]
            yb = y[b]
            bs = mat @ sb
            sbs = float(sb @ bs)
            if sbs <= 1e-14:
                continue
            sy = float(sb @ yb)
            if sy < 0.2 * sbs:  # Powell damping keeps the update positive definite
                theta = 0.8 * sbs / (sbs - sy)
                yb = theta * yb + (1.0 - theta) * bs
                sy = float(sb @ yb)
            if sy <= 1e-14:
                continue
            mat -= np.outer(bs, bs) / sbs
            mat += np.outer(yb, yb) / sy

    def pattern_upper(self) -> sp.csc_matrix:
        return sp.triu(sp.block_diag(self.mats, format="csc"), format="csc")

    def values_upper(self) -> np.ndarray:
        """Upper-triangular csc data, matching pattern_upper()'s layout."""
        chunks = []
        for mat in self.mats:
            for j in range(mat.shape[0]):
                chunks.append(mat[: j + 1, j])
        return np.concatenate(chunks)


def solve_sqp(
    nlp: DenseNLP,
    z0: np.ndarray,
    config: SQPConfig | None = None,
    initial_hessian: Sequence[np.ndarray] | None = None,
) -> SQPResult:
    """Solve a DenseNLP from a starting point.

    Returns the best iterate seen (feasible ones ranked by objective) with a
    status of converged, max-iterations, or infeasible (the quadratic
    subproblem could not be restored to feasibility).
    """
    cfg = config or SQPConfig()
    t_start = time.perf_counter()
    n = nlp.n_vars
    lb = np.asarray(nlp.lb, dtype=float)
    ub = np.asarray(nlp.ub, dtype=float)
    z = np.clip(np.asarray(z0, dtype=float), lb, ub)

    blocks = list(nlp.hessian_blocks) if nlp.hessian_blocks else [slice(0, n)]
    curv = _BlockBFGS(blocks, n, cfg.init_hessian_scale)
    use_model = cfg.hessian == "model" and nlp.hessian_model is not None
    lam = np.zeros(nlp.n_eq)
    mu = np.zeros(nlp.n_ineq)
    if initial_hessian is not None:
        curv.set_blocks(initial_hessian)
    elif use_model:
        curv.set_blocks(nlp.hessian_model(z, lam, mu))

    eq_rows, eq_cols = nlp.eq_jac_structure
    in_rows, in_cols = nlp.ineq_jac_structure
    m_eq, m_in = nlp.n_eq, nlp.n_ineq

    # Fixed OSQP constraint pattern: [eq jac; ineq jac; identity bounds].
    a_rows = np.concatenate([eq_rows, in_rows + m_eq, np.arange(n) + m_eq + m_in])
    a_cols = np.concatenate([eq_cols, in_cols, np.arange(n)])
    ones = np.ones(a_rows.size)
    a_pattern = sp.csc_matrix((ones, (a_rows, a_cols)), shape=(m_eq + m_in + n, n))
    perm = sp.csc_matrix(
        (np.arange(a_rows.size) + 1.0, (a_rows, a_cols)), shape=a_pattern.shape
    )
    if perm.nnz != a_rows.size:
        raise ValueError("duplicate entries in Jacobian structure")
    # perm.data[slot] holds (triplet index + 1) of the triplet stored there.
    triplet_of_slot = perm.data.astype(np.int64) - 1

    def fill_a(ev: NLPEval) -> np.ndarray:
        trip = np.concatenate([ev.eq_jac_values, ev.ineq_jac_values, np.ones(n)])
        return trip[triplet_of_slot]

    def make_a(ev: NLPEval) -> sp.csc_matrix:
        return sp.csc_matrix(
            (fill_a(ev), a_pattern.indices, a_pattern.indptr), shape=a_pattern.shape
        )

    ev = nlp.evaluate(z, True)

    def better(cand: NLPEval, incumbent: NLPEval) -> bool:
        cv, iv = _violation(cand), _violation(incumbent)
        tol = cfg.kkt_tolerance
        if (cv <= tol) and (iv <= tol):
            return cand.objective < incumbent.objective
        return cv < iv

    best = (z.copy(), ev)
    nu = cfg.merit_penalty_init
    qp = None
    kkt_residual = np.inf
    status = STATUS_MAX_ITER
    message = "iteration limit reached"
    iterations = 0
    stall = 0

    trust = cfg.trust_init
    for it in range(cfg.max_iterations):
        iterations = it + 1
        grad = ev.gradient
        a_mat = make_a(ev)

        def qp_bounds(radius: float) -> tuple[np.ndarray, np.ndarray]:
            step_lo = np.maximum(lb - z, -radius)
            step_hi = np.minimum(ub - z, radius)
            l_v = np.concatenate([-ev.eq, np.full(m_in, -np.inf), step_lo])
            u_v = np.concatenate([-ev.eq, -ev.ineq, step_hi])
            return l_v, u_v

        l_vec, u_vec = qp_bounds(trust)
        p_data = curv.values_upper()
        if qp is None:
            p_mat = curv.pattern_upper()
            qp = osqp.OSQP()
            qp.setup(
                P=p_mat,
                q=grad,
                A=a_mat,
                l=l_vec,
                u=u_vec,
                verbose=False,
                eps_abs=cfg.qp_eps,
                eps_rel=cfg.qp_eps,
                max_iter=cfg.qp_max_iter,
                polish=True,
            )
        else:
            qp.update(q=grad, l=l_vec, u=u_vec, Px=p_data, Ax=a_mat.data)

        res = qp.solve()

        def qp_bad(r) -> bool:
            return (
                "infeasible" in r.info.status
                or r.x is None
                or bool(np.any(~np.isfinite(r.x)))
            )

        if qp_bad(res):
            # First widen the trust region, then ask only for a partial
            # reduction of the violation.
            solved = False
            radius = trust
            while radius < cfg.trust_max and not solved:
                radius = min(2.0 * radius, cfg.trust_max)
                l_r, u_r = qp_bounds(radius)
                qp.update(l=l_r, u=u_r)
                res = qp.solve()
                solved = not qp_bad(res)
            for kappa in (0.5, 0.2, 0.05):
                if solved:
                    break
                step_lo = np.maximum(lb - z, -cfg.trust_max)
                step_hi = np.minimum(ub - z, cfg.trust_max)
                l_r = np.concatenate([-kappa * ev.eq, np.full(m_in, -np.inf), step_lo])
                u_r = np.concatenate(
                    [-kappa * ev.eq, -ev.ineq + (1 - kappa) * np.maximum(ev.ineq, 0.0), step_hi]
                )
                qp.update(l=l_r, u=u_r)
                res = qp.solve()
                solved = not qp_bad(res)
            if not solved:
                status = STATUS_INFEASIBLE
                message = f"QP restoration failed ({res.info.status})"
                break

        d = res.x
        y = res.y if res.y is not None else np.zeros(m_eq + m_in + n)
        lam = y[:m_eq]
        mu = np.maximum(y[m_eq : m_eq + m_in], 0.0)
        bound_mult = y[m_eq + m_in :]

        # KKT residuals at the current iterate with the QP multipliers.
        r = grad.copy()
        if m_eq:
            r += a_mat[:m_eq].T @ lam
        if m_in:
            r += a_mat[m_eq : m_eq + m_in].T @ mu
        r += bound_mult
        kkt_residual = float(np.abs(r).max()) if r.size else 0.0
        feas = _violation(ev)
        grad_scale = 1.0 + float(np.abs(grad).max())
        step_scale = 1.0 + float(np.abs(z).max())
        if feas <= cfg.kkt_tolerance and (
            kkt_residual <= cfg.kkt_tolerance * grad_scale
            or float(np.abs(d).max()) <= cfg.kkt_tolerance * step_scale
        ):
            status = STATUS_CONVERGED
            message = "KKT conditions satisfied"
            break

        # l1 merit with penalty dominated by the current multipliers.
        nu = max(nu, 1.2 * max(np.abs(lam).max(initial=0.0), mu.max(initial=0.0)) + 1e-3)
        infeas0 = _l1_infeasibility(ev)
        phi0 = ev.objective + nu * infeas0
        descent = float(grad @ d) - nu * infeas0

        def merit(cand: NLPEval) -> float:
            return cand.objective + nu * _l1_infeasibility(cand)

        accepted = None
        ev_full = nlp.evaluate(z + d, False)
        if np.isfinite(ev_full.objective) and merit(ev_full) <= phi0 + cfg.armijo_coeff * min(
            descent, 0.0
        ):
            accepted = (z + d, ev_full, 1.0)
        else:
            # Second-order correction: re-center the constraints at the trial
            # point; counters the Maratos effect on curved constraint surfaces.
            soc = _second_order_correction(nlp, a_mat, m_eq, m_in, ev_full)
            if soc is not None:
                trial = z + d + soc
                np.clip(trial, lb, ub, out=trial)
                ev_soc = nlp.evaluate(trial, False)
                if np.isfinite(ev_soc.objective) and merit(ev_soc) <= phi0 + cfg.armijo_coeff * min(
                    descent, 0.0
                ):
                    accepted = (trial, ev_soc, 1.0)
        if accepted is None:
            alpha = 0.5
            while alpha >= cfg.min_step:
                trial = z + alpha * d
                ev_t = nlp.evaluate(trial, False)
                if np.isfinite(ev_t.objective) and merit(ev_t) <= phi0 + cfg.armijo_coeff * alpha * min(
                    descent, 0.0
                ):
                    accepted = (trial, ev_t, alpha)
                    break
                alpha *= 0.5
        if accepted is None:
            stall += 1
            trust = max(0.25 * trust, cfg.trust_min)
            if stall >= 3:
                status = STATUS_MAX_ITER
                message = "line search could not make progress"
                break
            nu *= 10.0  # penalty kick before giving up
            continue
        stall = 0

        z_new, _, alpha = accepted
        if alpha >= 1.0:
            trust = min(1.6 * trust, cfg.trust_max)
        elif alpha <= 0.25:
            trust = max(0.5 * trust, cfg.trust_min)
        if use_model:
            z = z_new
            ev = nlp.evaluate(z, True)
            curv.set_blocks(nlp.hessian_model(z, lam, mu))
        else:
            grad_l_old = grad.copy()
            if m_eq:
                grad_l_old += a_mat[:m_eq].T @ lam
            if m_in:
                grad_l_old += a_mat[m_eq : m_eq + m_in].T @ mu
            step = z_new - z
            z = z_new
            ev = nlp.evaluate(z, True)
            a_new = make_a(ev)
            grad_l_new = ev.gradient.copy()
            if m_eq:
                grad_l_new += a_new[:m_eq].T @ lam
            if m_in:
                grad_l_new += a_new[m_eq : m_eq + m_in].T @ mu
            curv.update(step, grad_l_new - grad_l_old)

        if better(ev, best[1]):
            best = (z.copy(), ev)
        if cfg.verbose:
            print(
                f"  it {it:3d}  f={ev.objective:.6e}  viol={_violation(ev):.3e} "
                f"kkt={kkt_residual:.3e}  alpha={alpha:.2e}"
            )

    elapsed = (time.perf_counter() - t_start) * 1e3
    if status != STATUS_CONVERGED and better(best[1], ev):
        z, ev = best[0], best[1]
    max_eq = float(np.abs(ev.eq).max()) if ev.eq.size else 0.0
    max_in = float(np.maximum(ev.ineq, 0.0).max()) if ev.ineq.size else 0.0
    return SQPResult(
        z=z,
        status=status,
        iterations=iterations,
        objective=ev.objective,
        kkt_residual=kkt_residual,
        max_eq_violation=max_eq,
        max_ineq_violation=max_in,
        eq_multipliers=lam,
        ineq_multipliers=mu,
        solve_time_ms=elapsed,
        message=message,
    )


def _second_order_correction(
    nlp: DenseNLP, a_mat: sp.csc_matrix, m_eq: int, m_in: int, ev_trial: NLPEval
) -> np.ndarray | None:
    """Least-norm step restoring equalities (and violated inequalities) at
    the trial point, using the Jacobian from the current iterate."""
    rows = [a_mat[:m_eq]]
    resid = [ev_trial.eq]
    if m_in:
        violated = ev_trial.ineq > 0.0
        if violated.any():
            rows.append(a_mat[m_eq : m_eq + m_in][np.flatnonzero(violated)])
            resid.append(ev_trial.ineq[violated])
    jac = sp.vstack(rows).tocsr()
    rhs = -np.concatenate(resid)
    if rhs.size == 0:
        return None
    gram = (jac @ jac.T).toarray()
    gram[np.diag_indices_from(gram)] += 1e-10
    try:
        w = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError:
        return None
    return jac.T @ w


def finite_difference_gradients(
    nlp: DenseNLP, z: np.ndarray, step: float = 1e-6
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Central finite differences of objective and constraints at z.

    Returns (gradient, eq_jacobian, ineq_jacobian) as dense arrays; intended
    for verifying the analytic derivatives supplied by an NLP.
    """
    n = nlp.n_vars
    grad = np.zeros(n)
    eq_jac = np.zeros((nlp.n_eq, n))
    in_jac = np.zeros((nlp.n_ineq, n))
    for i in range(n):
        zp = z.copy()
        zp[i] += step
        zm = z.copy()
        zm[i] -= step
        ep = nlp.evaluate(zp, False)
        em = nlp.evaluate(zm, False)
        grad[i] = (ep.objective - em.objective) / (2 * step)
        if nlp.n_eq:
            eq_jac[:, i] = (ep.eq - em.eq) / (2 * step)
        if nlp.n_ineq:
            in_jac[:, i] = (ep.ineq - em.ineq) / (2 * step)
    return grad, eq_jac, in_jac
