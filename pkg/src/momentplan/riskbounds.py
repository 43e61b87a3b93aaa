"""Concentration-inequality tail bounds, mixture bounding, and risk allocation.

Given the mean and variance of a scalar constraint random variable X, each
supported inequality bounds P(X <= 0):

    Cantelli:  sigma^2 / (sigma^2 + mu^2)          needs finite mean/variance
    VP:        (4/9) * sigma^2 / (sigma^2 + mu^2)  additionally unimodal X
    Gauss:     (2/9) * sigma^2 / mu^2              additionally symmetric X

Each comes with a validity functional (conc_star); the bound may only be
used where conc_star <= 0, which corresponds to bound values below 1, 1/6
and 1/2 respectively.  Unimodality/symmetry are caller-declared assumptions
(they are not decidable from moments); the validation harness checks them
empirically instead.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "ConcKind",
    "RiskBound",
    "RiskAllocation",
    "BoundError",
    "UndefinedBoundError",
    "HypothesisViolationError",
    "conc",
    "conc_boundary_value",
    "mixture_bound",
    "aggregate_boole",
    "uniform_allocation",
]

# Validity margin kappa per inequality: conc_star = -mu + kappa * sigma.
_VP_KAPPA = math.sqrt(5.0 / 3.0)
_GAUSS_KAPPA = 2.0 / 3.0


class ConcKind(enum.Enum):
    CANTELLI = "cantelli"
    VP = "vp"
    GAUSS = "gauss"

    @staticmethod
    def parse(text: str) -> "ConcKind":
        try:
            return ConcKind(text.strip().lower())
        except ValueError:
            raise BoundError(
                f"unknown concentration kind {text!r}; expected cantelli, vp or gauss"
            ) from None


class BoundError(ValueError):
    """Base error for risk-bound computations."""


class UndefinedBoundError(BoundError):
    """The requested inequality is undefined for the given moments."""


class HypothesisViolationError(BoundError):
    """A component fails the conc_star <= 0 requirement of mixture bounding."""

    def __init__(self, indices: Sequence[int]):
        self.indices = tuple(indices)
        super().__init__(
            f"components {self.indices} violate the validity condition conc_star <= 0"
        )


@dataclass(frozen=True)
class RiskBound:
    """An upper bound on P(X <= 0) plus its validity functional.

    value is clamped into [0, 1]; the bound is usable only when valid
    (conc_star <= 0).
    """

    value: float
    conc_star: float
    valid: bool

    def __post_init__(self):
        if not (0.0 <= self.value <= 1.0):
            raise BoundError(f"bound value {self.value} outside [0, 1]")
        if self.valid != (self.conc_star <= 0.0):
            raise BoundError("valid flag must equal (conc_star <= 0)")


def conc(mean: float, variance: float, kind: ConcKind) -> RiskBound:
    """Tail bound on P(X <= 0) from the mean and variance of X.

    A negative mean under Cantelli only supports a lower bound on the
    probability, which the planner cannot use; this is reported as an
    invalid RiskBound (conc_star > 0) rather than a value.
    """
    mu = float(mean)
    var = float(variance)
    if var < 0.0:
        raise BoundError(f"variance must be nonnegative, got {var}")
    sigma = math.sqrt(var)
    if kind is ConcKind.CANTELLI:
        star = -mu
        denom = var + mu * mu
        value = 1.0 if denom == 0.0 else var / denom
    elif kind is ConcKind.VP:
        star = -mu + _VP_KAPPA * sigma
        denom = var + mu * mu
        value = 4.0 / 9.0 if denom == 0.0 else (4.0 / 9.0) * var / denom
    elif kind is ConcKind.GAUSS:
        if mu == 0.0:
            raise UndefinedBoundError("Gauss bound is undefined at mean zero")
        star = -mu + _GAUSS_KAPPA * sigma
        value = (2.0 / 9.0) * var / (mu * mu)
    else:  # pragma: no cover - enum is closed
        raise BoundError(f"unknown kind {kind}")
    value = min(max(value, 0.0), 1.0)
    if mu < 0.0 and kind is ConcKind.CANTELLI:
        # Lower branch of the one-tailed inequality: not an upper bound.
        return RiskBound(value, star, False)
    return RiskBound(value, star, star <= 0.0)


def conc_boundary_value(kind: ConcKind) -> float:
    """The bound value exactly at the validity boundary conc_star = 0."""
    if kind is ConcKind.CANTELLI:
        return 1.0
    if kind is ConcKind.VP:
        return 1.0 / 6.0
    return 0.5


def mixture_bound(
    components: Sequence[tuple[float, float, float]], kind: ConcKind
) -> RiskBound:
    """Component-wise bound for a mixture: sum of weighted component bounds.

    components lists (weight, mean, variance) triples.  Every component must
    satisfy conc_star <= 0; offenders are reported by index.  The result's
    conc_star is the worst component's, so valid reflects the hypothesis.
    """
    if not components:
        raise BoundError("mixture must have at least one component")
    weights = [w for w, _, _ in components]
    if any(w < 0 for w in weights):
        raise BoundError(f"negative mixture weight in {weights}")
    if abs(sum(weights) - 1.0) > 1e-9:
        raise BoundError(f"mixture weights sum to {sum(weights)}, expected 1")
    bounds = [conc(m, v, kind) for _, m, v in components]
    offenders = [i for i, b in enumerate(bounds) if not b.valid]
    if offenders:
        raise HypothesisViolationError(offenders)
    value = min(sum(w * b.value for (w, _, _), b in zip(components, bounds)), 1.0)
    star = max(b.conc_star for b in bounds)
    return RiskBound(value, star, True)


def aggregate_boole(bounds: Sequence[RiskBound]) -> float:
    """Union-bound aggregation: sum of bound values, clamped at 1."""
    invalid = [i for i, b in enumerate(bounds) if not b.valid]
    if invalid:
        raise HypothesisViolationError(invalid)
    return min(sum(b.value for b in bounds), 1.0)


@dataclass(frozen=True)
class RiskAllocation:
    """Per-timestep, per-agent risk budget epsilon[t, i] summing to <= total.

    The total budget is named distinctly from traveled distance; both appear
    in the planner but are unrelated quantities.
    """

    epsilon: np.ndarray  # shape (T, n_agents)
    total_budget: float

    def __post_init__(self):
        eps = np.asarray(self.epsilon, dtype=float)
        if eps.ndim != 2:
            raise BoundError(f"allocation grid must be 2-D, got shape {eps.shape}")
        if np.any(eps < 0):
            raise BoundError("allocation entries must be nonnegative")
        if eps.sum() > self.total_budget + 1e-12:
            raise BoundError(
                f"allocation sum {eps.sum()} exceeds the total budget {self.total_budget}"
            )
        eps = eps.copy()
        eps.setflags(write=False)
        object.__setattr__(self, "epsilon", eps)

    @property
    def horizon(self) -> int:
        return self.epsilon.shape[0]

    @property
    def n_agents(self) -> int:
        return self.epsilon.shape[1]


def uniform_allocation(total_budget: float, horizon: int, n_agents: int) -> RiskAllocation:
    """Spread the budget uniformly: epsilon[t, i] = total / (T * n_agents)."""
    if not (0.0 < total_budget <= 1.0):
        raise BoundError(f"total budget must lie in (0, 1], got {total_budget}")
    if horizon < 1 or n_agents < 1:
        raise BoundError("horizon and agent count must be >= 1")
    eps = np.full((horizon, n_agents), total_budget / (horizon * n_agents))
    return RiskAllocation(eps, total_budget)
