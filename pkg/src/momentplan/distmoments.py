"""Numeric moment tables for the distribution families the planner consumes.

Providers cover multivariate Gaussians (exact recurrence), box-truncated
Gaussians (exact 1-D recurrence on diagonal covariances, tensor-product
Gauss-Legendre quadrature otherwise), mixtures (weighted sums), and
empirical samples.  Per-timestep predictions are built by linear
interpolation of endpoint mixtures, optionally box-truncated at a number
of standard deviations.

All positions and lengths are in meters.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.stats import norm

from .polyalg import Exponents

__all__ = [
    "DistributionError",
    "NonPsdCovarianceError",
    "NegligibleMassError",
    "QuadratureError",
    "MomentTable",
    "GaussianSpec",
    "TruncatedGaussianSpec",
    "GaussianMixture",
    "MixturePrediction",
    "all_multi_indices",
    "gaussian_moments",
    "truncated_gaussian_moments",
    "mixture_moments",
    "empirical_moments",
    "interpolate_prediction",
    "truncate_prediction",
    "load_prediction_spec",
    "sample_component",
]

PSD_TOL = 1e-9
SYM_TOL = 1e-12
MIN_BOX_MASS = 1e-12


class DistributionError(ValueError):
    """Base error for moment providers."""


class NonPsdCovarianceError(DistributionError):
    pass


class NegligibleMassError(DistributionError):
    pass


class QuadratureError(DistributionError):
    pass


def all_multi_indices(dim: int, order: int) -> list[Exponents]:
    """Every multi-index of total degree <= order, graded-lex sorted."""
    out: list[Exponents] = []
    for total in range(order + 1):
        for combo in itertools.product(range(total + 1), repeat=dim):
            if sum(combo) == total:
                out.append(combo)
    return out


@dataclass(frozen=True)
class MomentTable:
    """All moments of a random vector up to a total degree.

    entries maps each multi-index of total degree <= order to E[w^alpha];
    the zero index maps to exactly 1 and the second-moment matrix is
    positive semidefinite within PSD_TOL.
    """

    dimension: int
    order: int
    entries: Mapping[Exponents, float]

    def __post_init__(self):
        needed = all_multi_indices(self.dimension, self.order)
        missing = [a for a in needed if a not in self.entries]
        if missing:
            raise DistributionError(f"moment table missing entries, e.g. {missing[0]}")
        zero = (0,) * self.dimension
        if self.entries[zero] != 1.0:
            raise DistributionError(
                f"zero-index moment must be exactly 1, got {self.entries[zero]}"
            )
        if self.order >= 2:
            cov = self.central_second_moment()
            eigs = np.linalg.eigvalsh(cov)
            if eigs.min() < -PSD_TOL:
                raise NonPsdCovarianceError(
                    f"second central moment not PSD: eigenvalues {eigs}"
                )

    def mean(self) -> np.ndarray:
        e = np.zeros(self.dimension)
        for i in range(self.dimension):
            idx = tuple(1 if j == i else 0 for j in range(self.dimension))
            e[i] = self.entries[idx]
        return e

    def central_second_moment(self) -> np.ndarray:
        """E[w w^T] - E[w] E[w]^T."""
        m = self.mean()
        cov = np.zeros((self.dimension, self.dimension))
        for i in range(self.dimension):
            for j in range(self.dimension):
                idx = [0] * self.dimension
                idx[i] += 1
                idx[j] += 1
                cov[i, j] = self.entries[tuple(idx)] - m[i] * m[j]
        return cov

    def lookup(self, alpha: Exponents) -> float:
        return self.entries[alpha]


@dataclass(frozen=True)
class GaussianSpec:
    """Planar Gaussian component: mean (m) and 2x2 covariance (m^2)."""

    mean: tuple[float, float]
    cov: tuple[tuple[float, float], tuple[float, float]]

    def __post_init__(self):
        c = np.asarray(self.cov, dtype=float)
        if c.shape != (2, 2):
            raise DistributionError(f"covariance must be 2x2, got shape {c.shape}")
        if abs(c[0, 1] - c[1, 0]) > SYM_TOL:
            raise DistributionError(f"covariance not symmetric within {SYM_TOL}: {c}")
        eigs = np.linalg.eigvalsh(0.5 * (c + c.T))
        if eigs.min() < -PSD_TOL:
            raise NonPsdCovarianceError(f"covariance has negative eigenvalue {eigs.min()}")

    @property
    def mean_array(self) -> np.ndarray:
        return np.asarray(self.mean, dtype=float)

    @property
    def cov_array(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.cov, dtype=float) + np.asarray(self.cov, dtype=float).T)

    @staticmethod
    def make(mean: Sequence[float], cov) -> "GaussianSpec":
        c = np.asarray(cov, dtype=float)
        return GaussianSpec(
            (float(mean[0]), float(mean[1])),
            ((c[0, 0], c[0, 1]), (c[1, 0], c[1, 1])),
        )


@dataclass(frozen=True)
class TruncatedGaussianSpec:
    """A planar Gaussian conditioned on an axis-aligned box."""

    base: GaussianSpec
    lower: tuple[float, float]
    upper: tuple[float, float]

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if not np.all(lo < hi):
            raise DistributionError(f"box lower {lo} must be strictly below upper {hi}")
        if self.box_mass() <= MIN_BOX_MASS:
            raise NegligibleMassError(
                f"box [{lo}, {hi}] has negligible probability under the base Gaussian"
            )

    def box_mass(self) -> float:
        """Probability of the box under the base Gaussian."""
        mu = self.base.mean_array
        cov = self.base.cov_array
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if abs(cov[0, 1]) <= SYM_TOL:
            mass = 1.0
            for i in range(2):
                s = math.sqrt(max(cov[i, i], 0.0))
                if s == 0.0:
                    mass *= 1.0 if lo[i] <= mu[i] <= hi[i] else 0.0
                else:
                    mass *= norm.cdf((hi[i] - mu[i]) / s) - norm.cdf((lo[i] - mu[i]) / s)
            return float(mass)
        mass, _ = _box_quadrature(mu, cov, lo, hi, nodes=80)
        return mass


# -- Gaussian moments (exact recurrence) --------------------------------------


def gaussian_moments(spec: GaussianSpec, order: int) -> MomentTable:
    """Exact moments of a multivariate Gaussian up to a total degree.

    Uses the recurrence E[X^a] = mu_i E[X^b] + sum_j Sigma_ij b_j E[X^(b-e_j)]
    with b = a - e_i, which reduces to the even/odd central-moment recurrence
    combined with mean shifts.
    """
    if order < 0:
        raise DistributionError("order must be >= 0")
    mu = spec.mean_array
    cov = spec.cov_array
    dim = mu.size
    entries: dict[Exponents, float] = {}
    for alpha in all_multi_indices(dim, order):
        if sum(alpha) == 0:
            entries[alpha] = 1.0
            continue
        i = next(k for k, e in enumerate(alpha) if e > 0)
        beta = list(alpha)
        beta[i] -= 1
        value = mu[i] * entries[tuple(beta)]
        for j in range(dim):
            if beta[j] > 0:
                gamma = list(beta)
                gamma[j] -= 1
                value += cov[i, j] * beta[j] * entries[tuple(gamma)]
        entries[alpha] = value
    return MomentTable(dim, order, entries)


# -- truncated Gaussian moments ------------------------------------------------


def _truncated_standard_moments(a: float, b: float, order: int) -> list[float]:
    """Moments of a standard normal conditioned on [a, b], exact recurrence."""
    mass = norm.cdf(b) - norm.cdf(a)
    if mass <= MIN_BOX_MASS:
        raise NegligibleMassError(f"standardized box [{a}, {b}] has negligible mass")
    pa, pb = norm.pdf(a), norm.pdf(b)
    m = [1.0] * (order + 1)
    for k in range(1, order + 1):
        boundary = (a ** (k - 1)) * pa - (b ** (k - 1)) * pb
        prev = m[k - 2] if k >= 2 else 0.0
        m[k] = (k - 1) * prev + boundary / mass
    return m


def _truncated_axis_moments(mu: float, sigma: float, lo: float, hi: float, order: int) -> list[float]:
    """Raw moments of N(mu, sigma^2) conditioned on [lo, hi]."""
    if sigma <= 0.0:
        if lo <= mu <= hi:
            return [mu ** k for k in range(order + 1)]
        raise NegligibleMassError("point mass outside the truncation box")
    z = _truncated_standard_moments((lo - mu) / sigma, (hi - mu) / sigma, order)
    out = []
    for k in range(order + 1):
        total = 0.0
        for j in range(k + 1):
            total += math.comb(k, j) * (mu ** (k - j)) * (sigma ** j) * z[j]
        out.append(total)
    return out


def _box_quadrature(
    mu: np.ndarray, cov: np.ndarray, lo: np.ndarray, hi: np.ndarray, nodes: int
) -> tuple[float, dict[Exponents, float]]:
    """Box mass and centered moments (about mu) by tensor Gauss-Legendre.

    Integrates in coordinates centered at the mean so the computed entries
    stay O(sigma^k); raw moments are recovered by a binomial shift.
    """
    xi, wi = leggauss(nodes)
    pts, wts = [], []
    for i in range(2):
        half = 0.5 * (hi[i] - lo[i] - 0.0)
        mid = 0.5 * (hi[i] + lo[i]) - mu[i]
        pts.append(mid + half * xi)
        wts.append(half * wi)
    t1 = pts[0][:, None]
    t2 = pts[1][None, :]
    w2d = wts[0][:, None] * wts[1][None, :]
    prec = np.linalg.inv(cov)
    det = np.linalg.det(cov)
    if det <= 0:
        raise NonPsdCovarianceError("covariance is singular; quadrature needs full rank")
    quad = (
        prec[0, 0] * t1 * t1 + 2.0 * prec[0, 1] * t1 * t2 + prec[1, 1] * t2 * t2
    )
    pdf = np.exp(-0.5 * quad) / (2.0 * math.pi * math.sqrt(det))
    wpdf = w2d * pdf
    mass = float(wpdf.sum())
    moments: dict[Exponents, float] = {}
    max_order = 8  # enough for order-4 tables after squaring is not needed here
    pow1 = [np.ones_like(t1)]
    pow2 = [np.ones_like(t2)]
    for k in range(1, max_order + 1):
        pow1.append(pow1[-1] * t1)
        pow2.append(pow2[-1] * t2)
    for a in range(max_order + 1):
        for b in range(max_order + 1 - a):
            moments[(a, b)] = float((wpdf * pow1[a] * pow2[b]).sum())
    return mass, moments


def truncated_gaussian_moments(spec: TruncatedGaussianSpec, order: int) -> MomentTable:
    """Moments of a box-truncated planar Gaussian up to a total degree.

    Diagonal covariances use the exact per-axis recurrence.  Correlated
    covariances use tensor-product Gauss-Legendre quadrature over the box,
    refined by node doubling until every centered entry moves by less than
    1e-8 (relative for entries above 1).
    """
    if order < 0:
        raise DistributionError("order must be >= 0")
    mu = spec.base.mean_array
    cov = spec.base.cov_array
    lo = np.asarray(spec.lower, dtype=float)
    hi = np.asarray(spec.upper, dtype=float)
    dim = 2
    indices = all_multi_indices(dim, order)

    if abs(cov[0, 1]) <= SYM_TOL:
        ax = [
            _truncated_axis_moments(mu[i], math.sqrt(max(cov[i, i], 0.0)), lo[i], hi[i], order)
            for i in range(dim)
        ]
        entries = {alpha: ax[0][alpha[0]] * ax[1][alpha[1]] for alpha in indices}
        return MomentTable(dim, order, entries)

    nodes = 40
    mass, centered = _box_quadrature(mu, cov, lo, hi, nodes)
    while True:
        mass2, centered2 = _box_quadrature(mu, cov, lo, hi, 2 * nodes)
        diffs = [
            abs(centered2[k] / mass2 - centered[k] / mass)
            / max(1.0, abs(centered2[k] / mass2))
            for k in centered
            if sum(k) <= order
        ]
        mass, centered = mass2, centered2
        nodes *= 2
        if max(diffs) < 1e-8:
            break
        if nodes > 320:
            raise QuadratureError(
                f"box quadrature did not converge below 1e-8 by {nodes} nodes"
            )
    if mass <= MIN_BOX_MASS:
        raise NegligibleMassError("box has negligible probability mass")
    cmom = {k: v / mass for k, v in centered.items()}
    entries: dict[Exponents, float] = {}
    for a, b in indices:
        total = 0.0
        for i in range(a + 1):
            for j in range(b + 1):
                total += (
                    math.comb(a, i)
                    * math.comb(b, j)
                    * (mu[0] ** (a - i))
                    * (mu[1] ** (b - j))
                    * cmom[(i, j)]
                )
        entries[(a, b)] = total
    entries[(0, 0)] = 1.0
    return MomentTable(dim, order, entries)


# -- mixtures and samples -------------------------------------------------------


def _validate_weights(weights: Sequence[float], tol: float = 1e-9) -> tuple[float, ...]:
    w = tuple(float(x) for x in weights)
    if not w:
        raise DistributionError("mixture needs at least one component")
    if any(x < 0 for x in w):
        raise DistributionError(f"negative mixture weight in {w}")
    if abs(sum(w) - 1.0) > tol:
        raise DistributionError(f"mixture weights sum to {sum(w)}, expected 1")
    return w


def mixture_moments(weights: Sequence[float], component_tables: Sequence[MomentTable]) -> MomentTable:
    """Entrywise weighted sum of component tables (moments of the mixture)."""
    w = _validate_weights(weights)
    if len(w) != len(component_tables):
        raise DistributionError("one weight per component table required")
    dim = component_tables[0].dimension
    order = component_tables[0].order
    for t in component_tables:
        if t.dimension != dim or t.order != order:
            raise DistributionError(
                f"component tables disagree on shape: ({t.dimension},{t.order}) vs ({dim},{order})"
            )
    entries = {
        alpha: sum(wi * t.entries[alpha] for wi, t in zip(w, component_tables))
        for alpha in all_multi_indices(dim, order)
    }
    entries[(0,) * dim] = 1.0
    return MomentTable(dim, order, entries)


def empirical_moments(samples: np.ndarray, order: int) -> MomentTable:
    """Sample-average moments of 2-vector draws (needs at least 2 samples)."""
    pts = np.asarray(samples, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DistributionError(f"samples must be (n, 2), got shape {pts.shape}")
    if pts.shape[0] < 2:
        raise DistributionError("need at least 2 samples for empirical moments")
    powx = [np.ones(pts.shape[0])]
    powy = [np.ones(pts.shape[0])]
    for k in range(1, order + 1):
        powx.append(powx[-1] * pts[:, 0])
        powy.append(powy[-1] * pts[:, 1])
    entries = {
        (a, b): float(np.mean(powx[a] * powy[b]))
        for a, b in all_multi_indices(2, order)
    }
    entries[(0, 0)] = 1.0
    return MomentTable(2, order, entries)


# -- per-timestep predictions ---------------------------------------------------

PREDICTION_ORDER = 4  # the quadratic constraint's variance needs moments to order 4

ComponentSpec = GaussianSpec | TruncatedGaussianSpec


@dataclass(frozen=True)
class GaussianMixture:
    """A static Gaussian mixture: weights plus component specs."""

    weights: tuple[float, ...]
    components: tuple[GaussianSpec, ...]

    def __post_init__(self):
        _validate_weights(self.weights)
        if len(self.weights) != len(self.components):
            raise DistributionError("one weight per mixture component required")


@dataclass(frozen=True)
class MixturePrediction:
    """Per-timestep mixture moments for one agent over a horizon.

    tables[t][i] is the order->=4 moment table of component i at step t+1
    (steps are 1-based in the planner).  specs, when present, retain the
    generating distributions so validation code can draw samples.
    """

    weights: tuple[float, ...]
    tables: tuple[tuple[MomentTable, ...], ...]
    specs: tuple[tuple[ComponentSpec, ...], ...] | None = None

    def __post_init__(self):
        _validate_weights(self.weights)
        n = len(self.weights)
        if not self.tables:
            raise DistributionError("prediction must cover at least one timestep")
        for t, row in enumerate(self.tables):
            if len(row) != n:
                raise DistributionError(
                    f"timestep {t} has {len(row)} component tables, expected {n}"
                )
            for table in row:
                if table.order < PREDICTION_ORDER:
                    raise DistributionError(
                        f"component tables must have order >= {PREDICTION_ORDER}"
                    )
        if self.specs is not None and len(self.specs) != len(self.tables):
            raise DistributionError("specs and tables must cover the same horizon")

    @property
    def horizon(self) -> int:
        return len(self.tables)

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def mixture_table(self, t: int) -> MomentTable:
        """Aggregate mixture moments at 0-based step t."""
        return mixture_moments(self.weights, self.tables[t])

    def shifted(self, offsets: np.ndarray) -> "MixturePrediction":
        """Translate every component by offsets[t] (used for agent circles).

        Requires retained specs; tables are rebuilt from the shifted specs.
        """
        if self.specs is None:
            raise DistributionError("shifting a prediction requires retained specs")
        off = np.asarray(offsets, dtype=float)
        if off.shape != (self.horizon, 2):
            raise DistributionError(f"offsets must be ({self.horizon}, 2)")
        new_specs, new_tables = [], []
        for t in range(self.horizon):
            row_s, row_t = [], []
            for spec in self.specs[t]:
                if isinstance(spec, TruncatedGaussianSpec):
                    base = GaussianSpec.make(spec.base.mean_array + off[t], spec.base.cov_array)
                    s = TruncatedGaussianSpec(
                        base,
                        tuple(np.asarray(spec.lower) + off[t]),
                        tuple(np.asarray(spec.upper) + off[t]),
                    )
                    row_t.append(truncated_gaussian_moments(s, PREDICTION_ORDER))
                else:
                    s = GaussianSpec.make(spec.mean_array + off[t], spec.cov_array)
                    row_t.append(gaussian_moments(s, PREDICTION_ORDER))
                row_s.append(s)
            new_specs.append(tuple(row_s))
            new_tables.append(tuple(row_t))
        return MixturePrediction(self.weights, tuple(new_tables), tuple(new_specs))


def interpolate_prediction(start: GaussianMixture, end: GaussianMixture, steps: int) -> MixturePrediction:
    """Linear interpolation of endpoint mixtures over a horizon.

    At step t (1-based) each component's mean and covariance is the convex
    combination at fraction t/steps; entrywise combinations of PSD matrices
    stay PSD.  Weights must match at both endpoints.
    """
    if steps < 1:
        raise DistributionError("steps must be >= 1")
    if len(start.components) != len(end.components):
        raise DistributionError("endpoint mixtures must have the same component count")
    if any(abs(a - b) > 1e-12 for a, b in zip(start.weights, end.weights)):
        raise DistributionError("endpoint mixtures must agree on weights")
    specs, tables = [], []
    for t in range(1, steps + 1):
        frac = t / steps
        row_s, row_t = [], []
        for s0, s1 in zip(start.components, end.components):
            mean = (1 - frac) * s0.mean_array + frac * s1.mean_array
            cov = (1 - frac) * s0.cov_array + frac * s1.cov_array
            spec = GaussianSpec.make(mean, cov)
            row_s.append(spec)
            row_t.append(gaussian_moments(spec, PREDICTION_ORDER))
        specs.append(tuple(row_s))
        tables.append(tuple(row_t))
    return MixturePrediction(start.weights, tuple(tables), tuple(specs))


def truncate_prediction(pred: MixturePrediction, k: float) -> MixturePrediction:
    """Box-truncate every Gaussian component at mean +- k per-axis std devs."""
    if k <= 0:
        raise DistributionError("truncation width k must be positive")
    if pred.specs is None:
        raise DistributionError("truncation requires retained Gaussian specs")
    specs, tables = [], []
    for t in range(pred.horizon):
        row_s, row_t = [], []
        for spec in pred.specs[t]:
            if not isinstance(spec, GaussianSpec):
                raise DistributionError("can only truncate a Gaussian prediction")
            sd = np.sqrt(np.diag(spec.cov_array))
            tspec = TruncatedGaussianSpec(
                spec,
                tuple(spec.mean_array - k * sd),
                tuple(spec.mean_array + k * sd),
            )
            row_s.append(tspec)
            row_t.append(truncated_gaussian_moments(tspec, PREDICTION_ORDER))
        specs.append(tuple(row_s))
        tables.append(tuple(row_t))
    return MixturePrediction(pred.weights, tuple(tables), tuple(specs))


# -- prediction spec files -------------------------------------------------------


def _component_from_json(obj: dict) -> tuple[float, GaussianSpec, float | None]:
    try:
        weight = float(obj["weight"])
        mean = obj["mean"]
        cov = obj["cov"]
    except KeyError as e:
        raise DistributionError(f"prediction component missing key {e}") from None
    trunc_k = obj.get("trunc_k")
    return weight, GaussianSpec.make(mean, np.asarray(cov, dtype=float)), (
        float(trunc_k) if trunc_k is not None else None
    )


def load_prediction_spec(source: dict | str | Path) -> MixturePrediction:
    """Build a MixturePrediction from a JSON prediction file or parsed dict.

    Schema: {"steps": T, "start": [component, ...], "end": [component, ...]}
    where component = {"weight": w, "mean": [x, y], "cov": [[..],[..]],
    "trunc_k": k (optional)}.  trunc_k must match between endpoints and, when
    present, truncates that component at k standard deviations after
    interpolation.
    """
    if not isinstance(source, dict):
        with open(source) as fh:
            source = json.load(fh)
    try:
        steps = int(source["steps"])
        start_raw = source["start"]
        end_raw = source["end"]
    except KeyError as e:
        raise DistributionError(f"prediction spec missing key {e}") from None
    start = [_component_from_json(c) for c in start_raw]
    end = [_component_from_json(c) for c in end_raw]
    if len(start) != len(end):
        raise DistributionError("start and end must list the same components")
    for (w0, _, k0), (w1, _, k1) in zip(start, end):
        if abs(w0 - w1) > 1e-12:
            raise DistributionError("component weights must match between endpoints")
        if (k0 is None) != (k1 is None) or (k0 is not None and abs(k0 - k1) > 1e-12):
            raise DistributionError("component trunc_k must match between endpoints")
    weights = tuple(w for w, _, _ in start)
    mix_start = GaussianMixture(weights, tuple(s for _, s, _ in start))
    mix_end = GaussianMixture(weights, tuple(s for _, s, _ in end))
    pred = interpolate_prediction(mix_start, mix_end, steps)
    ks = [k for _, _, k in start]
    if all(k is None for k in ks):
        return pred
    # Truncate only the components that request it.
    specs, tables = [], []
    for t in range(pred.horizon):
        row_s, row_t = [], []
        for i, spec in enumerate(pred.specs[t]):
            if ks[i] is None:
                row_s.append(spec)
                row_t.append(pred.tables[t][i])
            else:
                sd = np.sqrt(np.diag(spec.cov_array))
                tspec = TruncatedGaussianSpec(
                    spec,
                    tuple(spec.mean_array - ks[i] * sd),
                    tuple(spec.mean_array + ks[i] * sd),
                )
                row_s.append(tspec)
                row_t.append(truncated_gaussian_moments(tspec, PREDICTION_ORDER))
        specs.append(tuple(row_s))
        tables.append(tuple(row_t))
    return MixturePrediction(pred.weights, tuple(tables), tuple(specs))


# -- sampling (validation support) ------------------------------------------------


def sample_component(spec: ComponentSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n samples from one component; truncation by exact rejection."""
    if isinstance(spec, GaussianSpec):
        return rng.multivariate_normal(spec.mean_array, spec.cov_array, size=n)
    lo = np.asarray(spec.lower)
    hi = np.asarray(spec.upper)
    out = np.empty((n, 2))
    filled = 0
    attempts = 0
    while filled < n:
        want = n - filled
        batch = rng.multivariate_normal(
            spec.base.mean_array, spec.base.cov_array, size=max(64, int(1.5 * want))
        )
        keep = batch[np.all((batch >= lo) & (batch <= hi), axis=1)]
        take = min(want, keep.shape[0])
        out[filled : filled + take] = keep[:take]
        filled += take
        attempts += batch.shape[0]
        if attempts > 1000 * n + 100000:
            raise NegligibleMassError("rejection sampling stalled; box mass too small")
    return out
