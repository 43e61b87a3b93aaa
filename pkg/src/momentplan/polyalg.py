"""Sparse multivariate polynomial algebra with an expectation rewriter.

A polynomial is a finite map from exponent tuples to float coefficients over
a fixed roster of named variables, each tagged random or deterministic:

    Polynomial  ~  {(2, 0): 1.0, (0, 2): 1.0}   over roster (w1, w2)

Applying the expectation operator to a polynomial yields a MomentExpression:
a linear combination of moment symbols E[w^alpha] whose coefficients are
polynomials in the deterministic variables alone.  Independence between
groups of random variables (a DependencyStructure) lets a joint moment
symbol factor into a product of per-group symbols.

Coefficients are double-precision floats; downstream consumers are numeric
bounds, so exact rational arithmetic is not needed.  Zero coefficients are
pruned exactly (no epsilon pruning).  Term orderings are graded
lexicographic throughout, which makes rendered output deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence, Union

__all__ = [
    "Exponents",
    "PolynomialError",
    "RosterMismatchError",
    "MissingMomentError",
    "MissingValueError",
    "VariableRoster",
    "Polynomial",
    "DependencyStructure",
    "MomentExpression",
    "poly_mul",
    "poly_pow",
    "substitute",
    "expectation",
    "mean_variance_expressions",
    "evaluate",
    "render",
]

# Exponent tuple: entry i is the exponent of roster variable i.
Exponents = tuple[int, ...]

# A moment key is a product of moment factors.  Each factor is a full-length
# exponent tuple over the random variables; with independence, factors are
# supported on disjoint blocks.  The empty key () denotes the constant 1.
MomentKey = tuple[Exponents, ...]


class PolynomialError(ValueError):
    """Base error for polynomial/moment-expression operations."""


class RosterMismatchError(PolynomialError):
    """Two rosters disagree on a shared variable's tag or shape."""


class MissingMomentError(PolynomialError):
    """A MomentTable lacks an entry required for evaluation."""

    def __init__(self, multi_index: Exponents):
        self.multi_index = multi_index
        super().__init__(f"moment table has no entry for multi-index {multi_index}")


class MissingValueError(PolynomialError):
    """A deterministic variable required for evaluation has no value."""

    def __init__(self, name: str):
        self.name = name
        super().__init__(f"no value supplied for deterministic variable {name!r}")


def grlex_key(exps: Exponents) -> tuple[int, Exponents]:
    """Graded lexicographic sort key: total degree first, then lex order."""
    return (sum(exps), exps)


@dataclass(frozen=True)
class VariableRoster:
    """Ordered variable identifiers, each tagged random or deterministic."""

    names: tuple[str, ...]
    random_flags: tuple[bool, ...]

    def __post_init__(self):
        if len(self.names) != len(self.random_flags):
            raise PolynomialError("names and random_flags must have equal length")
        if len(set(self.names)) != len(self.names):
            raise PolynomialError(f"duplicate variable names in roster {self.names}")

    @staticmethod
    def make(random: Sequence[str] = (), deterministic: Sequence[str] = ()) -> "VariableRoster":
        names = tuple(random) + tuple(deterministic)
        flags = (True,) * len(random) + (False,) * len(deterministic)
        return VariableRoster(names, flags)

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise PolynomialError(f"variable {name!r} not in roster {self.names}") from None

    @property
    def random_names(self) -> tuple[str, ...]:
        return tuple(n for n, r in zip(self.names, self.random_flags) if r)

    @property
    def deterministic_names(self) -> tuple[str, ...]:
        return tuple(n for n, r in zip(self.names, self.random_flags) if not r)


def union_roster(a: VariableRoster, b: VariableRoster) -> VariableRoster:
    """Merge two rosters; shared names must carry the same tag."""
    tags = dict(zip(a.names, a.random_flags))
    for name, flag in zip(b.names, b.random_flags):
        if name in tags:
            if tags[name] != flag:
                raise RosterMismatchError(
                    f"variable {name!r} tagged both random and deterministic"
                )
        else:
            tags[name] = flag
    names = a.names + tuple(n for n in b.names if n not in set(a.names))
    return VariableRoster(names, tuple(tags[n] for n in names))


class Polynomial:
    """Immutable sparse polynomial over a VariableRoster.

    Terms map exponent tuples to nonzero float coefficients.  All arithmetic
    returns new objects; instances are safe to share across threads.
    """

    __slots__ = ("roster", "terms")

    def __init__(self, roster: VariableRoster, terms: Mapping[Exponents, float]):
        clean: dict[Exponents, float] = {}
        width = len(roster)
        for exps, coeff in terms.items():
            exps = tuple(int(e) for e in exps)
            if len(exps) != width:
                raise PolynomialError(
                    f"exponent tuple {exps} does not match roster width {width}"
                )
            if any(e < 0 for e in exps):
                raise PolynomialError(f"negative exponent in {exps}")
            c = float(coeff)
            if c != 0.0:
                clean[exps] = c
        object.__setattr__(self, "roster", roster)
        object.__setattr__(self, "terms", clean)

    def __setattr__(self, *_):
        raise AttributeError("Polynomial is immutable")

    # -- constructors ------------------------------------------------------

    @staticmethod
    def zero(roster: VariableRoster) -> "Polynomial":
        return Polynomial(roster, {})

    @staticmethod
    def constant(roster: VariableRoster, value: float) -> "Polynomial":
        return Polynomial(roster, {(0,) * len(roster): value})

    @staticmethod
    def variable(roster: VariableRoster, name: str) -> "Polynomial":
        exps = [0] * len(roster)
        exps[roster.index(name)] = 1
        return Polynomial(roster, {tuple(exps): 1.0})

    # -- basic queries -----------------------------------------------------

    @property
    def degree(self) -> int:
        """Total degree; the zero polynomial has degree 0."""
        return max((sum(e) for e in self.terms), default=0)

    def is_zero(self) -> bool:
        return not self.terms

    def constant_value(self) -> float | None:
        """The value if this polynomial is constant, else None."""
        if not self.terms:
            return 0.0
        if len(self.terms) == 1:
            (exps, coeff), = self.terms.items()
            if sum(exps) == 0:
                return coeff
        return None

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Polynomial)
            and self.roster == other.roster
            and self.terms == other.terms
        )

    def __hash__(self):
        return hash((self.roster, frozenset(self.terms.items())))

    def __repr__(self) -> str:
        return f"Polynomial({render_polynomial(self, 'plain')!r})"

    # -- arithmetic --------------------------------------------------------

    def with_roster(self, roster: VariableRoster) -> "Polynomial":
        """Re-express over a superset roster (zero-extension of exponents)."""
        if roster == self.roster:
            return self
        positions = [roster.index(n) for n in self.roster.names]
        for n in self.roster.names:
            if roster.random_flags[roster.index(n)] != self.roster.random_flags[self.roster.index(n)]:
                raise RosterMismatchError(f"tag of {n!r} differs between rosters")
        width = len(roster)
        terms: dict[Exponents, float] = {}
        for exps, coeff in self.terms.items():
            new = [0] * width
            for pos, e in zip(positions, exps):
                new[pos] = e
            terms[tuple(new)] = terms.get(tuple(new), 0.0) + coeff
        return Polynomial(roster, terms)

    def _coerce(self, other) -> tuple["Polynomial", "Polynomial"]:
        if isinstance(other, (int, float)):
            other = Polynomial.constant(self.roster, float(other))
        if not isinstance(other, Polynomial):
            return NotImplemented, NotImplemented
        if other.roster == self.roster:
            return self, other
        roster = union_roster(self.roster, other.roster)
        return self.with_roster(roster), other.with_roster(roster)

    def __add__(self, other):
        a, b = self._coerce(other)
        if a is NotImplemented:
            return NotImplemented
        terms = dict(a.terms)
        for exps, coeff in b.terms.items():
            terms[exps] = terms.get(exps, 0.0) + coeff
        return Polynomial(a.roster, terms)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial(self.roster, {e: -c for e, c in self.terms.items()})

    def __sub__(self, other):
        a, b = self._coerce(other)
        if a is NotImplemented:
            return NotImplemented
        return a + (-b)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return Polynomial(
                self.roster, {e: c * float(other) for e, c in self.terms.items()}
            )
        a, b = self._coerce(other)
        if a is NotImplemented:
            return NotImplemented
        terms: dict[Exponents, float] = {}
        for ea, ca in a.terms.items():
            for eb, cb in b.terms.items():
                key = tuple(x + y for x, y in zip(ea, eb))
                terms[key] = terms.get(key, 0.0) + ca * cb
        return Polynomial(a.roster, terms)

    __rmul__ = __mul__

    def __pow__(self, m: int):
        if not isinstance(m, int) or m < 0:
            raise PolynomialError(f"polynomial power must be a non-negative integer, got {m}")
        result = Polynomial.constant(self.roster, 1.0)
        base = self
        n = m
        while n:
            if n & 1:
                result = result * base
            base = base * base
            n >>= 1
        return result

    # -- calculus / composition --------------------------------------------

    def derivative(self, name: str) -> "Polynomial":
        """Partial derivative with respect to one roster variable."""
        i = self.roster.index(name)
        terms: dict[Exponents, float] = {}
        for exps, coeff in self.terms.items():
            if exps[i] == 0:
                continue
            new = list(exps)
            new[i] -= 1
            key = tuple(new)
            terms[key] = terms.get(key, 0.0) + coeff * exps[i]
        return Polynomial(self.roster, terms)

    def substitute(
        self, assignment: Mapping[str, Union["Polynomial", float]]
    ) -> "Polynomial":
        """Compose: replace assigned variables by polynomials or constants.

        Unassigned variables pass through unchanged.  The result roster is
        the union of the remaining variables and the assignment expressions'
        rosters; a shared name with conflicting random/deterministic tags
        raises RosterMismatchError.
        """
        for name in assignment:
            self.roster.index(name)  # raises if unknown
        remaining = tuple(n for n in self.roster.names if n not in assignment)
        flags = tuple(
            self.roster.random_flags[self.roster.index(n)] for n in remaining
        )
        roster = VariableRoster(remaining, flags)
        exprs: dict[str, Polynomial] = {}
        for name, value in assignment.items():
            if isinstance(value, (int, float)):
                exprs[name] = Polynomial.constant(roster, float(value))
            else:
                exprs[name] = value
                roster = union_roster(roster, value.roster)
        result = Polynomial.zero(roster)
        for exps, coeff in self.terms.items():
            term = Polynomial.constant(roster, coeff)
            for name, e in zip(self.roster.names, exps):
                if e == 0:
                    continue
                if name in exprs:
                    term = term * (exprs[name] ** e)
                else:
                    mono = Polynomial.variable(roster, name) ** e
                    term = term * mono
            result = result + term
        return result

    def evaluate(self, values: Mapping[str, float]) -> float:
        """Evaluate at a point; every variable must be covered."""
        total = 0.0
        for exps, coeff in self.terms.items():
            term = coeff
            for name, e in zip(self.roster.names, exps):
                if e == 0:
                    continue
                if name not in values:
                    raise MissingValueError(name)
                term *= float(values[name]) ** e
            total += term
        return total


def poly_mul(p: Polynomial, q: Polynomial) -> Polynomial:
    """Exact product; rosters are unified by zero-extension."""
    return p * q


def poly_pow(p: Polynomial, m: int) -> Polynomial:
    """Exact m-th power; p**0 is the constant 1."""
    return p ** m


def substitute(
    p: Polynomial, assignment: Mapping[str, Union[Polynomial, float]]
) -> Polynomial:
    """Compose p with the given variable assignment (see Polynomial.substitute)."""
    return p.substitute(assignment)


@dataclass(frozen=True)
class DependencyStructure:
    """Partition of the random variables into mutually independent blocks.

    Moments of variables in different blocks factor into products; variables
    within one block stay under a joint moment symbol.  A single block
    (the default) assumes full dependence, which is always correct.
    """

    blocks: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        seen: set[str] = set()
        for block in self.blocks:
            if not block:
                raise PolynomialError("empty independence block")
            for name in block:
                if name in seen:
                    raise PolynomialError(f"variable {name!r} appears in two blocks")
                seen.add(name)

    @staticmethod
    def joint(names: Sequence[str]) -> "DependencyStructure":
        """All variables in one block: fully dependent."""
        return DependencyStructure((tuple(names),) if names else ())

    @staticmethod
    def independent(names: Sequence[str]) -> "DependencyStructure":
        """Every variable its own block: full independence."""
        return DependencyStructure(tuple((n,) for n in names))

    def covered_names(self) -> frozenset[str]:
        return frozenset(n for block in self.blocks for n in block)


class MomentExpression:
    """A linear combination of moment symbols with polynomial coefficients.

    terms maps a MomentKey (product of moment factors over the random
    variables) to a coefficient Polynomial in the deterministic variables.
    Evaluating against a moment table and a deterministic assignment gives
    a finite real, linearly in the moment symbols.
    """

    __slots__ = ("random_names", "det_roster", "terms")

    def __init__(
        self,
        random_names: tuple[str, ...],
        det_roster: VariableRoster,
        terms: Mapping[MomentKey, Polynomial],
    ):
        clean = {k: p for k, p in terms.items() if not p.is_zero()}
        object.__setattr__(self, "random_names", tuple(random_names))
        object.__setattr__(self, "det_roster", det_roster)
        object.__setattr__(self, "terms", clean)

    def __setattr__(self, *_):
        raise AttributeError("MomentExpression is immutable")

    def moment_indices(self) -> set[Exponents]:
        """All moment multi-indices the expression refers to."""
        return {factor for key in self.terms for factor in key}

    @property
    def max_moment_order(self) -> int:
        return max((sum(f) for f in self.moment_indices()), default=0)

    def evaluate(
        self,
        moments: Mapping[Exponents, float] | object,
        det_values: Mapping[str, float] | None = None,
    ) -> float:
        return evaluate(self, moments, det_values)

    def render(self, dialect: str = "plain") -> str:
        return render(self, dialect)

    def __repr__(self) -> str:
        return f"MomentExpression({self.render('plain')!r})"


def expectation(
    p: Polynomial, deps: DependencyStructure | None = None
) -> MomentExpression:
    """Rewrite E[p] as a linear combination of moments of the random variables.

    Within each term the random monomial becomes a moment symbol; with an
    independence structure, the symbol factors into per-block moments
    (E[w1^2 w2^3] = E[w1^2]*E[w2^3] when w1 and w2 are independent blocks).
    A polynomial with no random variables comes back as a degenerate
    expression with a single constant moment key.
    """
    roster = p.roster
    random_names = roster.random_names
    det_names = roster.deterministic_names
    if deps is None:
        deps = DependencyStructure.joint(random_names)
    covered = deps.covered_names()
    if covered != frozenset(random_names):
        raise PolynomialError(
            f"dependency blocks {sorted(covered)} do not cover random variables "
            f"{sorted(random_names)}"
        )
    det_roster = VariableRoster.make(deterministic=det_names)
    rand_pos = [roster.index(n) for n in random_names]
    det_pos = [roster.index(n) for n in det_names]
    # Map each random-variable position (in random_names order) to its block id.
    block_of = {name: bi for bi, block in enumerate(deps.blocks) for name in block}

    terms: dict[MomentKey, dict[Exponents, float]] = {}
    for exps, coeff in p.terms.items():
        rand_exps = tuple(exps[i] for i in rand_pos)
        det_exps = tuple(exps[i] for i in det_pos)
        if sum(rand_exps) == 0:
            key: MomentKey = ()
        else:
            per_block: dict[int, list[int]] = {}
            for j, e in enumerate(rand_exps):
                if e == 0:
                    continue
                bi = block_of[random_names[j]]
                per_block.setdefault(bi, [0] * len(rand_exps))[j] = e
            factors = [tuple(v) for _, v in sorted(per_block.items())]
            key = tuple(sorted(factors, key=grlex_key))
        bucket = terms.setdefault(key, {})
        bucket[det_exps] = bucket.get(det_exps, 0.0) + coeff

    poly_terms = {
        key: Polynomial(det_roster, bucket) for key, bucket in terms.items()
    }
    return MomentExpression(random_names, det_roster, poly_terms)


def mean_variance_expressions(
    p: Polynomial, deps: DependencyStructure | None = None
) -> tuple[MomentExpression, MomentExpression]:
    """Expressions for E[p] and E[p^2]; variance downstream is E[p^2] - E[p]^2."""
    return expectation(p, deps), expectation(p * p, deps)


def evaluate(
    expr: MomentExpression,
    moments: Mapping[Exponents, float] | object,
    det_values: Mapping[str, float] | None = None,
) -> float:
    """Evaluate a MomentExpression against numeric moments and det values.

    `moments` is either a mapping from multi-index to moment value or any
    object exposing such a mapping as `.entries` (a MomentTable).  Raises
    MissingMomentError / MissingValueError with the offending key.
    """
    entries = getattr(moments, "entries", moments)
    det_values = det_values or {}
    total = 0.0
    for key, coeff_poly in expr.terms.items():
        factor = 1.0
        for multi_index in key:
            try:
                factor *= entries[multi_index]
            except KeyError:
                raise MissingMomentError(multi_index) from None
        total += factor * coeff_poly.evaluate(det_values)
    return total


# -- rendering ---------------------------------------------------------------

_DIALECTS = ("plain", "c")


def _format_coeff(c: float) -> str:
    # Integral coefficients render bare; everything else uses the shortest
    # representation that round-trips exactly (the render/evaluate contract).
    if c == int(c) and abs(c) < 1e16:
        return str(int(c))
    return repr(c)


def _moment_token(factor: Exponents, names: tuple[str, ...], dialect: str) -> str:
    parts = [(n, e) for n, e in zip(names, factor) if e > 0]
    if dialect == "c":
        return "E_" + "_x_".join(f"{n}_{e}" for n, e in parts)
    inner = "*".join(n if e == 1 else f"{n}^{e}" for n, e in parts)
    return f"E[{inner}]"


def _monomial_token(exps: Exponents, names: tuple[str, ...], dialect: str) -> str:
    parts = [(n, e) for n, e in zip(names, exps) if e > 0]
    if dialect == "c":
        return "*".join(_pow_c(n, e) for n, e in parts)
    return "*".join(n if e == 1 else f"{n}^{e}" for n, e in parts)


def _pow_c(name: str, e: int) -> str:
    return name if e == 1 else "*".join([name] * e)


def render_polynomial(p: Polynomial, dialect: str = "plain") -> str:
    """Deterministic text for a polynomial, graded-lex term order."""
    if dialect not in _DIALECTS:
        raise PolynomialError(f"unknown dialect {dialect!r}; expected one of {_DIALECTS}")
    if not p.terms:
        return "0"
    chunks = []
    for exps in sorted(p.terms, key=grlex_key):
        coeff = p.terms[exps]
        mono = _monomial_token(exps, p.roster.names, dialect)
        if not mono:
            chunks.append(_format_coeff(coeff))
        elif coeff == 1.0:
            chunks.append(mono)
        elif coeff == -1.0:
            chunks.append(f"-{mono}")
        else:
            chunks.append(f"{_format_coeff(coeff)}*{mono}")
    return " + ".join(chunks).replace("+ -", "- ")


def render(expr: MomentExpression, dialect: str = "plain") -> str:
    """Deterministic, parse-stable text for a MomentExpression.

    dialect "plain" gives plain-infix (E[w1^2*w2^3]); "c" gives c-like
    tokens (E_w1_2_x_w2_3) with powers expanded into products.
    """
    if dialect not in _DIALECTS:
        raise PolynomialError(f"unknown dialect {dialect!r}; expected one of {_DIALECTS}")
    if not expr.terms:
        return "0"

    def key_order(key: MomentKey):
        flat = tuple(e for factor in key for e in factor)
        return (sum(flat), key)

    chunks = []
    for key in sorted(expr.terms, key=key_order):
        coeff_poly = expr.terms[key]
        symbol = "*".join(
            _moment_token(f, expr.random_names, dialect) for f in key
        )
        const = coeff_poly.constant_value()
        if const is not None:
            if not symbol:
                chunks.append(_format_coeff(const))
            elif const == 1.0:
                chunks.append(symbol)
            elif const == -1.0:
                chunks.append(f"-{symbol}")
            else:
                chunks.append(f"{_format_coeff(const)}*{symbol}")
        else:
            body = render_polynomial(coeff_poly, dialect)
            if symbol:
                chunks.append(f"({body})*{symbol}")
            else:
                chunks.append(f"({body})")
    return " + ".join(chunks).replace("+ -", "- ")
