"""Exact dimensional analysis: dimension vectors, pi-group bases, nondimensionalization.

All bookkeeping is done with `fractions.Fraction`; floats appear only when a
dataset is actually nondimensionalized.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import CanonicalizationFailed, DomainError

DEFAULT_BASE_DIMENSIONS = ("M", "L", "T", "Th")


def as_fraction(x) -> Fraction:
    """Convert ints, Fractions and 'p/q' strings to an exact rational."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    if isinstance(x, str):
        return Fraction(x)
    if isinstance(x, float):
        if x != int(x):
            raise ValueError(f"non-integer float {x!r} is not an exact exponent; use 'p/q'")
        return Fraction(int(x))
    raise TypeError(f"cannot interpret {x!r} as a rational exponent")


@dataclass(frozen=True)
class DimVector:
    """Exponents of the base dimensions for one physical quantity."""

    exponents: tuple[Fraction, ...]

    def __post_init__(self):
        object.__setattr__(self, "exponents", tuple(as_fraction(e) for e in self.exponents))

    @staticmethod
    def zero(k: int) -> "DimVector":
        return DimVector((Fraction(0),) * k)

    @staticmethod
    def from_map(spec: dict, base: tuple[str, ...] = DEFAULT_BASE_DIMENSIONS) -> "DimVector":
        """Build from e.g. ``{"L": 2, "T": -1}`` against an ordered base list."""
        unknown = set(spec) - set(base)
        if unknown:
            raise ValueError(f"unknown base dimensions {sorted(unknown)}; base is {base}")
        return DimVector(tuple(as_fraction(spec.get(b, 0)) for b in base))

    @property
    def is_zero(self) -> bool:
        return all(e == 0 for e in self.exponents)

    def __len__(self) -> int:
        return len(self.exponents)

    def __add__(self, other: "DimVector") -> "DimVector":
        return DimVector(tuple(a + b for a, b in zip(self.exponents, other.exponents, strict=True)))

    def __sub__(self, other: "DimVector") -> "DimVector":
        return DimVector(tuple(a - b for a, b in zip(self.exponents, other.exponents, strict=True)))

    def scale(self, q) -> "DimVector":
        q = as_fraction(q)
        return DimVector(tuple(e * q for e in self.exponents))

    def to_map(self, base: tuple[str, ...] = DEFAULT_BASE_DIMENSIONS) -> dict:
        return {b: e for b, e in zip(base, self.exponents, strict=True) if e != 0}

    def format(self, base: tuple[str, ...] = DEFAULT_BASE_DIMENSIONS) -> str:
        parts = []
        for name, e in zip(base, self.exponents, strict=True):
            if e == 0:
                continue
            parts.append(name if e == 1 else f"{name}^{e}")
        return " ".join(parts) if parts else "1"


@dataclass(frozen=True)
class DimMatrix:
    """Ordered (name, DimVector) columns: one per physical variable."""

    variables: tuple[tuple[str, DimVector], ...]
    base: tuple[str, ...] = DEFAULT_BASE_DIMENSIONS

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple((n, v) for n, v in self.variables))
        for name, v in self.variables:
            if len(v) != len(self.base):
                raise ValueError(
                    f"dimension vector for {name!r} has length {len(v)}, base has {len(self.base)}"
                )

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.variables)

    def column(self, name: str) -> DimVector:
        for n, v in self.variables:
            if n == name:
                return v
        raise KeyError(name)

    def rows(self) -> list[list[Fraction]]:
        """k x n matrix of exponents (rows are base dimensions)."""
        return [[v.exponents[i] for _, v in self.variables] for i in range(len(self.base))]


@dataclass(frozen=True)
class PiGroup:
    """A dimensionless power product: one exact rational exponent per variable."""

    names: tuple[str, ...]
    exponents: tuple[Fraction, ...]
    name: str | None = None
    rational_fallback: bool = field(default=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "exponents", tuple(as_fraction(e) for e in self.exponents))

    def dimension(self, m: DimMatrix) -> DimVector:
        total = DimVector.zero(len(m.base))
        for n, e in zip(self.names, self.exponents, strict=True):
            total = total + m.column(n).scale(e)
        return total

    def integer_scaled(self) -> tuple[int, ...]:
        """Exponents scaled by the lcm of denominators and reduced by the gcd."""
        lcm = 1
        for e in self.exponents:
            d = e.denominator
            lcm = lcm * d // _gcd(lcm, d)
        ints = [int(e * lcm) for e in self.exponents]
        g = 0
        for v in ints:
            g = _gcd(g, abs(v))
        if g > 1:
            ints = [v // g for v in ints]
        return tuple(ints)

    def with_name(self, name: str) -> "PiGroup":
        return PiGroup(self.names, self.exponents, name=name, rational_fallback=self.rational_fallback)

    def format(self) -> str:
        """Power-product display, e.g. ``V*d/nu`` or ``g*h^3/nu^2``."""
        num, den = [], []
        for n, e in zip(self.names, self.exponents, strict=True):
            if e == 0:
                continue
            mag = abs(e)
            if mag == 1:
                term = n
            elif mag.denominator == 1:
                term = f"{n}^{mag}"
            else:
                term = f"{n}^({mag})"
            (num if e > 0 else den).append(term)
        if not num and not den:
            return "1"
        head = "*".join(num) if num else "1"
        if not den:
            return head
        tail = den[0] if len(den) == 1 else "(" + "*".join(den) + ")"
        return f"{head}/{tail}"


def _gcd(a: int, b: int) -> int:
    while b:
        a, b = b, a % b
    return a


def _rref(rows: list[list[Fraction]]) -> tuple[list[list[Fraction]], list[int]]:
    """Reduced row echelon form over the rationals; returns (matrix, pivot columns)."""
    m = [list(r) for r in rows]
    n_rows = len(m)
    n_cols = len(m[0]) if n_rows else 0
    pivots = []
    r = 0
    for c in range(n_cols):
        pivot = next((i for i in range(r, n_rows) if m[i][c] != 0), None)
        if pivot is None:
            continue
        m[r], m[pivot] = m[pivot], m[r]
        pv = m[r][c]
        m[r] = [x / pv for x in m[r]]
        for i in range(n_rows):
            if i != r and m[i][c] != 0:
                f = m[i][c]
                m[i] = [a - f * b for a, b in zip(m[i], m[r])]
        pivots.append(c)
        r += 1
        if r == n_rows:
            break
    return m, pivots


def rank(m: DimMatrix) -> int:
    _, pivots = _rref(m.rows())
    return len(pivots)


def null_space(m: DimMatrix) -> list[PiGroup]:
    """Rational basis of the dimension matrix's null space; one PiGroup per basis vector.

    Returns exactly n - rank(m) groups; an empty list means every variable is
    dimensionally independent.
    """
    if not m.variables:
        raise ValueError("dimension matrix is empty")
    rows = m.rows()
    n = len(m.variables)
    red, pivots = _rref(rows)
    free = [c for c in range(n) if c not in pivots]
    basis = []
    for fc in free:
        vec = [Fraction(0)] * n
        vec[fc] = Fraction(1)
        for r_i, pc in enumerate(pivots):
            vec[pc] = -red[r_i][fc]
        basis.append(PiGroup(m.names, tuple(vec)))
    return basis


def _row_rank(rows) -> int:
    return len(_rref([list(r) for r in rows])[1])


def _in_row_span(vec, rows) -> bool:
    if not rows:
        return all(x == 0 for x in vec)
    return _row_rank(list(rows) + [list(vec)]) == _row_rank(rows)


def spans_same_space(a: list[PiGroup], b: list[PiGroup]) -> bool:
    """True when both group lists span the same rational exponent space."""
    if len(a) != len(b):
        return False
    if not a:
        return True
    rows_a = [g.exponents for g in a]
    rows_b = [g.exponents for g in b]
    return all(_in_row_span(v, rows_a) for v in rows_b) and all(
        _in_row_span(v, rows_b) for v in rows_a
    )


def _integer_lattice_members(basis_rows: list[tuple[Fraction, ...]], max_exp: int):
    """Every integer vector in the rational row span with all |entries| <= max_exp.

    The span is put in reduced row echelon form; any member's coordinates in that
    basis are its entries at the pivot columns, so integer members with bounded
    entries have bounded integer coordinates and a finite scan is complete.
    """
    red, pivots = _rref([list(r) for r in basis_rows])
    red = red[: len(pivots)]
    p = len(pivots)
    n = len(basis_rows[0])
    members = []
    for coeffs in itertools.product(range(-max_exp, max_exp + 1), repeat=p):
        if all(c == 0 for c in coeffs):
            continue
        vec = [Fraction(0)] * n
        for c, row in zip(coeffs, red):
            if c:
                for j in range(n):
                    vec[j] += c * row[j]
        if any(e.denominator != 1 for e in vec):
            continue
        if any(abs(e) > max_exp for e in vec):
            continue
        g = 0
        for e in vec:
            g = _gcd(g, abs(int(e)))
        if g > 1:
            continue  # the primitive version is scanned separately
        members.append(tuple(vec))
    members.sort(key=lambda v: (sum(abs(e) for e in v), v))
    return members


def canonicalize_pi_basis(
    basis: list[PiGroup],
    target_var: str | None = None,
    max_exp: int = 3,
) -> list[PiGroup]:
    """Replace a raw rational basis with small-integer power products of the same span.

    Output groups have integer exponents bounded by ``max_exp``, minimal total
    exponent per group (ties broken lexicographically on variable order), and
    the target variable isolated in exactly one group with exponent +1.
    Raises CanonicalizationFailed when the bound admits no full basis.
    """
    if not basis:
        return []
    if max_exp < 1:
        raise ValueError("max_exp must be >= 1")
    var_names = basis[0].names
    p = len(basis)
    span_rows = [g.exponents for g in basis]
    members = _integer_lattice_members(span_rows, max_exp)

    target_idx = var_names.index(target_var) if target_var in var_names else None
    chosen: list[tuple[Fraction, ...]] = []

    if target_idx is not None and any(g.exponents[target_idx] != 0 for g in basis):
        dep = None
        for vec in members:
            if abs(vec[target_idx]) == 1:
                dep = vec if vec[target_idx] > 0 else tuple(-e for e in vec)
                break
        if dep is None:
            raise CanonicalizationFailed(
                f"no integer representative isolating {target_var!r} within |exp| <= {max_exp}"
            )
        chosen.append(dep)

    for vec in members:
        if len(chosen) == p:
            break
        if target_idx is not None and vec[target_idx] != 0:
            continue
        first = next((e for e in vec if e != 0), 0)
        if first < 0:
            continue  # keep the sign-canonical representative only
        if _in_row_span(vec, chosen):
            continue
        chosen.append(vec)

    if len(chosen) < p:
        raise CanonicalizationFailed(
            f"only {len(chosen)} of {p} groups have integer representatives within |exp| <= {max_exp}"
        )
    return [PiGroup(var_names, vec) for vec in chosen]


def canonicalize_or_fallback(basis, target_var=None, max_exp=3):
    """canonicalize_pi_basis, degrading to the raw basis with a warning flag."""
    try:
        return canonicalize_pi_basis(basis, target_var=target_var, max_exp=max_exp), False
    except CanonicalizationFailed:
        flagged = [
            PiGroup(g.names, g.exponents, name=g.name, rational_fallback=True) for g in basis
        ]
        return flagged, True


def evaluate_group(group: PiGroup, names, samples: np.ndarray) -> np.ndarray:
    """Evaluate a power product on a sample matrix; raises DomainError on bad powers."""
    col_of = {n: i for i, n in enumerate(names)}
    out = np.ones(samples.shape[0], dtype=np.float64)
    bad_rows: set[int] = set()
    for vname, e in zip(group.names, group.exponents, strict=True):
        if e == 0:
            continue
        col = samples[:, col_of[vname]].astype(np.float64)
        if e.denominator != 1:
            bad_rows.update(int(i) for i in np.nonzero(col < 0)[0])
        if e < 0:
            bad_rows.update(int(i) for i in np.nonzero(col == 0)[0])
        with np.errstate(all="ignore"):
            out = out * np.power(col, float(e))
    if bad_rows:
        raise DomainError(
            f"pi group {group.format()} undefined on {len(bad_rows)} rows",
            rows=sorted(bad_rows),
        )
    return out


def check_homogeneity(e, var_dims: dict, names=None) -> tuple[DimVector | None, int]:
    """Propagate dimensions through an expression tree, counting violations.

    ``var_dims`` maps column names to DimVectors; ``names`` gives the column
    order used to resolve variable indices (defaults to ``x0, x1, ...``).
    Violations: add/sub of unequal dimensions, log/exp of a dimensional
    argument, power with a non-constant exponent, power of a dimensional base
    by a non-rational constant.  Returns (dimension, 0) for a clean tree,
    (None, count) otherwise.
    """
    from . import expr as ex

    some = next(iter(var_dims.values()))
    zero = DimVector.zero(len(some))
    violations = 0

    def resolve(index: int) -> DimVector:
        name = names[index] if names is not None else f"x{index}"
        if name not in var_dims:
            raise KeyError(f"no dimension entry for variable {name!r}")
        return var_dims[name]

    def rational_exponent(value: float) -> Fraction | None:
        try:
            f = Fraction(value).limit_denominator(12)
        except (OverflowError, ValueError):
            return None
        return f if abs(float(f) - value) < 1e-12 else None

    def walk(node) -> DimVector:
        nonlocal violations
        if isinstance(node, ex.Const):
            return zero
        if isinstance(node, ex.Var):
            return resolve(node.index)
        if isinstance(node, ex.Unary):
            d = walk(node.child)
            if node.op in ("log", "exp"):
                if not d.is_zero:
                    violations += 1
                return zero
            if node.op == "sqrt":
                return d.scale(Fraction(1, 2))
            return d  # neg, abs
        if isinstance(node, ex.Binary):
            dl = walk(node.left)
            dr = walk(node.right)
            if node.op in ("add", "sub"):
                if dl != dr:
                    violations += 1
                return dl
            if node.op == "mul":
                return dl + dr
            if node.op == "div":
                return dl - dr
            if node.op == "pow":
                if not isinstance(node.right, ex.Const):
                    violations += 1
                    return zero
                if not dr.is_zero:
                    violations += 1
                if dl.is_zero:
                    return zero
                q = rational_exponent(node.right.value)
                if q is None:
                    violations += 1
                    return zero
                return dl.scale(q)
            raise ValueError(f"unknown operator {node.op!r}")
        if isinstance(node, ex.Pair):
            raise ValueError("pair roots have no single dimension; check branches separately")
        raise TypeError(f"unknown node {node!r}")

    dim = walk(e)
    return (dim, 0) if violations == 0 else (None, violations)
