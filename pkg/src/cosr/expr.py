"""Immutable expression trees: evaluation, simplification, complexity, parsing.

Nodes are frozen dataclasses, so structural equality and hashing come for free
and trees can be shared across threads.  Evaluation is vectorized over a
sample matrix; domain faults (log of nonpositive, 0**0, overflow, ...) poison
the affected entries with NaN and are counted rather than raised.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError

UNARY_OPS = ("neg", "abs", "sqrt", "log", "exp")
BINARY_OPS = ("add", "sub", "mul", "div", "pow")

_BINARY_SYMBOL = {"add": "+", "sub": "-", "mul": "*", "div": "/", "pow": "^"}
_UNARY_SYMBOL = {"neg": "-", "abs": "abs", "sqrt": "sqrt", "log": "log", "exp": "exp"}

# Constants within this magnitude band are considered reasonable by the
# trivial-pattern detector (data is assumed standardized / nondimensional).
CONST_BAND = (1e-3, 1e3)


class Expr:
    """Base class for expression nodes."""

    __slots__ = ()

    def __str__(self) -> str:
        return format_expr(self)


@dataclass(frozen=True)
class Const(Expr):
    value: float
    free: bool = field(default=True, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "value", float(self.value))


@dataclass(frozen=True)
class Var(Expr):
    index: int


@dataclass(frozen=True)
class Unary(Expr):
    op: str
    child: Expr

    def __post_init__(self):
        if self.op not in UNARY_OPS:
            raise ValueError(f"unknown unary operator {self.op!r}")


@dataclass(frozen=True)
class Binary(Expr):
    op: str
    left: Expr
    right: Expr

    def __post_init__(self):
        if self.op not in BINARY_OPS:
            raise ValueError(f"unknown binary operator {self.op!r}")


@dataclass(frozen=True)
class Pair(Expr):
    """Two-branch root used by pair searches; never appears below the root."""

    left: Expr
    right: Expr


@dataclass(frozen=True)
class EvalResult:
    values: np.ndarray
    domain_fault_count: int

    @property
    def fault_fraction(self) -> float:
        n = self.values.shape[0]
        return self.domain_fault_count / n if n else 0.0


def evaluate(e: Expr, samples: np.ndarray) -> EvalResult:
    """Evaluate a tree over a (rows, columns) matrix.

    Deterministic and pure; any entry that turns non-finite at some node is
    counted once as a domain fault and reported as NaN.
    """
    if isinstance(e, Pair):
        raise ValueError("evaluate the branches of a Pair individually")
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise ValueError("samples must be 2-D")
    n = samples.shape[0]

    def walk(node) -> np.ndarray:
        if isinstance(node, Const):
            return np.full(n, node.value)
        if isinstance(node, Var):
            if node.index >= samples.shape[1]:
                raise IndexError(f"x{node.index} outside {samples.shape[1]}-column matrix")
            return samples[:, node.index].copy()
        with np.errstate(all="ignore"):
            if isinstance(node, Unary):
                x = walk(node.child)
                if node.op == "neg":
                    return -x
                if node.op == "abs":
                    return np.abs(x)
                if node.op == "sqrt":
                    return np.sqrt(x)
                if node.op == "log":
                    return np.log(x)
                return np.exp(x)
            if isinstance(node, Binary):
                a = walk(node.left)
                b = walk(node.right)
                if node.op == "add":
                    return a + b
                if node.op == "sub":
                    return a - b
                if node.op == "mul":
                    return a * b
                if node.op == "div":
                    return a / b
                out = np.power(a, b)
                zz = (a == 0.0) & (b == 0.0)
                if zz.any():
                    out = np.where(zz, np.nan, out)
                return out
        raise TypeError(f"unknown node {node!r}")

    values = walk(e)
    bad = ~np.isfinite(values)
    if bad.any():
        values = np.where(bad, np.nan, values)
    return EvalResult(values=values, domain_fault_count=int(bad.sum()))


def evaluate_pair(p: Pair, samples: np.ndarray) -> tuple[EvalResult, EvalResult]:
    return evaluate(p.left, samples), evaluate(p.right, samples)


def complexity(e: Expr) -> int:
    """Node count; a Pair root is scaffolding and counts zero."""
    if isinstance(e, Pair):
        return complexity(e.left) + complexity(e.right)
    if isinstance(e, (Const, Var)):
        return 1
    if isinstance(e, Unary):
        return 1 + complexity(e.child)
    return 1 + complexity(e.left) + complexity(e.right)


def variables_of(e: Expr) -> set[int]:
    if isinstance(e, Const):
        return set()
    if isinstance(e, Var):
        return {e.index}
    if isinstance(e, Unary):
        return variables_of(e.child)
    if isinstance(e, (Binary, Pair)):
        return variables_of(e.left) | variables_of(e.right)
    raise TypeError(f"unknown node {e!r}")


def _is_const(e: Expr, value=None) -> bool:
    return isinstance(e, Const) and (value is None or e.value == value)


def _fold(op: str, *children) -> Expr | None:
    """Fold a constant subtree; returns None when the result is not finite."""
    import math

    a = children[0].value
    try:
        if op == "neg":
            v = -a
        elif op == "abs":
            v = abs(a)
        elif op == "sqrt":
            v = math.sqrt(a)
        elif op == "log":
            v = math.log(a)
        elif op == "exp":
            v = math.exp(a)
        else:
            b = children[1].value
            if op == "add":
                v = a + b
            elif op == "sub":
                v = a - b
            elif op == "mul":
                v = a * b
            elif op == "div":
                v = a / b
            else:  # pow; 0**0 is a domain fault, not 1
                if a == 0.0 and b == 0.0:
                    return None
                v = math.pow(a, b)
    except (ValueError, OverflowError, ZeroDivisionError):
        return None
    if not math.isfinite(v):
        return None
    return Const(v)


def simplify(e: Expr) -> Expr:
    """Apply the fixed rewrite set bottom-up to a fixpoint.

    Rules: constant folding, x-x -> 0, x/x -> 1, x*1 / x+0 / x-0 / x^1 -> x,
    x^0 -> 1, neg(neg(x)) -> x.  Semantics are preserved wherever both trees
    evaluate fault-free.
    """
    if isinstance(e, Pair):
        return Pair(simplify(e.left), simplify(e.right))

    def once(node: Expr) -> Expr:
        if isinstance(node, (Const, Var)):
            return node
        if isinstance(node, Unary):
            c = once(node.child)
            if node.op == "neg" and isinstance(c, Unary) and c.op == "neg":
                return c.child
            if isinstance(c, Const):
                folded = _fold(node.op, c)
                if folded is not None:
                    return folded
            return Unary(node.op, c)
        assert isinstance(node, Binary)
        a = once(node.left)
        b = once(node.right)
        op = node.op
        if isinstance(a, Const) and isinstance(b, Const):
            folded = _fold(op, a, b)
            if folded is not None:
                return folded
        if op == "sub" and a == b:
            return Const(0.0)
        if op == "div" and a == b and not _is_const(a, 0.0):
            return Const(1.0)
        if op == "add":
            if _is_const(a, 0.0):
                return b
            if _is_const(b, 0.0):
                return a
        if op == "sub" and _is_const(b, 0.0):
            return a
        if op == "mul":
            if _is_const(a, 1.0):
                return b
            if _is_const(b, 1.0):
                return a
        if op == "div" and _is_const(b, 1.0):
            return a
        if op == "pow":
            if _is_const(b, 1.0):
                return a
            if _is_const(b, 0.0):
                return Const(1.0)
        return Binary(op, a, b)

    prev = e
    for _ in range(10):
        nxt = once(prev)
        if nxt == prev:
            break
        prev = nxt
    return prev


def detect_trivial_patterns(e: Expr, const_band: tuple[float, float] = CONST_BAND) -> int:
    """Count degenerate structure: variable-bearing subtrees that collapse to a
    constant, plus literal constants outside the magnitude band."""
    if isinstance(e, Pair):
        return detect_trivial_patterns(e.left, const_band) + detect_trivial_patterns(
            e.right, const_band
        )
    lo, hi = const_band
    count = 0

    def walk(node: Expr) -> None:
        nonlocal count
        if isinstance(node, Const):
            mag = abs(node.value)
            if mag == 0.0 or not (lo <= mag <= hi):
                count += 1
            return
        if isinstance(node, Var):
            return
        if variables_of(node) and isinstance(simplify(node), Const):
            count += 1
            return  # do not double-count nested collapses
        if isinstance(node, Unary):
            walk(node.child)
        else:
            walk(node.left)
            walk(node.right)

    walk(e)
    return count


def stable_hash(e: Expr) -> int:
    """Deterministic structural hash (independent of PYTHONHASHSEED)."""
    digest = hashlib.blake2b(format_expr(e).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def all_nodes(e: Expr) -> list[Expr]:
    """Pre-order node list (Pair root excluded from its own listing)."""
    out: list[Expr] = []

    def walk(node):
        if isinstance(node, Pair):
            walk(node.left)
            walk(node.right)
            return
        out.append(node)
        if isinstance(node, Unary):
            walk(node.child)
        elif isinstance(node, Binary):
            walk(node.left)
            walk(node.right)

    walk(e)
    return out


def replace_node(e: Expr, position: int, replacement: Expr) -> Expr:
    """Return a copy of ``e`` with the pre-order node at ``position`` replaced."""
    counter = [-1]

    def walk(node):
        if isinstance(node, Pair):
            return Pair(walk(node.left), walk(node.right))
        counter[0] += 1
        if counter[0] == position:
            return replacement
        if isinstance(node, Unary):
            return Unary(node.op, walk(node.child))
        if isinstance(node, Binary):
            return Binary(node.op, walk(node.left), walk(node.right))
        return node

    return walk(e)


def exponent_const_positions(e: Expr) -> set[int]:
    """Pre-order positions (per all_nodes) of Consts sitting in pow-exponent slots."""
    out: set[int] = set()
    counter = [-1]

    def walk(node, exponent_slot=False):
        if isinstance(node, Pair):
            walk(node.left)
            walk(node.right)
            return
        counter[0] += 1
        here = counter[0]
        if isinstance(node, Const):
            if exponent_slot:
                out.add(here)
            return
        if isinstance(node, Var):
            return
        if isinstance(node, Unary):
            walk(node.child)
            return
        walk(node.left)
        walk(node.right, exponent_slot=(node.op == "pow"))

    walk(e)
    return out


def free_constants(e: Expr) -> list[float]:
    """Values of the tunable (``free=True``) constants in traversal order."""
    out: list[float] = []

    def walk(node):
        if isinstance(node, Const):
            if node.free:
                out.append(node.value)
            return
        if isinstance(node, Var):
            return
        if isinstance(node, Unary):
            walk(node.child)
            return
        walk(node.left)
        walk(node.right)

    walk(e)
    return out


def with_constants(e: Expr, values) -> Expr:
    """Rebuild ``e`` with its tunable constants replaced in traversal order."""
    values = list(values)
    pos = [0]

    def walk(node):
        if isinstance(node, Const):
            if node.free:
                v = values[pos[0]]
                pos[0] += 1
                return Const(float(v))
            return node
        if isinstance(node, Var):
            return node
        if isinstance(node, Unary):
            return Unary(node.op, walk(node.child))
        if isinstance(node, Pair):
            return Pair(walk(node.left), walk(node.right))
        return Binary(node.op, walk(node.left), walk(node.right))

    rebuilt = walk(e)
    if pos[0] != len(values):
        raise ValueError(f"expected {pos[0]} constants, got {len(values)}")
    return rebuilt


def freeze_constants(e: Expr, positions=None) -> Expr:
    """Mark constants as non-tunable: all of them, or those at the given
    0-based positions in literal appearance order."""
    idx = [0]

    def walk(node):
        if isinstance(node, Const):
            here = idx[0]
            idx[0] += 1
            if positions is None or here in positions:
                return Const(node.value, free=False)
            return node
        if isinstance(node, Var):
            return node
        if isinstance(node, Unary):
            return Unary(node.op, walk(node.child))
        if isinstance(node, Pair):
            return Pair(walk(node.left), walk(node.right))
        return Binary(node.op, walk(node.left), walk(node.right))

    return walk(e)


# --- text format -------------------------------------------------------------

_PREC = {"add": 1, "sub": 1, "mul": 2, "div": 2, "neg": 3, "pow": 4}


def _format_const(v: float) -> str:
    if v == int(v) and abs(v) < 1e16:
        return str(int(v))
    return repr(v)


def format_expr(e: Expr, names=None) -> str:
    """Infix rendering; parse(format_expr(e)) is structurally equal to e."""

    def name_of(i: int) -> str:
        if names is not None:
            return names[i]
        return f"x{i}"

    def walk(node, parent_prec: int, right_side: bool = False) -> str:
        if isinstance(node, Const):
            s = _format_const(node.value)
            if node.value < 0 and parent_prec > 0:
                s = f"({s})"
            return s
        if isinstance(node, Var):
            return name_of(node.index)
        if isinstance(node, Unary):
            if node.op == "neg":
                inner = walk(node.child, _PREC["neg"])
                s = f"-{inner}"
                return f"({s})" if parent_prec > _PREC["neg"] else s
            return f"{node.op}({walk(node.child, 0)})"
        if isinstance(node, Binary):
            prec = _PREC[node.op]
            sym = _BINARY_SYMBOL[node.op]
            if node.op == "pow":
                left = walk(node.left, prec + 1)  # pow binds its base tightly
                right = walk(node.right, prec, right_side=False)
                s = f"{left}{sym}{right}"
            else:
                left = walk(node.left, prec)
                right = walk(node.right, prec + (1 if node.op in ("sub", "div") else 0), True)
                s = f"{left} {sym} {right}" if prec == 1 else f"{left}{sym}{right}"
            need = parent_prec > prec or (right_side and parent_prec == prec)
            return f"({s})" if need else s
        if isinstance(node, Pair):
            return f"[{walk(node.left, 0)} | {walk(node.right, 0)}]"
        raise TypeError(f"unknown node {node!r}")

    return walk(e, 0)


# --- parser ------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|[()+\-*/^,]))"
)

_FUNCTIONS = {"abs", "sqrt", "log", "exp", "neg"}


def _tokenize(text: str):
    pos = 0
    tokens = []
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            stripped = text[pos:].lstrip()
            at = len(text) - len(stripped)
            raise ParseError(f"unexpected character {text[at]!r}", at)
        if m.lastgroup == "num":
            tokens.append(("num", float(m.group("num")), m.start("num")))
        elif m.lastgroup == "name":
            tokens.append(("name", m.group("name"), m.start("name")))
        else:
            op = m.group("op")
            if op == "**":
                op = "^"
            tokens.append(("op", op, m.start("op")))
        pos = m.end()
    tokens.append(("end", None, len(text)))
    return tokens


def parse(text: str, names=None) -> Expr:
    """Parse infix text into a tree.

    Variables are resolved against ``names`` when given, else the ``x<k>``
    convention applies.  Raises ParseError with the offending offset.
    """
    tokens = _tokenize(text)
    idx = [0]

    def peek():
        return tokens[idx[0]]

    def advance():
        t = tokens[idx[0]]
        idx[0] += 1
        return t

    def expect_op(symbol):
        kind, val, at = peek()
        if kind != "op" or val != symbol:
            raise ParseError(f"expected {symbol!r}", at)
        advance()

    def parse_expr():
        return parse_sum()

    def parse_sum():
        node = parse_term()
        while True:
            kind, val, _ = peek()
            if kind == "op" and val in ("+", "-"):
                advance()
                rhs = parse_term()
                node = Binary("add" if val == "+" else "sub", node, rhs)
            else:
                return node

    def parse_term():
        node = parse_unary()
        while True:
            kind, val, _ = peek()
            if kind == "op" and val in ("*", "/"):
                advance()
                rhs = parse_unary()
                node = Binary("mul" if val == "*" else "div", node, rhs)
            else:
                return node

    def parse_unary():
        kind, val, _ = peek()
        if kind == "op" and val == "-":
            advance()
            child = parse_unary()
            if isinstance(child, Const) and child.value >= 0:
                return Const(-child.value)
            return Unary("neg", child)
        return parse_power()

    def parse_power():
        base = parse_primary()
        kind, val, _ = peek()
        if kind == "op" and val == "^":
            advance()
            exp = parse_unary()  # right associative, allows -2 exponents
            return Binary("pow", base, exp)
        return base

    def parse_primary():
        kind, val, at = advance()
        if kind == "num":
            return Const(val)
        if kind == "name":
            nkind, nval, _ = peek()
            if nkind == "op" and nval == "(":
                if val not in _FUNCTIONS:
                    raise ParseError(f"unknown function {val!r}", at)
                advance()
                arg = parse_expr()
                expect_op(")")
                if val == "neg":
                    return Unary("neg", arg)
                return Unary(val, arg)
            if names is not None:
                if val in names:
                    return Var(list(names).index(val))
                raise ParseError(f"unknown variable {val!r}", at)
            m = re.fullmatch(r"x(\d+)", val)
            if m:
                return Var(int(m.group(1)))
            raise ParseError(f"unknown variable {val!r}", at)
        if kind == "op" and val == "(":
            node = parse_expr()
            expect_op(")")
            return node
        raise ParseError("expected a value", at)

    node = parse_expr()
    kind, _, at = peek()
    if kind != "end":
        raise ParseError("trailing input", at)
    return node
