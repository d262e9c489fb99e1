"""Seeded, island-parallel evolutionary search over expression trees.

Determinism contract: each island owns a generator seeded by (master seed,
island index); islands only exchange individuals at fixed iteration barriers
in island order, so results are bit-identical for any worker-thread count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple

import numpy as np
import scipy.optimize

from . import expr as ex
from .errors import ConfigInvalid

_TIE_EPS = 0.0  # exact comparisons; ties broken by complexity then insertion order


@dataclass(frozen=True)
class EngineConfig:
    population: int = 1000  # total across all islands
    iterations: int = 40
    tournament: int = 5
    p_op_swap: float = 0.25
    p_const_jitter: float = 0.25
    p_subtree: float = 0.20
    p_hoist: float = 0.15
    p_var_swap: float = 0.05
    p_crossover: float = 0.10
    unary_ops: tuple[str, ...] = ("neg", "abs", "sqrt", "log", "exp")
    binary_ops: tuple[str, ...] = ("add", "sub", "mul", "div", "pow")
    const_range: tuple[float, float] = (0.05, 20.0)
    p_const_negative: float = 0.2
    p_leaf_const: float = 0.2
    max_complexity: int = 25
    parsimony: float = 1e-3
    islands: int = 4
    migration_interval: int = 10
    migration_count: int = 5
    seed: int = 0
    threads: int = 1
    const_opt_interval: int = 8
    const_opt_restarts: int = 2
    init_depth: tuple[int, int] = (1, 4)
    p_init_monomial: float = 0.3

    def validate(self) -> None:
        probs = (
            self.p_op_swap,
            self.p_const_jitter,
            self.p_subtree,
            self.p_hoist,
            self.p_var_swap,
            self.p_crossover,
        )
        if any(p < 0 for p in probs):
            raise ConfigInvalid("variation probabilities must be nonnegative")
        if abs(sum(probs) - 1.0) > 1e-9:
            raise ConfigInvalid(f"variation probabilities sum to {sum(probs)}, expected 1")
        if self.islands < 1:
            raise ConfigInvalid("island count must be >= 1")
        if self.max_complexity < 3:
            raise ConfigInvalid("max complexity must be >= 3")
        if self.population < 4 * self.islands:
            raise ConfigInvalid("population too small for the island count")
        for op in self.unary_ops:
            if op not in ex.UNARY_OPS:
                raise ConfigInvalid(f"unknown unary op {op!r}")
        for op in self.binary_ops:
            if op not in ex.BINARY_OPS:
                raise ConfigInvalid(f"unknown binary op {op!r}")
        if not self.binary_ops:
            raise ConfigInvalid("at least one binary operator is required")
        if self.tournament < 2:
            raise ConfigInvalid("tournament size must be >= 2")


class FrontEntry(NamedTuple):
    expr: ex.Expr
    loss: float
    complexity: int


class ParetoFront:
    """Nondominated (loss, complexity) archive; at most one entry per complexity."""

    def __init__(self):
        self._entries: list[FrontEntry] = []

    def insert(self, expression: ex.Expr, loss: float, complexity: int | None = None) -> bool:
        if not math.isfinite(loss):
            return False
        if complexity is None:
            complexity = ex.complexity(expression)
        for e in self._entries:
            if e.complexity <= complexity and e.loss <= loss:
                return False  # dominated (or an exact duplicate)
        self._entries = [
            e for e in self._entries if not (e.complexity >= complexity and e.loss >= loss)
        ]
        self._entries.append(FrontEntry(expression, loss, complexity))
        self._entries.sort(key=lambda e: e.complexity)
        return True

    def entries(self) -> list[FrontEntry]:
        return list(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def best(self) -> FrontEntry:
        if not self._entries:
            raise ValueError("empty front")
        return min(self._entries, key=lambda e: (e.loss, e.complexity))

    def is_valid(self) -> bool:
        es = self._entries
        for a, b in zip(es, es[1:]):
            if not (a.complexity < b.complexity and a.loss > b.loss):
                return False
        return True


def select_candidate(front: ParetoFront) -> tuple[ex.Expr, float]:
    """Knee rule: maximal log-loss drop per unit of added complexity."""
    entries = front.entries()
    if not entries:
        raise ValueError("empty front")
    floor = 1e-300
    scores = [0.0]
    for prev, cur in zip(entries, entries[1:]):
        dl = math.log(max(prev.loss, floor)) - math.log(max(cur.loss, floor))
        dc = cur.complexity - prev.complexity
        scores.append(dl / dc)
    best_i = 0
    for i, s in enumerate(scores):
        if s > scores[best_i]:
            best_i = i  # strict '>' keeps the lower-complexity entry on ties
    return entries[best_i].expr, scores[best_i]


# --- constant optimization ----------------------------------------------------


def finite_difference_gradient(fn: Callable, x: np.ndarray, rel_step: float = 1e-6) -> np.ndarray:
    """Forward-difference gradient with a relative step."""
    x = np.asarray(x, dtype=np.float64)
    f0 = fn(x)
    grad = np.zeros_like(x)
    for i in range(x.size):
        h = rel_step * max(abs(x[i]), 1e-8)
        xp = x.copy()
        xp[i] += h
        grad[i] = (fn(xp) - f0) / h
    return grad


_BIG = 1e100


def optimize_constants(
    e: ex.Expr,
    loss: Callable[[ex.Expr], float],
    restarts: int = 4,
    seed: int = 0,
    max_iterations: int = 80,
) -> ex.Expr:
    """Quasi-Newton (L-BFGS-B) refinement of the tunable constants.

    Runs ``restarts`` descents (the first from the current constants, the rest
    from multiplicatively perturbed copies) and keeps the best; the returned
    expression never scores worse than the input.
    """
    consts = ex.free_constants(e)
    if not consts:
        return e
    x_init = np.array(consts, dtype=np.float64)
    base_loss = loss(e)

    def objective(x: np.ndarray) -> float:
        val = loss(ex.with_constants(e, x))
        return val if math.isfinite(val) else _BIG

    def jac(x: np.ndarray) -> np.ndarray:
        return finite_difference_gradient(objective, x)

    rng = np.random.default_rng([int(seed) & 0x7FFFFFFF, ex.stable_hash(e), 0x9E3779B9])
    starts = [x_init]
    for _ in range(max(0, restarts - 1)):
        starts.append(x_init * rng.lognormal(0.0, 0.4, size=x_init.size))

    best_expr, best_loss = e, base_loss
    for x0 in starts:
        try:
            res = scipy.optimize.minimize(
                objective,
                x0,
                jac=jac,
                method="L-BFGS-B",
                options={"maxiter": max_iterations},
            )
        except Exception:
            continue
        cand = ex.with_constants(e, res.x)
        val = loss(cand)
        if math.isfinite(val) and val < best_loss:
            best_expr, best_loss = cand, val
    return best_expr


# --- random trees and variation -------------------------------------------------


_EXPONENT_MENU = (-3.0, -2.0, -1.5, -1.0, -0.5, 0.5, 1.0 / 3.0, 2.0 / 3.0, 1.5, 2.0, 2.5, 3.0, 4.0)


def snap_exponents(e: ex.Expr, max_denominator: int = 6) -> ex.Expr:
    """Round every pow-exponent constant to the nearest small rational."""
    from fractions import Fraction

    changed = False
    tree = e
    for pos in sorted(ex.exponent_const_positions(e)):
        node = ex.all_nodes(tree)[pos]
        assert isinstance(node, ex.Const)
        try:
            f = Fraction(node.value).limit_denominator(max_denominator)
        except (ValueError, OverflowError):
            continue
        snapped = float(f)
        if snapped != node.value:
            tree = ex.replace_node(tree, pos, ex.Const(snapped, free=node.free))
            changed = True
    return tree if changed else e


def _random_const(rng, cfg: EngineConfig) -> ex.Const:
    lo, hi = cfg.const_range
    mag = math.exp(rng.uniform(math.log(lo), math.log(hi)))
    if rng.random() < cfg.p_const_negative:
        mag = -mag
    return ex.Const(mag)


def random_tree(rng, cfg: EngineConfig, variables: tuple[int, ...], depth: int) -> ex.Expr:
    if depth <= 0 or rng.random() < 0.3:
        if variables and rng.random() >= cfg.p_leaf_const:
            return ex.Var(int(rng.choice(variables)))
        return _random_const(rng, cfg)
    use_unary = cfg.unary_ops and rng.random() < 0.25
    if use_unary:
        op = str(rng.choice(cfg.unary_ops))
        return ex.Unary(op, random_tree(rng, cfg, variables, depth - 1))
    op = str(rng.choice(cfg.binary_ops))
    left = random_tree(rng, cfg, variables, depth - 1)
    right = random_tree(rng, cfg, variables, depth - 1)
    return ex.Binary(op, left, right)


def random_monomial(rng, cfg: EngineConfig, variables: tuple[int, ...]) -> ex.Expr:
    """A random power product over 2-3 variables; scaling laws live here."""
    if "mul" not in cfg.binary_ops or len(variables) < 2:
        lo, hi = cfg.init_depth
        return random_tree(rng, cfg, variables, int(rng.integers(lo, hi + 1)))
    k = min(len(variables), int(rng.integers(2, 4)))
    picks = [int(v) for v in rng.choice(variables, size=k, replace=False)]
    have_pow = "pow" in cfg.binary_ops
    have_div = "div" in cfg.binary_ops
    num: list[ex.Expr] = []
    den: list[ex.Expr] = []
    for v in picks:
        if have_pow:
            e = float(rng.choice(_EXPONENT_MENU))
            num.append(ex.Var(v) if e == 1.0 else ex.Binary("pow", ex.Var(v), ex.Const(e)))
        else:
            e = int(rng.choice([-3, -2, -1, 1, 2, 3]))
            side = num if (e > 0 or not have_div) else den
            side.extend([ex.Var(v)] * abs(e))

    def product(factors: list[ex.Expr]) -> ex.Expr:
        out = factors[0]
        for f in factors[1:]:
            out = ex.Binary("mul", out, f)
        return out

    if not num:
        num = [ex.Const(1.0)]
    top = product(num)
    return ex.Binary("div", top, product(den)) if den else top


def _mutate_single(rng, cfg, variables, tree: ex.Expr, kind: str) -> ex.Expr | None:
    nodes = ex.all_nodes(tree)
    if kind == "op_swap":
        idx = [i for i, n in enumerate(nodes) if isinstance(n, (ex.Unary, ex.Binary))]
        if not idx:
            return None
        pos = int(rng.choice(idx))
        node = nodes[pos]
        if isinstance(node, ex.Unary):
            options = [o for o in cfg.unary_ops if o != node.op]
            if not options:
                return None
            return ex.replace_node(tree, pos, ex.Unary(str(rng.choice(options)), node.child))
        options = [o for o in cfg.binary_ops if o != node.op]
        if not options:
            return None
        return ex.replace_node(
            tree, pos, ex.Binary(str(rng.choice(options)), node.left, node.right)
        )
    if kind == "const_jitter":
        idx = [i for i, n in enumerate(nodes) if isinstance(n, ex.Const) and n.free]
        if not idx:
            return None
        pos = int(rng.choice(idx))
        node = nodes[pos]
        if pos in ex.exponent_const_positions(tree):
            # keep exponents in the small-rational family physical laws use
            new = float(rng.choice(_EXPONENT_MENU))
            return ex.replace_node(tree, pos, ex.Const(new))
        if node.value == 0.0:
            return ex.replace_node(tree, pos, _random_const(rng, cfg))
        return ex.replace_node(tree, pos, ex.Const(node.value * rng.lognormal(0.0, 0.3)))
    if kind == "subtree":
        pos = int(rng.integers(0, len(nodes)))
        return ex.replace_node(tree, pos, random_tree(rng, cfg, variables, 3))
    if kind == "hoist":
        idx = [i for i, n in enumerate(nodes) if isinstance(n, (ex.Unary, ex.Binary))]
        if not idx:
            return None
        pos = int(rng.choice(idx))
        node = nodes[pos]
        subs = ex.all_nodes(node)[1:]
        if not subs:
            return None
        return ex.replace_node(tree, pos, subs[int(rng.integers(0, len(subs)))])
    if kind == "var_swap":
        idx = [i for i, n in enumerate(nodes) if isinstance(n, ex.Var)]
        if not idx or len(variables) < 2:
            return None
        pos = int(rng.choice(idx))
        node = nodes[pos]
        options = [v for v in variables if v != node.index]
        return ex.replace_node(tree, pos, ex.Var(int(rng.choice(options))))
    raise ValueError(kind)


def _crossover_single(rng, a: ex.Expr, b: ex.Expr) -> ex.Expr:
    nodes_a = ex.all_nodes(a)
    nodes_b = ex.all_nodes(b)
    pos = int(rng.integers(0, len(nodes_a)))
    donor = nodes_b[int(rng.integers(0, len(nodes_b)))]
    return ex.replace_node(a, pos, donor)


class _Individual(NamedTuple):
    expr: ex.Expr
    loss: float
    eff: float
    complexity: int


class _Island:
    def __init__(self, index: int, cfg: EngineConfig, loss, variables, inject, pair: bool,
                 pinned: tuple[ex.Expr | None, ex.Expr | None]):
        self.cfg = cfg
        self.loss = loss
        self.variables = tuple(variables)
        self.pair = pair
        self.pinned = pinned
        self.rng = np.random.default_rng([cfg.seed & 0x7FFFFFFFFFFF, index])
        self.pop_size = max(4, cfg.population // cfg.islands)
        self.archive = ParetoFront()
        self.cache: dict[ex.Expr, float] = {}
        self.pop: list[_Individual] = []
        lo, hi = cfg.init_depth
        for inj in inject:
            self.pop.append(self._individual(self._coerce(inj)))
        while len(self.pop) < self.pop_size:
            depth = int(self.rng.integers(lo, hi + 1))
            tree = self._fresh(depth)
            self.pop.append(self._individual(tree))

    def _coerce(self, tree: ex.Expr) -> ex.Expr:
        if self.pair and not isinstance(tree, ex.Pair):
            other = self.pinned[1] if self.pinned[1] is not None else ex.Const(1.0)
            return ex.Pair(tree, other)
        return tree

    def _fresh_single(self, depth: int) -> ex.Expr:
        if self.rng.random() < self.cfg.p_init_monomial:
            return random_monomial(self.rng, self.cfg, self.variables)
        return random_tree(self.rng, self.cfg, self.variables, depth)

    def _fresh(self, depth: int) -> ex.Expr:
        if not self.pair:
            return self._fresh_single(depth)
        left = self.pinned[0] if self.pinned[0] is not None else self._fresh_single(depth)
        right = self.pinned[1] if self.pinned[1] is not None else self._fresh_single(depth)
        return ex.Pair(left, right)

    def _eval(self, tree: ex.Expr) -> float:
        cached = self.cache.get(tree)
        if cached is not None:
            return cached
        val = self.loss(tree)
        if len(self.cache) < 200_000:
            self.cache[tree] = val
        return val

    def _individual(self, tree: ex.Expr) -> _Individual:
        loss = self._eval(tree)
        comp = ex.complexity(tree)
        eff = loss * (1.0 + self.cfg.parsimony * comp) if math.isfinite(loss) else math.inf
        self.archive.insert(tree, loss, comp)
        return _Individual(tree, loss, eff, comp)

    def _tournament(self) -> int:
        k = min(self.cfg.tournament, len(self.pop))
        picks = self.rng.integers(0, len(self.pop), size=k)
        best = None
        for p in picks:
            ind = self.pop[int(p)]
            key = (ind.eff, ind.complexity, int(p))
            if best is None or key < best[0]:
                best = (key, int(p))
        return best[1]

    def _vary(self, parent: ex.Expr) -> ex.Expr | None:
        cfg = self.cfg
        r = self.rng.random()
        edges = np.cumsum(
            [cfg.p_op_swap, cfg.p_const_jitter, cfg.p_subtree, cfg.p_hoist, cfg.p_var_swap]
        )
        kinds = ["op_swap", "const_jitter", "subtree", "hoist", "var_swap"]
        kind = "crossover"
        for k, edge in zip(kinds, edges):
            if r < edge:
                kind = k
                break

        if not self.pair:
            if kind == "crossover":
                donor = self.pop[self._tournament()].expr
                return _crossover_single(self.rng, parent, donor)
            return _mutate_single(self.rng, cfg, self.variables, parent, kind)

        assert isinstance(parent, ex.Pair)
        mutable = [i for i, pin in enumerate(self.pinned) if pin is None]
        if not mutable:
            return None
        side = mutable[int(self.rng.integers(0, len(mutable)))]
        branch = parent.left if side == 0 else parent.right
        if kind == "crossover":
            donor_pair = self.pop[self._tournament()].expr
            assert isinstance(donor_pair, ex.Pair)
            donor = donor_pair.left if side == 0 else donor_pair.right
            new_branch = _crossover_single(self.rng, branch, donor)
        else:
            new_branch = _mutate_single(self.rng, cfg, self.variables, branch, kind)
        if new_branch is None:
            return None
        return ex.Pair(new_branch, parent.right) if side == 0 else ex.Pair(parent.left, new_branch)

    def _event(self) -> None:
        parent = self.pop[self._tournament()].expr
        child = self._vary(parent)
        if child is None:
            return
        if ex.complexity(child) > self.cfg.max_complexity:
            return
        ind = self._individual(child)
        picks = self.rng.integers(0, len(self.pop), size=min(self.cfg.tournament, len(self.pop)))
        worst = None
        for p in picks:
            cur = self.pop[int(p)]
            key = (cur.eff, cur.complexity, -int(p))
            if worst is None or key > worst[0]:
                worst = (key, int(p))
        w_idx = worst[1]
        if (ind.eff, ind.complexity) <= (self.pop[w_idx].eff, self.pop[w_idx].complexity):
            self.pop[w_idx] = ind

    def _optimize_best(self) -> None:
        best_i = min(range(len(self.pop)), key=lambda i: (self.pop[i].eff, self.pop[i].complexity, i))
        best = self.pop[best_i]
        if not math.isfinite(best.loss) or not ex.free_constants(best.expr):
            return
        tuned = optimize_constants(
            best.expr,
            self._eval,
            restarts=self.cfg.const_opt_restarts,
            seed=int(self.rng.integers(0, 2**31 - 1)),
            max_iterations=60,
        )
        if tuned != best.expr:
            self.pop[best_i] = self._individual(tuned)

    def run_block(self, start_iter: int, n_iters: int) -> None:
        for it in range(start_iter, start_iter + n_iters):
            for _ in range(self.pop_size):
                self._event()
            if self.cfg.const_opt_interval and (it + 1) % self.cfg.const_opt_interval == 0:
                self._optimize_best()
            self.loss.end_iteration()
            if getattr(self.loss, "dynamic", False):
                self.cache.clear()

    def ranked(self) -> list[_Individual]:
        return sorted(
            self.pop,
            key=lambda ind: (ind.eff, ind.complexity, ex.stable_hash(ind.expr)),
        )

    def immigrate(self, migrants: list[_Individual]) -> None:
        order = sorted(
            range(len(self.pop)),
            key=lambda i: (self.pop[i].eff, self.pop[i].complexity, ex.stable_hash(self.pop[i].expr)),
            reverse=True,
        )
        for migrant, slot in zip(migrants, order):
            self.pop[slot] = self._individual(migrant.expr)

    def best_loss(self) -> float:
        return min((ind.loss for ind in self.pop), default=math.inf)


def search(
    data,
    loss,
    cfg: EngineConfig,
    inject: tuple[ex.Expr, ...] = (),
    progress: Callable[[int, float, int], None] | None = None,
) -> ParetoFront:
    """Evolve expressions against ``loss``; returns the merged Pareto front.

    ``inject`` seeds known expressions into every island's initial population
    (they are archived immediately, so they are always retained or dominated).
    """
    cfg.validate()
    if data is not None and data.n_rows == 0:
        raise ConfigInvalid("dataset is empty")
    pair = bool(getattr(loss, "pair", False))
    pinned = (
        getattr(getattr(loss, "spec", None), "pin_left", None),
        getattr(getattr(loss, "spec", None), "pin_right", None),
    )
    variables = tuple(getattr(loss, "variable_indices", ()))
    islands = [
        _Island(i, cfg, loss.spawn(i), variables, inject, pair, pinned)
        for i in range(cfg.islands)
    ]

    interval = max(1, cfg.migration_interval)
    done = 0
    while done < cfg.iterations:
        block = min(interval, cfg.iterations - done)

        def run(island: _Island) -> None:
            island.run_block(done, block)

        if cfg.threads > 1 and len(islands) > 1:
            with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
                list(pool.map(run, islands))
        else:
            for island in islands:
                run(island)
        done += block

        if len(islands) > 1 and done < cfg.iterations:
            emigrants = [island.ranked()[: cfg.migration_count] for island in islands]
            for i, island in enumerate(islands):
                islands[(i + 1) % len(islands)].immigrate(emigrants[i])

        if progress is not None:
            best = min(island.best_loss() for island in islands)
            front_size = sum(len(island.archive) for island in islands)
            progress(done, best, front_size)

    # Merge archives and re-evaluate with the primary loss for a consistent scale.
    front = ParetoFront()
    seen: set[ex.Expr] = set()
    for island in islands:
        for entry in island.archive.entries():
            if entry.expr in seen:
                continue
            seen.add(entry.expr)
            val = loss(entry.expr)
            if math.isfinite(val):
                front.insert(entry.expr, val, entry.complexity)

    # Final polish on the survivors: snap tuned exponents to small rationals,
    # then refine the remaining constants.
    for entry in front.entries():
        snapped = snap_exponents(entry.expr)
        candidates = [snapped] if snapped != entry.expr else []
        base = snapped if candidates else entry.expr
        if ex.free_constants(base):
            tuned = optimize_constants(
                base, loss, restarts=max(2, cfg.const_opt_restarts), seed=cfg.seed
            )
            if tuned != base:
                candidates.append(tuned)
        simplified = ex.simplify(base)
        if simplified != base and ex.complexity(simplified) < ex.complexity(base):
            candidates.append(simplified)
        for cand in candidates:
            val = loss(cand)
            if math.isfinite(val):
                front.insert(cand, val, ex.complexity(cand))
    return front


def pair_search(data, loss, cfg: EngineConfig, inject=(), progress=None) -> ParetoFront:
    """search() for Pair-rooted candidates; the loss must set ``pair=True``."""
    if not getattr(loss, "pair", False):
        raise ConfigInvalid("pair_search requires a pair-candidate loss")
    return search(data, loss, cfg, inject=inject, progress=progress)
