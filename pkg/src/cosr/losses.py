"""The three search losses: hierarchical, implicit, and transformational.

Each loss is packaged as a callable object binding (dataset, spec, seed) so
the evolutionary engine can treat candidates as ``loss(expr) -> float``.
Invalid candidates score +inf instead of raising.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import expr as ex
from . import polyfit
from .dataset import Dataset
from .dims import check_homogeneity
from .errors import ConfigInvalid, InsufficientData, RankDeficient

# Candidates whose evaluation faults on more than this fraction of samples are
# rejected outright.
FAULT_GATE = 0.05

_VAR_EPS = 1e-12


@dataclass(frozen=True)
class HierarchicalSpec:
    """Intermediate-variable search: polynomial of the branches predicts y."""

    intermediates: int = 1
    degree: int | None = 2  # None -> sweep 1..5
    sweep_r2: float = 0.99
    log_space: bool = False

    def __post_init__(self):
        if self.intermediates not in (1, 2):
            raise ConfigInvalid("intermediates must be 1 or 2")
        if self.degree is not None and not 1 <= self.degree <= 5:
            raise ConfigInvalid("degree must be in 1..5 (or None for a sweep)")


@dataclass(frozen=True)
class ImplicitSpec:
    """Constant-manifold search: Var[log|F|] plus sensitivity/dimension/rule penalties."""

    tau: float = 1e-3
    perturb_low: float = 0.8
    perturb_high: float = 1.2
    perturb_samples: int = 16
    w_sens: float | None = None  # None -> 10x population-median base term
    w_dim: float | None = None
    w_rule: float | None = None
    positivity_eps: float = 1e-30

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigInvalid("tau must be positive")
        for w in (self.w_sens, self.w_dim, self.w_rule):
            if w is not None and w < 0:
                raise ConfigInvalid("penalty weights must be >= 0")


@dataclass(frozen=True)
class TransformSpec:
    """Two-branch correction search: y*SR1 vs an order-m polynomial of g*SR2."""

    order: int
    g: ex.Expr
    log_space: bool = True
    pin_left: ex.Expr | None = None
    pin_right: ex.Expr | None = None

    def __post_init__(self):
        if not 1 <= self.order <= 4:
            raise ConfigInvalid("polynomial order must be in 1..4")


def _valid_mask(values: np.ndarray, positive: bool) -> np.ndarray:
    ok = np.isfinite(values)
    if positive:
        ok &= values > 0
    return ok


class HierarchicalLoss:
    """Loss_H: residual of a per-call polynomial fit of the branch columns."""

    dynamic = False

    def __init__(self, data: Dataset, spec: HierarchicalSpec):
        self.data = data
        self.spec = spec
        self.pair = spec.intermediates == 2
        self.samples = data.samples
        y = data.target_values
        if spec.log_space:
            if np.any(y <= 0):
                raise ConfigInvalid("log-space fit requires a strictly positive target")
            y = np.log(y)
        self.y = y
        self.var_y = float(np.var(y))
        if self.var_y == 0.0:
            raise ConfigInvalid("target variance is zero")
        self.variable_indices = tuple(
            i for i, n in enumerate(data.names) if n != data.target
        )

    def _columns(self, e: ex.Expr) -> list[np.ndarray] | None:
        branches = [e.left, e.right] if isinstance(e, ex.Pair) else [e]
        if len(branches) != self.spec.intermediates:
            return None
        cols = []
        for b in branches:
            r = ex.evaluate(b, self.samples)
            cols.append(r.values)
        return cols

    def __call__(self, e: ex.Expr) -> float:
        cols = self._columns(e)
        if cols is None:
            return math.inf
        ok = np.ones(self.samples.shape[0], dtype=bool)
        for c in cols:
            ok &= _valid_mask(c, positive=self.spec.log_space)
        n = self.samples.shape[0]
        if (n - ok.sum()) > FAULT_GATE * n:
            return math.inf
        X = np.column_stack([np.log(c[ok]) if self.spec.log_space else c[ok] for c in cols])
        yk = self.y[ok]
        try:
            if self.spec.degree is not None:
                model = polyfit.fit_poly(X, yk, self.spec.degree)
            else:
                model = polyfit.sweep_degree(X, yk, r2_threshold=self.spec.sweep_r2)
        except (RankDeficient, InsufficientData):
            return math.inf
        return model.rss / (ok.sum() * self.var_y)

    def fit_model(self, e: ex.Expr):
        """The fitted PolyModel for a candidate (None when invalid)."""
        cols = self._columns(e)
        if cols is None:
            return None
        ok = np.ones(self.samples.shape[0], dtype=bool)
        for c in cols:
            ok &= _valid_mask(c, positive=self.spec.log_space)
        if (self.samples.shape[0] - ok.sum()) > FAULT_GATE * self.samples.shape[0]:
            return None
        X = np.column_stack([np.log(c[ok]) if self.spec.log_space else c[ok] for c in cols])
        try:
            if self.spec.degree is not None:
                return polyfit.fit_poly(X, self.y[ok], self.spec.degree)
            return polyfit.sweep_degree(X, self.y[ok], r2_threshold=self.spec.sweep_r2)
        except (RankDeficient, InsufficientData):
            return None

    def spawn(self, _island: int) -> "HierarchicalLoss":
        return self

    def end_iteration(self) -> None:
        pass


class ImplicitLoss:
    """Loss_I: Var[log|F|] + w_sens*P_sens + w_dim*P_dim + w_rule*P_rule."""

    def __init__(
        self,
        data: Dataset,
        spec: ImplicitSpec,
        seed: int = 0,
        dims_map=None,
        include_target: bool = True,
    ):
        self.data = data
        self.spec = spec
        self.seed = int(seed)
        self.pair = False
        self.samples = data.samples
        self.names = data.names
        self.dims_map = dims_map if dims_map is not None else data.dim_map()
        self.include_target = include_target
        # Zero-variance columns cannot take part in a discoverable relation:
        # any expression leaning on them alone is a disguised constant.
        spreads = np.var(self.samples, axis=0)
        scale = 1.0 + np.mean(self.samples, axis=0) ** 2
        self.constant_columns = frozenset(
            int(i) for i in np.nonzero(spreads <= 1e-14 * scale)[0]
        )
        banned = set(self.constant_columns)
        if not include_target and data.target is not None:
            banned.add(data.target_index)
        self.banned_columns = frozenset(banned)
        self.variable_indices = tuple(
            i for i in range(len(data.names)) if i not in self.banned_columns
        )
        self.dynamic = spec.w_sens is None or spec.w_dim is None or spec.w_rule is None
        start = 1.0
        self._w_sens = spec.w_sens if spec.w_sens is not None else start
        self._w_dim = spec.w_dim if spec.w_dim is not None else start
        self._w_rule = spec.w_rule if spec.w_rule is not None else start
        self._bases: list[float] = []

    @property
    def weights(self) -> tuple[float, float, float]:
        return (self._w_sens, self._w_dim, self._w_rule)

    def effective_variables(self, e: ex.Expr) -> set[int]:
        return ex.variables_of(e) - self.constant_columns

    def base_term(self, e: ex.Expr) -> float:
        used = ex.variables_of(e)
        if not self.include_target and self.data.target is not None:
            if self.data.target_index in used:
                return math.inf
        if len(used - self.constant_columns) < 2:
            return math.inf
        r = ex.evaluate(e, self.samples)
        if r.domain_fault_count > 0:
            return math.inf
        f = r.values
        if np.any(np.abs(f) < self.spec.positivity_eps):
            return math.inf
        if np.any(f > 0) and np.any(f < 0):
            return math.inf
        return float(np.var(np.log(np.abs(f))))

    def _padding_terms(self, e: ex.Expr) -> int:
        """Count effectively-constant additive terms on the root add/sub spine.

        F + C is the same constraint as F; padding only flattens Var[log] and
        is treated as a rule violation.
        """
        terms: list[ex.Expr] = []

        def spine(node):
            if isinstance(node, ex.Binary) and node.op in ("add", "sub"):
                spine(node.left)
                spine(node.right)
            else:
                terms.append(node)

        spine(e)
        if len(terms) < 2:
            return 0
        count = 0
        for t in terms:
            if not self.effective_variables(t):
                count += 1
                continue
            vals = ex.evaluate(t, self.samples).values
            if not np.all(np.isfinite(vals)):
                continue
            with np.errstate(all="ignore"):
                flat = np.var(vals) <= 1e-14 * (1.0 + np.mean(vals) ** 2)
            if bool(flat):
                count += 1
        return count

    def p_sens_count(self, e: ex.Expr) -> int:
        r = ex.evaluate(e, self.samples)
        if r.domain_fault_count > 0:
            return 0
        f = r.values
        base = float(np.var(np.log(np.abs(f)))) if np.all(np.abs(f) > 0) else 0.0
        threshold = self.spec.tau * (base + _VAR_EPS)
        n = self.samples.shape[0]
        m = min(self.spec.perturb_samples, n)
        count = 0
        for i in sorted(ex.variables_of(e)):
            rng = np.random.default_rng([self.seed, ex.stable_hash(e), i])
            rows = rng.choice(n, size=m, replace=False)
            factors = rng.uniform(self.spec.perturb_low, self.spec.perturb_high, size=m)
            sub = self.samples[rows].copy()
            sub[:, i] = sub[:, i] * factors
            pert = ex.evaluate(e, sub)
            if pert.domain_fault_count > 0:
                continue  # perturbation escaped the domain: the variable matters
            f1 = np.abs(pert.values)
            f0 = np.abs(f[rows])
            if np.any(f1 == 0) or np.any(f0 == 0):
                continue
            msc = float(np.mean((np.log(f1) - np.log(f0)) ** 2))
            if msc < threshold:
                count += 1
        return count

    def p_dim_count(self, e: ex.Expr) -> int:
        _, violations = check_homogeneity(e, self.dims_map, names=self.names)
        return violations

    def _irrational_exponents(self, e: ex.Expr) -> int:
        """Power exponents that are not (close to) small rationals.

        Physical power laws carry rational exponents; free-floating tuned
        exponents are counted as rule violations so that snapped forms win.
        """
        from fractions import Fraction

        count = 0
        for node in ex.all_nodes(e):
            if isinstance(node, ex.Binary) and node.op == "pow" and isinstance(node.right, ex.Const):
                v = node.right.value
                try:
                    f = Fraction(v).limit_denominator(6)
                except (ValueError, OverflowError):
                    count += 1
                    continue
                if abs(float(f) - v) > 1e-9:
                    count += 1
        return count

    def p_rule_count(self, e: ex.Expr) -> int:
        return (
            ex.detect_trivial_patterns(e)
            + self._padding_terms(e)
            + self._irrational_exponents(e)
        )

    def __call__(self, e: ex.Expr) -> float:
        base = self.base_term(e)
        if not math.isfinite(base):
            return math.inf
        self._bases.append(base)
        total = base
        total += self._w_sens * self.p_sens_count(e)
        total += self._w_dim * self.p_dim_count(e)
        total += self._w_rule * self.p_rule_count(e)
        return total

    def spawn(self, island: int) -> "ImplicitLoss":
        return ImplicitLoss(
            self.data,
            self.spec,
            seed=self.seed,
            dims_map=self.dims_map,
            include_target=self.include_target,
        )

    def end_iteration(self) -> None:
        """Retune dynamic penalty weights to 10x the median base term seen."""
        if not self.dynamic or not self._bases:
            self._bases.clear()
            return
        med = float(np.median(self._bases))
        w = 10.0 * med if med > 0 else 1.0
        if self.spec.w_sens is None:
            self._w_sens = w
        if self.spec.w_dim is None:
            self._w_dim = w
        if self.spec.w_rule is None:
            self._w_rule = w
        self._bases.clear()


class TransformLoss:
    """Loss_T: misfit of an order-m polynomial linking y*SR1 to g*SR2."""

    dynamic = False

    def __init__(self, data: Dataset, spec: TransformSpec):
        self.data = data
        self.spec = spec
        self.pair = True
        self.samples = data.samples
        self.y = data.target_values
        if spec.log_space and np.any(self.y <= 0):
            raise ConfigInvalid("log-space transformation requires a positive target")
        g_res = ex.evaluate(spec.g, self.samples)
        if g_res.domain_fault_count > 0:
            raise ConfigInvalid("baseline g(x) is not evaluable on the dataset")
        self.g_values = g_res.values
        self.variable_indices = tuple(
            i for i, n in enumerate(data.names) if n != data.target
        )

    def _branches(self, p: ex.Expr) -> tuple[ex.Expr, ex.Expr]:
        if isinstance(p, ex.Pair):
            left, right = p.left, p.right
        else:
            left = right = p
        if self.spec.pin_left is not None:
            left = self.spec.pin_left
        if self.spec.pin_right is not None:
            right = self.spec.pin_right
        return left, right

    def sides(self, p: ex.Expr):
        """(lhs, rhs_argument, valid_mask) for a candidate, or None when invalid."""
        left, right = self._branches(p)
        a = ex.evaluate(left, self.samples).values
        b = ex.evaluate(right, self.samples).values
        lhs = self.y * a
        rhs = self.g_values * b
        if self.spec.log_space:
            ok = _valid_mask(lhs, positive=True) & _valid_mask(rhs, positive=True)
        else:
            ok = _valid_mask(lhs, positive=False) & _valid_mask(rhs, positive=False)
        n = self.samples.shape[0]
        if (n - ok.sum()) > FAULT_GATE * n:
            return None
        if self.spec.log_space:
            return np.log(lhs[ok]), np.log(rhs[ok]), ok
        return lhs[ok], rhs[ok], ok

    def __call__(self, p: ex.Expr) -> float:
        sides = self.sides(p)
        if sides is None:
            return math.inf
        lhs, rhs, ok = sides
        try:
            model = polyfit.fit_poly(rhs[:, None], lhs, self.spec.order)
        except (RankDeficient, InsufficientData):
            return math.inf
        var = float(np.var(lhs))
        return model.rss / (ok.sum() * (var + 1e-30))

    def fit_model(self, p: ex.Expr):
        sides = self.sides(p)
        if sides is None:
            return None
        lhs, rhs, _ = sides
        try:
            return polyfit.fit_poly(rhs[:, None], lhs, self.spec.order)
        except (RankDeficient, InsufficientData):
            return None

    def reconstruct(self, p: ex.Expr) -> np.ndarray | None:
        """Predicted target on the full dataset: invert y*SR1 = P(g*SR2)."""
        left, right = self._branches(p)
        a = ex.evaluate(left, self.samples).values
        b = ex.evaluate(right, self.samples).values
        sides = self.sides(p)
        if sides is None:
            return None
        lhs, rhs, ok = sides
        try:
            model = polyfit.fit_poly(rhs[:, None], lhs, self.spec.order)
        except (RankDeficient, InsufficientData):
            return None
        out = np.full(self.samples.shape[0], np.nan)
        if self.spec.log_space:
            fitted = polyfit.predict(model, np.log(self.g_values[ok] * b[ok])[:, None])
            out[ok] = np.exp(fitted) / a[ok]
        else:
            fitted = polyfit.predict(model, (self.g_values[ok] * b[ok])[:, None])
            out[ok] = fitted / a[ok]
        return out

    def spawn(self, _island: int) -> "TransformLoss":
        return self

    def end_iteration(self) -> None:
        pass


class SquaredErrorLoss:
    """Plain normalized squared error against the target column."""

    dynamic = False
    pair = False

    def __init__(self, data: Dataset):
        self.data = data
        self.samples = data.samples
        self.y = data.target_values
        self.var_y = float(np.var(self.y))
        if self.var_y == 0.0:
            raise ConfigInvalid("target variance is zero")
        self.variable_indices = tuple(
            i for i, n in enumerate(data.names) if n != data.target
        )

    def __call__(self, e: ex.Expr) -> float:
        r = ex.evaluate(e, self.samples)
        if r.fault_fraction > FAULT_GATE:
            return math.inf
        ok = np.isfinite(r.values)
        resid = r.values[ok] - self.y[ok]
        return float(resid @ resid) / (ok.sum() * self.var_y)

    def spawn(self, _island: int) -> "SquaredErrorLoss":
        return self

    def end_iteration(self) -> None:
        pass


# Operation-style wrappers ------------------------------------------------


def loss_hierarchical(branches: ex.Expr, data: Dataset, spec: HierarchicalSpec) -> float:
    return HierarchicalLoss(data, spec)(branches)


def loss_implicit(
    e: ex.Expr,
    data: Dataset,
    spec: ImplicitSpec,
    seed: int = 0,
    dims_map=None,
    include_target: bool = True,
) -> float:
    return ImplicitLoss(data, spec, seed=seed, dims_map=dims_map, include_target=include_target)(e)


def loss_transformation(p: ex.Expr, data: Dataset, spec: TransformSpec) -> float:
    return TransformLoss(data, spec)(p)


def p_sens(e: ex.Expr, data: Dataset, spec: ImplicitSpec, seed: int = 0) -> float:
    loss = ImplicitLoss(data, spec, seed=seed)
    return loss.p_sens_count(e) * loss.weights[0]


def p_dim(e: ex.Expr, data: Dataset, spec: ImplicitSpec | None = None, dims_map=None) -> float:
    loss = ImplicitLoss(data, spec or ImplicitSpec(), dims_map=dims_map)
    return loss.p_dim_count(e) * loss.weights[1]


def p_rule(e: ex.Expr, spec: ImplicitSpec | None = None) -> float:
    spec = spec or ImplicitSpec()
    w = spec.w_rule if spec.w_rule is not None else 1.0
    return ex.detect_trivial_patterns(e) * w
