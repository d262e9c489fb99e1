"""Multivariate polynomial least squares on a standardized monomial basis."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateVariance, InsufficientData, RankDeficient


def monomial_exponents(k: int, degree: int) -> list[tuple[int, ...]]:
    """All exponent multi-indices with total degree <= degree, in graded
    lexicographic order.  This order defines the coefficient layout."""
    out = []
    for total in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(k), total):
            e = [0] * k
            for i in combo:
                e[i] += 1
            out.append(tuple(e))
    # combinations_with_replacement already yields a deterministic order per
    # degree; sort within a degree for a stable, documented layout.
    return sorted(out, key=lambda t: (sum(t), tuple(-x for x in t)))


@dataclass(frozen=True)
class PolyModel:
    """Least-squares polynomial over standardized inputs."""

    input_count: int
    degree: int
    coefficients: np.ndarray
    means: np.ndarray
    scales: np.ndarray
    rss: float
    r2: float

    @property
    def coefficient_count(self) -> int:
        return len(self.coefficients)


def _design(Z: np.ndarray, exponents) -> np.ndarray:
    cols = []
    for e in exponents:
        col = np.ones(Z.shape[0])
        for i, p in enumerate(e):
            if p:
                col = col * Z[:, i] ** p
        cols.append(col)
    return np.column_stack(cols)


def fit_poly(X: np.ndarray, y: np.ndarray, degree: int) -> PolyModel:
    """Ordinary least squares on all monomials of total degree <= degree.

    Inputs are z-scored before basis expansion; the solve is QR-based via
    numpy's lstsq.  Raises InsufficientData / RankDeficient as appropriate.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if not 1 <= degree <= 5:
        raise ValueError("degree must be within 1..5")
    if X.shape[0] != y.shape[0]:
        raise ValueError("row count mismatch")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise ValueError("fit_poly requires finite inputs")
    k = X.shape[1]
    exps = monomial_exponents(k, degree)
    m = len(exps)
    if X.shape[0] < m:
        raise InsufficientData(f"{X.shape[0]} rows < {m} coefficients")

    means = X.mean(axis=0)
    scales = X.std(axis=0)
    scales = np.where(scales > 0, scales, 1.0)
    Z = (X - means) / scales

    A = _design(Z, exps)
    beta, _, rank_, _ = np.linalg.lstsq(A, y, rcond=None)
    if rank_ < m:
        raise RankDeficient(f"design rank {rank_} < {m} coefficients")
    resid = y - A @ beta
    rss = float(resid @ resid)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - rss / ss_tot if ss_tot > 0 else 1.0
    return PolyModel(
        input_count=k,
        degree=degree,
        coefficients=beta,
        means=means,
        scales=scales,
        rss=rss,
        r2=r2,
    )


def predict(model: PolyModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[1] != model.input_count:
        raise ValueError(f"expected {model.input_count} columns, got {X.shape[1]}")
    Z = (X - model.means) / model.scales
    A = _design(Z, monomial_exponents(model.input_count, model.degree))
    return A @ model.coefficients


def r_squared(y: np.ndarray, yhat: np.ndarray) -> float:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    yhat = np.asarray(yhat, dtype=np.float64).reshape(-1)
    if y.shape != yhat.shape:
        raise ValueError("length mismatch")
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise DegenerateVariance("target variance is zero")
    ss_res = float(((y - yhat) ** 2).sum())
    return 1.0 - ss_res / ss_tot


def mean_relative_error(y: np.ndarray, yhat: np.ndarray) -> float:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    yhat = np.asarray(yhat, dtype=np.float64).reshape(-1)
    if y.shape != yhat.shape:
        raise ValueError("length mismatch")
    if np.any(y == 0.0):
        raise ValueError("mean_relative_error requires nonzero targets")
    return float(np.mean(np.abs(yhat - y) / np.abs(y)))


def sweep_degree(X, y, max_degree=5, r2_threshold=0.99):
    """Fit degrees 1..max_degree; return the lowest-degree model reaching the
    R^2 threshold, else the best-R^2 model."""
    best = None
    for d in range(1, max_degree + 1):
        try:
            m = fit_poly(X, y, d)
        except (RankDeficient, InsufficientData):
            break
        if m.r2 >= r2_threshold:
            return m
        if best is None or m.r2 > best.r2:
            best = m
    if best is None:
        raise RankDeficient("no degree admits a full-rank fit")
    return best
