"""Categorical divergence and correlation metrics, plus tabular report structures.

All divergences use base-2 logarithms, so JS divergence lives in [0, 1]
with 0 for identical distributions and 1 for disjoint support.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ValidationError

__all__ = [
    "CategoricalDistribution",
    "DivergenceTable",
    "DeltaTable",
    "ResidualReport",
    "kl_divergence",
    "js_divergence",
    "pearson_r",
    "divergence_table",
    "divergence_delta",
    "category_residuals",
]


@dataclass(frozen=True)
class CategoricalDistribution:
    """Probability vector over a variable's response codes, in codebook code order."""

    variable: str
    codes: tuple[int, ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        if len(self.codes) != len(self.probs):
            raise ValidationError(
                f"{self.variable}: {len(self.codes)} codes but {len(self.probs)} probabilities"
            )
        p = np.asarray(self.probs, dtype=float)
        if np.any(p < 0):
            raise ValidationError(f"{self.variable}: negative probability")
        if abs(p.sum() - 1.0) > 1e-12:
            raise ValidationError(
                f"{self.variable}: probabilities sum to {p.sum()!r}, expected 1"
            )

    def as_array(self) -> np.ndarray:
        return np.asarray(self.probs, dtype=float)


def _check_support(p: CategoricalDistribution, q: CategoricalDistribution):
    if p.variable != q.variable or p.codes != q.codes:
        raise ValidationError(
            f"support mismatch: {p.variable}{p.codes} vs {q.variable}{q.codes}"
        )


def kl_divergence(p: CategoricalDistribution, q: CategoricalDistribution) -> float:
    """KL(P || Q) in bits, with the 0*log(0/q) = 0 convention.

    Returns +inf when Q assigns zero mass somewhere P does not.
    """
    _check_support(p, q)
    pa, qa = p.as_array(), q.as_array()
    support = pa > 0
    if np.any(qa[support] == 0):
        return float("inf")
    return float(np.sum(pa[support] * np.log2(pa[support] / qa[support])))


def js_divergence(p: CategoricalDistribution, q: CategoricalDistribution) -> float:
    """Jensen-Shannon divergence in bits: ½KL(P||M) + ½KL(Q||M) with M = ½(P+Q).

    Always finite (M dominates both arguments); symmetric; 0 iff P = Q;
    bounded by 1 in base 2.
    """
    _check_support(p, q)
    pa, qa = p.as_array(), q.as_array()
    m = 0.5 * (pa + qa)

    def _kl(a):
        s = a > 0
        return float(np.sum(a[s] * np.log2(a[s] / m[s])))

    return 0.5 * _kl(pa) + 0.5 * _kl(qa)


def pearson_r(x: Sequence[float], y: Sequence[float]) -> float:
    """Standard product-moment correlation coefficient."""
    xa = np.asarray(x, dtype=float)
    ya = np.asarray(y, dtype=float)
    if xa.shape != ya.shape:
        raise ValidationError(f"length mismatch: {xa.shape} vs {ya.shape}")
    if xa.size < 2:
        raise ValidationError("pearson_r needs at least 2 points")
    xc = xa - xa.mean()
    yc = ya - ya.mean()
    sx = np.sqrt(np.sum(xc * xc))
    sy = np.sqrt(np.sum(yc * yc))
    if sx == 0 or sy == 0:
        raise ValidationError("pearson_r undefined for zero-variance input")
    return float(np.sum(xc * yc) / (sx * sy))


@dataclass
class DivergenceTable:
    """JS divergence per (variable, candidate dataset), with row and column means."""

    rows: tuple[str, ...]
    columns: tuple[str, ...]
    cells: np.ndarray  # shape (len(rows), len(columns))

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=float)
        if self.cells.shape != (len(self.rows), len(self.columns)):
            raise ValidationError(
                f"cell shape {self.cells.shape} does not match "
                f"{len(self.rows)} rows x {len(self.columns)} columns"
            )

    @property
    def row_means(self) -> np.ndarray:
        return self.cells.mean(axis=1)

    @property
    def column_means(self) -> np.ndarray:
        return self.cells.mean(axis=0)

    def cell(self, variable: str, column: str) -> float:
        return float(self.cells[self.rows.index(variable), self.columns.index(column)])


@dataclass
class DeltaTable:
    """Cellwise (after - before) change in JS divergence across a synthesis step."""

    rows: tuple[str, ...]
    columns: tuple[str, ...]
    cells: np.ndarray

    def cell(self, variable: str, column: str) -> float:
        return float(self.cells[self.rows.index(variable), self.columns.index(column)])


@dataclass
class ResidualReport:
    """Per-category residuals truth_share - model_share for one variable.

    Negative residual: the model overestimates the category; positive:
    the model underestimates it.
    """

    variable: str
    codes: tuple[int, ...]
    residuals: tuple[float, ...]
    truth: tuple[float, ...] = field(default=())
    model: tuple[float, ...] = field(default=())


def divergence_table(truth, candidates: Sequence[tuple[str, object]],
                     variables: Sequence[str]) -> DivergenceTable:
    """JS divergence of each labeled candidate against the truth, per variable.

    `truth` and each candidate must expose `marginal(variable) ->
    CategoricalDistribution` over a shared codebook.
    """
    labels = tuple(label for label, _ in candidates)
    cells = np.zeros((len(variables), len(candidates)))
    for i, var in enumerate(variables):
        t = truth.marginal(var)
        for j, (_, cand) in enumerate(candidates):
            cells[i, j] = js_divergence(t, cand.marginal(var))
    return DivergenceTable(rows=tuple(variables), columns=labels, cells=cells)


def divergence_delta(before: DivergenceTable, after: DivergenceTable) -> DeltaTable:
    """Cellwise after - before; labels must match exactly."""
    if before.rows != after.rows or before.columns != after.columns:
        raise ValidationError(
            "divergence_delta: row/column labels differ between tables"
        )
    return DeltaTable(rows=before.rows, columns=before.columns,
                      cells=after.cells - before.cells)


def category_residuals(truth: CategoricalDistribution,
                       model: CategoricalDistribution) -> ResidualReport:
    """Residuals truth - model per category (sign convention of the report figures)."""
    _check_support(truth, model)
    res = truth.as_array() - model.as_array()
    return ResidualReport(
        variable=truth.variable,
        codes=truth.codes,
        residuals=tuple(float(r) for r in res),
        truth=truth.probs,
        model=model.probs,
    )
