"""Tract-level small-area estimates and comparison against external benchmarks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .errors import ValidationError
from .ipf import SyntheticPopulation
from .metrics import pearson_r

__all__ = [
    "OutcomePredicate",
    "TractEstimates",
    "BenchmarkTable",
    "ResidualRow",
    "ResidualMapReport",
    "tract_estimate",
    "residual_map",
    "spatial_correlation",
    "normalize_geoid",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OutcomePredicate:
    """A binary outcome: variable value in positive_codes counts as positive."""

    variable: str
    positive_codes: frozenset[int]
    label: str = ""

    def __post_init__(self):
        if not self.positive_codes:
            raise ValidationError(f"predicate {self.label or self.variable}: empty positive codes")


@dataclass
class TractEstimates:
    """Per-tract outcome proportions with the underlying population counts."""

    label: str
    proportions: dict[str, float]
    population_counts: dict[str, int]
    excluded_tracts: tuple[str, ...] = ()


@dataclass
class BenchmarkTable:
    """External per-tract proportions (e.g. ACS, CDC PLACES)."""

    source: str
    values: dict[str, float]

    @classmethod
    def from_values(cls, source: str, values: Mapping[str, float]) -> "BenchmarkTable":
        """Build a table, rescaling percentage-style inputs (values > 1) to proportions."""
        vals = {normalize_geoid(g): float(v) for g, v in values.items()}
        if vals and max(vals.values()) > 1.0:
            log.info("benchmark %s: values exceed 1, interpreting as percentages", source)
            vals = {g: v / 100.0 for g, v in vals.items()}
        for g, v in vals.items():
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"benchmark {source}: value {v} for tract {g} out of [0,1]")
        return cls(source=source, values=vals)


@dataclass
class ResidualRow:
    geoid: str
    estimate: float
    benchmark: float
    residual: float


@dataclass
class ResidualMapReport:
    """Per-tract residuals benchmark - estimate, plus join bookkeeping."""

    rows: list[ResidualRow]
    unmatched_estimates: tuple[str, ...]
    unmatched_benchmark: tuple[str, ...]

    @property
    def mean_residual(self) -> float:
        return sum(r.residual for r in self.rows) / len(self.rows)

    @property
    def mean_abs_residual(self) -> float:
        return sum(abs(r.residual) for r in self.rows) / len(self.rows)


def normalize_geoid(geoid: str) -> str:
    """Normalize a tract code for exact-string matching (strip, restore any
    leading zero lost to numeric round-tripping of 11-digit codes)."""
    g = str(geoid).strip()
    if g.isdigit() and len(g) == 10:
        g = "0" + g
    return g


def tract_estimate(population: SyntheticPopulation,
                   predicate: OutcomePredicate) -> TractEstimates:
    """Proportion of individuals per tract satisfying the predicate.

    Tracts attempted in synthesis but left empty are excluded and listed.
    """
    if len(population) == 0:
        raise ValidationError("cannot estimate over an empty population")
    spec = population.codebook[predicate.variable]
    bad = predicate.positive_codes - spec.code_set
    if bad:
        raise ValidationError(
            f"predicate {predicate.label or predicate.variable}: codes {sorted(bad)} "
            f"not valid for {predicate.variable}"
        )
    totals: dict[str, int] = {}
    positives: dict[str, int] = {}
    for ind in population.individuals:
        totals[ind.geoid] = totals.get(ind.geoid, 0) + 1
        if ind.values[predicate.variable] in predicate.positive_codes:
            positives[ind.geoid] = positives.get(ind.geoid, 0) + 1
    excluded = tuple(g for g in population.tract_geoids() if g not in totals)
    proportions = {g: positives.get(g, 0) / n for g, n in sorted(totals.items())}
    return TractEstimates(
        label=predicate.label or predicate.variable,
        proportions=proportions,
        population_counts=dict(sorted(totals.items())),
        excluded_tracts=excluded,
    )


def residual_map(estimates: TractEstimates,
                 benchmark: BenchmarkTable) -> ResidualMapReport:
    """Residual benchmark - estimate per tract on the geoid intersection.

    Negative residual: the synthetic population overestimates the outcome.
    Non-matching geoids are reported separately, never fuzzily joined.
    """
    est = {normalize_geoid(g): v for g, v in estimates.proportions.items()}
    common = sorted(set(est) & set(benchmark.values))
    if not common:
        raise ValidationError(
            f"no overlapping tracts between estimates and benchmark {benchmark.source}"
        )
    rows = [ResidualRow(geoid=g, estimate=est[g], benchmark=benchmark.values[g],
                        residual=benchmark.values[g] - est[g]) for g in common]
    return ResidualMapReport(
        rows=rows,
        unmatched_estimates=tuple(sorted(set(est) - set(benchmark.values))),
        unmatched_benchmark=tuple(sorted(set(benchmark.values) - set(est))),
    )


def spatial_correlation(estimates: TractEstimates,
                        benchmark: BenchmarkTable) -> float:
    """Pearson r between estimates and benchmark, paired by geoid."""
    est = {normalize_geoid(g): v for g, v in estimates.proportions.items()}
    common = sorted(set(est) & set(benchmark.values))
    if len(common) < 2:
        raise ValidationError("spatial correlation needs at least 2 overlapping tracts")
    return pearson_r([est[g] for g in common],
                     [benchmark.values[g] for g in common])
