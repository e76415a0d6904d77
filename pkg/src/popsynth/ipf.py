"""Iterative proportional fitting, integerization, and population expansion.

Survey records are reweighted per census tract until their weighted
marginals match the tract's target counts for each fitting variable,
then converted to whole-person replication counts by
truncate-replicate-sample and expanded into synthetic individuals that
carry over every non-fitted attribute verbatim.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .codebook import Codebook, SurveyDataset, SurveyRecord
from .errors import ValidationError
from .metrics import CategoricalDistribution

__all__ = [
    "TractMarginals",
    "ConstraintSet",
    "IPFConfig",
    "FittedWeights",
    "SyntheticIndividual",
    "SyntheticPopulation",
    "TractDiagnostics",
    "harmonize_marginals",
    "initial_weights",
    "ipf_fit",
    "integerize_trs",
    "expand",
    "synthesize_population",
    "tract_seed",
]

DEFAULT_FITTING_VARIABLES = ("age", "race_ethnicity", "sex", "income", "education")


@dataclass
class TractMarginals:
    """Target category counts for one census tract."""

    geoid: str
    counts: dict[tuple[str, int], float]
    population_total: float = 0.0

    def variable_total(self, variable: str) -> float:
        return sum(v for (name, _), v in self.counts.items() if name == variable)

    def target(self, variable: str, code: int) -> float:
        return self.counts.get((variable, code), 0.0)


@dataclass
class ConstraintSet:
    """Per-tract marginal constraints over an ordered list of fitting variables."""

    fitting_variables: tuple[str, ...]
    tracts: dict[str, TractMarginals]
    harmonized: bool = False

    def validate_against(self, codebook: Codebook):
        for name in self.fitting_variables:
            if name not in codebook:
                raise ValidationError(f"fitting variable {name!r} not in codebook")
        for geoid, tract in self.tracts.items():
            for name in self.fitting_variables:
                spec = codebook[name]
                for (var, code) in tract.counts:
                    if var == name and code not in spec.code_set:
                        raise ValidationError(
                            f"tract {geoid}: {var} code {code} not in codebook"
                        )


@dataclass(frozen=True)
class IPFConfig:
    max_sweeps: int = 100
    rel_tolerance: float = 1e-6


@dataclass
class FittedWeights:
    """IPF output for one tract."""

    geoid: str
    weights: np.ndarray
    iterations_used: int
    tae: float
    unreachable_mass: float
    converged: bool


@dataclass(frozen=True)
class SyntheticIndividual:
    person_id: int
    geoid: str
    values: Mapping[str, int]


@dataclass
class TractDiagnostics:
    geoid: str
    iterations: int
    tae: float
    unreachable_mass: float
    converged: bool
    n_individuals: int
    seed: int


class SyntheticPopulation:
    """Expanded synthetic individuals for all tracts, with run diagnostics."""

    def __init__(self, codebook: Codebook, individuals: Sequence[SyntheticIndividual],
                 source_provenance: str = "", master_seed: int = 0,
                 diagnostics: Sequence[TractDiagnostics] = ()):
        self.codebook = codebook
        self.individuals = tuple(individuals)
        self.source_provenance = source_provenance
        self.master_seed = master_seed
        self.diagnostics = tuple(diagnostics)

    def __len__(self) -> int:
        return len(self.individuals)

    def tract_geoids(self) -> tuple[str, ...]:
        """All tracts attempted in synthesis (diagnostics), else tracts present."""
        if self.diagnostics:
            return tuple(d.geoid for d in self.diagnostics)
        return tuple(sorted({ind.geoid for ind in self.individuals}))

    def marginal(self, variable: str) -> CategoricalDistribution:
        spec = self.codebook[variable]
        if not self.individuals:
            raise ValidationError("marginal of an empty population")
        values = np.array([ind.values[variable] for ind in self.individuals], dtype=int)
        n = len(values)
        probs = [float(np.count_nonzero(values == code)) / n for code in spec.codes]
        s = sum(probs)
        probs = [p / s for p in probs]
        return CategoricalDistribution(variable=variable, codes=spec.codes,
                                       probs=tuple(probs))


def harmonize_marginals(raw: ConstraintSet) -> ConstraintSet:
    """Rescale each tract's variables so every fitting variable totals the same.

    The first fitting variable's total becomes the tract's population_total;
    other variables are rescaled proportionally. Zero-total variables are
    left at zero (flagged by the caller via unreachable diagnostics).
    """
    first = raw.fitting_variables[0]
    tracts = {}
    for geoid, tract in raw.tracts.items():
        total = tract.variable_total(first)
        if total <= 0:
            raise ValidationError(
                f"tract {geoid}: fitting variable {first!r} has zero total"
            )
        counts = dict(tract.counts)
        for name in raw.fitting_variables[1:]:
            vt = tract.variable_total(name)
            if vt <= 0:
                continue
            scale = total / vt
            for key in list(counts):
                if key[0] == name:
                    counts[key] = counts[key] * scale
        tracts[geoid] = TractMarginals(geoid=geoid, counts=counts,
                                       population_total=total)
    return ConstraintSet(fitting_variables=raw.fitting_variables, tracts=tracts,
                         harmonized=True)


def initial_weights(survey: SurveyDataset) -> np.ndarray:
    """Design weights when present, uniform 1.0 otherwise. Never zero-initialized."""
    if len(survey) == 0:
        raise ValidationError("cannot initialize weights for an empty survey")
    return survey.effective_weights().astype(float).copy()


def ipf_fit(survey: SurveyDataset, marginals: TractMarginals,
            fitting_variables: Sequence[str],
            config: IPFConfig = IPFConfig(),
            start: np.ndarray | None = None) -> FittedWeights:
    """Fit record weights to one tract's marginal targets.

    Sweeps over fitting variables in declared order; within a sweep each
    category's weights are multiplied by target / current so that, right
    after scaling a variable, its weighted marginals match the targets
    exactly (where the survey has support). Deterministic; non-convergence
    is reported, never raised.
    """
    if len(survey) == 0:
        raise ValidationError("cannot fit an empty survey")
    w = initial_weights(survey) if start is None else np.asarray(start, dtype=float).copy()

    masks: list[tuple[str, int, np.ndarray, float]] = []
    unreachable = 0.0
    for name in fitting_variables:
        spec = survey.codebook[name]
        codes = survey.codes_for(name)
        for code in spec.codes:
            target = marginals.target(name, code)
            mask = codes == code
            if not mask.any():
                unreachable += target
                continue
            masks.append((name, code, mask, target))

    iterations = 0
    converged = False
    for sweep in range(config.max_sweeps):
        for _, _, mask, target in masks:
            current = w[mask].sum()
            if current > 0:
                w[mask] *= target / current
        iterations = sweep + 1
        max_rel = 0.0
        for _, _, mask, target in masks:
            current = w[mask].sum()
            if target > 0:
                max_rel = max(max_rel, abs(current - target) / target)
            elif current > 0:
                max_rel = max(max_rel, 1.0)
        if max_rel <= config.rel_tolerance:
            converged = True
            break

    tae = unreachable
    for _, _, mask, target in masks:
        tae += abs(w[mask].sum() - target)
    return FittedWeights(geoid=marginals.geoid, weights=w,
                         iterations_used=iterations, tae=float(tae),
                         unreachable_mass=float(unreachable), converged=converged)


def integerize_trs(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Truncate-replicate-sample integerization.

    Keeps each weight's integer part and allocates the remaining
    D = round(sum(w)) - sum(floor(w)) copies by sampling D distinct records
    without replacement, with probability proportional to the fractional
    parts. Records with zero fractional part never gain an extra copy.
    """
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise ValidationError("negative weight in integerization")
    floors = np.floor(w).astype(np.int64)
    frac = w - floors
    # guard against float noise making frac tiny-negative or >= 1
    frac = np.clip(frac, 0.0, None)
    total = int(np.rint(w.sum()))
    shortfall = total - int(floors.sum())
    counts = floors.copy()
    if shortfall > 0:
        candidates = np.flatnonzero(frac > 0)
        if shortfall > len(candidates):
            raise ValidationError(
                f"integerization shortfall {shortfall} exceeds {len(candidates)} "
                "records with fractional mass"
            )
        p = frac[candidates] / frac[candidates].sum()
        chosen = rng.choice(candidates, size=shortfall, replace=False, p=p)
        counts[chosen] += 1
    return counts


def expand(survey: SurveyDataset, counts: np.ndarray, geoid: str,
           id_base: int = 0) -> list[SyntheticIndividual]:
    """Replicate record i `counts[i]` times with verbatim attribute carry-over."""
    if len(counts) != len(survey):
        raise ValidationError(
            f"{len(counts)} counts for {len(survey)} records"
        )
    individuals = []
    pid = id_base
    for record, count in zip(survey.records, counts):
        for _ in range(int(count)):
            individuals.append(SyntheticIndividual(
                person_id=pid, geoid=geoid, values=dict(record.values)))
            pid += 1
    return individuals


def tract_seed(master_seed: int, geoid: str) -> int:
    """Stable per-tract seed independent of tract iteration order."""
    digest = hashlib.sha256(f"{master_seed}:{geoid}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def synthesize_population(survey: SurveyDataset, constraints: ConstraintSet,
                          config: IPFConfig = IPFConfig(),
                          master_seed: int = 0) -> SyntheticPopulation:
    """Fit, integerize, and expand every tract in ascending geoid order."""
    if not constraints.harmonized:
        constraints = harmonize_marginals(constraints)
    constraints.validate_against(survey.codebook)
    individuals: list[SyntheticIndividual] = []
    diagnostics: list[TractDiagnostics] = []
    for geoid in sorted(constraints.tracts):
        tract = constraints.tracts[geoid]
        fitted = ipf_fit(survey, tract, constraints.fitting_variables, config)
        seed = tract_seed(master_seed, geoid)
        rng = np.random.default_rng(seed)
        counts = integerize_trs(fitted.weights, rng)
        expanded = expand(survey, counts, geoid, id_base=len(individuals))
        individuals.extend(expanded)
        diagnostics.append(TractDiagnostics(
            geoid=geoid, iterations=fitted.iterations_used, tae=fitted.tae,
            unreachable_mass=fitted.unreachable_mass, converged=fitted.converged,
            n_individuals=len(expanded), seed=seed))
    return SyntheticPopulation(codebook=survey.codebook, individuals=individuals,
                               source_provenance=survey.provenance,
                               master_seed=master_seed, diagnostics=diagnostics)
