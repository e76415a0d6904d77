"""Survey schema: variables, valid integer response codes, record validation.

The shipped default codebook mirrors the 2023 BRFSS coding for 14
categorical variables (demographics, health conditions, behaviors).
Missing-data sentinel codes (don't know / refused) are deliberately
excluded: records carrying them are rejected, never imputed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ValidationError
from .metrics import CategoricalDistribution

__all__ = [
    "VariableSpec",
    "Codebook",
    "SurveyRecord",
    "SurveyDataset",
    "Verdict",
    "load_codebook",
    "default_codebook",
    "validate_record",
    "marginal_distribution",
]

ROLES = ("demographic", "health", "behavior")


@dataclass(frozen=True)
class VariableSpec:
    """One categorical survey variable and its valid integer response codes."""

    name: str
    codes: tuple[int, ...]
    labels: Mapping[int, str] | None = None
    role: str = "demographic"

    def __post_init__(self):
        if not self.name:
            raise ValidationError("variable name must be non-empty")
        if not self.codes:
            raise ValidationError(f"variable {self.name!r}: empty code list")
        if len(set(self.codes)) != len(self.codes):
            raise ValidationError(f"variable {self.name!r}: duplicate codes in {self.codes}")
        if self.role not in ROLES:
            raise ValidationError(f"variable {self.name!r}: unknown role {self.role!r}")
        if self.labels:
            bad = set(self.labels) - set(self.codes)
            if bad:
                raise ValidationError(
                    f"variable {self.name!r}: labels for non-codes {sorted(bad)}"
                )

    @property
    def code_set(self) -> frozenset[int]:
        return frozenset(self.codes)


@dataclass(frozen=True)
class Codebook:
    """Ordered collection of variables; variable names are unique."""

    variables: tuple[VariableSpec, ...]

    def __post_init__(self):
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ValidationError(f"duplicate variable names: {dupes}")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.variables)

    def __len__(self) -> int:
        return len(self.variables)

    def __contains__(self, name: str) -> bool:
        return name in self.names

    def __getitem__(self, name: str) -> VariableSpec:
        for v in self.variables:
            if v.name == name:
                return v
        raise ValidationError(f"unknown variable {name!r}")


@dataclass(frozen=True)
class SurveyRecord:
    """One integer-coded survey response: variable name -> code."""

    values: Mapping[str, int]

    def __getitem__(self, name: str) -> int:
        return self.values[name]


@dataclass(frozen=True)
class Verdict:
    """Validation outcome: accepted, or rejected with per-variable reasons."""

    accepted: bool
    reasons: tuple[str, ...] = ()


def validate_record(record: SurveyRecord, codebook: Codebook) -> Verdict:
    """Accept iff every codebook variable is present and in its code set.

    Pure: never mutates or imputes; rejection lists every offending variable.
    """
    reasons = []
    for var in codebook.variables:
        if var.name not in record.values:
            reasons.append(f"{var.name}: missing")
            continue
        value = record.values[var.name]
        if not isinstance(value, int) or isinstance(value, bool) or value not in var.code_set:
            reasons.append(f"{var.name}: value {value!r} not in valid codes")
    return Verdict(accepted=not reasons, reasons=tuple(reasons))


class SurveyDataset:
    """Immutable collection of valid records with optional design weights."""

    def __init__(self, codebook: Codebook, records: Sequence[SurveyRecord],
                 weights: Sequence[float] | None = None, provenance: str = ""):
        self.codebook = codebook
        self.records = tuple(records)
        self.provenance = provenance
        if weights is not None:
            w = np.asarray(weights, dtype=float)
            if len(w) != len(self.records):
                raise ValidationError(
                    f"{len(w)} weights for {len(self.records)} records"
                )
            if np.any(w < 0):
                raise ValidationError("negative design weight")
            if len(w) and w.sum() <= 0:
                raise ValidationError("all design weights are zero")
            self.weights = w
        else:
            self.weights = None
        for i, rec in enumerate(self.records):
            verdict = validate_record(rec, codebook)
            if not verdict.accepted:
                raise ValidationError(
                    f"record {i} invalid: " + "; ".join(verdict.reasons)
                )

    def __len__(self) -> int:
        return len(self.records)

    def effective_weights(self) -> np.ndarray:
        """Design weights when present, else uniform 1.0."""
        if self.weights is not None:
            return self.weights
        return np.ones(len(self.records))

    def codes_for(self, variable: str) -> np.ndarray:
        """Integer code per record for one variable."""
        self.codebook[variable]
        return np.array([r[variable] for r in self.records], dtype=int)

    def marginal(self, variable: str) -> CategoricalDistribution:
        return marginal_distribution(self, variable)

    def concat(self, other: "SurveyDataset") -> "SurveyDataset":
        if self.codebook != other.codebook:
            raise ValidationError("cannot concatenate datasets with different codebooks")
        weights = None
        if self.weights is not None or other.weights is not None:
            weights = np.concatenate([self.effective_weights(), other.effective_weights()])
        return SurveyDataset(self.codebook, self.records + other.records,
                             weights=weights, provenance=self.provenance)


def marginal_distribution(dataset: SurveyDataset, variable: str) -> CategoricalDistribution:
    """Weighted probability vector over the variable's codes, in code order."""
    spec = dataset.codebook[variable]
    if len(dataset) == 0:
        raise ValidationError("marginal of an empty dataset")
    w = dataset.effective_weights()
    total = w.sum()
    if total <= 0:
        raise ValidationError("zero total weight")
    codes = dataset.codes_for(variable)
    probs = []
    for code in spec.codes:
        probs.append(float(w[codes == code].sum() / total))
    # renormalize away accumulated rounding so the sum-to-1 invariant holds
    s = sum(probs)
    probs = [p / s for p in probs]
    return CategoricalDistribution(variable=variable, codes=spec.codes,
                                   probs=tuple(probs))


def load_codebook(source) -> Codebook:
    """Load a codebook from a JSON document (path, string, or parsed dict).

    Expected shape: {"variables": [{"name", "codes", "labels"?, "role"?}]}.
    Variable order is preserved from the document.
    """
    if isinstance(source, (str, Path)) and Path(str(source)).exists():
        text = Path(source).read_text()
        doc = _parse_json(text, where=str(source))
    elif isinstance(source, str):
        doc = _parse_json(source, where="<string>")
    elif isinstance(source, Mapping):
        doc = source
    else:
        raise ValidationError(f"cannot load codebook from {type(source).__name__}")

    if not isinstance(doc, Mapping) or "variables" not in doc:
        raise ValidationError("codebook document must contain a 'variables' list")
    variables = []
    for i, entry in enumerate(doc["variables"]):
        where = f"variables[{i}]"
        name = entry.get("name")
        if not name:
            raise ValidationError(f"{where}: missing variable name")
        codes = entry.get("codes")
        if not codes:
            raise ValidationError(f"{where} ({name}): missing or empty code list")
        labels = entry.get("labels") or None
        if labels is not None:
            labels = {int(k): str(v) for k, v in labels.items()}
        try:
            variables.append(VariableSpec(
                name=str(name),
                codes=tuple(int(c) for c in codes),
                labels=labels,
                role=entry.get("role", "demographic"),
            ))
        except ValidationError as exc:
            raise ValidationError(f"{where}: {exc}") from exc
    return Codebook(variables=tuple(variables))


def _parse_json(text: str, where: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{where}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc


def default_codebook() -> Codebook:
    """The shipped 14-variable BRFSS-style codebook."""
    text = resources.files("popsynth.data").joinpath("default_codebook.json").read_text()
    return load_codebook(_parse_json(text, where="default_codebook.json"))
