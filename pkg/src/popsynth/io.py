"""File ingestion and emission: surveys, marginals, populations, benchmarks, tables.

All CSV output uses a fixed header and LF line endings. Display tables are
written to 3 decimal places with a full-precision JSON sidecar, so emitted
files round-trip exactly for downstream tooling.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .codebook import Codebook, SurveyDataset, SurveyRecord
from .errors import ValidationError
from .ipf import (ConstraintSet, SyntheticIndividual, SyntheticPopulation,
                  TractDiagnostics, TractMarginals)
from .metrics import DeltaTable, DivergenceTable, ResidualReport
from .sae import BenchmarkTable, ResidualMapReport, normalize_geoid

__all__ = [
    "read_survey_csv",
    "write_survey_csv",
    "read_population_csv",
    "write_population_csv",
    "read_marginals_csv",
    "read_benchmark_csv",
    "write_table_csv",
    "write_table_json",
    "write_residual_report_csv",
    "write_sae_report",
    "write_diagnostics",
]

WEIGHT_COLUMN = "_WEIGHT"


def _float_repr(x: float) -> str:
    # repr round-trips doubles exactly
    return repr(float(x))


def read_survey_csv(path: str | Path, codebook: Codebook,
                    provenance: str = "") -> SurveyDataset:
    """Read a survey dataset CSV: codebook columns plus optional trailing _WEIGHT."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        has_weights = header and header[-1] == WEIGHT_COLUMN
        var_header = tuple(header[:-1]) if has_weights else tuple(header)
        if var_header != codebook.names:
            raise ValidationError(
                f"{path}: header {var_header} does not match codebook "
                f"variables {codebook.names}"
            )
        records, weights = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            expected = len(header)
            if len(row) != expected:
                raise ValidationError(f"{path}:{lineno}: expected {expected} cells, got {len(row)}")
            try:
                values = {name: int(cell) for name, cell in zip(var_header, row)}
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: non-integer code: {exc}") from exc
            records.append(SurveyRecord(values=values))
            if has_weights:
                try:
                    weights.append(float(row[-1]))
                except ValueError as exc:
                    raise ValidationError(f"{path}:{lineno}: bad weight: {exc}") from exc
    return SurveyDataset(codebook, records,
                         weights=weights if has_weights else None,
                         provenance=provenance or str(path))


def write_survey_csv(path: str | Path, dataset: SurveyDataset):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = list(dataset.codebook.names)
        if dataset.weights is not None:
            header.append(WEIGHT_COLUMN)
        writer.writerow(header)
        for i, rec in enumerate(dataset.records):
            row = [rec[name] for name in dataset.codebook.names]
            if dataset.weights is not None:
                row.append(_float_repr(dataset.weights[i]))
            writer.writerow(row)


def write_population_csv(path: str | Path, population: SyntheticPopulation):
    """Population CSV: person_id, geoid, then the codebook variables,
    in geoid-then-person_id order."""
    names = population.codebook.names
    ordered = sorted(population.individuals, key=lambda ind: (ind.geoid, ind.person_id))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["person_id", "geoid", *names])
        for ind in ordered:
            writer.writerow([ind.person_id, ind.geoid,
                             *[ind.values[name] for name in names]])


def read_population_csv(path: str | Path, codebook: Codebook,
                        provenance: str = "") -> SyntheticPopulation:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        expected = ("person_id", "geoid", *codebook.names)
        if tuple(header) != expected:
            raise ValidationError(f"{path}: header does not match {expected}")
        individuals = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                individuals.append(SyntheticIndividual(
                    person_id=int(row[0]), geoid=row[1],
                    values={name: int(cell) for name, cell in zip(codebook.names, row[2:])},
                ))
            except (ValueError, IndexError) as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
    return SyntheticPopulation(codebook, individuals,
                               source_provenance=provenance or str(path))


def read_marginals_csv(path: str | Path,
                       fitting_variables: Sequence[str] | None = None,
                       codebook: Codebook | None = None) -> ConstraintSet:
    """Marginals CSV `geoid,variable,code,count`; fitting-variable order is
    taken from the argument, else from first appearance in the file."""
    path = Path(path)
    order: list[str] = list(fitting_variables) if fitting_variables else []
    tracts: dict[str, TractMarginals] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["geoid", "variable", "code", "count"]:
            raise ValidationError(f"{path}: expected header geoid,variable,code,count")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ValidationError(f"{path}:{lineno}: expected 4 cells, got {len(row)}")
            geoid = normalize_geoid(row[0])
            variable = row[1].strip()
            try:
                code = int(row[2])
                count = float(row[3])
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
            if count < 0:
                raise ValidationError(f"{path}:{lineno}: negative count {count}")
            if codebook is not None:
                if variable not in codebook:
                    raise ValidationError(
                        f"{path}:{lineno}: unknown variable {variable!r}"
                    )
                if code not in codebook[variable].code_set:
                    raise ValidationError(
                        f"{path}:{lineno}: code {code} not valid for {variable!r}"
                    )
            if fitting_variables and variable not in order:
                # marginals files may carry extra variables; only fit the requested ones
                continue
            if variable not in order:
                order.append(variable)
            tract = tracts.setdefault(geoid, TractMarginals(geoid=geoid, counts={}))
            tract.counts[(variable, code)] = tract.counts.get((variable, code), 0.0) + count
    if not tracts:
        raise ValidationError(f"{path}: no marginal rows")
    return ConstraintSet(fitting_variables=tuple(order), tracts=tracts)


def read_benchmark_csv(path: str | Path, source: str = "") -> BenchmarkTable:
    """Benchmark CSV `geoid,value`."""
    path = Path(path)
    values = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["geoid", "value"]:
            raise ValidationError(f"{path}: expected header geoid,value")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                values[row[0]] = float(row[1])
            except (ValueError, IndexError) as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
    return BenchmarkTable.from_values(source or str(path), values)


def _table_rows(table: DivergenceTable | DeltaTable, with_means: bool):
    header = ["variable", *table.columns]
    rows = []
    if with_means:
        header.append("row_mean")
        row_means = table.cells.mean(axis=1)
        for i, name in enumerate(table.rows):
            rows.append([name, *table.cells[i, :].tolist(), float(row_means[i])])
        col_means = table.cells.mean(axis=0)
        rows.append(["column_mean", *col_means.tolist(), float(table.cells.mean())])
    else:
        for i, name in enumerate(table.rows):
            rows.append([name, *table.cells[i, :].tolist()])
    return header, rows


def write_table_csv(path: str | Path, table: DivergenceTable | DeltaTable,
                    with_means: bool = True, decimals: int = 3):
    """Display table rounded to `decimals` places (pair with write_table_json)."""
    header, rows = _table_rows(table, with_means)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([row[0], *[f"{v:.{decimals}f}" for v in row[1:]]])


def write_table_json(path: str | Path, table: DivergenceTable | DeltaTable,
                     with_means: bool = True):
    """Full-precision sidecar for the display CSV."""
    header, rows = _table_rows(table, with_means)
    doc = {"columns": header, "rows": rows}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def write_residual_report_csv(path: str | Path, reports: Iterable[ResidualReport],
                              codebook: Codebook | None = None):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variable", "code", "label", "truth_share",
                         "model_share", "residual"])
        for rep in reports:
            labels = {}
            if codebook is not None and rep.variable in codebook:
                labels = codebook[rep.variable].labels or {}
            for i, code in enumerate(rep.codes):
                writer.writerow([
                    rep.variable, code, labels.get(code, ""),
                    _float_repr(rep.truth[i]) if rep.truth else "",
                    _float_repr(rep.model[i]) if rep.model else "",
                    _float_repr(rep.residuals[i]),
                ])


def write_sae_report(csv_path: str | Path, summary_path: str | Path,
                     report: ResidualMapReport, correlation: float,
                     exclusions: Sequence[str] = (), notes: str = ""):
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["geoid", "estimate", "benchmark", "residual"])
        for row in report.rows:
            writer.writerow([row.geoid, _float_repr(row.estimate),
                             _float_repr(row.benchmark), _float_repr(row.residual)])
    summary = {
        "pearson_r": correlation,
        "mean_residual": report.mean_residual,
        "mean_abs_residual": report.mean_abs_residual,
        "n_tracts": len(report.rows),
        "exclusions": list(exclusions),
        "unmatched_estimates": list(report.unmatched_estimates),
        "unmatched_benchmark": list(report.unmatched_benchmark),
        "tract_weighting": "unweighted tract pairs",
    }
    if notes:
        summary["notes"] = notes
    Path(summary_path).write_text(json.dumps(summary, indent=2) + "\n")


def write_diagnostics(path: str | Path, population: SyntheticPopulation):
    doc = {
        "source_provenance": population.source_provenance,
        "master_seed": population.master_seed,
        "n_individuals": len(population),
        "tracts": [
            {
                "geoid": d.geoid,
                "iterations": d.iterations,
                "tae": d.tae,
                "unreachable_mass": d.unreachable_mass,
                "converged": d.converged,
                "n_individuals": d.n_individuals,
                "seed": d.seed,
            }
            for d in population.diagnostics
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
