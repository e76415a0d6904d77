"""Command-line surface: generate, synthesize, evaluate, validate.

Runs are driven by a single TOML config file; command-line flags override
config values. Exit codes: 0 success, 1 validation error, 2
provider/transport error, 3 internal invariant breach.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import click
import numpy as np

from . import io as psio
from .codebook import Codebook, default_codebook, load_codebook
from .errors import PopsynthError, ProviderError, ValidationError
from .genpipe import (CheckpointStore, GenerationSpec, run_generation,
                      resume_generation, DEFAULT_PROMPT_TEMPLATE)
from .ipf import (ConstraintSet, IPFConfig, harmonize_marginals,
                  synthesize_population, DEFAULT_FITTING_VARIABLES)
from .metrics import category_residuals, divergence_delta, divergence_table
from .providers import CREDENTIALS_ENV, SamplingParams, make_provider
from .sae import OutcomePredicate, residual_map, spatial_correlation, tract_estimate

log = logging.getLogger(__name__)


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"config file not found: {p}")
    try:
        with open(p, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"{p}: invalid TOML: {exc}") from exc


def _load_codebook_from(config: dict) -> Codebook:
    path = config.get("codebook", {}).get("path")
    return load_codebook(path) if path else default_codebook()


def _out_dir(ctx_obj: dict, config: dict) -> Path:
    out = ctx_obj.get("output_dir") or config.get("output", {}).get("dir") or "."
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


class _Exit(click.ClickException):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.exit_code = code


def _run(fn):
    try:
        fn()
    except PopsynthError as exc:
        raise _Exit(str(exc), exc.exit_code) from exc


@click.group()
@click.option("--config", "config_path", type=str, default=None,
              help="TOML run configuration.")
@click.option("--seed", type=int, default=None, help="Override master seed.")
@click.option("--output-dir", type=str, default=None)
@click.option("--provider", "provider_kind", default=None,
              type=click.Choice(["openai-compatible", "gemini-compatible", "mock"]))
@click.option("--resume", "resume_run", type=str, default=None,
              help="Resume generation from this run id's checkpoint.")
@click.option("--log-level", default="INFO",
              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"]))
@click.pass_context
def main(ctx, config_path, seed, output_dir, provider_kind, resume_run, log_level):
    """Synthetic survey generation, IPF population synthesis, and evaluation."""
    logging.basicConfig(level=getattr(logging, log_level),
                        format="%(levelname)s %(name)s: %(message)s")
    ctx.obj = {
        "config_path": config_path,
        "seed": seed,
        "output_dir": output_dir,
        "provider_kind": provider_kind,
        "resume_run": resume_run,
    }


@main.command()
@click.pass_obj
def generate(obj):
    """Generate survey records with the configured provider until target_n."""

    def body():
        config = _load_config(obj["config_path"])
        codebook = _load_codebook_from(config)
        gen = config.get("generation", {})
        for key in ("state_name", "year", "target_n"):
            if key not in gen:
                raise ValidationError(f"config [generation] missing {key!r}")
        sampling = SamplingParams(**gen.get("sampling", {}))
        template = DEFAULT_PROMPT_TEMPLATE
        if gen.get("prompt_template_path"):
            template = Path(gen["prompt_template_path"]).read_text()
        spec = GenerationSpec(
            state_name=gen["state_name"],
            year=int(gen["year"]),
            target_n=int(gen["target_n"]),
            batch_size=int(gen.get("batch_size", 75)),
            codebook=codebook,
            sampling=sampling,
            prompt_template=template,
            max_retries=int(gen.get("max_retries", 3)),
            backoff_base=float(gen.get("backoff_base", 1.0)),
            dead_batch_limit=int(gen.get("dead_batch_limit", 10)),
            parallelism=int(gen.get("parallelism", 1)),
        )
        prov_cfg = config.get("provider", {})
        kind = obj["provider_kind"] or prov_cfg.get("kind")
        if not kind:
            raise ValidationError("no provider selected (config [provider].kind or --provider)")
        mock_payloads = None
        if prov_cfg.get("mock_fixture"):
            mock_payloads = json.loads(Path(prov_cfg["mock_fixture"]).read_text())
        seed = obj["seed"] if obj["seed"] is not None else int(gen.get("seed", 0))
        provider = make_provider(
            kind, codebook,
            endpoint=prov_cfg.get("endpoint", ""),
            model_id=prov_cfg.get("model_id", ""),
            credentials_env=prov_cfg.get("credentials_env", CREDENTIALS_ENV),
            mock_payloads=mock_payloads,
            mock_seed=seed,
            rows_per_batch=spec.batch_size,
        )
        out = _out_dir(obj, config)
        label = gen.get("label") or f"{spec.state_name.lower().replace(' ', '_')}_{spec.year}"
        run_id = obj["resume_run"] or gen.get("run_id") or f"run_{label}"
        store = CheckpointStore(out / "checkpoints", run_id)
        if obj["resume_run"]:
            result = resume_generation(store, spec, provider)
        else:
            result = run_generation(spec, provider, store)
        survey_path = out / f"survey_{label}.csv"
        psio.write_survey_csv(survey_path, result.dataset)
        summary = result.summary.as_dict()
        (out / f"summary_{label}.json").write_text(json.dumps(summary, indent=2) + "\n")
        click.echo(json.dumps(summary, indent=2))
        click.echo(f"wrote {survey_path}")

    _run(body)


@main.command()
@click.pass_obj
def synthesize(obj):
    """Fit a survey to tract marginals and expand to a synthetic population."""

    def body():
        config = _load_config(obj["config_path"])
        codebook = _load_codebook_from(config)
        syn = config.get("synthesis", {})
        for key in ("survey_path", "marginals_path"):
            if key not in syn:
                raise ValidationError(f"config [synthesis] missing {key!r}")
        seed = obj["seed"] if obj["seed"] is not None else syn.get("master_seed")
        if seed is None:
            raise ValidationError(
                "master_seed must be set explicitly ([synthesis].master_seed or --seed)"
            )
        survey = psio.read_survey_csv(syn["survey_path"], codebook)
        fitting = tuple(syn.get("fitting_variables", DEFAULT_FITTING_VARIABLES))
        constraints = psio.read_marginals_csv(syn["marginals_path"],
                                              fitting_variables=fitting,
                                              codebook=codebook)
        constraints = harmonize_marginals(constraints)
        ipf_config = IPFConfig(max_sweeps=int(syn.get("max_sweeps", 100)),
                               rel_tolerance=float(syn.get("tolerance", 1e-6)))
        population = synthesize_population(survey, constraints, ipf_config,
                                           master_seed=int(seed))
        out = _out_dir(obj, config)
        label = syn.get("label", "population")
        pop_path = out / f"{label}.csv"
        psio.write_population_csv(pop_path, population)
        psio.write_diagnostics(out / f"{label}_diagnostics.json", population)
        click.echo(f"wrote {pop_path} ({len(population)} individuals, "
                   f"{len(population.diagnostics)} tracts)")

    _run(body)


@main.command()
@click.pass_obj
def evaluate(obj):
    """Emit divergence tables, deltas, category residuals, and SAE reports."""

    def body():
        config = _load_config(obj["config_path"])
        codebook = _load_codebook_from(config)
        ev = config.get("evaluation", {})
        if "ground_truth_path" not in ev:
            raise ValidationError("config [evaluation] missing 'ground_truth_path'")
        truth = psio.read_survey_csv(ev["ground_truth_path"], codebook)
        variables = list(ev.get("variables", codebook.names))
        out = _out_dir(obj, config)

        surveys, populations = [], []
        for cand in ev.get("candidates", []):
            label = cand.get("label")
            if not label:
                raise ValidationError("every [[evaluation.candidates]] needs a label")
            if cand.get("survey_path"):
                surveys.append((label, psio.read_survey_csv(cand["survey_path"], codebook)))
            if cand.get("population_path"):
                populations.append(
                    (label, psio.read_population_csv(cand["population_path"], codebook)))

        table_pre = table_post = None
        if surveys:
            table_pre = divergence_table(truth, surveys, variables)
            psio.write_table_csv(out / "table1_pre_synthesis.csv", table_pre)
            psio.write_table_json(out / "table1_pre_synthesis.json", table_pre)
        if populations:
            table_post = divergence_table(truth, populations, variables)
            psio.write_table_csv(out / "table2_post_synthesis.csv", table_post)
            psio.write_table_json(out / "table2_post_synthesis.json", table_post)
        if table_pre is not None and table_post is not None:
            both = [lbl for lbl in table_pre.columns if lbl in table_post.columns]
            if both:
                pre = divergence_table(truth, [s for s in surveys if s[0] in both], variables)
                post = divergence_table(truth, [p for p in populations if p[0] in both],
                                        variables)
                delta = divergence_delta(pre, post)
                psio.write_table_csv(out / "table3_delta.csv", delta)
                psio.write_table_json(out / "table3_delta.json", delta)

        for stage, group in (("survey", surveys), ("population", populations)):
            for label, cand in group:
                reports = [category_residuals(truth.marginal(v), cand.marginal(v))
                           for v in variables]
                safe = label.lower().replace(" ", "_")
                psio.write_residual_report_csv(
                    out / f"residuals_{stage}_{safe}.csv", reports, codebook)

        sae_errors = []
        for bench_cfg in ev.get("benchmarks", []):
            predicate = OutcomePredicate(
                variable=bench_cfg["variable"],
                positive_codes=frozenset(int(c) for c in bench_cfg["positive_codes"]),
                label=bench_cfg.get("label", bench_cfg["variable"]),
            )
            benchmark = psio.read_benchmark_csv(bench_cfg["benchmark_path"],
                                                source=bench_cfg.get("label", ""))
            for label, pop in populations:
                name = f"sae_{predicate.label}_{label}".lower().replace(" ", "_")
                try:
                    estimates = tract_estimate(pop, predicate)
                    report = residual_map(estimates, benchmark)
                    r = spatial_correlation(estimates, benchmark)
                    psio.write_sae_report(out / f"{name}.csv",
                                          out / f"{name}_summary.json",
                                          report, r, exclusions=estimates.excluded_tracts)
                except PopsynthError as exc:
                    sae_errors.append(f"{name}: {exc}")
                    log.error("SAE section %s failed: %s", name, exc)

        click.echo(f"evaluation reports written to {out}")
        if sae_errors:
            raise ValidationError(
                "SAE sections failed (distributional reports were still emitted): "
                + "; ".join(sae_errors)
            )

    _run(body)


@main.command()
@click.argument("kind", type=click.Choice(["codebook", "survey", "marginals",
                                           "benchmark", "population"]))
@click.argument("path", type=str)
@click.pass_obj
def validate(obj, kind, path):
    """Lint a codebook, survey, marginals, benchmark, or population file."""

    def body():
        config = _load_config(obj["config_path"])
        if kind == "codebook":
            cb = load_codebook(path)
            click.echo(f"OK: codebook with {len(cb)} variables")
            return
        codebook = _load_codebook_from(config)
        if kind == "survey":
            ds = psio.read_survey_csv(path, codebook)
            click.echo(f"OK: {len(ds)} valid records"
                       + (" (weighted)" if ds.weights is not None else ""))
        elif kind == "marginals":
            cs = psio.read_marginals_csv(path, codebook=codebook)
            harmonize_marginals(cs)
            click.echo(f"OK: {len(cs.tracts)} tracts, "
                       f"fitting variables {list(cs.fitting_variables)}")
        elif kind == "benchmark":
            bench = psio.read_benchmark_csv(path)
            click.echo(f"OK: {len(bench.values)} tract values")
        elif kind == "population":
            pop = psio.read_population_csv(path, codebook)
            click.echo(f"OK: {len(pop)} individuals across "
                       f"{len(set(i.geoid for i in pop.individuals))} tracts")

    _run(body)


if __name__ == "__main__":
    main()
