"""Acceptance suite: one test per criterion, one PASS/FAIL line printed each.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion lines.
"""

import functools
import json
import time
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from popsynth import io as psio
from popsynth.cli import main as cli_main
from popsynth.codebook import SurveyDataset, SurveyRecord, default_codebook, load_codebook
from popsynth.errors import ProviderError
from popsynth.genpipe import CheckpointStore, GenerationSpec, run_generation, resume_generation
from popsynth.ipf import (ConstraintSet, IPFConfig, TractMarginals,
                          integerize_trs, ipf_fit, synthesize_population)
from popsynth.metrics import (CategoricalDistribution, DivergenceTable,
                              divergence_delta, js_divergence, kl_divergence)
from popsynth.providers import MockProvider
from popsynth.sae import (BenchmarkTable, OutcomePredicate, residual_map,
                          spatial_correlation, tract_estimate)

from oracles import ipf_oracle, js_oracle, kl_oracle
from test_ipf import random_consistent_instance


def criterion(number, description):
    def decorate(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"\nFAIL criterion {number}: {description}")
                raise
            print(f"\nPASS criterion {number}: {description}")
        return wrapper
    return decorate


def dist(probs, variable="v"):
    return CategoricalDistribution(variable=variable,
                                   codes=tuple(range(1, len(probs) + 1)),
                                   probs=tuple(probs))


def random_simplex(rng, dim):
    x = rng.dirichlet(np.ones(dim))
    return tuple(float(v) for v in (x / x.sum()))


@criterion(1, "divergence oracle equivalence on 1,000 random pairs (1e-12)")
def test_criterion_1_divergence_oracle():
    start = time.monotonic()
    rng = np.random.default_rng(314159)
    for _ in range(1000):
        dim = int(rng.integers(2, 11))
        p, q = random_simplex(rng, dim), random_simplex(rng, dim)
        dp, dq = dist(p), dist(q)
        js = js_divergence(dp, dq)
        assert abs(js - js_oracle(p, q)) <= 1e-12
        assert abs(kl_divergence(dp, dq) - kl_oracle(p, q)) <= 1e-12
        assert js == js_divergence(dq, dp)
        assert js_divergence(dp, dp) == 0.0
        assert 0.0 <= js <= 1.0
    assert time.monotonic() - start < 5.0


@criterion(2, "worked JS value (0.5,0.5) vs (0.75,0.25) = 0.048795 ± 1e-6")
def test_criterion_2_worked_js_value():
    got = js_divergence(dist([0.5, 0.5]), dist([0.75, 0.25]))
    assert abs(got - 0.048795) <= 1e-6
    assert abs(got - js_oracle([0.5, 0.5], [0.75, 0.25])) <= 1e-15


@criterion(3, "IPF small-instance correctness vs brute-force oracle")
def test_criterion_3_ipf_correctness():
    start = time.monotonic()
    cb = load_codebook({"variables": [
        {"name": "A", "codes": [1, 2]}, {"name": "B", "codes": [1, 2]},
    ]})
    records = [SurveyRecord({"A": a, "B": b})
               for a, b in [(1, 1), (1, 2), (2, 1), (2, 2)]]
    ds = SurveyDataset(cb, records)
    tract = TractMarginals("t", {("A", 1): 3, ("A", 2): 1,
                                 ("B", 1): 2, ("B", 2): 2}, 4)
    fitted = ipf_fit(ds, tract, ("A", "B"))
    assert np.allclose(fitted.weights, [1.5, 1.5, 0.5, 0.5], atol=1e-10)
    assert fitted.iterations_used <= 2

    rng = np.random.default_rng(271828)
    for _ in range(200):
        cb2, pairs, ds2, tract2, targets = random_consistent_instance(rng)
        loose = ipf_fit(ds2, tract2, ("A", "B"), IPFConfig())
        for var in ("A", "B"):
            codes = ds2.codes_for(var)
            for cat, target in targets[var].items():
                if target > 0:
                    current = loose.weights[codes == cat].sum()
                    assert abs(current - target) / target <= 1e-6
        tight = ipf_fit(ds2, tract2, ("A", "B"),
                        IPFConfig(max_sweeps=2000, rel_tolerance=1e-13))
        oracle = ipf_oracle([{"A": a, "B": b} for a, b in pairs], targets,
                            ["A", "B"], [1.0] * len(pairs))
        assert np.allclose(tight.weights, oracle, atol=1e-8)
    assert time.monotonic() - start < 30.0


@criterion(4, "joint preservation: equal-category records keep weight ratios (1e-10)")
def test_criterion_4_joint_preservation():
    start = time.monotonic()
    rng = np.random.default_rng(161803)
    for _ in range(100):
        cb, pairs, _, tract, _ = random_consistent_instance(rng)
        init = rng.uniform(0.5, 4.0, len(pairs))
        ds = SurveyDataset(cb, [SurveyRecord({"A": a, "B": b}) for a, b in pairs],
                           weights=init)
        fitted = ipf_fit(ds, tract, ("A", "B"), IPFConfig(max_sweeps=500))
        for i in range(len(pairs)):
            for j in range(i + 1, len(pairs)):
                if pairs[i] == pairs[j]:
                    got = fitted.weights[i] / fitted.weights[j]
                    want = init[i] / init[j]
                    assert abs(got - want) / want <= 1e-10
    assert time.monotonic() - start < 10.0


@criterion(5, "TRS integerization contract and uniform extra-copy frequency")
def test_criterion_5_trs():
    start = time.monotonic()
    rng = np.random.default_rng(577215)
    for _ in range(1000):
        n = int(rng.integers(1, 30))
        w = rng.uniform(0, 8, n)
        counts = integerize_trs(w, rng)
        floors = np.floor(w).astype(int)
        assert counts.sum() == int(np.rint(w.sum()))
        assert np.all(counts >= floors) and np.all(counts <= floors + 1)

    w = np.array([0.25, 0.25, 0.25, 0.25])
    trials = 100_000
    hits = np.zeros(4, dtype=int)
    for seed in range(trials):
        counts = integerize_trs(w, np.random.default_rng(seed))
        assert counts.sum() == 1
        hits[np.argmax(counts)] += 1
    freqs = hits / trials
    assert np.all(np.abs(freqs - 0.25) <= 0.02)
    assert time.monotonic() - start < 30.0


@criterion(6, "zero-support category yields unreachable mass and zero such individuals")
def test_criterion_6_zero_support_pathology():
    cb = load_codebook({"variables": [
        {"name": "insured", "codes": [1, 2]},  # 2 = uninsured
        {"name": "sex", "codes": [1, 2]},
    ]})
    # survey contains no uninsured individuals
    records = [SurveyRecord({"insured": 1, "sex": 1}),
               SurveyRecord({"insured": 1, "sex": 2})]
    ds = SurveyDataset(cb, records)
    tract = TractMarginals("t", {("insured", 1): 40, ("insured", 2): 10,
                                 ("sex", 1): 25, ("sex", 2): 25}, 50)
    fitted = ipf_fit(ds, tract, ("insured", "sex"))
    assert fitted.unreachable_mass == 10
    cs = ConstraintSet(("insured", "sex"), {"t": tract}, harmonized=True)
    pop = synthesize_population(ds, cs, master_seed=1)
    assert all(ind.values["insured"] != 2 for ind in pop.individuals)
    assert pop.diagnostics[0].unreachable_mass == 10


# ---- end-to-end fixtures for criteria 7 and 8 ----

AGE_TARGETS = {
    "t1": (50, 50, 50, 50, 0, 0),
    "t2": (100, 50, 50, 0, 0, 0),
    "t3": (0, 0, 50, 50, 50, 50),
    "t4": (50, 0, 100, 0, 0, 50),
    "t5": (0, 100, 0, 0, 100, 0),
}


def fixture_row(codebook, i, shift=0):
    """Deterministic record i: age uniform over 6 groups, sex balanced within
    each age group, other variables cycling through their codes."""
    values = {}
    for k, var in enumerate(codebook.variables):
        if var.name == "age":
            values["age"] = (i % 6) + 1
        elif var.name == "sex":
            values["sex"] = 1 if ((i // 6) % 2 == 0) else 2
        else:
            values[var.name] = var.codes[(i + shift * (k + 1)) % len(var.codes)]
    return values


def fixture_payloads(codebook, n_rows=300, batch=75, shift=0):
    rows = [fixture_row(codebook, i, shift) for i in range(n_rows)]
    return [json.dumps(rows[k:k + batch]) for k in range(0, n_rows, batch)]


def write_e2e_inputs(tmp_path, codebook):
    fixture = tmp_path / "payloads.json"
    fixture.write_text(json.dumps(fixture_payloads(codebook)))
    lines = ["geoid,variable,code,count"]
    for geoid, targets in AGE_TARGETS.items():
        for code, count in enumerate(targets, start=1):
            lines.append(f"{geoid},age,{code},{count}")
        lines.append(f"{geoid},sex,1,100")
        lines.append(f"{geoid},sex,2,100")
    (tmp_path / "marginals.csv").write_text("\n".join(lines) + "\n")
    truth_rows = [fixture_row(codebook, i, shift=3) for i in range(300)]
    truth = SurveyDataset(codebook, [SurveyRecord(r) for r in truth_rows])
    psio.write_survey_csv(tmp_path / "truth.csv", truth)
    config = tmp_path / "run.toml"
    config.write_text(f"""
[provider]
kind = "mock"
mock_fixture = "{fixture}"

[generation]
state_name = "Colorado"
year = 2023
target_n = 300
batch_size = 75
label = "e2e"
run_id = "e2e_run"

[synthesis]
survey_path = "{tmp_path / 'out' / 'survey_e2e.csv'}"
marginals_path = "{tmp_path / 'marginals.csv'}"
fitting_variables = ["age", "sex"]
master_seed = 42
label = "population_e2e"

[evaluation]
ground_truth_path = "{tmp_path / 'truth.csv'}"

[[evaluation.candidates]]
label = "e2e"
survey_path = "{tmp_path / 'out' / 'survey_e2e.csv'}"
population_path = "{tmp_path / 'out' / 'population_e2e.csv'}"

[output]
dir = "{tmp_path / 'out'}"
""")
    return config


@criterion(7, "end-to-end mock run: generate 300, synthesize 1,000, evaluate")
def test_criterion_7_end_to_end(tmp_path):
    start = time.monotonic()
    codebook = default_codebook()
    config = write_e2e_inputs(tmp_path, codebook)
    runner = CliRunner()
    out = tmp_path / "out"

    res = runner.invoke(cli_main, ["--config", str(config), "generate"])
    assert res.exit_code == 0, res.output
    survey = psio.read_survey_csv(out / "survey_e2e.csv", codebook)
    assert len(survey) == 300

    res = runner.invoke(cli_main, ["--config", str(config), "synthesize"])
    assert res.exit_code == 0, res.output
    pop = psio.read_population_csv(out / "population_e2e.csv", codebook)
    assert len(pop) == 1000

    # fitted-variable per-category error vs targets within 1 individual
    by_tract = {}
    for ind in pop.individuals:
        by_tract.setdefault(ind.geoid, []).append(ind)
    for geoid, targets in AGE_TARGETS.items():
        inds = by_tract.get(geoid, [])
        assert len(inds) == 200
        for code, target in enumerate(targets, start=1):
            got = sum(1 for ind in inds if ind.values["age"] == code)
            assert abs(got - target) <= 1, (geoid, "age", code, got, target)
        for code in (1, 2):
            got = sum(1 for ind in inds if ind.values["sex"] == code)
            assert abs(got - 100) <= 1, (geoid, "sex", code, got)

    res = runner.invoke(cli_main, ["--config", str(config), "evaluate"])
    assert res.exit_code == 0, res.output
    pre = json.loads((out / "table1_pre_synthesis.json").read_text())
    post = json.loads((out / "table2_post_synthesis.json").read_text())
    delta = json.loads((out / "table3_delta.json").read_text())
    # Table-1/2/3 shape: 14 variables + column-mean row; cells + row mean
    for doc in (pre, post, delta):
        assert len(doc["rows"]) == 15
        assert doc["rows"][-1][0] == "column_mean"
    for doc in (pre, post):
        cells = [row[1] for row in doc["rows"][:-1]]
        assert doc["rows"][-1][1] == pytest.approx(sum(cells) / len(cells), abs=1e-12)
        for row in doc["rows"][:-1]:
            assert row[-1] == pytest.approx(sum(row[1:-1]) / (len(row) - 2), abs=1e-12)
    for drow, prow, qrow in zip(delta["rows"][:-1], pre["rows"][:-1],
                                post["rows"][:-1]):
        assert drow[1] == qrow[1] - prow[1]  # cellwise after - before, exactly
    assert time.monotonic() - start < 60.0


@criterion(8, "determinism: byte-identical synthesize; resume equals uninterrupted")
def test_criterion_8_determinism(tmp_path):
    start = time.monotonic()
    codebook = default_codebook()
    config = write_e2e_inputs(tmp_path, codebook)
    runner = CliRunner()
    out = tmp_path / "out"

    res = runner.invoke(cli_main, ["--config", str(config), "generate"])
    assert res.exit_code == 0, res.output
    res = runner.invoke(cli_main, ["--config", str(config), "synthesize"])
    assert res.exit_code == 0, res.output
    first = (out / "population_e2e.csv").read_bytes()
    res = runner.invoke(cli_main, ["--config", str(config), "synthesize"])
    assert res.exit_code == 0, res.output
    assert (out / "population_e2e.csv").read_bytes() == first

    # resume-after-interrupt equals the uninterrupted run
    payloads = fixture_payloads(codebook)
    spec = GenerationSpec(state_name="Colorado", year=2023, target_n=300,
                          batch_size=75, codebook=codebook, backoff_base=0.0)
    full = run_generation(spec, MockProvider(payloads),
                          CheckpointStore(tmp_path / "ckpt", "full"))

    class Interrupting(MockProvider):
        def complete(self, prompt, schema, params, batch_index=0):
            if batch_index == 2:
                raise ProviderError("simulated interrupt")
            return super().complete(prompt, schema, params, batch_index)

    store = CheckpointStore(tmp_path / "ckpt", "interrupted")
    with pytest.raises(ProviderError):
        run_generation(spec, Interrupting(payloads), store)
    resumed = resume_generation(store, spec, MockProvider(payloads))
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    psio.write_survey_csv(a, full.dataset)
    psio.write_survey_csv(b, resumed.dataset)
    assert a.read_bytes() == b.read_bytes()
    assert time.monotonic() - start < 60.0


@criterion(9, "SAE consistency: totals, self-correlation 1.0, zero self-residuals")
def test_criterion_9_sae_consistency(tmp_path):
    start = time.monotonic()
    codebook = default_codebook()
    config = write_e2e_inputs(tmp_path, codebook)
    runner = CliRunner()
    res = runner.invoke(cli_main, ["--config", str(config), "generate"])
    assert res.exit_code == 0, res.output
    res = runner.invoke(cli_main, ["--config", str(config), "synthesize"])
    assert res.exit_code == 0, res.output
    pop = psio.read_population_csv(tmp_path / "out" / "population_e2e.csv",
                                   codebook)
    for predicate in [
        OutcomePredicate("insurance", frozenset({1, 2, 3, 4, 5, 6, 7, 8, 9, 10}),
                         "insured"),
        OutcomePredicate("age", frozenset({1, 2}), "young_adult"),
    ]:
        est = tract_estimate(pop, predicate)
        total = sum(est.proportions[g] * est.population_counts[g]
                    for g in est.proportions)
        expected = sum(1 for ind in pop.individuals
                       if ind.values[predicate.variable] in predicate.positive_codes)
        assert total == pytest.approx(expected, abs=1e-9)
        bench = BenchmarkTable.from_values("self", est.proportions)
        assert spatial_correlation(est, bench) == pytest.approx(1.0, abs=1e-12)
        report = residual_map(est, bench)
        assert all(row.residual == 0 for row in report.rows)
    assert time.monotonic() - start < 10.0


@criterion(10, "delta table reproduces reference cell arithmetic")
def test_criterion_10_reference_cell_arithmetic():
    before = DivergenceTable(rows=("insurance", "bmi_category"),
                             columns=("MS GPT",),
                             cells=np.array([[0.178], [0.008]]))
    after = DivergenceTable(rows=("insurance", "bmi_category"),
                            columns=("MS GPT",),
                            cells=np.array([[0.121], [0.048]]))
    delta = divergence_delta(before, after)
    assert delta.cell("insurance", "MS GPT") == pytest.approx(-0.057, abs=1e-12)
    assert delta.cell("bmi_category", "MS GPT") == pytest.approx(0.040, abs=1e-12)
