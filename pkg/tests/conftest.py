import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from popsynth.codebook import (Codebook, SurveyDataset, SurveyRecord,
                               default_codebook, load_codebook)


@pytest.fixture(scope="session")
def brfss_codebook():
    return default_codebook()


@pytest.fixture
def tiny_codebook():
    return load_codebook({"variables": [
        {"name": "A", "codes": [1, 2]},
        {"name": "B", "codes": [1, 2]},
    ]})


@pytest.fixture
def four_record_dataset(tiny_codebook):
    records = [SurveyRecord({"A": a, "B": b})
               for a, b in [(1, 1), (1, 2), (2, 1), (2, 2)]]
    return SurveyDataset(tiny_codebook, records)


def make_full_record(codebook: Codebook, rng=None, overrides=None):
    """A valid record over all codebook variables (first code each, unless
    an rng or explicit overrides are given)."""
    values = {}
    for var in codebook.variables:
        if rng is None:
            values[var.name] = var.codes[0]
        else:
            values[var.name] = int(rng.choice(var.codes))
    if overrides:
        values.update(overrides)
    return SurveyRecord(values)


def rows_payload(rows):
    return json.dumps(rows)


def record_rows(codebook, n, seed=0, overrides=None):
    rng = np.random.default_rng(seed)
    return [dict(make_full_record(codebook, rng, overrides).values) for _ in range(n)]
