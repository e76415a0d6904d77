"""Batched, checkpointed generation of schema-valid survey records.

Loops request -> lenient parse -> row validation, appending accepted
records and checkpointing after every batch, until the target sample
size is reached. Invalid rows are dropped, never corrected.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from .codebook import Codebook, SurveyDataset, SurveyRecord, validate_record
from .errors import CheckpointError, ProviderError, ProviderTransportError, ValidationError
from .providers import ProviderClient, RawBatch, SamplingParams, response_schema

__all__ = [
    "GenerationSpec",
    "BatchResult",
    "RunSummary",
    "GenerationResult",
    "CheckpointStore",
    "CheckpointState",
    "DEFAULT_PROMPT_TEMPLATE",
    "build_prompt",
    "request_batch",
    "parse_and_validate_batch",
    "run_generation",
    "resume_generation",
]

log = logging.getLogger(__name__)

REQUIRED_PLACEHOLDERS = ("state", "year", "n_rows", "variable_coding")

DEFAULT_PROMPT_TEMPLATE = """\
You are generating synthetic survey microdata. Produce {n_rows} individual \
survey records that are representative of the {year} adult population of \
{state}. Use your knowledge of the Behavioral Risk Factor Surveillance System \
(BRFSS) and any other reliable sources to make the marginal and joint \
distributions of these variables as realistic and accurate as possible for \
this population.

Each record must contain every variable below, using only the listed integer \
response codes:

{variable_coding}

Return a JSON array of exactly {n_rows} objects. Each object must map every \
variable name to a single integer response code. Do not include explanations, \
markdown, or any fields beyond the variables listed above.
"""


@dataclass(frozen=True)
class GenerationSpec:
    """Everything that defines one generation run."""

    state_name: str
    year: int
    target_n: int
    codebook: Codebook
    batch_size: int = 75
    sampling: SamplingParams = field(default_factory=SamplingParams)
    prompt_template: str = DEFAULT_PROMPT_TEMPLATE
    max_retries: int = 3
    backoff_base: float = 1.0
    dead_batch_limit: int = 10
    parallelism: int = 1

    def __post_init__(self):
        if self.target_n <= 0:
            raise ValidationError("target_n must be positive")
        if self.batch_size <= 0:
            raise ValidationError("batch_size must be positive")
        if self.parallelism < 1:
            raise ValidationError("parallelism must be >= 1")

    def digest(self) -> str:
        """Content hash guarding resume against incompatible spec changes."""
        doc = {
            "state_name": self.state_name,
            "year": self.year,
            "target_n": self.target_n,
            "batch_size": self.batch_size,
            "sampling": vars(self.sampling) if not hasattr(self.sampling, "__dataclass_fields__")
            else {k: getattr(self.sampling, k) for k in self.sampling.__dataclass_fields__},
            "prompt_template": self.prompt_template,
            "codebook": [[v.name, list(v.codes)] for v in self.codebook.variables],
        }
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def _coding_block(codebook: Codebook) -> str:
    lines = []
    for var in codebook.variables:
        if var.labels:
            codes = "; ".join(f"{c} = {var.labels.get(c, c)}" for c in var.codes)
        else:
            codes = ", ".join(str(c) for c in var.codes)
        lines.append(f"- {var.name}: {codes}")
    return "\n".join(lines)


def build_prompt(spec: GenerationSpec, n_rows: int | None = None) -> str:
    """Instantiate the prompt template for one batch request.

    Zero-shot by construction: the template carries no example records and
    no numeric target distributions, only the schema and the
    representativeness instruction.
    """
    template = spec.prompt_template
    for name in REQUIRED_PLACEHOLDERS:
        if "{" + name + "}" not in template:
            raise ValidationError(f"prompt template missing {{{name}}} placeholder")
    class _KeepUnknown(dict):
        def __missing__(self, key):
            return "{" + key + "}"

    prompt = template.format_map(_KeepUnknown(
        state=spec.state_name,
        year=spec.year,
        n_rows=n_rows if n_rows is not None else spec.batch_size,
        variable_coding=_coding_block(spec.codebook),
    ))
    leftover = re.findall(r"\{[A-Za-z_]+\}", prompt)
    if leftover:
        raise ValidationError(f"unresolved template placeholders: {sorted(set(leftover))}")
    for name in spec.codebook.names:
        hits = len(re.findall(rf"^\s*-\s*{re.escape(name)}:", prompt, flags=re.MULTILINE))
        if hits != 1:
            raise ValidationError(
                f"prompt must reference variable {name!r} exactly once, found {hits}"
            )
    return prompt


def request_batch(provider: ProviderClient, prompt: str, schema: dict,
                  params: SamplingParams, batch_index: int = 0,
                  max_retries: int = 3, backoff_base: float = 1.0,
                  sleep=time.sleep) -> RawBatch:
    """Issue one structured-output request, retrying transport errors
    with exponential backoff up to `max_retries`."""
    attempt = 0
    while True:
        try:
            return provider.complete(prompt, schema, params, batch_index=batch_index)
        except ProviderTransportError as exc:
            attempt += 1
            if attempt > max_retries:
                raise ProviderTransportError(
                    f"batch {batch_index}: giving up after {max_retries} retries: {exc}"
                ) from exc
            delay = backoff_base * (2 ** (attempt - 1))
            log.warning("batch %d: transport error (%s), retry %d/%d in %.1fs",
                        batch_index, exc, attempt, max_retries, delay)
            sleep(delay)


@dataclass
class BatchResult:
    accepted: list[SurveyRecord]
    rejected: int
    dead: bool = False


def _salvage_rows(payload: str) -> list | None:
    """Parse the payload's record array, salvaging the longest valid leading
    prefix when the tail is truncated or malformed. None means no array at all."""
    try:
        doc = json.loads(payload)
    except json.JSONDecodeError:
        doc = None
    if isinstance(doc, list):
        return doc
    if isinstance(doc, dict):
        # structured-output wrappers like {"records": [...]}
        lists = [v for v in doc.values() if isinstance(v, list)]
        if len(lists) == 1:
            return lists[0]
        return None
    start = payload.find("[")
    if start < 0:
        return None
    decoder = json.JSONDecoder()
    pos = start + 1
    rows = []
    while True:
        while pos < len(payload) and payload[pos] in " \t\r\n,":
            pos += 1
        if pos >= len(payload) or payload[pos] == "]":
            break
        try:
            obj, pos = decoder.raw_decode(payload, pos)
        except json.JSONDecodeError:
            break
        rows.append(obj)
    return rows


def parse_and_validate_batch(raw: RawBatch, codebook: Codebook) -> BatchResult:
    """Parse a raw payload leniently and validate every row against the codebook.

    Invalid rows are counted and dropped, never corrected. A payload with
    no parseable array is flagged as a dead batch.
    """
    rows = _salvage_rows(raw.payload)
    if rows is None or not rows:
        return BatchResult(accepted=[], rejected=0, dead=True)
    accepted = []
    rejected = 0
    for row in rows:
        if not isinstance(row, dict):
            rejected += 1
            continue
        try:
            record = SurveyRecord(values={str(k): v for k, v in row.items()})
        except (TypeError, ValueError):
            rejected += 1
            continue
        if validate_record(record, codebook).accepted:
            accepted.append(record)
        else:
            rejected += 1
    return BatchResult(accepted=accepted, rejected=rejected, dead=False)


@dataclass
class CheckpointState:
    accepted_records: list[SurveyRecord]
    rejected_count: int
    batches_issued: int
    dead_batches: int
    spec_digest: str


@dataclass
class RunSummary:
    run_id: str
    target_n: int
    accepted: int
    rejected: int
    batches_issued: int
    dead_batches: int

    @property
    def acceptance_rate(self) -> float:
        parsed = self.accepted + self.rejected
        return self.accepted / parsed if parsed else 0.0

    def as_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "target_n": self.target_n,
            "accepted": self.accepted,
            "rejected": self.rejected,
            "batches_issued": self.batches_issued,
            "dead_batches": self.dead_batches,
            "acceptance_rate": self.acceptance_rate,
        }


@dataclass
class GenerationResult:
    dataset: SurveyDataset
    summary: RunSummary


class CheckpointStore:
    """Append-only record log + sidecar metadata, written after every batch.

    Layout: <root>/<run_id>/records.csv (same CSV format as a survey
    dataset) and <root>/<run_id>/meta.json with a content hash of the
    record log for corruption detection.
    """

    def __init__(self, root: str | Path, run_id: str):
        self.run_id = run_id
        self.dir = Path(root) / run_id
        self.records_path = self.dir / "records.csv"
        self.meta_path = self.dir / "meta.json"

    def exists(self) -> bool:
        return self.meta_path.exists()

    def initialize(self, codebook: Codebook, spec_digest: str):
        self.dir.mkdir(parents=True, exist_ok=True)
        with open(self.records_path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(codebook.names)
        self._write_meta(spec_digest, rejected=0, batches=0, dead=0)

    def append_batch(self, records: Sequence[SurveyRecord], codebook: Codebook,
                     spec_digest: str, rejected: int, batches: int, dead: int):
        with open(self.records_path, "a", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            for rec in records:
                writer.writerow([rec[name] for name in codebook.names])
        self._write_meta(spec_digest, rejected=rejected, batches=batches, dead=dead)

    def _write_meta(self, spec_digest: str, rejected: int, batches: int, dead: int):
        meta = {
            "spec_digest": spec_digest,
            "rejected_count": rejected,
            "batches_issued": batches,
            "dead_batches": dead,
            "records_sha256": _file_sha256(self.records_path),
        }
        tmp = self.meta_path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(meta, indent=2))
        tmp.replace(self.meta_path)

    def load(self, codebook: Codebook) -> CheckpointState:
        if not self.exists():
            raise CheckpointError(f"no checkpoint at {self.dir}")
        meta = json.loads(self.meta_path.read_text())
        if _file_sha256(self.records_path) != meta.get("records_sha256"):
            raise CheckpointError(
                f"checkpoint {self.run_id}: record log does not match its content hash"
            )
        records = []
        with open(self.records_path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != codebook.names:
                raise CheckpointError(
                    f"checkpoint {self.run_id}: record log header does not match codebook"
                )
            for row in reader:
                records.append(SurveyRecord(
                    values={name: int(cell) for name, cell in zip(header, row)}))
        return CheckpointState(
            accepted_records=records,
            rejected_count=int(meta["rejected_count"]),
            batches_issued=int(meta["batches_issued"]),
            dead_batches=int(meta["dead_batches"]),
            spec_digest=str(meta["spec_digest"]),
        )


def _file_sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_generation(spec: GenerationSpec, provider: ProviderClient,
                   store: CheckpointStore, sleep=time.sleep) -> GenerationResult:
    """Generate records until target_n accepted, checkpointing every batch."""
    if store.exists():
        raise CheckpointError(
            f"checkpoint {store.run_id} already exists; use resume or a new run id"
        )
    store.initialize(spec.codebook, spec.digest())
    return _generation_loop(spec, provider, store,
                            CheckpointState([], 0, 0, 0, spec.digest()), sleep)


def resume_generation(store: CheckpointStore, spec: GenerationSpec,
                      provider: ProviderClient, sleep=time.sleep) -> GenerationResult:
    """Continue an interrupted run from its most recent checkpoint."""
    state = store.load(spec.codebook)
    if state.spec_digest != spec.digest():
        raise CheckpointError(
            f"checkpoint {store.run_id} was created with a different generation spec"
        )
    return _generation_loop(spec, provider, store, state, sleep)


def _generation_loop(spec: GenerationSpec, provider: ProviderClient,
                     store: CheckpointStore, state: CheckpointState,
                     sleep) -> GenerationResult:
    accepted = list(state.accepted_records)
    rejected = state.rejected_count
    batches = state.batches_issued
    dead = state.dead_batches
    dead_streak = 0
    prompt = build_prompt(spec)
    schema = response_schema(spec.codebook)

    def issue(index: int) -> BatchResult:
        raw = request_batch(provider, prompt, schema, spec.sampling,
                            batch_index=index, max_retries=spec.max_retries,
                            backoff_base=spec.backoff_base, sleep=sleep)
        return parse_and_validate_batch(raw, spec.codebook)

    while len(accepted) < spec.target_n:
        wave = min(spec.parallelism,
                   max(1, -(-(spec.target_n - len(accepted)) // spec.batch_size)))
        indices = list(range(batches, batches + wave))
        if wave == 1:
            results = [issue(indices[0])]
        else:
            with ThreadPoolExecutor(max_workers=wave) as pool:
                results = list(pool.map(issue, indices))
        # acceptance order is (batch index, row index) regardless of completion order
        for index, result in zip(indices, results):
            batches += 1
            rejected += result.rejected
            accepted.extend(result.accepted)
            if result.dead:
                dead += 1
                dead_streak += 1
                log.warning("batch %d: dead (no parseable records)", index)
            else:
                dead_streak = 0
            store.append_batch(result.accepted, spec.codebook, spec.digest(),
                               rejected=rejected, batches=batches, dead=dead)
            if dead_streak >= spec.dead_batch_limit:
                raise ProviderError(
                    f"aborting after {dead_streak} consecutive dead batches "
                    f"(checkpoint {store.run_id} kept with {len(accepted)} records)"
                )

    dataset = SurveyDataset(spec.codebook, accepted[:spec.target_n],
                            provenance=f"generated:{store.run_id}")
    summary = RunSummary(run_id=store.run_id, target_n=spec.target_n,
                         accepted=len(accepted), rejected=rejected,
                         batches_issued=batches, dead_batches=dead)
    log.info("run %s: %d batches, %d accepted, %d rejected (rate %.3f), %d dead",
             summary.run_id, batches, summary.accepted, rejected,
             summary.acceptance_rate, dead)
    return GenerationResult(dataset=dataset, summary=summary)
