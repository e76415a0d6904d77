"""Chat-completion provider adapters behind a single narrow interface.

Three adapters: an OpenAI-style chat-completions endpoint, a Gemini-style
generateContent endpoint, and a deterministic fixture-driven mock so the
pipeline is fully testable offline.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import requests

from .codebook import Codebook
from .errors import ProviderError, ProviderTransportError, ValidationError

__all__ = [
    "SamplingParams",
    "RawBatch",
    "ProviderClient",
    "MockProvider",
    "SeededMockProvider",
    "OpenAICompatibleProvider",
    "GeminiCompatibleProvider",
    "response_schema",
    "resolve_credentials",
    "make_provider",
]

CREDENTIALS_ENV = "POPSYNTH_PROVIDER_KEY"


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 1.0
    top_p: float = 1.0
    frequency_penalty: float = 0.0
    presence_penalty: float = 0.0
    max_output_tokens: int = 32768

    def __post_init__(self):
        if self.temperature < 0:
            raise ValidationError(f"temperature must be >= 0, got {self.temperature}")
        if not 0 < self.top_p <= 1:
            raise ValidationError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.max_output_tokens <= 0:
            raise ValidationError("max_output_tokens must be positive")


@dataclass
class RawBatch:
    """Verbatim provider response body plus metadata, retained even when malformed."""

    payload: str
    provider_meta: dict = field(default_factory=dict)


def response_schema(codebook: Codebook) -> dict:
    """Strict JSON schema for an array of records keyed by variable name."""
    return {
        "type": "array",
        "items": {
            "type": "object",
            "properties": {
                v.name: {"type": "integer", "enum": list(v.codes)}
                for v in codebook.variables
            },
            "required": list(codebook.names),
            "additionalProperties": False,
        },
    }


class ProviderClient:
    """Interface: one structured-output request -> raw payload."""

    def complete(self, prompt: str, schema: dict, params: SamplingParams,
                 batch_index: int = 0) -> RawBatch:
        raise NotImplementedError


class MockProvider(ProviderClient):
    """Serves scripted payloads keyed by batch index; deterministic and offline.

    Resumption-safe: the payload for batch i does not depend on call order.
    """

    def __init__(self, payloads: Sequence[str]):
        self.payloads = list(payloads)
        self.calls = 0

    def complete(self, prompt, schema, params, batch_index=0) -> RawBatch:
        self.calls += 1
        if batch_index >= len(self.payloads):
            raise ProviderError(
                f"mock script exhausted: no payload for batch {batch_index}"
            )
        return RawBatch(payload=self.payloads[batch_index],
                        provider_meta={"model": "mock", "batch_index": batch_index})


class SeededMockProvider(ProviderClient):
    """Samples schema-valid rows from a seeded RNG, keyed by batch index.

    Used by the CLI's `--provider mock` when no fixture file is supplied.
    Optionally corrupts every k-th row with an out-of-range code to
    exercise the validation path.
    """

    def __init__(self, codebook: Codebook, seed: int = 0, rows_per_batch: int = 75,
                 invalid_every: int | None = None):
        self.codebook = codebook
        self.seed = seed
        self.rows_per_batch = rows_per_batch
        self.invalid_every = invalid_every

    def complete(self, prompt, schema, params, batch_index=0) -> RawBatch:
        import numpy as np

        rng = np.random.default_rng((self.seed, batch_index))
        rows = []
        for i in range(self.rows_per_batch):
            row = {v.name: int(rng.choice(v.codes)) for v in self.codebook.variables}
            if self.invalid_every and (i + 1) % self.invalid_every == 0:
                var = self.codebook.variables[0]
                row[var.name] = max(var.codes) + 1000
            rows.append(row)
        return RawBatch(payload=json.dumps(rows),
                        provider_meta={"model": "seeded-mock", "batch_index": batch_index})


class OpenAICompatibleProvider(ProviderClient):
    """OpenAI-style /chat/completions endpoint with json_schema structured output."""

    def __init__(self, endpoint: str, model_id: str, api_key: str,
                 timeout: float = 300.0, session=None):
        self.endpoint = endpoint.rstrip("/")
        self.model_id = model_id
        self.api_key = api_key
        self.timeout = timeout
        self.session = session or requests.Session()

    def complete(self, prompt, schema, params, batch_index=0) -> RawBatch:
        body = {
            "model": self.model_id,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
            "top_p": params.top_p,
            "frequency_penalty": params.frequency_penalty,
            "presence_penalty": params.presence_penalty,
            "max_tokens": params.max_output_tokens,
            "response_format": {
                "type": "json_schema",
                "json_schema": {
                    "name": "survey_records",
                    "strict": True,
                    # json_schema mode requires an object at the top level
                    "schema": {
                        "type": "object",
                        "properties": {"records": schema},
                        "required": ["records"],
                        "additionalProperties": False,
                    },
                },
            },
        }
        data = _post_json(
            self.session, f"{self.endpoint}/chat/completions", body,
            headers={"Authorization": f"Bearer {self.api_key}"},
            timeout=self.timeout, batch_index=batch_index,
        )
        try:
            content = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(
                f"batch {batch_index}: unexpected response shape: {exc}"
            ) from exc
        meta = {"model": data.get("model", self.model_id),
                "usage": data.get("usage", {}),
                "batch_index": batch_index}
        return RawBatch(payload=content, provider_meta=meta)


class GeminiCompatibleProvider(ProviderClient):
    """Gemini-style models/{model}:generateContent endpoint with a response schema."""

    def __init__(self, endpoint: str, model_id: str, api_key: str,
                 timeout: float = 300.0, session=None):
        self.endpoint = endpoint.rstrip("/")
        self.model_id = model_id
        self.api_key = api_key
        self.timeout = timeout
        self.session = session or requests.Session()

    def complete(self, prompt, schema, params, batch_index=0) -> RawBatch:
        body = {
            "contents": [{"parts": [{"text": prompt}]}],
            "generationConfig": {
                "temperature": params.temperature,
                "topP": params.top_p,
                "maxOutputTokens": params.max_output_tokens,
                "responseMimeType": "application/json",
                "responseSchema": schema,
            },
        }
        url = f"{self.endpoint}/models/{self.model_id}:generateContent"
        data = _post_json(
            self.session, url, body,
            headers={"x-goog-api-key": self.api_key},
            timeout=self.timeout, batch_index=batch_index,
        )
        try:
            content = data["candidates"][0]["content"]["parts"][0]["text"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(
                f"batch {batch_index}: unexpected response shape: {exc}"
            ) from exc
        meta = {"model": self.model_id,
                "usage": data.get("usageMetadata", {}),
                "batch_index": batch_index}
        return RawBatch(payload=content, provider_meta=meta)


def _post_json(session, url, body, headers, timeout, batch_index):
    try:
        resp = session.post(url, json=body, headers=headers, timeout=timeout)
    except requests.RequestException as exc:
        raise ProviderTransportError(f"batch {batch_index}: {exc}") from exc
    if resp.status_code in (401, 403):
        raise ProviderError(
            f"batch {batch_index}: authentication failed (HTTP {resp.status_code})"
        )
    if resp.status_code == 429 or resp.status_code >= 500:
        raise ProviderTransportError(
            f"batch {batch_index}: HTTP {resp.status_code}"
        )
    if resp.status_code >= 400:
        raise ProviderError(
            f"batch {batch_index}: HTTP {resp.status_code}: {resp.text[:500]}"
        )
    try:
        return resp.json()
    except ValueError as exc:
        raise ProviderError(f"batch {batch_index}: non-JSON response body") from exc


def resolve_credentials(env_var: str = CREDENTIALS_ENV) -> str:
    key = os.environ.get(env_var)
    if not key:
        raise ValidationError(
            f"provider credentials not found: set the {env_var} environment variable"
        )
    return key


def make_provider(kind: str, codebook: Codebook, endpoint: str = "",
                  model_id: str = "", credentials_env: str = CREDENTIALS_ENV,
                  mock_payloads: Sequence[str] | None = None,
                  mock_seed: int = 0, rows_per_batch: int = 75) -> ProviderClient:
    """Construct a provider adapter from config fields."""
    if kind == "mock":
        if mock_payloads is not None:
            return MockProvider(mock_payloads)
        return SeededMockProvider(codebook, seed=mock_seed,
                                  rows_per_batch=rows_per_batch)
    if kind == "openai-compatible":
        return OpenAICompatibleProvider(endpoint or "https://api.openai.com/v1",
                                        model_id, resolve_credentials(credentials_env))
    if kind == "gemini-compatible":
        return GeminiCompatibleProvider(
            endpoint or "https://generativelanguage.googleapis.com/v1beta",
            model_id, resolve_credentials(credentials_env))
    raise ValidationError(f"unknown provider kind {kind!r}")
