"""Pluggable model-inference backends: embedder, critic, generator, region
proposer. Ships deterministic seeded mocks plus a JSON-over-HTTP client.

Wire contract (chat route, POST {endpoint}/chat):
    request  {model, messages: [{role, content: [{type: "text"|"image", value}]}],
              temperature, repetition_penalty, max_tokens, logprobs}
    response {text, token_logprobs?}   # token_logprobs: one {token: logprob}
                                       # mapping per generated position
Embedding route (POST {endpoint}/embed):
    request  {model, input: {type: "text"|"image", value}}
    response {embedding: [floats]}

The client never interprets model text; extraction and normalization live in
the reward engine. Mocks are pure functions of (seed, inputs), so repeated
calls agree bit for bit.
"""

from __future__ import annotations

import hashlib
import math
import os
import threading
from dataclasses import dataclass
from typing import Any, Callable, Mapping, Protocol, Sequence

import numpy as np
import requests

from .core import Passage, Query, ValidationError
from .index import EmbeddingVector
from .prompts import CRITIC_SYSTEM_PROMPT, render_critic_user

DEFAULT_TIMEOUT_SECONDS = 30.0
DEFAULT_MAX_TOKENS = 512
DEFAULT_EMBEDDING_DIM = 32

AFFIRMATIVE_TOKENS = ("Yes", "yes", " Yes", " yes")
NEGATIVE_TOKENS = ("No", "no", " No", " no")

ENV_ENDPOINT = "REAG_ENDPOINT"
ENV_MODEL = "REAG_MODEL"
ENV_TIMEOUT_MS = "REAG_TIMEOUT_MS"


class BackendError(RuntimeError):
    """Inference backend failure, with HTTP status context when available."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


@dataclass(frozen=True)
class BackendSpec:
    kind: str  # "mock" | "http"
    endpoint: str | None = None
    model_name: str | None = None
    timeout: float = DEFAULT_TIMEOUT_SECONDS
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("mock", "http"):
            raise ValidationError([f"backend kind must be 'mock' or 'http', got {self.kind!r}"])
        if self.kind == "http" and not self.endpoint:
            raise ValidationError(["http backend requires an endpoint"])
        if self.kind == "mock" and self.seed is None:
            raise ValidationError(["mock backend requires a seed"])


@dataclass(frozen=True)
class GenerationRequest:
    system_prompt: str
    user_prompt: str
    image_refs: tuple[str, ...] = ()
    temperature: float = 1.0
    repetition_penalty: float = 1.05
    max_tokens: int = DEFAULT_MAX_TOKENS
    want_logprobs: bool = False

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ValidationError([f"temperature must be positive, got {self.temperature}"])


@dataclass(frozen=True)
class GenerationResult:
    text: str
    token_logprobs: tuple[dict[str, float], ...] | None = None


class EmbedderBackend(Protocol):
    def embed(self, resource: str, kind: str = "image") -> EmbeddingVector: ...


class CriticBackend(Protocol):
    def yes_probability(self, query: Query, passage: Passage) -> float: ...


class GeneratorBackend(Protocol):
    def generate(self, request: GenerationRequest) -> GenerationResult: ...


class RegionProposerBackend(Protocol):
    def propose_region(self, image_ref: str, subject: str) -> str | None: ...


def yes_probability_from_logprobs(first_token_logprobs: Mapping[str, float]) -> float:
    """Affirmative probability mass normalized over affirmative + negative
    first-token variants."""
    yes_mass = sum(math.exp(first_token_logprobs[t]) for t in AFFIRMATIVE_TOKENS if t in first_token_logprobs)
    no_mass = sum(math.exp(first_token_logprobs[t]) for t in NEGATIVE_TOKENS if t in first_token_logprobs)
    total = yes_mass + no_mass
    if total <= 0.0:
        raise BackendError(
            f"critic logprobs carry no Yes/No variants: {sorted(first_token_logprobs)}"
        )
    return yes_mass / total


def _stable_rng(seed: int, *parts: str) -> np.random.Generator:
    digest = hashlib.sha256(("|".join([str(seed), *parts])).encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


class MockEmbedder:
    """Seeded hash of the resource expanded to a unit vector; an override
    table lets tests pin exact geometries."""

    def __init__(
        self,
        seed: int,
        dim: int = DEFAULT_EMBEDDING_DIM,
        overrides: Mapping[str, Sequence[float]] | None = None,
    ):
        self.seed = seed
        self.dim = dim
        self.overrides = {k: tuple(float(x) for x in v) for k, v in (overrides or {}).items()}

    def embed(self, resource: str, kind: str = "image") -> EmbeddingVector:
        if resource in self.overrides:
            return EmbeddingVector(values=self.overrides[resource])
        rng = _stable_rng(self.seed, "embed", resource)
        vec = rng.standard_normal(self.dim)
        vec /= np.linalg.norm(vec)
        return EmbeddingVector.from_array(vec)


class MockCritic:
    """Deterministic yes-probability from (seed, passage_id), overridable
    per passage for scripted fixtures."""

    def __init__(self, seed: int, overrides: Mapping[str, float] | None = None):
        self.seed = seed
        self.overrides = dict(overrides or {})

    def yes_probability(self, query: Query, passage: Passage) -> float:
        if passage.passage_id in self.overrides:
            return self.overrides[passage.passage_id]
        rng = _stable_rng(self.seed, "critic", passage.passage_id)
        return float(rng.random())


DEFAULT_MOCK_COMPLETION = "<think>no fixture matched</think><answer>unknown</answer>"


class MockGenerator:
    """Scripted completions: first fixture whose key is a substring of the
    user prompt wins; a callable script takes precedence when provided."""

    def __init__(
        self,
        seed: int,
        fixtures: Sequence[tuple[str, str]] = (),
        script: Callable[[GenerationRequest], str] | None = None,
        default: str = DEFAULT_MOCK_COMPLETION,
    ):
        self.seed = seed
        self.fixtures = list(fixtures)
        self.script = script
        self.default = default

    def generate(self, request: GenerationRequest) -> GenerationResult:
        if self.script is not None:
            text = self.script(request)
        else:
            text = self.default
            for key, response in self.fixtures:
                if key in request.user_prompt:
                    text = response
                    break
        logprobs = None
        if request.want_logprobs:
            rng = _stable_rng(self.seed, "gen", text)
            logprobs = tuple({tok: float(-rng.random())} for tok in text.split())
        return GenerationResult(text=text, token_logprobs=logprobs)


class MockRegionProposer:
    """Identity crop, scripted (image, subject) -> crop table, or constant
    no-detection."""

    def __init__(
        self,
        mode: str = "identity",
        table: Mapping[tuple[str, str], str] | None = None,
    ):
        if mode not in ("identity", "none", "table"):
            raise ValidationError([f"region proposer mode must be identity/none/table, got {mode!r}"])
        self.mode = mode
        self.table = dict(table or {})

    def propose_region(self, image_ref: str, subject: str) -> str | None:
        if not subject:
            raise BackendError("propose_region requires a non-empty subject")
        if self.mode == "identity":
            return image_ref
        if self.mode == "none":
            return None
        return self.table.get((image_ref, subject))


class _HttpClient:
    """Shared POST helper: one retry on transport errors and HTTP 5xx, none
    on 4xx; concurrent requests bounded by a semaphore."""

    def __init__(self, spec: BackendSpec, max_in_flight: int = 8):
        self.spec = spec
        self._gate = threading.Semaphore(max_in_flight)

    def post(self, route: str, payload: dict[str, Any]) -> dict[str, Any]:
        url = str(self.spec.endpoint).rstrip("/") + route
        last_error: Exception | None = None
        for attempt in range(2):
            try:
                with self._gate:
                    response = requests.post(url, json=payload, timeout=self.spec.timeout)
            except requests.RequestException as exc:
                last_error = exc
                continue
            if response.status_code >= 500 and attempt == 0:
                last_error = BackendError(
                    f"server error {response.status_code} from {url}", status=response.status_code
                )
                continue
            if response.status_code >= 400:
                raise BackendError(
                    f"HTTP {response.status_code} from {url}: {response.text[:200]}",
                    status=response.status_code,
                )
            try:
                body = response.json()
            except ValueError as exc:
                raise BackendError(f"malformed JSON from {url}: {response.text[:200]}") from exc
            if not isinstance(body, dict):
                raise BackendError(f"malformed reply from {url}: expected object, got {type(body).__name__}")
            return body
        raise BackendError(f"transport failure for {url}: {last_error}") from last_error


def _chat_messages(
    system_prompt: str, user_prompt: str, image_refs: Sequence[str]
) -> list[dict[str, Any]]:
    user_content = [{"type": "image", "value": ref} for ref in image_refs]
    user_content.append({"type": "text", "value": user_prompt})
    return [
        {"role": "system", "content": [{"type": "text", "value": system_prompt}]},
        {"role": "user", "content": user_content},
    ]


class HttpGenerator:
    def __init__(self, spec: BackendSpec, max_in_flight: int = 8):
        self._client = _HttpClient(spec, max_in_flight)
        self._model = spec.model_name

    def generate(self, request: GenerationRequest) -> GenerationResult:
        payload = {
            "model": self._model,
            "messages": _chat_messages(request.system_prompt, request.user_prompt, request.image_refs),
            "temperature": request.temperature,
            "repetition_penalty": request.repetition_penalty,
            "max_tokens": request.max_tokens,
            "logprobs": request.want_logprobs,
        }
        body = self._client.post("/chat", payload)
        if "text" not in body or not isinstance(body["text"], str):
            raise BackendError(f"malformed reply: missing text field, got keys {sorted(body)}")
        logprobs = None
        if request.want_logprobs:
            raw = body.get("token_logprobs")
            if raw is None:
                raise BackendError("logprobs requested but missing from reply")
            logprobs = tuple({str(k): float(v) for k, v in entry.items()} for entry in raw)
        return GenerationResult(text=body["text"], token_logprobs=logprobs)


class HttpCritic:
    """Yes-probability from the first generated token's logprobs, using the
    canonical critic prompt templates verbatim."""

    def __init__(self, spec: BackendSpec, max_in_flight: int = 8):
        self._client = _HttpClient(spec, max_in_flight)
        self._model = spec.model_name

    def yes_probability(self, query: Query, passage: Passage) -> float:
        payload = {
            "model": self._model,
            "messages": _chat_messages(
                CRITIC_SYSTEM_PROMPT,
                render_critic_user(query.question, passage.text),
                (query.image_ref,),
            ),
            "temperature": 1.0,
            "repetition_penalty": 1.0,
            "max_tokens": 1,
            "logprobs": True,
        }
        body = self._client.post("/chat", payload)
        raw = body.get("token_logprobs")
        if not raw:
            raise BackendError("critic reply carries no token_logprobs")
        first = {str(k): float(v) for k, v in raw[0].items()}
        return yes_probability_from_logprobs(first)


class HttpEmbedder:
    def __init__(self, spec: BackendSpec, max_in_flight: int = 8):
        self._client = _HttpClient(spec, max_in_flight)
        self._model = spec.model_name

    def embed(self, resource: str, kind: str = "image") -> EmbeddingVector:
        body = self._client.post(
            "/embed", {"model": self._model, "input": {"type": kind, "value": resource}}
        )
        raw = body.get("embedding")
        if not isinstance(raw, list) or not raw:
            raise BackendError(f"malformed embed reply: {sorted(body)}")
        return EmbeddingVector(values=tuple(float(x) for x in raw))


@dataclass
class Backends:
    """The four inference backends the pipeline needs, as one bundle."""

    embedder: EmbedderBackend
    critic: CriticBackend
    generator: GeneratorBackend
    region: RegionProposerBackend


def make_mock_backends(
    seed: int,
    embedding_dim: int = DEFAULT_EMBEDDING_DIM,
    embedder_overrides: Mapping[str, Sequence[float]] | None = None,
    critic_overrides: Mapping[str, float] | None = None,
    generator_fixtures: Sequence[tuple[str, str]] = (),
    generator_script: Callable[[GenerationRequest], str] | None = None,
    region_mode: str = "identity",
    region_table: Mapping[tuple[str, str], str] | None = None,
) -> Backends:
    return Backends(
        embedder=MockEmbedder(seed, embedding_dim, embedder_overrides),
        critic=MockCritic(seed, critic_overrides),
        generator=MockGenerator(seed, generator_fixtures, generator_script),
        region=MockRegionProposer(region_mode, region_table),
    )


def make_backends(spec: BackendSpec, embedding_dim: int = DEFAULT_EMBEDDING_DIM) -> Backends:
    if spec.kind == "mock":
        return make_mock_backends(seed=int(spec.seed or 0), embedding_dim=embedding_dim)
    return Backends(
        embedder=HttpEmbedder(spec),
        critic=HttpCritic(spec),
        generator=HttpGenerator(spec),
        region=MockRegionProposer("none"),
    )


def load_backend_spec(
    path: str | None = None, env: Mapping[str, str] | None = None
) -> BackendSpec:
    """Backend spec from a TOML file's [backend] table, with REAG_ENDPOINT,
    REAG_MODEL, and REAG_TIMEOUT_MS environment overrides on top. With no
    file and no endpoint override, falls back to a seed-0 mock."""
    env = os.environ if env is None else env
    raw: dict[str, Any] = {}
    if path is not None:
        try:
            import tomllib  # Python >= 3.11
        except ModuleNotFoundError:
            import tomli as tomllib
        with open(path, "rb") as fh:
            raw = tomllib.load(fh).get("backend", {})
    kind = raw.get("kind")
    endpoint = env.get(ENV_ENDPOINT, raw.get("endpoint"))
    model_name = env.get(ENV_MODEL, raw.get("model_name"))
    if ENV_TIMEOUT_MS in env:
        timeout = float(env[ENV_TIMEOUT_MS]) / 1000.0
    elif "timeout_ms" in raw:
        timeout = float(raw["timeout_ms"]) / 1000.0
    else:
        timeout = DEFAULT_TIMEOUT_SECONDS
    seed = raw.get("seed")
    if kind is None:
        kind = "http" if endpoint else "mock"
    if kind == "mock" and seed is None:
        seed = 0
    return BackendSpec(
        kind=str(kind),
        endpoint=endpoint,
        model_name=model_name,
        timeout=timeout,
        seed=None if seed is None else int(seed),
    )
