"""Gateway for all model inference: completions, embeddings, caching.

Everything that talks to a judge model goes through JudgeClient so that
caching, schema validation, rate limiting, and the deterministic stub
backend apply uniformly. No other module performs network I/O.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import string
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Protocol, Sequence

import jsonschema
import numpy as np

from .core import canonical_json
from .errors import ConfigError, JudgeError, JudgeFormatError, PipelineError

logger = logging.getLogger(__name__)

RETRYABLE_STATUS = frozenset({429, 500, 502, 503, 504})
MAX_HTTP_ATTEMPTS = 5
BACKOFF_BASE_SECONDS = 0.5


@dataclass(frozen=True)
class EndpointConfig:
    """Connection and decoding settings for one judge endpoint."""

    base_url: str = ""
    model_name: str = "stub"
    api_key_env: str = ""
    max_output_tokens: int = 2048
    temperature: float = 0.0
    extra_params: Mapping[str, Any] = field(default_factory=dict)
    requests_per_minute: int = 60
    max_concurrency: int = 4

    def __post_init__(self) -> None:
        if self.max_concurrency < 1:
            raise ConfigError("max_concurrency must be >= 1")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if self.requests_per_minute < 1:
            raise ConfigError("requests_per_minute must be >= 1")
        object.__setattr__(self, "extra_params", dict(self.extra_params))

    def decoding_params(self) -> dict[str, Any]:
        return {
            "max_output_tokens": self.max_output_tokens,
            "temperature": self.temperature,
            **self.extra_params,
        }


@dataclass(frozen=True)
class PromptTemplate:
    """Named, versioned prompt with a response schema."""

    name: str
    version: str
    system_text: str
    user_text: str
    response_schema: Mapping[str, Any]

    def placeholders(self) -> set[str]:
        names: set[str] = set()
        for text in (self.system_text, self.user_text):
            for _, fname, _, _ in string.Formatter().parse(text):
                if fname:
                    names.add(fname)
        return names

    def render(self, bindings: Mapping[str, Any]) -> tuple[str, str]:
        missing = self.placeholders() - set(bindings)
        if missing:
            raise PipelineError(
                f"template {self.name}: unbound placeholders {sorted(missing)}"
            )
        return (
            self.system_text.format(**bindings),
            self.user_text.format(**bindings),
        )


@dataclass(frozen=True)
class JudgeResponse:
    raw_text: str
    parsed: Any
    usage: Mapping[str, int]
    cache_hit: bool
    template_name: str
    template_version: str
    model_name: str


class Backend(Protocol):
    def complete(
        self,
        endpoint: EndpointConfig,
        template: PromptTemplate,
        bindings: Mapping[str, Any],
        system_text: str,
        user_text: str,
    ) -> tuple[str, dict[str, int]]: ...

    def embed(
        self, endpoint: EndpointConfig, texts: Sequence[str]
    ) -> list[np.ndarray]: ...


class RateLimiter:
    """Sliding-window limiter: at most `per_minute` acquisitions in 60 s."""

    def __init__(
        self,
        per_minute: int,
        clock=time.monotonic,
        sleeper=time.sleep,
    ):
        self.per_minute = per_minute
        self._clock = clock
        self._sleep = sleeper
        self._stamps: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                while self._stamps and now - self._stamps[0] >= 60.0:
                    self._stamps.popleft()
                if len(self._stamps) < self.per_minute:
                    self._stamps.append(now)
                    return
                wait = 60.0 - (now - self._stamps[0])
            self._sleep(max(wait, 0.0))


def _normalize(vector: Sequence[float]) -> np.ndarray:
    arr = np.asarray(vector, dtype=float)
    norm = float(np.linalg.norm(arr))
    if norm == 0.0 or not np.isfinite(norm):
        raise JudgeError("embedding vector has zero or non-finite norm")
    return arr / norm


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two vectors, clipped to [-1, 1]."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise PipelineError(f"cosine: shape mismatch {a.shape} vs {b.shape}")
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise PipelineError("cosine: zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


class StubBackend:
    """Deterministic offline backend.

    Completions come from a fixture: per template a `default` response
    and optional `cases`, each matching on a subset of binding values.
    A response given as an object is serialized canonically; a response
    given as a string is returned verbatim (useful for exercising the
    schema-failure path). Embeddings are hash-derived unit vectors,
    overridable per text.
    """

    def __init__(self, fixture: Mapping[str, Any] | None = None):
        fixture = fixture or {}
        self.templates: Mapping[str, Any] = fixture.get("templates", {})
        self.embedding_overrides: Mapping[str, Sequence[float]] = fixture.get(
            "embeddings", {}
        )
        self.embedding_dim = int(fixture.get("embedding_dim", 16))
        if self.embedding_dim < 2:
            raise ConfigError("stub embedding_dim must be >= 2")

    @classmethod
    def from_file(cls, path: str | Path) -> "StubBackend":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    def complete(
        self,
        endpoint: EndpointConfig,
        template: PromptTemplate,
        bindings: Mapping[str, Any],
        system_text: str,
        user_text: str,
    ) -> tuple[str, dict[str, int]]:
        spec = self.templates.get(template.name)
        if spec is None:
            raise JudgeError(
                f"stub fixture has no responses for template {template.name!r}"
            )
        chosen = spec.get("default")
        for case in spec.get("cases", []):
            when = case.get("when", {})
            if all(str(bindings.get(k)) == str(v) for k, v in when.items()):
                chosen = case.get("respond")
                break
        if chosen is None:
            raise JudgeError(
                f"stub fixture has no matching response for {template.name!r} "
                f"bindings {sorted(bindings)}"
            )
        raw = chosen if isinstance(chosen, str) else canonical_json(chosen)
        return raw, {"prompt_tokens": 0, "completion_tokens": 0}

    def _vector_for(self, text: str) -> np.ndarray:
        if text in self.embedding_overrides:
            vec = _normalize(self.embedding_overrides[text])
            if vec.shape[0] != self.embedding_dim:
                raise JudgeError(
                    f"stub embedding override for {text[:40]!r} has dimension "
                    f"{vec.shape[0]}, expected {self.embedding_dim}"
                )
            return vec
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
        return _normalize(rng.standard_normal(self.embedding_dim))

    def embed(
        self, endpoint: EndpointConfig, texts: Sequence[str]
    ) -> list[np.ndarray]:
        return [self._vector_for(t) for t in texts]


class HttpBackend:
    """Chat-completions-style HTTP JSON backend with retry and limits."""

    def __init__(self, session=None, clock=time.monotonic, sleeper=time.sleep):
        if session is None:
            import requests

            session = requests.Session()
        self._session = session
        self._sleep = sleeper
        self._clock = clock
        self._limiters: dict[tuple[str, int], RateLimiter] = {}
        self._lock = threading.Lock()

    def _limiter(self, endpoint: EndpointConfig) -> RateLimiter:
        key = (endpoint.base_url, endpoint.requests_per_minute)
        with self._lock:
            if key not in self._limiters:
                self._limiters[key] = RateLimiter(
                    endpoint.requests_per_minute,
                    clock=self._clock,
                    sleeper=self._sleep,
                )
            return self._limiters[key]

    def _headers(self, endpoint: EndpointConfig) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if endpoint.api_key_env:
            key = os.environ.get(endpoint.api_key_env, "")
            if not key:
                raise ConfigError(
                    f"environment variable {endpoint.api_key_env!r} is not set"
                )
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post(self, endpoint: EndpointConfig, route: str, payload: dict) -> dict:
        if not endpoint.base_url:
            raise ConfigError("live endpoint requires a base_url")
        url = endpoint.base_url.rstrip("/") + route
        last_error = ""
        for attempt in range(MAX_HTTP_ATTEMPTS):
            self._limiter(endpoint).acquire()
            try:
                resp = self._session.post(
                    url, json=payload, headers=self._headers(endpoint), timeout=120
                )
            except OSError as exc:
                last_error = str(exc)
                self._sleep(BACKOFF_BASE_SECONDS * 2**attempt)
                continue
            if resp.status_code in RETRYABLE_STATUS:
                last_error = f"HTTP {resp.status_code}"
                self._sleep(BACKOFF_BASE_SECONDS * 2**attempt)
                continue
            if resp.status_code != 200:
                raise JudgeError(f"HTTP {resp.status_code} from {url}")
            return resp.json()
        raise JudgeError(
            f"gave up on {url} after {MAX_HTTP_ATTEMPTS} attempts ({last_error})"
        )

    def complete(
        self,
        endpoint: EndpointConfig,
        template: PromptTemplate,
        bindings: Mapping[str, Any],
        system_text: str,
        user_text: str,
    ) -> tuple[str, dict[str, int]]:
        payload = {
            "model": endpoint.model_name,
            "messages": [
                {"role": "system", "content": system_text},
                {"role": "user", "content": user_text},
            ],
            "temperature": endpoint.temperature,
            "max_tokens": endpoint.max_output_tokens,
            **endpoint.extra_params,
        }
        data = self._post(endpoint, "/chat/completions", payload)
        try:
            raw = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise JudgeError("malformed completion payload") from None
        return raw, dict(data.get("usage", {}))

    def embed(
        self, endpoint: EndpointConfig, texts: Sequence[str]
    ) -> list[np.ndarray]:
        payload = {"model": endpoint.model_name, "input": list(texts)}
        data = self._post(endpoint, "/embeddings", payload)
        try:
            vectors = [row["embedding"] for row in data["data"]]
        except (KeyError, TypeError):
            raise JudgeError("malformed embeddings payload") from None
        if len(vectors) != len(texts):
            raise JudgeError(
                f"embeddings count mismatch: sent {len(texts)}, "
                f"got {len(vectors)}"
            )
        return [_normalize(v) for v in vectors]


def _extract_json(raw: str) -> Any:
    """Parse raw judge output as JSON, tolerating code fences."""
    text = raw.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    if text.startswith("```"):
        lines = text.splitlines()
        body = "\n".join(
            line for line in lines[1:] if not line.strip().startswith("```")
        )
        try:
            return json.loads(body)
        except json.JSONDecodeError:
            text = body
    starts = [i for i in (text.find("{"), text.find("[")) if i >= 0]
    if starts:
        start = min(starts)
        end = max(text.rfind("}"), text.rfind("]"))
        if end > start:
            return json.loads(text[start : end + 1])
    raise json.JSONDecodeError("no JSON value found", raw, 0)


class JudgeClient:
    """Schema-validated judging with a persistent content-addressed cache.

    One repair re-prompt is attempted on schema violations; a second
    failure raises JudgeFormatError carrying the raw text.
    """

    def __init__(self, backend: Backend, cache_dir: str | Path | None = None):
        self.backend = backend
        self.cache_dir = Path(cache_dir) if cache_dir else None
        if self.cache_dir:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
        self._write_lock = threading.Lock()

    # -- cache ---------------------------------------------------------

    def _cache_key(
        self,
        endpoint: EndpointConfig,
        template: PromptTemplate,
        system_text: str,
        user_text: str,
    ) -> str:
        material = canonical_json(
            {
                "template": template.name,
                "version": template.version,
                "system": system_text,
                "user": user_text,
                "model": endpoint.model_name,
                "decoding": endpoint.decoding_params(),
            }
        )
        return hashlib.sha256(material.encode("utf-8")).hexdigest()

    def _cache_read(self, key: str) -> dict | None:
        if not self.cache_dir:
            return None
        path = self.cache_dir / f"{key}.json"
        if not path.exists():
            return None
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)

    def _cache_write(self, key: str, record: dict) -> None:
        if not self.cache_dir:
            return
        path = self.cache_dir / f"{key}.json"
        with self._write_lock:
            tmp = path.with_suffix(".tmp")
            tmp.write_text(canonical_json(record), encoding="utf-8")
            tmp.replace(path)

    # -- completion ----------------------------------------------------

    def _validate(self, template: PromptTemplate, raw: str) -> Any:
        try:
            parsed = _extract_json(raw)
        except json.JSONDecodeError as exc:
            raise ValueError(f"not valid JSON: {exc}") from None
        try:
            jsonschema.validate(parsed, dict(template.response_schema))
        except jsonschema.ValidationError as exc:
            raise ValueError(f"schema violation: {exc.message}") from None
        return parsed

    def complete(
        self,
        endpoint: EndpointConfig,
        template: PromptTemplate,
        bindings: Mapping[str, Any],
    ) -> JudgeResponse:
        system_text, user_text = template.render(bindings)
        key = self._cache_key(endpoint, template, system_text, user_text)
        cached = self._cache_read(key)
        if cached is not None:
            return JudgeResponse(
                raw_text=cached["raw_text"],
                parsed=cached["parsed"],
                usage=cached.get("usage", {}),
                cache_hit=True,
                template_name=template.name,
                template_version=template.version,
                model_name=endpoint.model_name,
            )

        raw, usage = self.backend.complete(
            endpoint, template, bindings, system_text, user_text
        )
        try:
            parsed = self._validate(template, raw)
        except ValueError as first_error:
            logger.warning(
                "judge %s: invalid response (%s), attempting repair",
                template.name,
                first_error,
            )
            repair_user = (
                user_text
                + "\n\nYour previous reply could not be used: "
                + str(first_error)
                + "\nReturn only a corrected JSON value matching the "
                "required structure."
            )
            raw, usage = self.backend.complete(
                endpoint, template, bindings, system_text, repair_user
            )
            try:
                parsed = self._validate(template, raw)
            except ValueError as second_error:
                raise JudgeFormatError(
                    f"judge {template.name}: response failed validation after "
                    f"repair attempt: {second_error}",
                    raw_text=raw,
                ) from None

        self._cache_write(key, {"parsed": parsed, "raw_text": raw, "usage": usage})
        return JudgeResponse(
            raw_text=raw,
            parsed=parsed,
            usage=usage,
            cache_hit=False,
            template_name=template.name,
            template_version=template.version,
            model_name=endpoint.model_name,
        )

    def map_complete(
        self,
        endpoint: EndpointConfig,
        template: PromptTemplate,
        bindings_list: Sequence[Mapping[str, Any]],
    ) -> list[JudgeResponse]:
        """complete() over many bindings, bounded by max_concurrency.

        Results are returned in input order regardless of completion
        order; the first failure propagates.
        """
        if not bindings_list:
            return []
        if endpoint.max_concurrency == 1 or len(bindings_list) == 1:
            return [self.complete(endpoint, template, b) for b in bindings_list]
        with ThreadPoolExecutor(max_workers=endpoint.max_concurrency) as pool:
            futures = [
                pool.submit(self.complete, endpoint, template, b)
                for b in bindings_list
            ]
            return [f.result() for f in futures]

    # -- embeddings ----------------------------------------------------

    def _embedding_cache_key(self, endpoint: EndpointConfig, text: str) -> str:
        material = canonical_json(
            {"kind": "embedding", "model": endpoint.model_name, "text": text}
        )
        return hashlib.sha256(material.encode("utf-8")).hexdigest()

    def embed(
        self, endpoint: EndpointConfig, texts: Sequence[str]
    ) -> list[np.ndarray]:
        """L2-normalized embedding per text, cached per (model, text)."""
        if any(not t for t in texts):
            raise PipelineError("embed: empty string in batch")
        vectors: dict[int, np.ndarray] = {}
        misses: list[int] = []
        for i, text in enumerate(texts):
            cached = self._cache_read(self._embedding_cache_key(endpoint, text))
            if cached is not None:
                vectors[i] = np.asarray(cached["vector"], dtype=float)
            else:
                misses.append(i)
        if misses:
            fresh = self.backend.embed(endpoint, [texts[i] for i in misses])
            if len(fresh) != len(misses):
                raise JudgeError("backend returned wrong number of embeddings")
            for i, vec in zip(misses, fresh):
                vectors[i] = vec
                self._cache_write(
                    self._embedding_cache_key(endpoint, texts[i]),
                    {"vector": [float(x) for x in vec]},
                )
        dims = {v.shape[0] for v in vectors.values()}
        if len(dims) > 1:
            raise JudgeError(f"embedding dimension mismatch in batch: {dims}")
        return [vectors[i] for i in range(len(texts))]
