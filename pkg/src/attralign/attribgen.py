"""Attribute-description construction against chat/VQA endpoints.

Three steps per corpus: discover a list of attributes worth asking about for
a super-category, extract each attribute's value per sample via a VQA-style
prompt, then summarize the key-value block into one description. Every call
goes through a pluggable transport speaking one generic JSON chat-completion
shape (messages in, text out), with retries, exponential backoff, and an
on-disk write-once response cache, so the whole pipeline is mockable and
replayable byte-for-byte.

The auth token is referenced by environment-variable name only and is never
logged or serialized.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .errors import (
    EmptyText,
    MissingKeys,
    ParseError,
    TransportError,
    UnboundPlaceholder,
)
from .numerics import Vector

GENERAL_ATTRIBUTE = "General description of the image"

_PLACEHOLDER_RE = re.compile(r"\{([A-Z]+)\}")


@dataclass(frozen=True)
class PromptTemplate:
    """A named template over {SUPERCLASS}, {CLASSUNIT}, {ATTRIBUTE} slots."""

    template_id: str
    text: str

    def render(self, **bindings: str) -> str:
        def sub(match: re.Match) -> str:
            key = match.group(1)
            if key not in bindings:
                raise UnboundPlaceholder(
                    f"template {self.template_id!r}: unbound placeholder {{{key}}}")
            return bindings[key]

        return _PLACEHOLDER_RE.sub(sub, self.text)


DISCOVER = PromptTemplate(
    "discover",
    "Your task is to tell me what are the useful attributes for distinguishing "
    "{SUPERCLASS} {CLASSUNIT} in a photo of a {SUPERCLASS}",
)
EXTRACT = PromptTemplate(
    "extract",
    "Questions: Give a brief description of the {ATTRIBUTE} of the {SUPERCLASS} "
    "in the image. Answer:",
)
EXTRACT_GENERAL = PromptTemplate(
    "extract_general",
    "Questions: Describe this image in details. Answer:",
)
SUMMARIZE = PromptTemplate(
    "summarize",
    "Summarize the information you get about the {SUPERCLASS} from the general "
    "description and attribute description with five sentences.",
)


@dataclass(frozen=True)
class AttributeSet:
    """Discovered attribute names, the general description always first."""

    super_category: str
    names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(self.names)
        if not names or names[0] != GENERAL_ATTRIBUTE:
            raise ParseError(f"attribute set must start with {GENERAL_ATTRIBUTE!r}")
        lowered = [n.lower() for n in names]
        if len(set(lowered)) != len(lowered) or any(not n.strip() for n in names):
            raise ParseError("attribute names must be unique and non-empty")
        object.__setattr__(self, "names", names)


@dataclass
class SampleAttributes:
    """Per-sample extraction results plus the summarized description."""

    sample_id: str
    values: dict[str, str] = field(default_factory=dict)
    failed: dict[str, str] = field(default_factory=dict)
    summary: str | None = None

    def missing(self, attrs: AttributeSet) -> list[str]:
        return [n for n in attrs.names if n not in self.values]


@dataclass(frozen=True)
class EndpointConfig:
    """Where and how to call the endpoint; the token is an env-var NAME."""

    base_url: str = ""
    auth_env: str = ""
    model: str = "default"
    timeout: float = 30.0
    max_retries: int = 3
    backoff_base: float = 0.5

    def __post_init__(self):
        if self.max_retries < 0:
            raise ParseError("max_retries must be >= 0")
        if not self.timeout > 0:
            raise ParseError("timeout must be positive")

    def as_dict(self) -> dict:
        # auth_env is a variable NAME; the secret itself never leaves os.environ
        return {"base_url": self.base_url, "auth_env": self.auth_env,
                "model": self.model, "timeout": self.timeout,
                "max_retries": self.max_retries, "backoff_base": self.backoff_base}

    @classmethod
    def from_dict(cls, payload: dict) -> "EndpointConfig":
        return cls(**payload)


@dataclass(frozen=True)
class ChatRequest:
    """One call: the rendered prompt, an opaque image reference, a cache key."""

    prompt: str
    sample_ref: str = ""
    image: str | None = None

    def digest(self, model: str) -> str:
        material = "\x00".join([model, self.prompt, self.sample_ref])
        return hashlib.sha256(material.encode("utf-8")).hexdigest()

    def messages(self) -> list[dict]:
        content: dict = {"role": "user", "content": self.prompt}
        if self.image is not None:
            content["image"] = self.image
        return [content]


class TransientFailure(Exception):
    """Transport-internal: retriable failure (rate limit, 5xx, network)."""


class Transport(Protocol):
    def complete(self, request: ChatRequest, config: EndpointConfig) -> str: ...


class HttpTransport:
    """POSTs the generic chat shape to a JSON endpoint via requests."""

    def complete(self, request: ChatRequest, config: EndpointConfig) -> str:
        import requests

        headers = {"Content-Type": "application/json"}
        token = os.environ.get(config.auth_env, "") if config.auth_env else ""
        if token:
            headers["Authorization"] = f"Bearer {token}"
        payload = {"model": config.model, "messages": request.messages()}
        try:
            resp = requests.post(config.base_url, json=payload, headers=headers,
                                 timeout=config.timeout)
        except requests.RequestException as e:
            raise TransientFailure(f"network error: {type(e).__name__}") from e
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientFailure(f"status {resp.status_code}")
        if resp.status_code >= 400:
            raise TransientFailure(f"status {resp.status_code}")
        body = resp.json()
        try:
            if "choices" in body:
                return body["choices"][0]["message"]["content"]
            return body["content"]
        except (KeyError, IndexError, TypeError) as e:
            raise ParseError("unrecognized chat response shape",
                             raw_response=resp.text) from e


class MockTransport:
    """Deterministic rule-based transport for tests; counts every call and
    can inject transient failures per digest."""

    def __init__(self, responder: Callable[[ChatRequest], str]):
        self.responder = responder
        self.calls = 0
        self.fail_next: dict[str, int] = {}

    def inject_failures(self, request: ChatRequest, model: str, count: int) -> None:
        self.fail_next[request.digest(model)] = count

    def complete(self, request: ChatRequest, config: EndpointConfig) -> str:
        self.calls += 1
        digest = request.digest(config.model)
        remaining = self.fail_next.get(digest, 0)
        if remaining > 0:
            self.fail_next[digest] = remaining - 1
            raise TransientFailure("injected failure")
        return self.responder(request)


class TranscriptTransport:
    """Replays responses recorded by RecordingTransport, matched by digest."""

    def __init__(self, transcript: dict[str, str]):
        self.transcript = dict(transcript)

    @classmethod
    def from_file(cls, path) -> "TranscriptTransport":
        payload = json.loads(Path(path).read_text())
        return cls({entry["digest"]: entry["response"] for entry in payload["requests"]})

    def complete(self, request: ChatRequest, config: EndpointConfig) -> str:
        digest = request.digest(config.model)
        if digest not in self.transcript:
            raise TransportError(f"transcript has no response for digest {digest[:12]}...")
        return self.transcript[digest]


class RecordingTransport:
    """Wraps another transport and records (digest, prompt, response) triples."""

    def __init__(self, inner: Transport):
        self.inner = inner
        self.requests: list[dict] = []

    def complete(self, request: ChatRequest, config: EndpointConfig) -> str:
        response = self.inner.complete(request, config)
        self.requests.append({
            "digest": request.digest(config.model),
            "prompt": request.prompt,
            "sample_ref": request.sample_ref,
            "response": response,
        })
        return response

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({"requests": self.requests}, indent=2, sort_keys=True))


class ResponseCache:
    """On-disk write-once cache keyed by hash(prompt + sample ref + model)."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _path(self, digest: str) -> Path:
        return self.directory / f"{digest}.txt"

    def get(self, digest: str) -> str | None:
        p = self._path(digest)
        return p.read_text() if p.exists() else None

    def put(self, digest: str, response: str) -> None:
        with self._lock:
            p = self._path(digest)
            if not p.exists():
                tmp = p.with_suffix(".tmp")
                tmp.write_text(response)
                tmp.replace(p)


class Endpoint:
    """Transport + config + optional cache, with retry/backoff around calls."""

    def __init__(self, transport: Transport, config: EndpointConfig,
                 cache: ResponseCache | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.transport = transport
        self.config = config
        self.cache = cache
        self.sleep = sleep

    def chat(self, request: ChatRequest) -> str:
        digest = request.digest(self.config.model)
        if self.cache is not None:
            hit = self.cache.get(digest)
            if hit is not None:
                return hit
        attempts = self.config.max_retries + 1
        last: Exception | None = None
        for attempt in range(1, attempts + 1):
            try:
                response = self.transport.complete(request, self.config)
                break
            except TransientFailure as e:
                last = e
                if attempt == attempts:
                    raise TransportError(
                        f"endpoint failed after {attempts} attempts: {e}") from e
                self.sleep(self.config.backoff_base * 2 ** (attempt - 1))
        else:  # pragma: no cover
            raise TransportError(f"endpoint failed: {last}")
        if self.cache is not None:
            self.cache.put(digest, response)
        return response


# ---------------------------------------------------------------------------
# Pipeline steps
# ---------------------------------------------------------------------------

_ENUM_PREFIX = re.compile(r"^\s*(?:[-*•]|\(?\d+[.)]?)\s*")


def _parse_name_list(raw: str) -> list[str]:
    names = []
    for line in raw.splitlines():
        cleaned = _ENUM_PREFIX.sub("", line).strip().rstrip(".,;:")
        if cleaned:
            names.append(cleaned)
    return names


def discover(super_category: str, endpoint: Endpoint,
             class_unit: str = "categories") -> AttributeSet:
    """Ask the endpoint which attributes separate the subordinate categories."""
    prompt = DISCOVER.render(SUPERCLASS=super_category, CLASSUNIT=class_unit)
    raw = endpoint.chat(ChatRequest(prompt=prompt, sample_ref="discover"))
    parsed = _parse_name_list(raw)
    if not parsed:
        raise ParseError("attribute discovery returned no names", raw_response=raw)
    names: list[str] = [GENERAL_ATTRIBUTE]
    seen = {GENERAL_ATTRIBUTE.lower()}
    for name in parsed:
        if name.lower() in seen:
            continue
        seen.add(name.lower())
        names.append(name)
    return AttributeSet(super_category=super_category, names=tuple(names))


def extract(sample_ref: str, super_category: str, attrs: AttributeSet,
            endpoint: Endpoint, image: str | None = None) -> SampleAttributes:
    """One request per attribute (general description first); responses are
    stored verbatim and per-key failures leave the other keys intact."""
    result = SampleAttributes(sample_id=sample_ref)
    for name in attrs.names:
        if name == GENERAL_ATTRIBUTE:
            prompt = EXTRACT_GENERAL.render()
        else:
            prompt = EXTRACT.render(SUPERCLASS=super_category, ATTRIBUTE=name)
        request = ChatRequest(prompt=prompt, sample_ref=sample_ref, image=image)
        try:
            result.values[name] = endpoint.chat(request)
        except TransportError as e:
            result.failed[name] = str(e)
    return result


def summarize(sample: SampleAttributes, super_category: str, attrs: AttributeSet,
              endpoint: Endpoint) -> SampleAttributes:
    """Summarize the key-value block into one description."""
    missing = sample.missing(attrs)
    if missing:
        raise MissingKeys(f"cannot summarize, missing keys: {missing}", keys=missing)
    block = "\n".join(f"{name}: {sample.values[name]}" for name in attrs.names)
    instruction = SUMMARIZE.render(SUPERCLASS=super_category)
    prompt = f"{block}\n\n{instruction}"
    sample.summary = endpoint.chat(
        ChatRequest(prompt=prompt, sample_ref=f"{sample.sample_id}/summary"))
    return sample


@dataclass(frozen=True)
class CorpusSample:
    sample_id: str
    category_id: int
    image: str | None = None


def load_corpus(path) -> tuple[str, str, list[CorpusSample]]:
    payload = json.loads(Path(path).read_text())
    samples = [CorpusSample(str(s["id"]), int(s["category_id"]), s.get("image"))
               for s in payload["samples"]]
    return payload["super_category"], payload.get("class_unit", "categories"), samples


def run_pipeline(samples: Sequence[CorpusSample], super_category: str,
                 endpoint: Endpoint, class_unit: str = "categories",
                 attrs: AttributeSet | None = None, max_workers: int = 1) -> dict:
    """discover -> extract -> summarize over a corpus; returns the triples payload.

    Samples are processed concurrently up to max_workers in-flight requests
    per sample pipeline; results are assembled in corpus order, so the
    payload is a pure function of (corpus, prompts, transport responses) and
    serializing it with sorted keys is byte-stable across identical runs.
    """
    if attrs is None:
        attrs = discover(super_category, endpoint, class_unit=class_unit)

    def process(sample: CorpusSample) -> dict:
        extracted = extract(sample.sample_id, super_category, attrs, endpoint,
                            image=sample.image)
        if not extracted.failed:
            summarize(extracted, super_category, attrs, endpoint)
        return {
            "id": sample.sample_id,
            "category_id": sample.category_id,
            "attributes": {k: extracted.values[k] for k in attrs.names
                           if k in extracted.values},
            "failed": dict(sorted(extracted.failed.items())),
            "summary": extracted.summary,
        }

    if max_workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            triples = list(pool.map(process, samples))
    else:
        triples = [process(s) for s in samples]
    return {
        "kind": "attribute-triples",
        "super_category": super_category,
        "attribute_names": list(attrs.names),
        "samples": triples,
    }


def save_triples(payload: dict, path) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# Utilities
# ---------------------------------------------------------------------------

def embed_toy(text: str, dim: int = 64, seed: int = 0) -> Vector:
    """Deterministic character-trigram feature hash onto the unit sphere.

    A stand-in embedder for end-to-end tests; identical text gives an
    identical vector on every platform (hashing via blake2b, not hash()).
    """
    if not text:
        raise EmptyText("cannot embed empty text")
    acc = np.zeros(dim)
    padded = f"\x02{text}\x03"
    grams = [padded[i:i + 3] for i in range(len(padded) - 2)] or [padded]
    salt = seed.to_bytes(8, "little", signed=True)
    for gram in grams:
        h = hashlib.blake2b(gram.encode("utf-8"), key=salt, digest_size=8).digest()
        value = int.from_bytes(h, "little")
        index = value % dim
        sign = 1.0 if (value >> 62) & 1 else -1.0
        acc[index] += sign
    norm = np.linalg.norm(acc)
    if norm == 0.0:
        acc[0] = 1.0
        norm = 1.0
    return Vector(acc / norm)


def scrub_class_names(text: str, names: Sequence[str], super_category: str = "") -> str:
    """Replace category names with a demonstrative phrase to avoid leaking
    labels into descriptions used for probing."""
    replacement = f"this {super_category}" if super_category else "this one"
    for name in sorted(names, key=len, reverse=True):
        if not name:
            continue
        text = re.sub(re.escape(name), replacement, text, flags=re.IGNORECASE)
    return text
