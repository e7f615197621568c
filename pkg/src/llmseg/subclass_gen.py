"""Subclass generation: prompt builders, response parsing, chat-completion client and disk cache."""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

import httpx

from llmseg._io import atomic_write_json, sha256_hex

log = logging.getLogger(__name__)

API_URL_ENV = "LLMSEG_API_URL"
API_KEY_ENV = "LLMSEG_API_KEY"
DEFAULT_N = 10


class PromptMode(str, Enum):
    P1 = "P1"
    P2 = "P2"

    @classmethod
    def parse(cls, value) -> "PromptMode":
        if isinstance(value, cls):
            return value
        return cls(str(value).upper())


class GenerationError(RuntimeError):
    pass


class GenerationIncomplete(GenerationError):
    """Raised when a response yields fewer than ``n`` distinct names."""

    def __init__(self, message: str, partial: list[str]):
        super().__init__(message)
        self.partial = partial


class EndpointError(GenerationError):
    pass


def _check_args(class_name: str, n: int) -> None:
    if not class_name or not class_name.strip():
        raise ValueError("class name must be non-empty")
    if int(n) < 1:
        raise ValueError(f"n must be >= 1, got {n}")


def build_prompt_p1(class_name: str, n: int) -> str:
    _check_args(class_name, n)
    return (
        f"Q: List {n} subclasses of the following: {class_name}\n"
        f"A: Here are {n} commonly seen subclasses of {class_name}:"
    )


P2_FEW_SHOT = (
    "Q1:List 3 subclasses of the person:\n"
    "A1:female, male, child\n"
    "Q2:List 3 subclasses of the boat:\n"
    "A2:fishing boat, cruise ship, ship\n"
)


def build_prompt_p2(class_name: str, n: int) -> str:
    _check_args(class_name, n)
    return (
        P2_FEW_SHOT
        + f"Q:List {n} subclasses of the following: {class_name}\n"
        + f"A:Here are {n} commonly seen subclasses of {class_name}:"
    )


def build_prompt(class_name: str, n: int, mode) -> str:
    mode = PromptMode.parse(mode)
    return build_prompt_p1(class_name, n) if mode is PromptMode.P1 else build_prompt_p2(class_name, n)


_NUMBERING = re.compile(r"^\s*(?:\(?\d+[.):]|[-*•])\s*")
_QUOTES = "\"'`“”‘’"


def _normalize_name(raw: str) -> str:
    s = raw.strip()
    s = _NUMBERING.sub("", s)
    s = s.strip().strip(_QUOTES).strip()
    s = s.rstrip(".;").strip().strip(_QUOTES).strip()
    return " ".join(s.split()).lower()


def parse_subclasses(response_text: str, n: int, *, exclude=()) -> list[str]:
    """Split a completion into normalized, de-duplicated names and keep the first ``n``.

    Lines ending in ``:`` are treated as headers (models sometimes echo the
    question) and dropped. Names equal to anything in ``exclude`` are skipped.
    """
    if not response_text or not response_text.strip():
        raise ValueError("response text is empty")
    banned = {_normalize_name(e) for e in exclude}
    out: list[str] = []
    seen: set[str] = set()
    for line in response_text.splitlines():
        if line.strip().endswith(":"):
            continue
        for piece in line.split(","):
            name = _normalize_name(piece)
            if not name or name in seen or name in banned:
                continue
            seen.add(name)
            out.append(name)
    if len(out) < n:
        raise GenerationIncomplete(f"only {len(out)} distinct name(s) recovered, need {n}", out)
    return out[:n]


@dataclass
class SubclassSet:
    superclass: str
    subclasses: list[str]
    n: int
    prompt_mode: str
    model_id: str
    cache_key: str

    def validate(self) -> None:
        if len(self.subclasses) != self.n:
            raise GenerationError(f"{self.superclass}: expected {self.n} subclasses, got {len(self.subclasses)}")
        if len(set(self.subclasses)) != len(self.subclasses):
            raise GenerationError(f"{self.superclass}: duplicate subclasses")
        sup = self.superclass.strip().lower()
        for s in self.subclasses:
            if not s or s != s.strip() or s != s.lower():
                raise GenerationError(f"{self.superclass}: subclass {s!r} not normalized")
            if s == sup:
                raise GenerationError(f"{self.superclass}: superclass listed as its own subclass")

    def prefix(self, n: int) -> "SubclassSet":
        if n > self.n:
            raise ValueError(f"{self.superclass}: requested {n} subclasses but only {self.n} stored")
        return SubclassSet(self.superclass, self.subclasses[:n], n, self.prompt_mode, self.model_id, self.cache_key)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SubclassSet":
        return cls(
            superclass=d["superclass"],
            subclasses=list(d["subclasses"]),
            n=int(d["n"]),
            prompt_mode=str(d["prompt_mode"]),
            model_id=str(d["model_id"]),
            cache_key=str(d["cache_key"]),
        )


def cache_key(model_id: str, mode, class_name: str, n: int) -> str:
    return sha256_hex("subclass-v1", model_id, PromptMode.parse(mode).value, class_name, str(int(n)))[:32]


class SubclassCache:
    """One JSON file per key: ``{cache_dir}/{cache_key}.json``."""

    def __init__(self, cache_dir):
        self.cache_dir = Path(cache_dir)

    def path(self, key: str) -> Path:
        return self.cache_dir / f"{key}.json"

    def get(self, key: str) -> SubclassSet | None:
        p = self.path(key)
        if not p.exists():
            return None
        doc = json.loads(p.read_text(encoding="utf-8"))
        return SubclassSet.from_dict(doc["subclass_set"])

    def put(self, sset: SubclassSet, raw_response: str, prompt_text: str) -> None:
        atomic_write_json(
            self.path(sset.cache_key),
            {"subclass_set": sset.to_dict(), "raw_response": raw_response, "prompt_text": prompt_text},
        )


@dataclass(frozen=True)
class PromptRequest:
    prompt_text: str
    model_id: str
    max_tokens: int = 256
    temperature: float = 0.0

    def payload(self) -> dict:
        return {
            "model": self.model_id,
            "messages": [{"role": "user", "content": self.prompt_text}],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "n": 1,
        }


class RateLimiter:
    """Minimum spacing between requests, shared by all threads using one client."""

    def __init__(self, requests_per_second: float | None):
        self.interval = 1.0 / requests_per_second if requests_per_second else 0.0
        self._lock = threading.Lock()
        self._next = 0.0

    def wait(self) -> None:
        if not self.interval:
            return
        with self._lock:
            now = time.monotonic()
            start = max(now, self._next)
            self._next = start + self.interval
        if start > now:
            time.sleep(start - now)


@dataclass
class LLMEndpoint:
    base_url: str | None = None
    api_key: str | None = None
    model_id: str = "gpt-3.5-turbo-instruct"
    max_tokens: int = 256
    timeout: float = 60.0
    max_attempts: int = 4
    backoff: float = 1.0
    requests_per_second: float | None = None
    fixture_dir: str | None = None

    @classmethod
    def from_env(cls, **overrides) -> "LLMEndpoint":
        ep = cls(base_url=os.environ.get(API_URL_ENV), api_key=os.environ.get(API_KEY_ENV))
        for k, v in overrides.items():
            if v is not None:
                setattr(ep, k, v)
        return ep


class ChatClient:
    """Client for a ``/v1/chat/completions``-style endpoint with retry and rate budget."""

    def __init__(self, endpoint: LLMEndpoint, transport: httpx.BaseTransport | None = None, sleep=time.sleep):
        if not endpoint.base_url:
            raise EndpointError(f"no LLM endpoint configured; set {API_URL_ENV}")
        if not endpoint.api_key:
            raise EndpointError(f"no API key configured; set {API_KEY_ENV}")
        self.endpoint = endpoint
        self.calls = 0
        self._sleep = sleep
        self._limiter = RateLimiter(endpoint.requests_per_second)
        self._http = httpx.Client(
            base_url=endpoint.base_url.rstrip("/"),
            headers={"Authorization": f"Bearer {endpoint.api_key}"},
            timeout=endpoint.timeout,
            transport=transport,
        )

    @property
    def model_id(self) -> str:
        return self.endpoint.model_id

    def complete(self, request: PromptRequest) -> str:
        last_exc: Exception | None = None
        for attempt in range(self.endpoint.max_attempts):
            if attempt:
                self._sleep(self.endpoint.backoff * 2 ** (attempt - 1))
            self._limiter.wait()
            self.calls += 1
            try:
                resp = self._http.post("/v1/chat/completions", json=request.payload())
            except httpx.TransportError as exc:
                last_exc = exc
                log.warning("LLM transport failure (attempt %d): %s", attempt + 1, exc)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last_exc = EndpointError(f"HTTP {resp.status_code}")
                log.warning("LLM endpoint returned %d (attempt %d)", resp.status_code, attempt + 1)
                continue
            if resp.status_code >= 400:
                raise EndpointError(f"LLM endpoint rejected request: HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (KeyError, IndexError, TypeError, ValueError) as exc:
                raise EndpointError(f"malformed completion response: {exc}") from exc
        raise EndpointError(f"LLM endpoint failed after {self.endpoint.max_attempts} attempts: {last_exc}")

    def close(self) -> None:
        self._http.close()


class FixtureClient:
    """Serves canned completions from a directory; used for offline runs.

    Lookup order: ``{class}__{mode}__{n}.txt``, ``{class}__{mode}.txt``, ``{class}.txt``
    (spaces in the class name become underscores).
    """

    def __init__(self, fixture_dir, model_id: str = "fixture"):
        self.fixture_dir = Path(fixture_dir)
        self.model_id = model_id
        self.calls = 0
        self._lock = threading.Lock()

    def lookup(self, class_name: str, mode: str, n: int) -> Path:
        stem = class_name.strip().replace(" ", "_")
        for name in (f"{stem}__{mode}__{n}.txt", f"{stem}__{mode}.txt", f"{stem}.txt"):
            p = self.fixture_dir / name
            if p.exists():
                return p
        raise EndpointError(f"no fixture response for {class_name!r} in {self.fixture_dir}")

    def respond(self, class_name: str, mode: str, n: int) -> str:
        with self._lock:
            self.calls += 1
        return self.lookup(class_name, mode, n).read_text(encoding="utf-8")


def make_client(endpoint: LLMEndpoint, transport: httpx.BaseTransport | None = None):
    if endpoint.fixture_dir:
        return FixtureClient(endpoint.fixture_dir, model_id=endpoint.model_id)
    return ChatClient(endpoint, transport=transport)


def generate_subclasses(
    class_name: str,
    n: int = DEFAULT_N,
    mode=PromptMode.P2,
    endpoint: LLMEndpoint | None = None,
    cache_dir=None,
    client=None,
    client_factory=None,
) -> SubclassSet:
    """Cache-first subclass generation.

    ``client`` (or a zero-argument ``client_factory``) may be passed to share
    one connection and rate budget across calls; otherwise a client is built
    from ``endpoint``. Either way nothing is constructed on a cache hit.
    """
    mode = PromptMode.parse(mode)
    _check_args(class_name, n)
    endpoint = endpoint or LLMEndpoint.from_env()
    model_id = client.model_id if client is not None else endpoint.model_id
    key = cache_key(model_id, mode, class_name, n)
    cache = SubclassCache(cache_dir) if cache_dir else None
    if cache is not None:
        hit = cache.get(key)
        if hit is not None:
            return hit

    prompt = build_prompt(class_name, n, mode)
    if client is None:
        client = client_factory() if client_factory is not None else make_client(endpoint)
    if isinstance(client, FixtureClient):
        raw = client.respond(class_name, mode.value, n)
    else:
        req = PromptRequest(prompt_text=prompt, model_id=model_id, max_tokens=endpoint.max_tokens)
        raw = client.complete(req)

    names = parse_subclasses(raw, n, exclude=(class_name,))
    sset = SubclassSet(class_name, names, n, mode.value, model_id, key)
    sset.validate()
    if cache is not None:
        cache.put(sset, raw, prompt)
    return sset


def load_subclass_set(path) -> SubclassSet:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if "subclass_set" in doc:
        doc = doc["subclass_set"]
    sset = SubclassSet.from_dict(doc)
    sset.validate()
    return sset


def save_subclass_set(path, sset: SubclassSet) -> None:
    atomic_write_json(path, sset.to_dict())
