"""Generative multimodal backend access: one contract, mock and HTTP backends.

Mocks are pure functions of (request, policy) so evaluation runs are
bit-reproducible; the HTTP backend speaks the OpenAI-compatible
chat-completions shape with the image attached as a base64 part.
"""

from __future__ import annotations

import base64
import hashlib
import os
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol

import httpx

from .errors import (
    EmptyOutputError,
    InvalidArgumentError,
    ProtocolError,
    TransportError,
)
from .fuzzy import ned

MOCK_MODES = ("echo_first_candidate", "nearest_candidate_by_ned", "scripted_map", "gold_answer")

ENV_BASE_URL = "LMM_BASE_URL"
ENV_API_KEY = "LMM_API_KEY"
ENV_MODEL = "LMM_MODEL"


@dataclass(frozen=True)
class GenerationRequest:
    prompt_text: str
    image_ref: str | None = None
    max_new_tokens: int = 32
    temperature: float = 0.0
    stop_sequences: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.prompt_text:
            raise InvalidArgumentError("prompt_text must be non-empty")
        if self.max_new_tokens < 1:
            raise InvalidArgumentError("max_new_tokens must be positive")
        if self.temperature < 0:
            raise InvalidArgumentError("temperature must be >= 0")


@dataclass(frozen=True)
class GenerationResult:
    text: str
    latency_ms: float
    backend_tag: str


class LmmBackend(Protocol):
    backend_tag: str

    def generate(self, request: GenerationRequest) -> GenerationResult: ...


def prompt_fingerprint(prompt_text: str) -> str:
    """Stable key for scripted mocks: SHA-256 of the exact prompt bytes."""
    return hashlib.sha256(prompt_text.encode("utf-8")).hexdigest()


def truncate_at_stop(text: str, stop_sequences: tuple[str, ...]) -> str:
    cut = len(text)
    for stop in stop_sequences:
        if stop:
            pos = text.find(stop)
            if pos != -1:
                cut = min(cut, pos)
    return text[:cut]


DEFAULT_QA_COMPLETION = "unknown"


@dataclass(frozen=True)
class MockPolicy:
    """Deterministic completion policy.

    echo_first_candidate returns the first listed entity; the nearest policy
    picks the candidate closest to the prompt's visual text by normalized
    edit distance; scripted_map answers by prompt fingerprint; gold_answer
    answers by the question line (for evaluation fixtures). Every policy
    handles both prompt shapes so a single backend can serve a whole run:
    linking policies answer QA prompts with a fixed "unknown", and
    gold_answer links like nearest_candidate_by_ned.
    """

    mode: str
    script: Mapping[str, str] | None = None

    def __post_init__(self):
        if self.mode not in MOCK_MODES:
            raise InvalidArgumentError(f"unknown mock mode {self.mode!r}; expected {MOCK_MODES}")
        if self.mode in ("scripted_map", "gold_answer") and not self.script:
            raise InvalidArgumentError(f"mock mode {self.mode!r} requires a script")


_CANDIDATES_RE = re.compile(r"to one of the following entities: (?P<names>.+?)\nASSISTANT:", re.S)
_VISUAL_TEXT_RE = re.compile(r"to link the visual text (?P<text>.*?) to one of the following")
_QUESTION_RE = re.compile(r"^USER: (?P<q>.*)$", re.M)


def _candidate_names(prompt_text: str) -> list[str]:
    m = _CANDIDATES_RE.search(prompt_text)
    if not m:
        raise ProtocolError("mock expected a linking prompt with a candidate list")
    return [name.strip() for name in m.group("names").split(", ") if name.strip()]


def _prompt_visual_text(prompt_text: str) -> str:
    m = _VISUAL_TEXT_RE.search(prompt_text)
    return m.group("text") if m else ""


def _prompt_question(prompt_text: str) -> str:
    m = _QUESTION_RE.search(prompt_text)
    if not m:
        raise ProtocolError("mock expected a question line starting with 'USER: '")
    return m.group("q").strip()


class MockLmm:
    """Offline backend; see MockPolicy for the per-mode behavior."""

    def __init__(self, policy: MockPolicy):
        self._policy = policy
        self.backend_tag = f"mock:{policy.mode}"

    def generate(self, request: GenerationRequest) -> GenerationResult:
        mode = self._policy.mode
        prompt = request.prompt_text
        if mode == "scripted_map":
            key = prompt_fingerprint(prompt)
            try:
                text = self._policy.script[key]
            except KeyError:
                raise ProtocolError(
                    f"scripted mock has no entry for fingerprint {key[:12]}…"
                ) from None
        elif _CANDIDATES_RE.search(prompt) is not None:
            if mode == "echo_first_candidate":
                text = _candidate_names(prompt)[0]
            else:  # nearest_candidate_by_ned, gold_answer
                text = self._nearest_candidate(prompt)
        elif mode == "gold_answer":
            question = _prompt_question(prompt)
            try:
                text = self._policy.script[question]
            except KeyError:
                raise ProtocolError(
                    f"gold-answer mock has no entry for question {question!r}"
                ) from None
        else:
            text = DEFAULT_QA_COMPLETION
        text = truncate_at_stop(text, request.stop_sequences)
        return GenerationResult(text=text, latency_ms=0.0, backend_tag=self.backend_tag)

    @staticmethod
    def _nearest_candidate(prompt: str) -> str:
        names = _candidate_names(prompt)
        query = _prompt_visual_text(prompt)
        best = names[0]
        best_d = ned(query, best)
        for name in names[1:]:
            d = ned(query, name)
            if d < best_d:
                best, best_d = name, d
        return best


@dataclass
class HttpLmmConfig:
    base_url: str
    api_key: str = ""
    model: str = "default"
    timeout_s: float = 120.0
    max_retries: int = 2
    backoff_s: float = 0.5
    max_inflight: int = 4

    @classmethod
    def from_env(cls, env: Mapping[str, str] | None = None) -> "HttpLmmConfig":
        env = os.environ if env is None else env
        base_url = env.get(ENV_BASE_URL, "")
        if not base_url:
            raise InvalidArgumentError(f"{ENV_BASE_URL} is not set")
        return cls(
            base_url=base_url,
            api_key=env.get(ENV_API_KEY, ""),
            model=env.get(ENV_MODEL, "default"),
        )


_IMAGE_MIME = {".png": "image/png", ".gif": "image/gif", ".webp": "image/webp"}


def _image_data_url(image_ref: str) -> str:
    path = Path(image_ref)
    mime = _IMAGE_MIME.get(path.suffix.lower(), "image/jpeg")
    data = base64.b64encode(path.read_bytes()).decode("ascii")
    return f"data:{mime};base64,{data}"


class HttpLmm:
    """OpenAI-compatible chat-completions client with retries and a global
    in-flight cap."""

    def __init__(self, config: HttpLmmConfig, *, client: httpx.Client | None = None):
        self._config = config
        self._semaphore = threading.Semaphore(config.max_inflight)
        self._client = client or httpx.Client(timeout=config.timeout_s)
        self.backend_tag = f"http:{config.model}"

    def generate(self, request: GenerationRequest) -> GenerationResult:
        content: list[dict] = [{"type": "text", "text": request.prompt_text}]
        if request.image_ref is not None:
            content.append(
                {"type": "image_url", "image_url": {"url": _image_data_url(request.image_ref)}}
            )
        payload = {
            "model": self._config.model,
            "messages": [{"role": "user", "content": content}],
            "temperature": request.temperature,
            "max_tokens": request.max_new_tokens,
        }
        headers = {}
        if self._config.api_key:
            headers["Authorization"] = f"Bearer {self._config.api_key}"

        url = f"{self._config.base_url.rstrip('/')}/v1/chat/completions"
        started = time.perf_counter()
        body = self._post_with_retries(url, payload, headers)
        latency_ms = (time.perf_counter() - started) * 1000.0
        try:
            text = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"backend returned an unexpected body shape: {exc}") from exc
        if not isinstance(text, str):
            raise ProtocolError("backend returned a non-text completion")
        text = truncate_at_stop(text, request.stop_sequences)
        if not text.strip():
            raise EmptyOutputError("backend returned an empty completion")
        return GenerationResult(text=text, latency_ms=latency_ms, backend_tag=self.backend_tag)

    def _post_with_retries(self, url: str, payload: dict, headers: dict) -> dict:
        attempts = 0
        last_status: int | None = None
        while True:
            attempts += 1
            try:
                with self._semaphore:
                    response = self._client.post(url, json=payload, headers=headers)
            except httpx.HTTPError as exc:
                if attempts <= self._config.max_retries:
                    time.sleep(self._config.backoff_s * (2 ** (attempts - 1)))
                    continue
                raise TransportError(
                    f"generation backend unreachable at {url}: {exc}", attempts=attempts
                ) from exc
            last_status = response.status_code
            if response.status_code >= 500:
                if attempts <= self._config.max_retries:
                    time.sleep(self._config.backoff_s * (2 ** (attempts - 1)))
                    continue
                raise TransportError(
                    f"generation backend failed with HTTP {last_status}",
                    attempts=attempts,
                    last_status=last_status,
                )
            if response.status_code >= 400:
                raise ProtocolError(
                    f"generation backend refused the request: HTTP {last_status} "
                    f"{response.text[:200]}"
                )
            try:
                return response.json()
            except ValueError as exc:
                raise ProtocolError("generation backend returned non-JSON body") from exc
