"""Chat-completion client with reasoning-trace splitting and replay support.

The live backend speaks the common HTTP chat-completion shape (single user
message, text response). The replay backend serves recorded transcripts keyed
by prompt digest, which makes every downstream stage runnable and testable
without a model or network.
"""

from __future__ import annotations

import json
import re
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

import requests

from .common import estimate_tokens, sha256_hex
from .errors import (
    ContextOverflow,
    EndpointUnavailable,
    MalformedResponse,
    NoStructuredPayload,
    ParseFailure,
    ReplayMiss,
)
from .templating import RenderedPrompt

RESPONSE_RESERVE_TOKENS = 4096
BACKOFF_BASE_SECONDS = 1.0
BACKOFF_FACTOR = 2.0

THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"

_FENCE_LINE_RE = re.compile(r"^\s*```[\w-]*\s*$")
_TRAILING_COMMA_RE = re.compile(r",(\s*[}\]])")


class BackendKind(str, Enum):
    LIVE = "Live"
    REPLAY = "Replay"


@dataclass(frozen=True)
class InferenceConfig:
    endpoint_url: str = ""
    model_name: str = "deepseek-r1"
    context_window_tokens: int = 128000
    max_retries: int = 2
    request_timeout_sec: float = 300.0
    temperature: float = 0.0

    def __post_init__(self):
        if self.context_window_tokens <= 0:
            raise ValueError("context_window_tokens must be positive")
        if not 0 <= self.max_retries <= 5:
            raise ValueError("max_retries must be between 0 and 5")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class InferenceExchange:
    """One request/response, with the reasoning trace split out."""

    prompt_digest: str
    raw_response: str
    reasoning_trace: str
    final_answer: str
    latency_sec: float
    attempt: int
    backend: BackendKind


def reasoning_spans(raw: str) -> list[tuple[bool, str]]:
    """Split raw model output into ordered (is_reasoning, text) segments.

    Think tags delimit reasoning; an unclosed opening tag consumes to the end
    of input. Concatenating all segment texts reproduces the raw response
    with the tag markers removed.
    """
    spans: list[tuple[bool, str]] = []
    pos = 0
    while True:
        start = raw.find(THINK_OPEN, pos)
        if start == -1:
            if pos < len(raw):
                spans.append((False, raw[pos:]))
            break
        if start > pos:
            spans.append((False, raw[pos:start]))
        end = raw.find(THINK_CLOSE, start + len(THINK_OPEN))
        if end == -1:
            spans.append((True, raw[start + len(THINK_OPEN):]))
            break
        spans.append((True, raw[start + len(THINK_OPEN):end]))
        pos = end + len(THINK_CLOSE)
    return spans


def split_reasoning(raw: str) -> tuple[str, str]:
    """Separate think-tagged reasoning from the final answer.

    Reasoning segments are newline-joined in order; the remainder becomes the
    final answer with surrounding whitespace trimmed. Total function: inputs
    without tags yield an empty reasoning trace.
    """
    spans = reasoning_spans(raw)
    reasoning = "\n".join(text for is_reasoning, text in spans if is_reasoning)
    answer = "".join(text for is_reasoning, text in spans if not is_reasoning)
    return reasoning, answer.strip()


def _first_balanced_object(text: str) -> str | None:
    """Return the first balanced top-level {...} span, tracking JSON strings."""
    start = text.find("{")
    while start != -1:
        depth = 0
        in_string = False
        escaped = False
        for i in range(start, len(text)):
            ch = text[i]
            if in_string:
                if escaped:
                    escaped = False
                elif ch == "\\":
                    escaped = True
                elif ch == '"':
                    in_string = False
                continue
            if ch == '"':
                in_string = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    return text[start:i + 1]
        start = text.find("{", start + 1)
    return None


def extract_structured(final_answer: str) -> dict:
    """Parse the first balanced JSON object out of a model answer.

    Exactly two repairs are attempted: code-fence lines are stripped, and
    trailing commas before closing brackets are removed. Anything else is a
    failure that signals the caller to re-prompt.
    """
    without_fences = "\n".join(
        line for line in final_answer.splitlines() if not _FENCE_LINE_RE.match(line)
    )
    span = _first_balanced_object(without_fences)
    if span is None:
        raise NoStructuredPayload("no balanced JSON object in model answer")
    try:
        parsed = json.loads(span)
    except json.JSONDecodeError:
        repaired = _TRAILING_COMMA_RE.sub(r"\1", span)
        try:
            parsed = json.loads(repaired)
        except json.JSONDecodeError as exc:
            raise ParseFailure(f"balanced span unparseable after repairs: {exc}") from exc
    if not isinstance(parsed, dict):
        raise NoStructuredPayload("balanced span did not parse to an object")
    return parsed


class TransportFailure(Exception):
    """Internal marker for retryable backend failures."""


class LiveBackend:
    """HTTP chat-completion backend (single user message)."""

    kind = BackendKind.LIVE

    def __init__(self, session: requests.Session | None = None,
                 api_key: str | None = None):
        self._session = session or requests.Session()
        self._api_key = api_key

    def send(self, prompt_text: str, config: InferenceConfig) -> str:
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        body = {
            "model": config.model_name,
            "messages": [{"role": "user", "content": prompt_text}],
            "temperature": config.temperature,
        }
        url = config.endpoint_url.rstrip("/") + "/chat/completions"
        try:
            response = self._session.post(
                url, json=body, headers=headers, timeout=config.request_timeout_sec
            )
        except requests.RequestException as exc:
            raise TransportFailure(str(exc)) from exc
        if response.status_code >= 500 or response.status_code == 429:
            raise TransportFailure(f"HTTP {response.status_code}")
        if response.status_code != 200:
            raise MalformedResponse(
                f"HTTP {response.status_code}: {response.text[:200]}"
            )
        try:
            payload = response.json()
            message = payload["choices"][0]["message"]
            content = message.get("content")
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(f"unexpected response shape: {exc}") from exc
        if not isinstance(content, str):
            raise MalformedResponse("response content is not text")
        # some servers return the reasoning channel separately; fold it back
        # into think tags so downstream handling is uniform
        reasoning = message.get("reasoning_content")
        if isinstance(reasoning, str) and reasoning:
            return f"{THINK_OPEN}{reasoning}{THINK_CLOSE}{content}"
        return content


class ReplayBackend:
    """Serves recorded raw responses from <prompt_digest>.txt files."""

    kind = BackendKind.REPLAY

    def __init__(self, transcript_dir: Path, inject_latency_sec: float = 0.0):
        self.transcript_dir = Path(transcript_dir)
        self.inject_latency_sec = inject_latency_sec

    def send(self, prompt_text: str, config: InferenceConfig) -> str:
        if self.inject_latency_sec > 0:
            time.sleep(self.inject_latency_sec)
        path = self.transcript_dir / f"{sha256_hex(prompt_text)}.txt"
        if not path.exists():
            raise ReplayMiss(
                f"no transcript {path.name} in {self.transcript_dir}"
            )
        return path.read_text(encoding="utf-8")


@dataclass
class InferenceClient:
    """Completion entry point enforcing context, retry, and concurrency policy."""

    backend: LiveBackend | ReplayBackend
    config: InferenceConfig
    in_flight_cap: int | None = None
    sleeper: Callable[[float], None] = time.sleep
    on_exchange: Callable[[InferenceExchange, str | None], None] | None = None
    _semaphore: threading.Semaphore | None = field(init=False, default=None, repr=False)

    def __post_init__(self):
        if self.in_flight_cap:
            self._semaphore = threading.Semaphore(self.in_flight_cap)

    def complete(self, prompt: RenderedPrompt, tag: str | None = None) -> InferenceExchange:
        """Send a rendered prompt and return the split exchange.

        Retries transport failures and empty responses with exponential
        backoff; the recorded attempt number is the successful one.
        """
        available = self.config.context_window_tokens - RESPONSE_RESERVE_TOKENS
        needed = estimate_tokens(prompt.text)
        if needed > available:
            raise ContextOverflow(
                f"prompt needs ~{needed} tokens, window allows {available} "
                f"after the {RESPONSE_RESERVE_TOKENS}-token response reserve"
            )
        last_failure = "no attempts made"
        for attempt in range(1, self.config.max_retries + 2):
            if attempt > 1:
                self.sleeper(BACKOFF_BASE_SECONDS * BACKOFF_FACTOR ** (attempt - 2))
            started = time.monotonic()
            try:
                raw = self._send(prompt.text)
            except TransportFailure as exc:
                last_failure = str(exc)
                continue
            if not raw.strip():
                last_failure = "empty response"
                continue
            latency = self._latency(started)
            reasoning, answer = split_reasoning(raw)
            exchange = InferenceExchange(
                prompt_digest=prompt.prompt_digest,
                raw_response=raw,
                reasoning_trace=reasoning,
                final_answer=answer,
                latency_sec=latency,
                attempt=attempt,
                backend=self.backend.kind,
            )
            if self.on_exchange:
                self.on_exchange(exchange, tag)
            return exchange
        raise EndpointUnavailable(
            f"gave up after {self.config.max_retries + 1} attempts: {last_failure}"
        )

    def _send(self, prompt_text: str) -> str:
        if self._semaphore:
            with self._semaphore:
                return self.backend.send(prompt_text, self.config)
        return self.backend.send(prompt_text, self.config)

    def _latency(self, started: float) -> float:
        # replay latency is the injected constant so replay runs stay deterministic
        if isinstance(self.backend, ReplayBackend):
            return self.backend.inject_latency_sec
        return time.monotonic() - started
