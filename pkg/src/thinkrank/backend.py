"""Text-completion backends that expose token logprobs.

Two implementations share the :class:`CompletionBackend` surface:

- :class:`OpenAICompletionsBackend` talks to any OpenAI-compatible
  ``/v1/completions`` endpoint (vLLM, hosted APIs) with retry and backoff.
- :class:`MockBackend` answers from a script, which makes everything built on
  top of it byte-deterministic and offline.
"""

from __future__ import annotations

import logging
import math
import os
import random
import re
import threading
import time
from abc import ABC, abstractmethod
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field
from enum import Enum

import httpx

from .errors import BackendError, CapabilityError, ConfigurationError, TransportError, UndecidableError

logger = logging.getLogger(__name__)

THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"

RETRYABLE_STATUS = frozenset({408, 429, 500, 502, 503, 504})


class FinishReason(str, Enum):
    STOP = "stop"
    LENGTH = "length"
    ERROR = "error"


@dataclass(frozen=True)
class GenParams:
    temperature: float = 0.3
    max_tokens: int = 1000
    stop_sequences: tuple[str, ...] = (THINK_CLOSE,)
    logprob_top_k: int = 10

    def __post_init__(self):
        if self.temperature < 0:
            raise ConfigurationError(f"temperature must be >= 0, got {self.temperature}")
        if self.max_tokens < 1:
            raise ConfigurationError(f"max_tokens must be >= 1, got {self.max_tokens}")
        if self.logprob_top_k < 2:
            raise ConfigurationError("logprob_top_k must be >= 2 to cover both answer tokens")
        object.__setattr__(self, "stop_sequences", tuple(self.stop_sequences))


@dataclass(frozen=True)
class TokenLogprob:
    token: str
    logprob: float
    top_alternatives: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        if self.logprob > 0:
            raise ValueError(f"logprob must be <= 0, got {self.logprob}")


@dataclass(frozen=True)
class Completion:
    text: str
    token_logprobs: tuple[TokenLogprob, ...] = ()
    finish_reason: FinishReason = FinishReason.STOP
    completion_tokens: int | None = None

    @property
    def tokens_used(self) -> int:
        if self.completion_tokens is not None:
            return self.completion_tokens
        return len(self.token_logprobs)


@dataclass(frozen=True)
class BackendConfig:
    endpoint_url: str
    model_name: str
    api_key_env: str = "OPENAI_API_KEY"
    timeout: float = 120.0
    max_retries: int = 3
    retry_base_delay: float = 1.0

    def __post_init__(self):
        if self.max_retries < 0:
            raise ConfigurationError(f"max_retries must be >= 0, got {self.max_retries}")


def logsumexp(values: Iterable[float]) -> float:
    values = list(values)
    if not values:
        return -math.inf
    m = max(values)
    if m == -math.inf:
        return -math.inf
    return m + math.log(sum(math.exp(v - m) for v in values))


def _answer_word(token: str) -> str:
    return token.strip().lower()


def aggregate_answer_logprobs(alternatives: Iterable[tuple[str, float]]) -> tuple[float, float]:
    """Collapse answer-token alternatives into ``(lp_true, lp_false)``.

    Tokens are matched on their trimmed, lowercased surface form, so
    ``" True"`` and ``"true"`` both count toward true; their probabilities are
    summed (logsumexp). A token listed more than once counts once.
    """
    seen: dict[str, float] = {}
    for tok, lp in alternatives:
        seen.setdefault(tok, lp)
    lp_true = logsumexp(lp for tok, lp in seen.items() if _answer_word(tok) == "true")
    lp_false = logsumexp(lp for tok, lp in seen.items() if _answer_word(tok) == "false")
    if lp_true == -math.inf and lp_false == -math.inf:
        shown = ", ".join(repr(t) for t in list(seen)[:10])
        raise UndecidableError(f"no true/false token among alternatives [{shown}]")
    return lp_true, lp_false


class CompletionBackend(ABC):
    """Anything that can complete a prompt and report token logprobs."""

    #: alternatives requested when reading the answer token
    answer_top_k: int = 10

    @abstractmethod
    def complete(self, prompt: str, params: GenParams) -> Completion: ...

    def answer_logprobs(self, prompt_with_closed_reasoning: str) -> tuple[float, float]:
        """Log-probabilities of answering true / false right after ``</think>``."""
        if not prompt_with_closed_reasoning.endswith(THINK_CLOSE):
            raise ValueError(f"answer prompt must end with {THINK_CLOSE!r}")
        params = GenParams(temperature=0.0, max_tokens=1, stop_sequences=(), logprob_top_k=self.answer_top_k)
        completion = self.complete(prompt_with_closed_reasoning, params)
        if not completion.token_logprobs:
            raise CapabilityError("no token logprobs at the answer position; does the endpoint support 'logprobs'?")
        first = completion.token_logprobs[0]
        return aggregate_answer_logprobs([*first.top_alternatives, (first.token, first.logprob)])


# --- OpenAI-compatible HTTP backend ----------------------------------------

def _finish_reason(raw) -> FinishReason:
    if raw == "length":
        return FinishReason.LENGTH
    if raw in (None, "stop", "eos", "eos_token", "stop_sequence"):
        return FinishReason.STOP
    return FinishReason.ERROR


def _lp(value) -> float:
    if value is None:
        return -math.inf
    return min(float(value), 0.0)


def parse_completion_response(data: Mapping) -> Completion:
    """Read ``choices[0]`` of a completions response.

    Missing logprobs are not an error here; only the answer call needs them
    and :meth:`CompletionBackend.answer_logprobs` reports their absence.
    """
    try:
        choice = data["choices"][0]
        text = choice["text"]
    except (KeyError, IndexError, TypeError):
        raise BackendError("response has no choices[0].text") from None
    token_logprobs: tuple[TokenLogprob, ...] = ()
    lp = choice.get("logprobs")
    if lp and lp.get("tokens") is not None and lp.get("token_logprobs") is not None:
        tokens = lp["tokens"]
        top = lp.get("top_logprobs") or [None] * len(tokens)
        token_logprobs = tuple(
            TokenLogprob(
                token=tok,
                logprob=_lp(value),
                top_alternatives=tuple((t, _lp(v)) for t, v in (alts or {}).items()),
            )
            for tok, value, alts in zip(tokens, lp["token_logprobs"], top)
        )
    usage = data.get("usage") or {}
    used = usage.get("completion_tokens")
    return Completion(
        text=text,
        token_logprobs=token_logprobs,
        finish_reason=_finish_reason(choice.get("finish_reason")),
        completion_tokens=int(used) if isinstance(used, (int, float)) else None,
    )


class OpenAICompletionsBackend(CompletionBackend):
    """Client for an OpenAI-compatible completions endpoint.

    Transient failures (connection errors, timeouts, 408/429/5xx) are retried
    up to ``config.max_retries`` times. The wait before retry ``n`` (0-based)
    is drawn uniformly from ``[0, retry_base_delay * 2**n]`` (full jitter),
    or the server's ``Retry-After`` if that is longer.
    """

    def __init__(
        self,
        config: BackendConfig,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
    ):
        self.config = config
        self._client = client or httpx.Client(timeout=config.timeout)
        self._sleep = sleep
        self._rng = rng or random.Random()
        self._rng_lock = threading.Lock()

    @property
    def url(self) -> str:
        base = self.config.endpoint_url.rstrip("/")
        return base if base.endswith("/completions") else f"{base}/completions"

    def request_body(self, prompt: str, params: GenParams) -> dict:
        return {
            "model": self.config.model_name,
            "prompt": prompt,
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
            "stop": list(params.stop_sequences),
            "logprobs": params.logprob_top_k,
            "echo": False,
        }

    def _headers(self) -> dict[str, str]:
        key = os.environ.get(self.config.api_key_env)
        return {"Authorization": f"Bearer {key}"} if key else {}

    def _backoff(self, attempt: int, response: httpx.Response | None) -> float:
        with self._rng_lock:
            delay = self._rng.uniform(0.0, self.config.retry_base_delay * 2**attempt)
        if response is not None:
            try:
                delay = max(delay, float(response.headers.get("Retry-After", "")))
            except ValueError:
                pass
        return delay

    def _post(self, body: dict) -> dict:
        last_exc: Exception | None = None
        last_resp: httpx.Response | None = None
        for attempt in range(self.config.max_retries + 1):
            try:
                resp = self._client.post(self.url, json=body, headers=self._headers(), timeout=self.config.timeout)
            except httpx.TransportError as exc:
                last_exc, last_resp = exc, None
                logger.warning("completion request failed (attempt %d): %s", attempt + 1, exc)
            else:
                if resp.is_success:
                    try:
                        return resp.json()
                    except ValueError:
                        raise BackendError("response body is not JSON", resp.status_code, resp.text[:500]) from None
                if resp.status_code not in RETRYABLE_STATUS:
                    raise BackendError(
                        f"backend returned HTTP {resp.status_code}", resp.status_code, resp.text[:500]
                    )
                last_exc, last_resp = None, resp
                logger.warning("completion request got HTTP %d (attempt %d)", resp.status_code, attempt + 1)
            if attempt < self.config.max_retries:
                self._sleep(self._backoff(attempt, last_resp))
        attempts = self.config.max_retries + 1
        if last_resp is not None:
            raise BackendError(
                f"backend returned HTTP {last_resp.status_code} after {attempts} attempts",
                last_resp.status_code,
                last_resp.text[:500],
            )
        raise TransportError(f"backend unreachable after {attempts} attempts: {last_exc}")

    def complete(self, prompt: str, params: GenParams) -> Completion:
        if not prompt:
            raise ValueError("prompt must be nonempty")
        return parse_completion_response(self._post(self.request_body(prompt, params)))

    def close(self) -> None:
        self._client.close()


# --- scripted mock ---------------------------------------------------------

@dataclass(frozen=True)
class Prefix:
    pattern: str

    def matches(self, prompt: str) -> bool:
        return prompt.startswith(self.pattern)


@dataclass(frozen=True)
class Substring:
    pattern: str

    def matches(self, prompt: str) -> bool:
        return self.pattern in prompt


@dataclass(frozen=True)
class MockReply:
    """Canned behaviour for matching prompts.

    ``text`` answers ordinary completion requests. ``answer`` maps answer
    tokens to logprobs and is used for prompts ending in ``</think>``.
    """

    text: str = ""
    answer: Mapping[str, float] | None = None
    token_logprob: float = -0.05


Responder = Callable[[str, "GenParams"], "MockReply | Completion | str"]
Reply = MockReply | Completion | str | Responder


class UnmatchedPrompt(BackendError):
    """Strict mock received a prompt no rule matches."""


_PIECES = re.compile(r"\S+\s*|\s+")


def _scripted_completion(reply: MockReply, prompt: str, params: GenParams) -> Completion:
    if reply.answer is not None and prompt.endswith(THINK_CLOSE):
        ranked = sorted(reply.answer.items(), key=lambda kv: -kv[1])
        alts = tuple(ranked[: params.logprob_top_k])
        best_tok, best_lp = ranked[0]
        return Completion(best_tok, (TokenLogprob(best_tok, best_lp, alts),), FinishReason.STOP)

    text, finish = reply.text, FinishReason.STOP
    cuts = [text.find(s) for s in params.stop_sequences if s and s in text]
    if cuts:
        text = text[: min(cuts)]
    pieces = _PIECES.findall(text)
    if len(pieces) > params.max_tokens:
        pieces = pieces[: params.max_tokens]
        text, finish = "".join(pieces), FinishReason.LENGTH
    tokens = tuple(TokenLogprob(p, reply.token_logprob, ((p, reply.token_logprob),)) for p in pieces)
    return Completion(text, tokens, finish)


@dataclass
class MockBackend(CompletionBackend):
    """Deterministic backend driven by ``(matcher, reply)`` rules; first match wins.

    A reply is a :class:`MockReply`, a ready :class:`Completion`, a plain
    string (completion text), or a callable ``(prompt, params) -> reply``.
    """

    rules: list[tuple[Prefix | Substring, Reply]] = field(default_factory=list)
    default: Reply | None = None
    strict: bool = True
    delay: float = 0.0

    def __post_init__(self):
        self._lock = threading.Lock()
        self.calls: list[str] = []
        self._in_flight = 0
        self.max_in_flight = 0

    def _resolve(self, prompt: str) -> Reply:
        for matcher, reply in self.rules:
            if matcher.matches(prompt):
                return reply
        if self.default is not None or not self.strict:
            return self.default if self.default is not None else MockReply()
        head = prompt[:80].replace("\n", "\\n")
        raise UnmatchedPrompt(f"no mock rule matches prompt starting {head!r}")

    def complete(self, prompt: str, params: GenParams) -> Completion:
        if not prompt:
            raise ValueError("prompt must be nonempty")
        with self._lock:
            self.calls.append(prompt)
            self._in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self._in_flight)
        try:
            if self.delay:
                time.sleep(self.delay)
            reply = self._resolve(prompt)
            if callable(reply) and not isinstance(reply, (MockReply, Completion, str)):
                reply = reply(prompt, params)
            if isinstance(reply, Completion):
                return reply
            if isinstance(reply, str):
                reply = MockReply(text=reply)
            return _scripted_completion(reply, prompt, params)
        finally:
            with self._lock:
                self._in_flight -= 1


def mock_register(
    script: Mapping[str | Prefix | Substring, Reply] | Iterable[tuple[str | Prefix | Substring, Reply]],
    default: Reply | None = None,
    strict: bool = True,
) -> MockBackend:
    """Build a :class:`MockBackend`; bare string keys are substring matchers."""
    items = script.items() if isinstance(script, Mapping) else script
    rules = [(Substring(m) if isinstance(m, str) else m, reply) for m, reply in items]
    return MockBackend(rules=rules, default=default, strict=strict)


def load_mock_script(data: Mapping) -> MockBackend:
    """Build a mock from a JSON-style document.

    ``{"strict": true, "default": {...}, "rules": [{"match": "substring"|"prefix",
    "pattern": "...", "text": "...", "answer": {"true": -0.1, "false": -2.3}}]}``
    """

    def reply(rec: Mapping) -> MockReply:
        answer = rec.get("answer")
        return MockReply(text=rec.get("text", ""), answer=dict(answer) if answer is not None else None)

    rules: list[tuple[Prefix | Substring, Reply]] = []
    for rec in data.get("rules", []):
        kind = rec.get("match", "substring")
        if kind not in ("substring", "prefix"):
            raise ConfigurationError(f"unknown mock matcher kind {kind!r}")
        matcher = Prefix(rec["pattern"]) if kind == "prefix" else Substring(rec["pattern"])
        rules.append((matcher, reply(rec)))
    default = reply(data["default"]) if data.get("default") is not None else None
    return MockBackend(rules=rules, default=default, strict=bool(data.get("strict", True)))
