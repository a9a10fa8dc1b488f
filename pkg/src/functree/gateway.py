"""Step-generation gateway.

Wraps pluggable backends (HTTP completion service or local callables)
behind one request/result pair, with validation, bounded retries for
transport faults, and an in-flight concurrency cap for the wire client.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import requests

from .prompts import StepPair, render_prompt
from .tree import FunctionalToken

logger = logging.getLogger(__name__)


class TransportError(Exception):
    """Connection failures, timeouts, 5xx: retryable."""


class ProtocolError(Exception):
    """4xx responses or malformed payloads: not retryable."""


@dataclass
class GenerationRequest:
    question: str
    prior_steps: list[StepPair]
    action: FunctionalToken
    temperature: float = 0.9
    top_p: float = 0.8
    max_tokens: int = 1024
    mode: str = "prompt_guided"
    extras: Optional[tuple[str, str]] = None

    def __post_init__(self):
        if not self.question:
            raise ValueError("question must be non-empty")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if not (0 < self.top_p <= 1):
            raise ValueError("top_p must be in (0, 1]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.mode not in ("prompt_guided", "token_guided"):
            raise ValueError(f"unknown mode: {self.mode!r}")

    def prompt(self) -> str:
        return render_prompt(
            self.action, self.question, self.prior_steps, self.extras, self.mode
        )


@dataclass
class GenerationResult:
    text: str
    action_logprob: Optional[float] = None
    ref_action_logprob: Optional[float] = None
    retries: int = 0

    def __post_init__(self):
        for name in ("action_logprob", "ref_action_logprob"):
            v = getattr(self, name)
            if v is not None and v > 0:
                raise ValueError(f"{name} must be <= 0, got {v}")


class Backend(Protocol):
    def complete(self, request: GenerationRequest) -> GenerationResult: ...


@dataclass
class CallableBackend:
    """Adapts a plain function (question, prior_steps, action, extras) -> text."""

    fn: Callable[..., str]

    def complete(self, request: GenerationRequest) -> GenerationResult:
        text = self.fn(
            request.question, request.prior_steps, request.action, extras=request.extras
        )
        return GenerationResult(text=text)


class HttpCompletionBackend:
    """JSON-over-HTTP completion client with an in-flight cap."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: Optional[str] = None,
        timeout: float = 60.0,
        max_in_flight: int = 8,
        want_logprobs: bool = False,
        session: Optional[requests.Session] = None,
    ):
        if not endpoint:
            raise ValueError("endpoint must be non-empty")
        if timeout <= 0:
            raise ValueError("timeout must be > 0")
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self.want_logprobs = want_logprobs
        self._gate = threading.Semaphore(max_in_flight)
        self._session = session or requests.Session()

    def complete(self, request: GenerationRequest) -> GenerationResult:
        payload = {
            "model": self.model,
            "prompt": request.prompt(),
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens,
        }
        if self.want_logprobs:
            payload["logprobs"] = True
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"

        with self._gate:
            try:
                resp = self._session.post(
                    self.endpoint, json=payload, headers=headers, timeout=self.timeout
                )
            except (requests.ConnectionError, requests.Timeout) as exc:
                raise TransportError(f"request to {self.endpoint} failed: {exc}") from exc

        if resp.status_code >= 500:
            raise TransportError(f"server error {resp.status_code}")
        if resp.status_code >= 400:
            raise ProtocolError(f"client error {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
            text = body["text"]
        except (ValueError, KeyError) as exc:
            raise ProtocolError(f"malformed response body: {exc}") from exc
        if not isinstance(text, str):
            raise ProtocolError("response `text` is not a string")

        logprob = None
        token_logprobs = body.get("token_logprobs")
        if token_logprobs:
            # First token carries the action choice in token_guided mode.
            logprob = float(token_logprobs[0])
        return GenerationResult(text=text, action_logprob=logprob)


@dataclass
class RetryPolicy:
    max_attempts: int = 3
    base_delay: float = 0.5
    sleep: Callable[[float], None] = field(default=time.sleep, repr=False)

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.base_delay < 0:
            raise ValueError("base_delay must be >= 0")


def generate_step(
    backend: Backend,
    request: GenerationRequest,
    retry: Optional[RetryPolicy] = None,
) -> GenerationResult:
    """One step from the backend, retrying transport faults with backoff.

    Protocol faults (4xx, malformed payloads) surface immediately.
    """
    policy = retry or RetryPolicy()
    last: Optional[TransportError] = None
    for attempt in range(policy.max_attempts):
        try:
            result = backend.complete(request)
            result.retries = attempt
            return result
        except TransportError as exc:
            last = exc
            if attempt + 1 < policy.max_attempts:
                delay = policy.base_delay * 2**attempt
                logger.warning(
                    "transport fault (attempt %d/%d), retrying in %.1fs: %s",
                    attempt + 1,
                    policy.max_attempts,
                    delay,
                    exc,
                )
                policy.sleep(delay)
    assert last is not None
    raise last


def make_step_generator(
    backend: Backend,
    temperature: float = 0.9,
    top_p: float = 0.8,
    max_tokens: int = 1024,
    mode: str = "prompt_guided",
    retry: Optional[RetryPolicy] = None,
) -> Callable[..., str]:
    """Bind a backend into the (question, prior_steps, action, extras) -> text
    callable the search engine consumes."""

    def generate(
        question: str,
        prior_steps: Sequence[StepPair],
        action: FunctionalToken,
        extras: Optional[tuple[str, str]] = None,
    ) -> str:
        request = GenerationRequest(
            question=question,
            prior_steps=list(prior_steps),
            action=action,
            temperature=temperature,
            top_p=top_p,
            max_tokens=max_tokens,
            mode=mode,
            extras=extras,
        )
        return generate_step(backend, request, retry).text

    return generate
