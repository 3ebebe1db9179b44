"""Chat-completion client used by the harness, the span detector and the
user auditor. Speaks the OpenAI-compatible ``/chat/completions`` wire format.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional, Protocol

import httpx

logger = logging.getLogger(__name__)

_FENCE = re.compile(r"```json|```")


class RemoteError(RuntimeError):
    """A model call failed after exhausting retries."""


class RemoteUnavailableError(RemoteError):
    """The endpoint could not be reached at all."""


class AuthError(RemoteError):
    """Credentials rejected; never retried."""


@dataclass(frozen=True)
class ModelClientConfig:
    endpoint: str = "http://localhost:8000/v1"
    model: str = "default"
    temperature: float = 0.0
    max_tokens: int = 5120
    json_mode: bool = True
    timeout: float = 120.0
    max_retries: int = 3
    max_in_flight: int = 8
    backoff_base: float = 1.0
    api_key_env: str = "PROFILEBENCH_API_KEY"


class ChatModel(Protocol):
    def complete(self, system: str, user: str) -> str: ...


def strip_fences(raw: str) -> str:
    return _FENCE.sub("", raw).strip()


def parse_json_object(raw: str) -> dict:
    """Strip Markdown code fences and parse a JSON object.

    Raises ``ValueError`` when no object can be parsed.
    """
    text = strip_fences(raw)
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"response is not valid JSON: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise ValueError(f"expected a JSON object, got {type(obj).__name__}")
    return obj


_TRANSIENT_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}


class ChatClient:
    """Blocking client with bounded in-flight requests and exponential backoff.

    Transient failures (timeouts, 429, 5xx) are retried up to
    ``cfg.max_retries`` times. 401/403 raise :class:`AuthError` immediately.
    Connection failures that persist through every retry raise
    :class:`RemoteUnavailableError`.
    """

    def __init__(
        self,
        cfg: ModelClientConfig,
        *,
        transport: Optional[httpx.BaseTransport] = None,
        sleep: Callable[[float], None] = time.sleep,
        api_key: Optional[str] = None,
    ) -> None:
        self.cfg = cfg
        self._sleep = sleep
        self._gate = threading.BoundedSemaphore(max(1, cfg.max_in_flight))
        key = api_key if api_key is not None else os.environ.get(cfg.api_key_env, "")
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        self._http = httpx.Client(
            base_url=cfg.endpoint.rstrip("/"),
            timeout=cfg.timeout,
            transport=transport,
            headers=headers,
        )
        self.retries = 0

    def close(self) -> None:
        self._http.close()

    def _payload(self, system: str, user: str, json_mode: bool) -> dict:
        body = {
            "model": self.cfg.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "temperature": self.cfg.temperature,
            "max_tokens": self.cfg.max_tokens,
        }
        if json_mode:
            body["response_format"] = {"type": "json_object"}
        return body

    def complete(self, system: str, user: str) -> str:
        json_mode = self.cfg.json_mode
        last_error = "no attempt made"
        only_connect_errors = True
        for attempt in range(self.cfg.max_retries + 1):
            if attempt:
                self.retries += 1
                self._sleep(self.cfg.backoff_base * 2 ** (attempt - 1))
            try:
                with self._gate:
                    resp = self._http.post(
                        "/chat/completions", json=self._payload(system, user, json_mode)
                    )
            except httpx.ConnectError as exc:
                last_error = f"connect error: {exc}"
                continue
            except httpx.TimeoutException as exc:
                only_connect_errors = False
                last_error = f"timeout: {exc}"
                continue
            except httpx.TransportError as exc:
                only_connect_errors = False
                last_error = f"transport error: {exc}"
                continue
            only_connect_errors = False
            if resp.status_code in (401, 403):
                raise AuthError(f"endpoint rejected credentials ({resp.status_code})")
            if resp.status_code == 400 and json_mode and "response_format" in resp.text:
                # Provider without structured-object support.
                json_mode = False
                continue
            if resp.status_code in _TRANSIENT_STATUS:
                last_error = f"HTTP {resp.status_code}"
                logger.warning("transient %s from %s", resp.status_code, self.cfg.endpoint)
                continue
            if resp.status_code >= 400:
                raise RemoteError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()["choices"][0]["message"]["content"] or ""
            except (ValueError, KeyError, IndexError, TypeError):
                raise RemoteError("malformed completion payload") from None
        if only_connect_errors:
            raise RemoteUnavailableError(f"{self.cfg.endpoint} unreachable ({last_error})")
        raise RemoteError(f"retries exhausted: {last_error}")


class StubChatModel:
    """Returns canned responses in order (cycling); records every prompt."""

    def __init__(self, responses: list[str] | str) -> None:
        self.responses = [responses] if isinstance(responses, str) else list(responses)
        self.calls: list[tuple[str, str]] = []

    def complete(self, system: str, user: str) -> str:
        self.calls.append((system, user))
        return self.responses[(len(self.calls) - 1) % len(self.responses)]
