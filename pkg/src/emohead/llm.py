"""Chat-completion client for the optional hosted-model prompt backend.

Endpoint and credentials come from the environment only, never from config
files.  Requests retry with exponential backoff on transient failures, and
in-flight requests are capped so concurrent prompt runs stay polite.
"""

from __future__ import annotations

import os
import threading
import time
from dataclasses import dataclass

import requests

ENDPOINT_VAR = "EMOHEAD_LLM_ENDPOINT"
TOKEN_VAR = "EMOHEAD_LLM_TOKEN"
MODEL_VAR = "EMOHEAD_LLM_MODEL"
TIMEOUT_VAR = "EMOHEAD_LLM_TIMEOUT_S"
MAX_INFLIGHT_VAR = "EMOHEAD_LLM_MAX_INFLIGHT"

MAX_ATTEMPTS = 3


class LlmError(RuntimeError):
    pass


class BackendUnreachableError(LlmError):
    pass


class AuthenticationError(LlmError):
    pass


class MalformedResponseError(LlmError):
    pass


@dataclass(frozen=True)
class ChatClientConfig:
    endpoint: str
    model: str = "default"
    timeout_s: float = 30.0
    token: str | None = None
    max_in_flight: int = 4
    backoff_s: float = 0.5

    @classmethod
    def from_env(cls) -> "ChatClientConfig":
        endpoint = os.environ.get(ENDPOINT_VAR)
        if not endpoint:
            raise LlmError(
                f"hosted prompt backend requested but {ENDPOINT_VAR} is not set"
            )
        return cls(
            endpoint=endpoint,
            model=os.environ.get(MODEL_VAR, "default"),
            timeout_s=float(os.environ.get(TIMEOUT_VAR, "30")),
            token=os.environ.get(TOKEN_VAR),
            max_in_flight=int(os.environ.get(MAX_INFLIGHT_VAR, "4")),
        )


class ChatClient:
    """Minimal chat-completion JSON client with retry and concurrency cap."""

    def __init__(self, config: ChatClientConfig, session: requests.Session | None = None):
        self.config = config
        self._session = session or requests.Session()
        self._slots = threading.Semaphore(config.max_in_flight)

    def complete(self, messages: list[dict]) -> str:
        payload = {"model": self.config.model, "messages": messages}
        headers = {"Content-Type": "application/json"}
        if self.config.token:
            headers["Authorization"] = f"Bearer {self.config.token}"

        last_error: Exception | None = None
        for attempt in range(MAX_ATTEMPTS):
            if attempt:
                time.sleep(self.config.backoff_s * 2 ** (attempt - 1))
            with self._slots:
                try:
                    resp = self._session.post(
                        self.config.endpoint,
                        json=payload,
                        headers=headers,
                        timeout=self.config.timeout_s,
                    )
                except (requests.ConnectionError, requests.Timeout) as exc:
                    last_error = exc
                    continue
            if resp.status_code in (401, 403):
                raise AuthenticationError(f"endpoint rejected credentials ({resp.status_code})")
            if resp.status_code >= 500:
                last_error = LlmError(f"server error {resp.status_code}")
                continue
            if resp.status_code != 200:
                raise LlmError(f"unexpected status {resp.status_code}: {resp.text[:200]}")
            return self._extract_text(resp)
        raise BackendUnreachableError(
            f"endpoint {self.config.endpoint} unreachable after {MAX_ATTEMPTS} attempts: {last_error}"
        )

    @staticmethod
    def _extract_text(resp: requests.Response) -> str:
        try:
            body = resp.json()
            content = body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponseError(f"cannot parse completion payload: {exc}") from exc
        if not isinstance(content, str):
            raise MalformedResponseError(
                f"completion content must be text, got {type(content).__name__}"
            )
        return content
