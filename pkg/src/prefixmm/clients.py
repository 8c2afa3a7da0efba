"""Text-generation clients: a chat-completion HTTP client and offline stubs."""

from __future__ import annotations

import json
import logging
import os
import time
import urllib.error
import urllib.request
from typing import Callable, Protocol

from .errors import TransportError

log = logging.getLogger(__name__)

API_KEY_ENV = "PREFIXMM_API_KEY"
BASE_URL_ENV = "PREFIXMM_BASE_URL"
DEFAULT_BASE_URL = "https://api.openai.com/v1"


class TextClient(Protocol):
    def complete(self, prompt: str) -> str: ...


class ChatCompletionClient:
    """POSTs ``{base_url}/chat/completions`` with a single user message.

    The credential is read from ``PREFIXMM_API_KEY``; ``PREFIXMM_BASE_URL``
    overrides the base URL when none is passed explicitly. Transport failures
    are retried with exponential backoff, then surface as TransportError.
    """

    source = "remote"

    def __init__(self, model: str = "gpt-4", base_url: str | None = None, api_key: str | None = None,
                 timeout: float = 60.0, max_retries: int = 3, backoff: float = 1.0,
                 opener: Callable | None = None):
        self.model = model
        self.base_url = (base_url or os.environ.get(BASE_URL_ENV) or DEFAULT_BASE_URL).rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self._open = opener or urllib.request.urlopen

    def _request(self, prompt: str) -> urllib.request.Request:
        body = json.dumps({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        }).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return urllib.request.Request(f"{self.base_url}/chat/completions", data=body, headers=headers)

    def complete(self, prompt: str) -> str:
        last: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                with self._open(self._request(prompt), timeout=self.timeout) as resp:
                    payload = json.loads(resp.read().decode("utf-8"))
                return payload["choices"][0]["message"]["content"]
            except (urllib.error.URLError, TimeoutError, ConnectionError, OSError) as exc:
                last = exc
                if attempt < self.max_retries:
                    delay = self.backoff * (2 ** attempt)
                    log.warning("request failed (%s); retry %d in %.1fs", exc, attempt + 1, delay)
                    time.sleep(delay)
            except (KeyError, IndexError, ValueError) as exc:
                raise TransportError(f"malformed completion payload: {exc}") from exc
        raise TransportError(f"endpoint {self.base_url} unreachable after {self.max_retries + 1} attempts: {last}")


class StubClient:
    """Offline client returning ``reply(prompt)``; by default echoes the prompt."""

    source = "stub"

    def __init__(self, reply: Callable[[str], str] | str | None = None):
        if isinstance(reply, str):
            text = reply
            reply = lambda _prompt: text  # noqa: E731
        self._reply = reply or (lambda prompt: prompt)
        self.prompts: list[str] = []

    def complete(self, prompt: str) -> str:
        self.prompts.append(prompt)
        return self._reply(prompt)
