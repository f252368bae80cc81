"""Minimal chat-completion client and reply parsing helpers."""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol, Sequence

import httpx

log = logging.getLogger(__name__)

Message = dict  # {"role": ..., "content": ...}


class TransportError(RuntimeError):
    """Network or HTTP failure talking to the endpoint."""


class MalformedReply(ValueError):
    """The model replied, but not in the demanded format."""

    def __init__(self, message: str, raw: str = ""):
        self.raw = raw
        super().__init__(message)


class ChatClient(Protocol):
    def complete(self, messages: Sequence[Message]) -> str: ...


@dataclass
class ClientConfig:
    url: str
    model: str
    api_key_env: str = "LLM_API_KEY"
    temperature: float = 0.7
    timeout: float = 120.0
    max_in_flight: int = 4
    log_dir: Optional[str] = None

    @classmethod
    def from_json(cls, doc: dict) -> "ClientConfig":
        known = {k: v for k, v in doc.items() if k in cls.__dataclass_fields__}
        return cls(**known)


class HttpChatClient:
    """OpenAI-style ``/chat/completions`` client.

    Concurrent callers sharing an endpoint URL are throttled to
    ``max_in_flight`` simultaneous requests.
    """

    _lock = threading.Lock()
    _gates: dict[str, threading.BoundedSemaphore] = {}

    def __init__(self, config: ClientConfig, transport: Optional[httpx.BaseTransport] = None):
        self.config = config
        self.transport = transport
        with self._lock:
            self.gate = self._gates.setdefault(config.url, threading.BoundedSemaphore(config.max_in_flight))
        self._log_path = None
        if config.log_dir:
            Path(config.log_dir).mkdir(parents=True, exist_ok=True)
            self._log_path = Path(config.log_dir) / "llm_requests.jsonl"

    def complete(self, messages: Sequence[Message]) -> str:
        cfg = self.config
        body = {"model": cfg.model, "messages": list(messages), "temperature": cfg.temperature}
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(cfg.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        url = cfg.url.rstrip("/")
        if not url.endswith("/chat/completions"):
            url += "/chat/completions"
        with self.gate:
            started = time.monotonic()
            try:
                with httpx.Client(timeout=cfg.timeout, transport=self.transport) as client:
                    resp = client.post(url, json=body, headers=headers)
            except httpx.HTTPError as exc:
                raise TransportError(f"request to {url} failed: {exc}") from exc
        if resp.status_code >= 400:
            raise TransportError(f"{url} answered HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            reply = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"unexpected response body from {url}") from exc
        if self._log_path is not None:
            with self._log_path.open("a") as fh:
                fh.write(json.dumps({"request": body, "reply": reply,
                                     "seconds": round(time.monotonic() - started, 3)}) + "\n")
        return reply or ""


class ScriptedClient:
    """Replays canned replies in order; an ``Exception`` entry is raised instead."""

    def __init__(self, replies: Sequence, cycle: bool = False):
        self.replies = list(replies)
        self.cycle = cycle
        self.calls: list[list[Message]] = []
        self._i = 0
        self._lock = threading.Lock()

    def complete(self, messages: Sequence[Message]) -> str:
        with self._lock:
            self.calls.append(list(messages))
            if self._i >= len(self.replies):
                if not self.cycle or not self.replies:
                    raise TransportError("script exhausted")
                self._i = 0
            reply = self.replies[self._i]
            self._i += 1
        if isinstance(reply, BaseException):
            raise reply
        return reply


def extract_json_object(text: str) -> str:
    """Return the first balanced top-level ``{...}`` in ``text``.

    Braces inside JSON strings are ignored. A later top-level span that
    parses as JSON is preferred over an earlier one that does not.
    """
    spans = []
    i = 0
    while True:
        start = text.find("{", i)
        if start < 0:
            break
        end = _balanced_end(text, start)
        if end is None:
            i = start + 1
            continue
        span = text[start:end + 1]
        try:
            json.loads(span)
            return span
        except ValueError:
            spans.append(span)
            i = end + 1
    if spans:
        return spans[0]
    raise MalformedReply("no JSON object found in reply", text)


def _balanced_end(text: str, start: int) -> Optional[int]:
    depth = 0
    in_string = False
    escaped = False
    for pos in range(start, len(text)):
        ch = text[pos]
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
                return pos
    return None
