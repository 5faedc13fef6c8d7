"""OpenAI-compatible chat and embedding clients plus token/cost accounting.

Both clients speak plain HTTP+JSON so the same code path serves OpenAI,
OpenRouter, vLLM, Ollama's compatibility endpoint, and the simkit mocks.
"""

from __future__ import annotations

import logging
import math
import threading
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

import httpx

from ami_agent.errors import TransportError

log = logging.getLogger(__name__)

Message = dict[str, str]


def estimate_tokens(text: str) -> int:
    return max(1, math.ceil(len(text) / 4))


@dataclass
class UsageMeter:
    """Thread-safe token tally for one screening."""

    prompt_tokens: int = 0
    completion_tokens: int = 0
    embedding_tokens: int = 0
    llm_calls: int = 0
    embedding_calls: int = 0
    estimated: bool = False
    by_model: dict[str, list[int]] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def add_chat(self, model: str, prompt: int, completion: int, estimated: bool = False) -> None:
        with self._lock:
            self.prompt_tokens += prompt
            self.completion_tokens += completion
            self.llm_calls += 1
            self.estimated |= estimated
            tally = self.by_model.setdefault(model, [0, 0])
            tally[0] += prompt
            tally[1] += completion

    def add_embedding(self, model: str, tokens: int, estimated: bool = False) -> None:
        with self._lock:
            self.embedding_tokens += tokens
            self.embedding_calls += 1
            self.estimated |= estimated
            tally = self.by_model.setdefault(model, [0, 0])
            tally[0] += tokens

    def estimated_cost(self, price_table: Mapping[str, Mapping[str, float]]) -> float | None:
        """Cost from per-1k-token input/output rates; None if any model is unpriced."""
        with self._lock:
            items = [(m, list(t)) for m, t in sorted(self.by_model.items())]
        total = 0.0
        for model, (tokens_in, tokens_out) in items:
            rates = price_table.get(model)
            if rates is None:
                return None
            total += tokens_in / 1000 * float(rates.get("input_per_1k", 0.0))
            total += tokens_out / 1000 * float(rates.get("output_per_1k", 0.0))
        return total

    def to_dict(self, price_table: Mapping[str, Mapping[str, float]] | None = None) -> dict[str, Any]:
        return {
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "embedding_tokens": self.embedding_tokens,
            "llm_calls": self.llm_calls,
            "embedding_calls": self.embedding_calls,
            "estimated": self.estimated,
            "estimated_cost": self.estimated_cost(price_table or {}),
        }


class _RetryingClient:
    def __init__(
        self,
        base_url: str,
        api_key: str | None,
        attempts: int,
        backoff_base: float,
        timeout: float,
        client: httpx.Client | None,
        sleep: Callable[[float], None],
    ):
        self.base_url = base_url.rstrip("/")
        self.attempts = max(1, attempts)
        self.backoff_base = backoff_base
        self._sleep = sleep
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = client or httpx.Client(timeout=timeout, headers=headers)
        if client is not None:
            self._client.headers.update(headers)

    def close(self) -> None:
        self._client.close()

    def _post(self, path: str, payload: dict[str, Any]) -> dict[str, Any]:
        url = f"{self.base_url}{path}"
        last = ""
        for attempt in range(self.attempts):
            if attempt:
                self._sleep(self.backoff_base * 2 ** (attempt - 1))
            try:
                resp = self._client.post(url, json=payload)
            except httpx.HTTPError as exc:
                last = f"{type(exc).__name__}: {exc}"
                log.debug("POST %s failed (attempt %d): %s", url, attempt + 1, last)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                log.debug("POST %s returned %s (attempt %d)", url, resp.status_code, attempt + 1)
                continue
            if resp.status_code >= 400:
                raise TransportError(f"POST {path} rejected with HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                body = resp.json()
            except ValueError:
                last = "response body is not JSON"
                continue
            if isinstance(body, dict):
                return body
            last = "response body is not a JSON object"
        raise TransportError(f"POST {path} failed after {self.attempts} attempts: {last}")


class ChatClient(_RetryingClient):
    """``POST /chat/completions``; returns the first choice's message content."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        temperature: float = 0.0,
        attempts: int = 3,
        backoff_base: float = 0.5,
        timeout: float = 120.0,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        super().__init__(base_url, api_key, attempts, backoff_base, timeout, client, sleep)
        self.model = model
        self.temperature = temperature

    def complete(self, messages: Sequence[Message], usage: UsageMeter | None = None) -> str:
        body = self._post("/chat/completions", {
            "model": self.model,
            "messages": list(messages),
            "temperature": self.temperature,
        })
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError("chat response lacks choices[0].message.content") from exc
        content = content if isinstance(content, str) else ""
        if usage is not None:
            block = body.get("usage") or {}
            prompt = block.get("prompt_tokens")
            completion = block.get("completion_tokens")
            if isinstance(prompt, int) and isinstance(completion, int):
                usage.add_chat(self.model, prompt, completion)
            else:
                text_in = "".join(m.get("content", "") for m in messages)
                usage.add_chat(self.model, estimate_tokens(text_in), estimate_tokens(content), estimated=True)
        return content


class EmbeddingClient(_RetryingClient):
    """``POST /embeddings`` with ``{model, input}``."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        attempts: int = 3,
        backoff_base: float = 0.5,
        timeout: float = 120.0,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        super().__init__(base_url, api_key, attempts, backoff_base, timeout, client, sleep)
        self.model = model
        self.model_id = model

    def embed(self, texts: Sequence[str], usage: UsageMeter | None = None) -> list[list[float]]:
        body = self._post("/embeddings", {"model": self.model, "input": list(texts)})
        try:
            data = sorted(body["data"], key=lambda d: d.get("index", 0))
            vectors = [list(map(float, d["embedding"])) for d in data]
        except (KeyError, TypeError, ValueError) as exc:
            raise TransportError("embedding response lacks data[].embedding") from exc
        if usage is not None:
            block = body.get("usage") or {}
            tokens = block.get("prompt_tokens", block.get("total_tokens"))
            if isinstance(tokens, int):
                usage.add_embedding(self.model, tokens)
            else:
                usage.add_embedding(self.model, sum(estimate_tokens(t) for t in texts), estimated=True)
        return vectors
