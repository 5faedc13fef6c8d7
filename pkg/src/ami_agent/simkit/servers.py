"""Local HTTP servers imitating the LLM, embedding and web endpoints."""

from __future__ import annotations

import base64
import hashlib
import json
import re
import threading
import time
from collections.abc import Callable
from dataclasses import dataclass
from functools import lru_cache
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any
from urllib.parse import urlsplit

import numpy as np
import yaml

from ami_agent.backends import estimate_tokens
from ami_agent.core import Identity
from ami_agent.crawler import extract_text, page_snapshot_path
from ami_agent.errors import FixtureError
from ami_agent.search import SEARCH_SNAPSHOT_FILE, SearchResult, SearchSnapshot, atomic_write_text, build_query
from ami_agent.simkit.scorer import RuleBasedScorer, extract_context

FIXTURE_HOST = "fixtures.ami.test"
FIXTURE_EPOCH = "2000-01-01T00:00:00Z"
VERDICT_MARKER = "final verdict"


class _QuietHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    # Headers and body go out in separate writes; without this, keep-alive
    # clients stall on delayed ACKs for every response.
    disable_nagle_algorithm = True

    def log_message(self, format: str, *args: Any) -> None:  # noqa: A002
        pass

    def _send(self, status: int, body: bytes, content_type: str = "application/json",
              headers: dict[str, str] | None = None) -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        for k, v in (headers or {}).items():
            self.send_header(k, v)
        self.end_headers()
        if self.command != "HEAD":
            self.wfile.write(body)

    def _json(self, status: int, payload: Any) -> None:
        self._send(status, json.dumps(payload).encode("utf-8"))

    def _read_json(self) -> Any:
        length = int(self.headers.get("Content-Length") or 0)
        return json.loads(self.rfile.read(length) or b"null")


class _Server(ThreadingHTTPServer):
    # The default backlog of 5 drops bursts of concurrent connects, which then
    # wait a full second for SYN retransmission.
    request_queue_size = 128
    daemon_threads = True


class _ServerBase:
    handler_cls: type[BaseHTTPRequestHandler]

    def __init__(self, port: int = 0):
        self._port = port
        self._httpd: _Server | None = None
        self._thread: threading.Thread | None = None

    def start(self) -> _ServerBase:
        owner = self

        class Handler(self.handler_cls):  # type: ignore[valid-type, misc]
            server_owner = owner

        self._httpd = _Server(("127.0.0.1", self._port), Handler)
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        if self._httpd is not None:
            self._httpd.shutdown()
            self._httpd.server_close()
            self._httpd = None

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc: Any) -> None:
        self.stop()

    @property
    def port(self) -> int:
        assert self._httpd is not None, "server not started"
        return int(self._httpd.server_address[1])

    @property
    def address(self) -> tuple[str, int]:
        return ("127.0.0.1", self.port)


# --- LLM ----------------------------------------------------------------------


class _LLMHandler(_QuietHandler):
    server_owner: MockLLMServer

    def do_POST(self) -> None:  # noqa: N802
        if not self.path.rstrip("/").endswith("/chat/completions"):
            self._json(404, {"error": "not found"})
            return
        status, payload = self.server_owner.handle(self._read_json())
        self._json(status, payload)


@dataclass
class LLMCall:
    kind: str  # "score" | "verdict"
    status: str  # "ok" | "malformed" | "transport_error"
    prompt_tokens: int = 0
    completion_tokens: int = 0
    reply: str = ""


class MockLLMServer(_ServerBase):
    """OpenAI-compatible chat endpoint driven by a RuleBasedScorer.

    Fault injection: ``malformed_first_n`` non-JSON replies before valid ones,
    ``transport_fail_first_n`` HTTP 503s, ``transport_fault_substrings`` (every
    request whose text contains all of them gets a 503), and fixed ``latency_s``.
    ``reply_fn(kind, messages)`` may override the reply text entirely.
    """

    handler_cls = _LLMHandler

    def __init__(
        self,
        scorer: RuleBasedScorer | None = None,
        malformed_first_n: int = 0,
        transport_fail_first_n: int = 0,
        transport_fault_substrings: tuple[str, ...] = (),
        latency_s: float = 0.0,
        reply_fn: Callable[[str, list[dict[str, str]]], str] | None = None,
        model: str = "simkit-rules",
        port: int = 0,
    ):
        super().__init__(port)
        self.scorer = scorer or RuleBasedScorer()
        self.malformed_remaining = malformed_first_n
        self.transport_remaining = transport_fail_first_n
        self.transport_fault_substrings = transport_fault_substrings
        self.latency_s = latency_s
        self.reply_fn = reply_fn
        self.model = model
        self.calls: list[LLMCall] = []
        self._lock = threading.Lock()

    @property
    def base_url(self) -> str:
        return f"http://127.0.0.1:{self.port}/v1"

    def successful(self, kind: str | None = None) -> list[LLMCall]:
        with self._lock:
            return [c for c in self.calls if c.status != "transport_error" and (kind is None or c.kind == kind)]

    def reply_for(self, kind: str, messages: list[dict[str, str]]) -> str:
        if self.reply_fn is not None:
            return self.reply_fn(kind, messages)
        # Repair turns are appended, so the first user message holds the payload.
        user = next(m["content"] for m in messages if m["role"] == "user")
        if kind == "verdict":
            score, why = self.scorer.verdict(user)
        else:
            score, why = self.scorer.score(extract_context(user))
        return json.dumps({"score": score, "justification": why})

    def handle(self, request: Any) -> tuple[int, Any]:
        if self.latency_s:
            time.sleep(self.latency_s)
        messages = request.get("messages") or []
        system = " ".join(m.get("content", "") for m in messages if m.get("role") == "system")
        kind = "verdict" if VERDICT_MARKER in system else "score"
        text = "\n".join(m.get("content", "") for m in messages)
        with self._lock:
            fail = False
            if self.transport_remaining > 0:
                self.transport_remaining -= 1
                fail = True
            elif self.transport_fault_substrings and all(s in text for s in self.transport_fault_substrings):
                fail = True
            if fail:
                self.calls.append(LLMCall(kind, "transport_error"))
                return 503, {"error": {"message": "injected transport fault"}}
            malformed = self.malformed_remaining > 0
            if malformed:
                self.malformed_remaining -= 1
        reply = self.reply_for(kind, messages)
        if malformed:
            reply = "score: " + str(json.loads(reply)["score"]) if reply.startswith("{") else "not json"
        prompt_tokens = estimate_tokens("".join(m.get("content", "") for m in messages))
        completion_tokens = estimate_tokens(reply)
        with self._lock:
            self.calls.append(LLMCall(kind, "malformed" if malformed else "ok", prompt_tokens, completion_tokens, reply))
        return 200, {
            "id": "simkit",
            "object": "chat.completion",
            "model": request.get("model", self.model),
            "choices": [{"index": 0, "message": {"role": "assistant", "content": reply}, "finish_reason": "stop"}],
            "usage": {"prompt_tokens": prompt_tokens, "completion_tokens": completion_tokens,
                      "total_tokens": prompt_tokens + completion_tokens},
        }


def mock_llm(scorer: RuleBasedScorer | None = None, **faults: Any) -> MockLLMServer:
    """Started mock chat endpoint; stop it (or use ``with``) when done."""
    return MockLLMServer(scorer, **faults).start()  # type: ignore[return-value]


# --- embeddings -----------------------------------------------------------------


@lru_cache(maxsize=65536)
def _token_vector(token: str, dimension: int, seed: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}\x00{token}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    vec = rng.standard_normal(dimension)
    vec.setflags(write=False)
    return vec


def hashed_embedding(text: str, dimension: int = 64, seed: int = 0) -> list[float]:
    """Deterministic unit vector: hashed bag of words plus a whole-text component.

    Shared words pull vectors together, so retrieval behaves sensibly, while
    the whole-text term separates texts with identical word multisets.
    """
    acc = np.zeros(dimension)
    for token in re.findall(r"[a-z0-9]+", text.lower()):
        acc += _token_vector(token, dimension, seed)
    acc += 0.25 * _token_vector("\x01" + text, dimension, seed)
    return (acc / np.linalg.norm(acc)).tolist()


class _EmbedHandler(_QuietHandler):
    server_owner: MockEmbeddingServer

    def do_POST(self) -> None:  # noqa: N802
        if not self.path.rstrip("/").endswith("/embeddings"):
            self._json(404, {"error": "not found"})
            return
        status, payload = self.server_owner.handle(self._read_json())
        self._json(status, payload)


@dataclass
class EmbedCall:
    n_inputs: int
    tokens: int
    status: str


class MockEmbeddingServer(_ServerBase):
    handler_cls = _EmbedHandler

    def __init__(self, dimension: int = 64, seed: int = 0, transport_fail_first_n: int = 0,
                 fail_substring: str | None = None, latency_s: float = 0.0,
                 model: str = "simkit-hash", port: int = 0):
        if dimension < 2:
            raise ValueError("dimension must be >= 2")
        super().__init__(port)
        self.dimension = dimension
        self.seed = seed
        self.transport_remaining = transport_fail_first_n
        self.fail_substring = fail_substring
        self.latency_s = latency_s
        self.model = model
        self.calls: list[EmbedCall] = []
        self._lock = threading.Lock()

    @property
    def base_url(self) -> str:
        return f"http://127.0.0.1:{self.port}/v1"

    def embed_text(self, text: str) -> list[float]:
        return hashed_embedding(text, self.dimension, self.seed)

    def handle(self, request: Any) -> tuple[int, Any]:
        if self.latency_s:
            time.sleep(self.latency_s)
        inputs = request.get("input")
        texts = [inputs] if isinstance(inputs, str) else list(inputs or [])
        with self._lock:
            fail = self.transport_remaining > 0 or (
                self.fail_substring is not None and any(self.fail_substring in t for t in texts))
            if self.transport_remaining > 0:
                self.transport_remaining -= 1
            if fail:
                self.calls.append(EmbedCall(len(texts), 0, "transport_error"))
                return 503, {"error": {"message": "injected transport fault"}}
        tokens = sum(estimate_tokens(t) for t in texts)
        data = [{"object": "embedding", "index": i, "embedding": self.embed_text(t)} for i, t in enumerate(texts)]
        with self._lock:
            self.calls.append(EmbedCall(len(texts), tokens, "ok"))
        return 200, {"object": "list", "data": data, "model": request.get("model", self.model),
                     "usage": {"prompt_tokens": tokens, "total_tokens": tokens}}

    def successful(self) -> list[EmbedCall]:
        with self._lock:
            return [c for c in self.calls if c.status == "ok"]


def mock_embedder(dimension: int = 64, seed: int = 0, **faults: Any) -> MockEmbeddingServer:
    return MockEmbeddingServer(dimension, seed, **faults).start()  # type: ignore[return-value]


# --- fixture web ------------------------------------------------------------------


@dataclass(frozen=True)
class FixturePage:
    identity: str
    path: str
    title: str
    status: int = 200
    content_type: str = "text/html; charset=utf-8"
    delay_s: float = 0.0
    redirect: str | None = None


def load_manifest(corpus_dir: str | Path) -> list[FixturePage]:
    """Read ``manifest.yaml``: identity name -> [{path, title, status}, ...]."""
    corpus_dir = Path(corpus_dir)
    manifest = corpus_dir / "manifest.yaml"
    try:
        data = yaml.safe_load(manifest.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise FixtureError(f"{manifest}: {exc}") from exc
    if not isinstance(data, dict):
        raise FixtureError(f"{manifest}: expected a mapping of identity names to page lists")
    pages = []
    seen: set[str] = set()
    for name, entries in data.items():
        for entry in entries or []:
            try:
                page = FixturePage(identity=str(name), path=str(entry["path"]).lstrip("/"),
                                   title=str(entry.get("title", "")), status=int(entry.get("status", 200)),
                                   content_type=str(entry.get("content_type", "text/html; charset=utf-8")),
                                   delay_s=float(entry.get("delay_s", 0.0)), redirect=entry.get("redirect"))
            except (KeyError, TypeError, ValueError, AttributeError) as exc:
                raise FixtureError(f"{manifest}: bad page entry for {name!r}: {entry!r}") from exc
            if page.path in seen:
                raise FixtureError(f"{manifest}: page {page.path!r} listed twice")
            seen.add(page.path)
            if page.status < 400 and page.redirect is None and not (corpus_dir / page.path).is_file():
                raise FixtureError(f"{manifest}: page file {page.path!r} for {name!r} does not exist")
            pages.append(page)
    return pages


class _WebHandler(_QuietHandler):
    server_owner: FixtureWeb

    def do_GET(self) -> None:  # noqa: N802
        target = self.path
        if target.startswith(("http://", "https://")):
            parts = urlsplit(target)
            host, path = parts.hostname or "", parts.path
        else:
            host, path = (self.headers.get("Host") or "").split(":")[0], urlsplit(target).path
        self.server_owner.serve(self, host, path.lstrip("/"))

    do_HEAD = do_GET


class FixtureWeb(_ServerBase):
    """Serves a corpus at ``http://<host>/<path>``, both directly and as an HTTP proxy.

    Pointing a crawler's proxy at this server keeps page URLs independent of
    the port, so generated snapshots are byte-stable.
    """

    handler_cls = _WebHandler

    def __init__(self, corpus_dir: str | Path, host: str = FIXTURE_HOST, port: int = 0):
        super().__init__(port)
        self.corpus_dir = Path(corpus_dir)
        self.host = host
        self.pages = load_manifest(self.corpus_dir)
        self._by_path = {p.path: p for p in self.pages}
        self.requests: list[str] = []
        self._lock = threading.Lock()

    @property
    def proxy_url(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    def url_for(self, page: FixturePage) -> str:
        return f"http://{self.host}/{page.path}"

    def serve(self, handler: _QuietHandler, host: str, path: str) -> None:
        with self._lock:
            self.requests.append(path)
        if host not in (self.host, "127.0.0.1", "localhost"):
            handler._send(502, b"unknown host", "text/plain")
            return
        page = self._by_path.get(path)
        if page is None:
            handler._send(404, b"not found", "text/plain")
            return
        if page.delay_s:
            time.sleep(page.delay_s)
        if page.redirect is not None:
            handler._send(302, b"", "text/plain", {"Location": f"http://{self.host}/{page.redirect.lstrip('/')}"})
            return
        if page.status >= 400:
            handler._send(page.status, f"error {page.status}".encode(), "text/plain")
            return
        handler._send(page.status, (self.corpus_dir / page.path).read_bytes(), page.content_type)

    def snapshot(self) -> SearchSnapshot:
        snap = SearchSnapshot(created_at=FIXTURE_EPOCH, provider_id="simkit-fixture-web")
        grouped: dict[str, list[FixturePage]] = {}
        for page in self.pages:
            grouped.setdefault(page.identity, []).append(page)
        for name, pages in grouped.items():
            results = []
            for rank, page in enumerate(pages, start=1):
                snippet = ""
                if page.status < 400 and page.redirect is None:
                    _, text = extract_text((self.corpus_dir / page.path).read_bytes(), content_type=page.content_type)
                    snippet = " ".join(text.split())[:160]
                results.append(SearchResult(self.url_for(page), page.title, snippet, rank))
            snap.put(build_query(Identity(name)), results)
        return snap

    def write_snapshot(self, snapshot_dir: str | Path, include_pages: bool = True) -> Path:
        """Write ``search.json`` and, optionally, a page record for every fixture page."""
        snapshot_dir = Path(snapshot_dir)
        path = snapshot_dir / SEARCH_SNAPSHOT_FILE
        self.snapshot().save(path)
        if include_pages:
            for page in self.pages:
                if page.redirect is not None:
                    continue
                body = b"" if page.status >= 400 else (self.corpus_dir / page.path).read_bytes()
                ctype = "text/plain" if page.status >= 400 else page.content_type
                record = {"url": self.url_for(page), "status": page.status, "content_type": ctype,
                          "body_base64": base64.b64encode(body).decode("ascii"), "fetched_at": FIXTURE_EPOCH}
                atomic_write_text(page_snapshot_path(snapshot_dir, self.url_for(page)),
                                  json.dumps(record, sort_keys=True, indent=2) + "\n")
        return path


def fixture_web(corpus_dir: str | Path, host: str = FIXTURE_HOST) -> FixtureWeb:
    """Started fixture server; its ``snapshot()`` points at the served pages."""
    return FixtureWeb(corpus_dir, host).start()  # type: ignore[return-value]
