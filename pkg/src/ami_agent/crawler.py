"""Page fetching, visible-text extraction and crawl snapshots."""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import re
import threading
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from html.parser import HTMLParser
from pathlib import Path
from typing import Any, Protocol
from urllib.parse import urlsplit
from urllib.robotparser import RobotFileParser

import httpx

from ami_agent.core import RunConfig, isoformat_z, utc_now
from ami_agent.errors import SnapshotFormatError
from ami_agent.search import SearchResult, atomic_write_text, is_http_url

log = logging.getLogger(__name__)

PAGES_DIR = "pages"
TEXT_CONTENT_TYPES = ("text/", "application/xhtml+xml", "application/xml")


def content_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class FetchError(Exception):
    """A page could not be retrieved; ``reason`` is a short machine-readable code."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


@dataclass(frozen=True)
class RawPage:
    url: str
    status: int
    content_type: str
    body: bytes
    fetched_at: str


@dataclass(frozen=True)
class WebDocument:
    url: str
    title: str | None
    retrieved_at: str
    text: str
    content_hash: str
    status: str  # "fetched" | "failed"
    reason: str = ""

    def __post_init__(self) -> None:
        if self.status == "fetched":
            if not self.text:
                raise ValueError("fetched document must carry text")
            if self.content_hash != content_digest(self.text):
                raise ValueError("content_hash does not match text")
        elif self.status == "failed":
            if self.text or not self.reason:
                raise ValueError("failed document must have empty text and a reason")
        else:
            raise ValueError(f"unknown document status {self.status!r}")

    @property
    def fetched(self) -> bool:
        return self.status == "fetched"

    @classmethod
    def failed(cls, url: str, reason: str, retrieved_at: str = "") -> WebDocument:
        return cls(url=url, title=None, retrieved_at=retrieved_at, text="", content_hash="",
                   status="failed", reason=reason)

    def to_dict(self) -> dict[str, Any]:
        return {
            "url": self.url,
            "title": self.title,
            "retrieved_at": self.retrieved_at,
            "content_hash": self.content_hash,
            "status": self.status,
            "reason": self.reason,
        }


def check_page(page: RawPage) -> None:
    if page.status >= 400:
        raise FetchError(f"http_{page.status}")
    ctype = page.content_type.split(";")[0].strip().lower()
    if ctype and not ctype.startswith(TEXT_CONTENT_TYPES):
        raise FetchError("non_text_content", ctype)


def _charset(content_type: str) -> str | None:
    m = re.search(r"charset=([\w\-]+)", content_type, re.I)
    return m.group(1) if m else None


def decode_body(body: bytes, content_type: str = "") -> str:
    charset = _charset(content_type)
    if charset:
        try:
            return body.decode(charset)
        except (LookupError, UnicodeDecodeError):
            pass
    return body.decode("utf-8", errors="replace")


# --- extraction -------------------------------------------------------------

SKIP_TAGS = frozenset({"script", "style", "nav", "header", "footer", "aside", "form",
                       "noscript", "template", "head", "svg"})
PARAGRAPH_TAGS = frozenset({"p", "h1", "h2", "h3", "h4", "h5", "h6", "blockquote", "pre",
                            "article", "section", "main", "table", "ul", "ol", "dl", "figure"})
LINE_TAGS = frozenset({"br", "div", "li", "tr", "dt", "dd", "hr", "td", "th", "figcaption",
                       "address", "caption"})
VOID_TAGS = frozenset({"br", "hr", "img", "input", "meta", "link", "area", "base", "col",
                       "embed", "source", "track", "wbr"})


class _VisibleTextParser(HTMLParser):
    def __init__(self) -> None:
        super().__init__(convert_charrefs=True)
        self.parts: list[str] = []
        self.skip_stack: list[str] = []
        self.title_parts: list[str] = []
        self.h1_parts: list[str] = []
        self._in_title = False
        self._h1_depth = 0
        self._h1_done = False
        self._pre_depth = 0

    def handle_starttag(self, tag: str, attrs: list[tuple[str, str | None]]) -> None:
        if tag == "title":
            self._in_title = True
            return
        if tag == "body" and "head" in self.skip_stack:
            # <head> left unclosed.
            del self.skip_stack[self.skip_stack.index("head"):]
        if tag in VOID_TAGS:
            if tag in LINE_TAGS and not self.skip_stack:
                self.parts.append(_LINE)
            return
        if tag in SKIP_TAGS:
            self.skip_stack.append(tag)
            return
        if self.skip_stack:
            return
        if tag == "h1" and not self._h1_done:
            self._h1_depth += 1
        if tag == "pre":
            self._pre_depth += 1
        self._break(tag)

    def handle_startendtag(self, tag: str, attrs: list[tuple[str, str | None]]) -> None:
        if tag in LINE_TAGS and not self.skip_stack:
            self.parts.append(_LINE)

    def handle_endtag(self, tag: str) -> None:
        if tag == "title":
            self._in_title = False
            return
        if self.skip_stack:
            if tag in self.skip_stack:
                # Unwind to the matching open tag; tolerates unclosed inner skip tags.
                while self.skip_stack and self.skip_stack.pop() != tag:
                    pass
            return
        if tag == "h1" and self._h1_depth:
            self._h1_depth -= 1
            if not self._h1_depth:
                self._h1_done = True
        if tag == "pre" and self._pre_depth:
            self._pre_depth -= 1
        self._break(tag)

    def _break(self, tag: str) -> None:
        if tag in PARAGRAPH_TAGS:
            self.parts.append(_PARAGRAPH)
        elif tag in LINE_TAGS:
            self.parts.append(_LINE)

    def handle_data(self, data: str) -> None:
        if self._in_title:
            self.title_parts.append(data)
            return
        if self.skip_stack:
            return
        if self._h1_depth:
            self.h1_parts.append(data)
        if self._pre_depth:
            self.parts.append(data.replace("\n", _LINE))
        else:
            # Source line breaks are ordinary whitespace in HTML.
            self.parts.append(_WHITESPACE.sub(" ", data))

    def text(self) -> str:
        return _BREAK_RUN.sub(_render_break, "".join(self.parts))


# Block boundaries are collected as markers and merged afterwards, so nested or
# adjacent blocks produce one break (the strongest) rather than a pile-up.
_LINE = "\x00"
_PARAGRAPH = "\x01"
_WHITESPACE = re.compile(r"\s+")
_BREAK_RUN = re.compile(r"[ \x00\x01]*[\x00\x01][ \x00\x01]*")


def _render_break(m: re.Match[str]) -> str:
    return "\n\n" if _PARAGRAPH in m.group(0) else "\n"


_SPACES = re.compile(r"[ \t\r\f\v\u00a0]+")
_MANY_NEWLINES = re.compile(r"\n{3,}")


def normalize_whitespace(text: str) -> str:
    lines = [_SPACES.sub(" ", line).strip() for line in text.split("\n")]
    return _MANY_NEWLINES.sub("\n\n", "\n".join(lines)).strip()


def _strip_tags(html: str) -> tuple[str | None, str]:
    title = re.search(r"<title[^>]*>(.*?)</title>", html, re.I | re.S)
    body = re.sub(r"<(script|style)[^>]*>.*?</\1\s*>", " ", html, flags=re.I | re.S)
    body = re.sub(r"<[^>]+>", "\n", body)
    return (normalize_whitespace(title.group(1)) if title else None), body


def extract_text(html: bytes | str, url: str = "", content_type: str = "") -> tuple[str | None, str]:
    """Return ``(title, visible_text)`` for an HTML page.

    Title comes from ``<title>`` or, failing that, the first ``<h1>``. Markup the
    parser cannot handle falls back to regex tag stripping.
    """
    text = html if isinstance(html, str) else decode_body(html, content_type)
    ctype = content_type.split(";")[0].strip().lower()
    if ctype == "text/plain":
        return None, normalize_whitespace(text)
    parser = _VisibleTextParser()
    try:
        parser.feed(text)
        parser.close()
    except Exception:  # noqa: BLE001 - best effort on hostile markup
        log.debug("html parser failed on %s; falling back to tag stripping", url)
        title, body = _strip_tags(text)
        return title, normalize_whitespace(body)
    title = normalize_whitespace("".join(parser.title_parts)) or None
    if title is None:
        title = normalize_whitespace("".join(parser.h1_parts)) or None
    return title, normalize_whitespace(parser.text())


# --- fetching ---------------------------------------------------------------


class PageSource(Protocol):
    def get(self, url: str) -> RawPage: ...


class LiveFetcher:
    """HTTP fetcher with size cap, redirect limit and robots.txt support."""

    def __init__(self, config: RunConfig, client: httpx.Client | None = None):
        self.config = config
        self.timeout = config.fetch_timeout_s
        self.max_bytes = config.max_document_bytes
        self.respect_robots = config.respect_robots
        self._client = client or httpx.Client(
            follow_redirects=True,
            max_redirects=config.max_redirects,
            headers={"User-Agent": config.user_agent},
            proxy=config.http_proxy,
            trust_env=False,
        )
        self._robots: dict[str, RobotFileParser | None] = {}
        self._robots_lock = threading.Lock()

    def close(self) -> None:
        self._client.close()

    def _robots_for(self, url: str) -> RobotFileParser | None:
        parts = urlsplit(url)
        origin = f"{parts.scheme}://{parts.netloc}"
        with self._robots_lock:
            if origin in self._robots:
                return self._robots[origin]
        parser: RobotFileParser | None = None
        try:
            resp = self._client.get(origin + "/robots.txt", timeout=self.timeout)
            if resp.status_code == 200:
                parser = RobotFileParser()
                parser.parse(resp.text.splitlines())
        except httpx.HTTPError:
            parser = None
        with self._robots_lock:
            self._robots[origin] = parser
        return parser

    def get(self, url: str) -> RawPage:
        if not is_http_url(url):
            raise FetchError("invalid_url", url)
        if self.respect_robots:
            robots = self._robots_for(url)
            if robots is not None and not robots.can_fetch(self.config.user_agent, url):
                raise FetchError("robots_disallowed")
        return fetch(url, self.timeout, client=self._client, max_bytes=self.max_bytes)


def fetch(
    url: str,
    timeout: float,
    client: httpx.Client | None = None,
    max_bytes: int = 5 * 1024 * 1024,
) -> RawPage:
    """GET ``url``; returns the raw page whatever its status, raising FetchError
    only for transport-level failures (timeout, connection, redirects, size)."""
    own = client is None
    if own:
        client = httpx.Client(follow_redirects=True, max_redirects=5, trust_env=False)
    try:
        with client.stream("GET", url, timeout=timeout) as resp:
            declared = resp.headers.get("content-length")
            if declared and declared.isdigit() and int(declared) > max_bytes:
                raise FetchError("oversize", f"{declared} bytes")
            buf = bytearray()
            for piece in resp.iter_bytes():
                buf.extend(piece)
                if len(buf) > max_bytes:
                    raise FetchError("oversize", f"> {max_bytes} bytes")
            return RawPage(url=url, status=resp.status_code,
                           content_type=resp.headers.get("content-type", ""),
                           body=bytes(buf), fetched_at=isoformat_z(utc_now()))
    except httpx.TimeoutException as exc:
        raise FetchError("timeout", str(exc)) from exc
    except httpx.TooManyRedirects as exc:
        raise FetchError("too_many_redirects") from exc
    except httpx.HTTPError as exc:
        raise FetchError("connection_error", str(exc)) from exc
    finally:
        if own:
            client.close()


def page_snapshot_path(snapshot_dir: str | Path, url: str) -> Path:
    return Path(snapshot_dir) / PAGES_DIR / f"{hashlib.sha256(url.encode('utf-8')).hexdigest()}.json"


def _page_record(url: str, status: int | str, content_type: str, body: bytes, fetched_at: str) -> str:
    record = {
        "url": url,
        "status": status,
        "content_type": content_type,
        "body_base64": base64.b64encode(body).decode("ascii"),
        "fetched_at": fetched_at,
    }
    return json.dumps(record, sort_keys=True, indent=2) + "\n"


def read_page_record(path: Path) -> dict[str, Any]:
    try:
        record = json.loads(path.read_text(encoding="utf-8"))
        for key in ("url", "status", "content_type", "body_base64", "fetched_at"):
            if key not in record:
                raise KeyError(key)
        base64.b64decode(record["body_base64"], validate=True)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise SnapshotFormatError(f"{path}: invalid page record ({exc})") from exc
    return record


class ReplayPageSource:
    """Serves recorded page bodies; a missing page is a ``snapshot_miss`` failure."""

    def __init__(self, snapshot_dir: str | Path):
        self.snapshot_dir = Path(snapshot_dir)

    def get(self, url: str) -> RawPage:
        path = page_snapshot_path(self.snapshot_dir, url)
        if not path.exists():
            raise FetchError("snapshot_miss", url)
        record = read_page_record(path)
        status = record["status"]
        if isinstance(status, str):
            raise FetchError(status)
        return RawPage(url=url, status=int(status), content_type=record["content_type"],
                       body=base64.b64decode(record["body_base64"]), fetched_at=record["fetched_at"])


class RecordingPageSource:
    """Fetches live and writes every outcome, including failures, to the snapshot."""

    def __init__(self, inner: PageSource, snapshot_dir: str | Path):
        self.inner = inner
        self.snapshot_dir = Path(snapshot_dir)

    def get(self, url: str) -> RawPage:
        path = page_snapshot_path(self.snapshot_dir, url)
        try:
            page = self.inner.get(url)
        except FetchError as exc:
            atomic_write_text(path, _page_record(url, exc.reason, "", b"", isoformat_z(utc_now())))
            raise
        atomic_write_text(path, _page_record(url, page.status, page.content_type, page.body, page.fetched_at))
        return page


def document_from_page(page: RawPage) -> WebDocument:
    try:
        check_page(page)
    except FetchError as exc:
        return WebDocument.failed(page.url, exc.reason, page.fetched_at)
    title, text = extract_text(page.body, page.url, page.content_type)
    if not text:
        return WebDocument.failed(page.url, "empty_content", page.fetched_at)
    return WebDocument(url=page.url, title=title, retrieved_at=page.fetched_at, text=text,
                       content_hash=content_digest(text), status="fetched")


def load_document(url: str, source: PageSource) -> WebDocument:
    try:
        page = source.get(url)
    except FetchError as exc:
        log.info("fetch failed for %s: %s", url, exc.reason)
        return WebDocument.failed(url, exc.reason, isoformat_z(utc_now()))
    doc = document_from_page(page)
    if not doc.fetched:
        log.info("excluding %s: %s", url, doc.reason)
    return doc


def crawl(results: Sequence[SearchResult], config: RunConfig, source: PageSource) -> list[WebDocument]:
    """One WebDocument per result, in input order; each distinct URL is fetched once."""
    unique: list[str] = list(dict.fromkeys(r.url for r in results))
    if not unique:
        return []
    with ThreadPoolExecutor(max_workers=min(config.max_concurrency, len(unique))) as pool:
        docs = dict(zip(unique, pool.map(lambda u: load_document(u, source), unique)))
    return [docs[r.url] for r in results]


def page_source_for(config: RunConfig) -> PageSource:
    if config.snapshot_path and config.snapshot_mode == "replay":
        return ReplayPageSource(config.snapshot_path)
    live = LiveFetcher(config)
    if config.snapshot_path:
        return RecordingPageSource(live, config.snapshot_path)
    return live
