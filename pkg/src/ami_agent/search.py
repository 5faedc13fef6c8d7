"""Search queries, result filtering and record/replay snapshots."""

from __future__ import annotations

import json
import logging
import os
import tempfile
import threading
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath
from typing import Any, Protocol
from urllib.parse import urlsplit

import httpx

from ami_agent.core import Identity, isoformat_z, utc_now
from ami_agent.errors import RateLimitError, SnapshotFormatError, SnapshotMissError, TransportError

log = logging.getLogger(__name__)

SEARCH_SNAPSHOT_FILE = "search.json"
GOOGLE_MAX_NUM = 10
SNAPSHOT_SCHEMA_VERSION = 1


def is_http_url(url: str) -> bool:
    try:
        parts = urlsplit(url)
    except ValueError:
        return False
    return parts.scheme in ("http", "https") and bool(parts.hostname)


@dataclass(frozen=True)
class SearchResult:
    url: str
    title: str
    snippet: str
    rank: int

    def __post_init__(self) -> None:
        if not is_http_url(self.url):
            raise ValueError(f"not an absolute http(s) URL: {self.url!r}")
        if self.rank < 1:
            raise ValueError("rank is 1-based")

    @property
    def host(self) -> str:
        return (urlsplit(self.url).hostname or "").lower()

    def to_dict(self) -> dict[str, Any]:
        return {"url": self.url, "title": self.title, "snippet": self.snippet, "rank": self.rank}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SearchResult:
        return cls(url=data["url"], title=data.get("title", ""), snippet=data.get("snippet", ""),
                   rank=int(data["rank"]))


def _sanitize(term: str) -> str:
    return " ".join(term.replace('"', " ").split())


def build_query(identity: Identity) -> str:
    """Quoted exact name, then attribute values sorted by attribute key."""
    parts = [f'"{_sanitize(identity.name)}"']
    for key in sorted(identity.attributes):
        value = _sanitize(identity.attributes[key])
        if value:
            parts.append(value)
    return " ".join(parts)


def canonical_query(query: str) -> str:
    return " ".join(query.split())


def host_matches(host: str, pattern: str) -> bool:
    """Case-insensitive domain-suffix match.

    ``example.com`` matches the domain itself and any subdomain;
    ``*.example.com`` matches subdomains only.
    """
    host = host.lower().rstrip(".")
    pattern = pattern.lower().strip().rstrip(".")
    if not pattern:
        return False
    if pattern.startswith("*."):
        return host.endswith(pattern[1:])
    return host == pattern or host.endswith("." + pattern)


def _blocked_extension(url: str, extensions: Iterable[str]) -> bool:
    suffix = PurePosixPath(urlsplit(url).path).suffix.lower()
    return bool(suffix) and suffix in {e.lower() for e in extensions}


def is_filtered(result: SearchResult, blocklist: Iterable[str], blocked_extensions: Iterable[str] = ()) -> bool:
    host = result.host
    if any(host_matches(host, p) for p in blocklist):
        return True
    return _blocked_extension(result.url, blocked_extensions)


def filter_results(
    results: Sequence[SearchResult],
    blocklist: Iterable[str],
    blocked_extensions: Iterable[str] = (),
) -> list[SearchResult]:
    """Drop results on blocked hosts or with blocked file extensions.

    Order and original ranks are kept so provenance survives filtering.
    """
    blocklist = tuple(blocklist)
    blocked_extensions = tuple(blocked_extensions)
    return [r for r in results if not is_filtered(r, blocklist, blocked_extensions)]


class SearchProvider(Protocol):
    provider_id: str

    def search(self, query: str, n: int) -> list[SearchResult]: ...


class GoogleSearchProvider:
    """Google Custom Search JSON API (or anything speaking the same GET shape)."""

    def __init__(
        self,
        api_key: str,
        engine_id: str,
        base_url: str = "https://www.googleapis.com/customsearch/v1",
        client: httpx.Client | None = None,
        timeout: float = 30.0,
    ):
        self.api_key = api_key
        self.engine_id = engine_id
        self.base_url = base_url
        self.provider_id = f"google-cse:{engine_id}"
        self._client = client or httpx.Client(timeout=timeout)

    def search(self, query: str, n: int) -> list[SearchResult]:
        if n < 1:
            raise ValueError("n must be positive")
        params = {"key": self.api_key, "cx": self.engine_id, "q": query, "num": min(n, GOOGLE_MAX_NUM)}
        try:
            resp = self._client.get(self.base_url, params=params)
        except httpx.HTTPError as exc:
            raise TransportError(f"search request failed: {exc}") from exc
        if resp.status_code == 429 or (resp.status_code == 403 and "limit" in resp.text.lower()):
            raise RateLimitError(f"search quota exceeded (HTTP {resp.status_code})")
        if resp.status_code >= 400:
            raise TransportError(f"search provider returned HTTP {resp.status_code}")
        try:
            items = resp.json().get("items") or []
        except ValueError as exc:
            raise TransportError("search provider returned invalid JSON") from exc
        results: list[SearchResult] = []
        for item in items:
            url = item.get("link", "")
            if not is_http_url(url):
                log.debug("skipping non-http search hit %r", url)
                continue
            results.append(SearchResult(url=url, title=item.get("title", ""),
                                        snippet=item.get("snippet", ""), rank=len(results) + 1))
            if len(results) == n:
                break
        return results

    def close(self) -> None:
        self._client.close()


@dataclass
class SearchSnapshot:
    entries: dict[str, list[SearchResult]] = field(default_factory=dict)
    created_at: str = ""
    provider_id: str = ""

    def to_json(self) -> str:
        payload = {
            "created_at": self.created_at,
            "entries": {q: [r.to_dict() for r in rs] for q, rs in self.entries.items()},
            "provider_id": self.provider_id,
            "schema_version": SNAPSHOT_SCHEMA_VERSION,
        }
        return json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False) + "\n"

    @classmethod
    def from_json(cls, text: str, origin: str = "<snapshot>") -> SearchSnapshot:
        try:
            data = json.loads(text)
            version = data.get("schema_version")
            if version != SNAPSHOT_SCHEMA_VERSION:
                raise ValueError(f"unsupported schema_version {version!r}")
            entries = {
                canonical_query(q): [SearchResult.from_dict(r) for r in rs]
                for q, rs in data["entries"].items()
            }
            return cls(entries=entries, created_at=str(data.get("created_at", "")),
                       provider_id=str(data.get("provider_id", "")))
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            raise SnapshotFormatError(f"{origin}: invalid search snapshot ({exc})") from exc

    @classmethod
    def load(cls, path: str | Path) -> SearchSnapshot:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise SnapshotFormatError(f"{path}: {exc.strerror or exc}") from exc
        return cls.from_json(text, origin=str(path))

    def save(self, path: str | Path) -> None:
        atomic_write_text(Path(path), self.to_json())

    def put(self, query: str, results: Sequence[SearchResult]) -> None:
        self.entries[canonical_query(query)] = list(results)


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


class SnapshotSearchProvider:
    """Serves results from a snapshot; never falls back to a live provider."""

    def __init__(self, snapshot: SearchSnapshot):
        self.snapshot = snapshot
        self.provider_id = snapshot.provider_id or "snapshot"

    @classmethod
    def from_path(cls, path: str | Path) -> SnapshotSearchProvider:
        path = Path(path)
        if path.is_dir():
            path = path / SEARCH_SNAPSHOT_FILE
        return cls(SearchSnapshot.load(path))

    def search(self, query: str, n: int) -> list[SearchResult]:
        key = canonical_query(query)
        try:
            results = self.snapshot.entries[key]
        except KeyError:
            raise SnapshotMissError(key) from None
        return list(results[:n])


class RecordingSearchProvider:
    """Queries a live provider and writes every response through to a snapshot file."""

    def __init__(self, inner: SearchProvider, path: str | Path):
        self.inner = inner
        self.path = Path(path)
        self.provider_id = inner.provider_id
        self._lock = threading.Lock()

    def search(self, query: str, n: int) -> list[SearchResult]:
        results = self.inner.search(query, n)
        with self._lock:
            snap = SearchSnapshot.load(self.path) if self.path.exists() else SearchSnapshot()
            snap.provider_id = self.provider_id
            snap.created_at = isoformat_z(utc_now())
            snap.put(query, results)
            snap.save(self.path)
        return results


def record_snapshot(
    queries: Sequence[str],
    n: int,
    out: str | Path,
    provider: SearchProvider,
) -> SearchSnapshot:
    """Run every query against the live provider and store the results.

    Existing entries in ``out`` are kept unless re-recorded. Nothing is written
    if any query fails.
    """
    out = Path(out)
    snap = SearchSnapshot.load(out) if out.exists() else SearchSnapshot()
    for query in queries:
        snap.put(query, provider.search(query, n))
    snap.provider_id = provider.provider_id
    snap.created_at = isoformat_z(utc_now())
    snap.save(out)
    return snap
