"""Chunking, embedding with a content-addressed cache, and exact cosine retrieval."""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from ami_agent.errors import ConfigurationError, EmbeddingError, TransportError
from ami_agent.search import atomic_write_bytes

log = logging.getLogger(__name__)

# Highest priority first; the empty separator (hard cut) is the implicit fallback.
SEPARATORS = ("\n\n", "\n", ". ", " ")
NORM_TOLERANCE = 1e-6


@dataclass(frozen=True)
class Chunk:
    doc_hash: str
    index: int
    text: str
    char_span: tuple[int, int]
    source_url: str = ""

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("chunk text must be non-empty")
        start, end = self.char_span
        if not 0 <= start < end:
            raise ValueError(f"invalid char_span {self.char_span}")

    @property
    def ref(self) -> tuple[str, int]:
        return (self.doc_hash, self.index)


def consumed_length(separator: str) -> int:
    """Characters of ``separator`` dropped from the chunk that ends at it.

    Only the trailing whitespace is dropped, so ". " keeps its period.
    """
    return len(separator) - len(separator.rstrip())


def _break_point(text: str, start: int, limit: int, overlap: int) -> tuple[int, int]:
    for sep in SEPARATORS:
        pos = text.rfind(sep, start, limit)
        # Content before the separator must outrun the overlap so the next
        # window always advances.
        if pos != -1 and pos > start + overlap:
            return pos + len(sep), consumed_length(sep)
    return limit, 0


def chunk_text(
    text: str,
    chunk_chars: int,
    overlap_chars: int,
    doc_hash: str = "",
    source_url: str = "",
) -> list[Chunk]:
    """Split ``text`` into overlapping windows of at most ``chunk_chars``.

    Each window ends at the last occurrence of the highest-priority separator
    inside it, or at a hard cut if none qualifies. The separator belongs to the
    window it ends (its span covers it) but its whitespace is dropped from the
    chunk text. The next window starts ``overlap_chars`` before that end, so
    spans of consecutive chunks overlap by exactly ``overlap_chars``.
    """
    if chunk_chars < 1:
        raise ValueError("chunk_chars must be positive")
    if not 0 <= overlap_chars < chunk_chars:
        raise ValueError("overlap_chars must satisfy 0 <= overlap < chunk_chars")
    if not text:
        raise ValueError("cannot chunk empty text")
    n = len(text)
    chunks: list[Chunk] = []
    start = 0
    while True:
        limit = start + chunk_chars
        if limit >= n:
            chunks.append(Chunk(doc_hash, len(chunks), text[start:n], (start, n), source_url))
            return chunks
        end, consumed = _break_point(text, start, limit, overlap_chars)
        chunks.append(Chunk(doc_hash, len(chunks), text[start:end - consumed], (start, end), source_url))
        start = end - overlap_chars


# --- embeddings -------------------------------------------------------------


class EmbeddingBackend(Protocol):
    model_id: str

    def embed(self, texts: Sequence[str], usage=None) -> list[list[float]]: ...


@dataclass(frozen=True)
class EmbeddedChunk:
    chunk: Chunk
    vector: np.ndarray
    model_id: str


def unit_vector(values: Sequence[float] | np.ndarray) -> np.ndarray:
    """L2-normalize in float64, then store as little-endian float32."""
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1 or vec.size == 0:
        raise EmbeddingError("embedding must be a non-empty 1-d vector")
    norm = float(np.linalg.norm(vec))
    if not np.isfinite(norm) or norm == 0.0:
        raise EmbeddingError("embedding has zero or non-finite norm")
    return (vec / norm).astype("<f4")


def cache_key(model_id: str, text: str) -> str:
    return hashlib.sha256(f"{model_id}\x00{text}".encode("utf-8")).hexdigest()


class EmbeddingCache:
    """Vectors keyed by sha256(model id, text), in memory and optionally on disk.

    Disk layout: ``<root>/emb/<2-char shard>/<sha256>.vec``; one JSON header
    line followed by raw little-endian float32 values.
    """

    def __init__(self, root: str | Path | None = None):
        self.root = Path(root) if root else None
        self._memory: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def _path(self, key: str) -> Path:
        assert self.root is not None
        return self.root / "emb" / key[:2] / f"{key}.vec"

    def get(self, model_id: str, text: str) -> np.ndarray | None:
        key = cache_key(model_id, text)
        with self._lock:
            vec = self._memory.get(key)
        if vec is None and self.root is not None:
            vec = self._read(self._path(key), model_id)
            if vec is not None:
                with self._lock:
                    self._memory[key] = vec
        with self._lock:
            if vec is None:
                self.misses += 1
            else:
                self.hits += 1
        return vec

    def put(self, model_id: str, text: str, vector: np.ndarray) -> None:
        key = cache_key(model_id, text)
        vector = np.asarray(vector, dtype="<f4")
        with self._lock:
            self._memory[key] = vector
        if self.root is not None:
            header = json.dumps({"dim": int(vector.size), "dtype": "<f4", "model_id": model_id},
                                sort_keys=True).encode("utf-8")
            atomic_write_bytes(self._path(key), header + b"\n" + vector.tobytes())

    @staticmethod
    def _read(path: Path, model_id: str) -> np.ndarray | None:
        try:
            raw = path.read_bytes()
        except FileNotFoundError:
            return None
        try:
            head, _, payload = raw.partition(b"\n")
            meta = json.loads(head)
            vec = np.frombuffer(payload, dtype="<f4")
            if meta.get("model_id") != model_id or vec.size != meta.get("dim"):
                raise ValueError("header mismatch")
        except ValueError:
            log.warning("ignoring corrupt cache entry %s", path)
            return None
        return vec.copy()


class Embedder:
    """Cache-first embedding of texts through a backend."""

    def __init__(self, backend: EmbeddingBackend, cache: EmbeddingCache | None = None,
                 batch_size: int = 64):
        self.backend = backend
        self.cache = cache
        self.batch_size = batch_size
        self.model_id = backend.model_id

    def embed_texts(self, texts: Sequence[str], usage=None, labels: Sequence[str] | None = None) -> list[np.ndarray]:
        out: list[np.ndarray | None] = [None] * len(texts)
        missing: list[int] = []
        for i, text in enumerate(texts):
            vec = self.cache.get(self.model_id, text) if self.cache else None
            if vec is None:
                missing.append(i)
            else:
                out[i] = vec
        for lo in range(0, len(missing), self.batch_size):
            batch = missing[lo:lo + self.batch_size]
            label = labels[batch[0]] if labels else f"text #{batch[0]}"
            try:
                raw = self.backend.embed([texts[i] for i in batch], usage=usage)
            except TransportError as exc:
                raise EmbeddingError(f"embedding failed for {label}: {exc}") from exc
            if len(raw) != len(batch):
                raise EmbeddingError(f"embedding backend returned {len(raw)} vectors for {len(batch)} inputs")
            for i, values in zip(batch, raw):
                try:
                    vec = unit_vector(values)
                except EmbeddingError as exc:
                    raise EmbeddingError(f"{label}: {exc}") from exc
                if self.cache:
                    self.cache.put(self.model_id, texts[i], vec)
                out[i] = vec
        return out  # type: ignore[return-value]


def embed(chunks: Sequence[Chunk], embedder: Embedder, usage=None) -> list[EmbeddedChunk]:
    labels = [f"chunk {c.doc_hash[:12]}#{c.index}" for c in chunks]
    vectors = embedder.embed_texts([c.text for c in chunks], usage=usage, labels=labels)
    return [EmbeddedChunk(c, v, embedder.model_id) for c, v in zip(chunks, vectors)]


# --- index ------------------------------------------------------------------


class VectorIndex:
    """Exact (flat) cosine-similarity index.

    Ties on similarity are broken by ``(doc_hash, chunk index)`` ascending.
    Entries are added before ``seal()``; afterwards the index is read-only and
    safe to query from several threads.
    """

    def __init__(self, dimension: int | None = None, model_id: str | None = None):
        self.dimension = dimension
        self.model_id = model_id
        self.entries: list[EmbeddedChunk] = []
        self._sealed = False
        self._matrix: np.ndarray | None = None
        self._hash_rank: np.ndarray | None = None
        self._chunk_index: np.ndarray | None = None
        self._doc_hashes: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def sealed(self) -> bool:
        return self._sealed

    def add(self, items: Iterable[EmbeddedChunk]) -> None:
        if self._sealed:
            raise RuntimeError("index is sealed")
        for item in items:
            dim = int(item.vector.shape[0])
            if self.dimension is None:
                self.dimension = dim
            if dim != self.dimension:
                raise ConfigurationError(f"vector dimension {dim} does not match index dimension {self.dimension}")
            if self.model_id is None:
                self.model_id = item.model_id
            if item.model_id != self.model_id:
                raise ConfigurationError(f"model {item.model_id!r} does not match index model {self.model_id!r}")
            if abs(float(np.linalg.norm(item.vector.astype(np.float64))) - 1.0) > NORM_TOLERANCE:
                raise ValueError("index vectors must be unit-normalized")
            self.entries.append(item)

    def seal(self) -> VectorIndex:
        if self._sealed:
            return self
        self._sealed = True
        if not self.entries:
            return self
        self._matrix = np.stack([e.vector.astype(np.float64) for e in self.entries])
        hashes = [e.chunk.doc_hash for e in self.entries]
        order = {h: i for i, h in enumerate(sorted(set(hashes)))}
        self._doc_hashes = np.array(hashes, dtype=object)
        self._hash_rank = np.array([order[h] for h in hashes], dtype=np.int64)
        self._chunk_index = np.array([e.chunk.index for e in self.entries], dtype=np.int64)
        return self

    def doc_hashes(self) -> set[str]:
        return {e.chunk.doc_hash for e in self.entries}

    def search(self, query: Sequence[float] | np.ndarray, k: int,
               doc_hash: str | None = None) -> list[tuple[EmbeddedChunk, float]]:
        if not self._sealed:
            raise RuntimeError("seal the index before searching")
        if k < 1:
            raise ValueError("k must be positive")
        q = np.asarray(query, dtype=np.float64)
        if self.dimension is not None and q.shape != (self.dimension,):
            raise ConfigurationError(f"query dimension {q.shape} does not match index dimension {self.dimension}")
        if not self.entries:
            return []
        norm = float(np.linalg.norm(q))
        if norm == 0.0 or not np.isfinite(norm):
            raise ValueError("query vector has zero or non-finite norm")
        assert self._matrix is not None and self._hash_rank is not None and self._chunk_index is not None
        candidates = np.arange(len(self.entries))
        if doc_hash is not None:
            candidates = candidates[self._doc_hashes == doc_hash]
            if candidates.size == 0:
                return []
        # Row-wise multiply-and-sum rather than a BLAS matmul: each row's
        # similarity is then computed identically whatever the candidate set,
        # so equal vectors always tie exactly.
        sims = np.clip((self._matrix[candidates] * (q / norm)).sum(axis=1), -1.0, 1.0)
        order = np.lexsort((self._chunk_index[candidates], self._hash_rank[candidates], -sims))
        top = order[:k]
        return [(self.entries[int(candidates[i])], float(sims[i])) for i in top]


def index_search(index: VectorIndex, query_vector: Sequence[float] | np.ndarray, k: int) -> list[tuple[EmbeddedChunk, float]]:
    return index.search(query_vector, k)


def build_index(embedded: Iterable[EmbeddedChunk], dimension: int | None = None) -> VectorIndex:
    index = VectorIndex(dimension)
    index.add(embedded)
    return index.seal()
