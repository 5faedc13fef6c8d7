from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ami_agent.backends import EmbeddingClient, UsageMeter
from ami_agent.core import RunConfig
from ami_agent.docproc import (
    Chunk,
    EmbeddedChunk,
    Embedder,
    EmbeddingCache,
    VectorIndex,
    build_index,
    cache_key,
    chunk_text,
    consumed_length,
    embed,
    unit_vector,
)
from ami_agent.errors import ConfigurationError, EmbeddingError, TransportError
from ami_agent.simkit import hashed_embedding
from oracles import brute_force_top_k, reference_split, sliding_window_spans


class HashBackend:
    model_id = "hash-64"

    def __init__(self, dimension: int = 64, fail: bool = False):
        self.dimension = dimension
        self.fail = fail
        self.calls: list[list[str]] = []

    def embed(self, texts, usage=None):
        if self.fail:
            raise TransportError("down")
        self.calls.append(list(texts))
        return [hashed_embedding(t, self.dimension) for t in texts]


# --- chunking -------------------------------------------------------------------


def test_short_text_single_chunk():
    [c] = chunk_text("hello world", 4000, 400)
    assert c.char_span == (0, 11) and c.text == "hello world"


def test_sliding_window_example():
    text = "abcdefghijklmnopqrstuvwxyz01"
    assert len(text) == 28
    assert [c.char_span for c in chunk_text(text, 10, 1)] == [(0, 10), (9, 19), (18, 28)]


def test_paragraph_break_example():
    chunks = chunk_text("aa\n\nbb", 4, 0)
    assert [c.text for c in chunks] == ["aa", "bb"]
    assert [c.char_span for c in chunks] == [(0, 4), (4, 6)]


@pytest.mark.parametrize("sep, consumed", [("\n\n", 2), ("\n", 1), (". ", 1), (" ", 1)])
def test_consumed_length(sep, consumed):
    assert consumed_length(sep) == consumed


def test_sentence_separator_keeps_period():
    chunks = chunk_text("One two. Three four", 12, 0)
    assert chunks[0].text == "One two."
    assert chunks[1].text == "Three four"


def test_separator_priority():
    # A later single newline loses to an earlier paragraph break in the same window.
    text = "ab\n\ncd\nef gh"
    first = chunk_text(text, 10, 0)[0]
    assert first.text == "ab" and first.char_span == (0, 4)


def test_separator_inside_overlap_is_ignored():
    # The only separator sits within the overlap zone, so the window is hard cut.
    text = "a bcdefghijklmnop"
    assert chunk_text(text, 8, 3)[0].char_span == (0, 8)


@pytest.mark.parametrize("chunk, overlap", [(0, 0), (5, 5), (5, -1)])
def test_invalid_parameters(chunk, overlap):
    with pytest.raises(ValueError):
        chunk_text("abc", chunk, overlap)


def test_empty_text_rejected():
    with pytest.raises(ValueError):
        chunk_text("", 10, 1)


def test_default_sizes_from_config():
    api = RunConfig()
    local = RunConfig(chunk_size_tokens=500)
    assert (api.chunk_chars, api.overlap_chars) == (4000, 400)
    assert (local.chunk_chars, local.overlap_chars) == (2000, 200)


def check_chunk_invariants(text, chunks, chunk, overlap):
    n = len(text)
    assert chunks[0].char_span[0] == 0 and chunks[-1].char_span[1] == n
    assert [c.index for c in chunks] == list(range(len(chunks)))
    for a, b in zip(chunks, chunks[1:]):
        assert a.char_span[1] - b.char_span[0] == overlap
    for c in chunks:
        s, e = c.char_span
        assert 0 < len(c.text) <= chunk and e - s <= chunk
        assert text[s:e].startswith(c.text)
        assert text[s + len(c.text):e].isspace() or s + len(c.text) == e
    rebuilt = text[slice(*chunks[0].char_span)] + "".join(text[c.char_span[0] + overlap:c.char_span[1]]
                                                        for c in chunks[1:])
    assert rebuilt == text


@given(st.integers(1, 400), st.data())
def test_no_separator_matches_sliding_window(n, data):
    chunk = data.draw(st.integers(2, 60))
    overlap = data.draw(st.integers(0, chunk - 1))
    text = "".join(chr(ord("a") + i % 26) for i in range(n))
    chunks = chunk_text(text, chunk, overlap)
    assert [c.char_span for c in chunks] == sliding_window_spans(n, chunk, overlap)
    assert "".join(text[c.char_span[0] + (overlap if c.index else 0):c.char_span[1]] for c in chunks) == text


separator_text = st.text(alphabet=st.sampled_from(list("ab.") + [" ", "\n"]), min_size=1, max_size=300)


@settings(max_examples=300)
@given(separator_text, st.data())
def test_separator_splitting_matches_reference(text, data):
    chunk = data.draw(st.integers(2, 40))
    overlap = data.draw(st.integers(0, chunk - 1))
    chunks = chunk_text(text, chunk, overlap)
    assert [(c.char_span, c.text) for c in chunks] == reference_split(text, chunk, overlap)
    check_chunk_invariants(text, chunks, chunk, overlap)


def test_chunk_rejects_empty_text():
    with pytest.raises(ValueError):
        Chunk("h", 0, "", (0, 1))


# --- embedding and cache ----------------------------------------------------------


def test_unit_vector_normalizes_to_float32():
    v = unit_vector([3.0, 4.0])
    assert v.dtype == np.dtype("<f4")
    assert abs(float(np.linalg.norm(v.astype(np.float64))) - 1.0) <= 1e-6


@pytest.mark.parametrize("bad", [[0.0, 0.0], [float("nan"), 1.0], []])
def test_unit_vector_rejects_degenerate(bad):
    with pytest.raises(EmbeddingError):
        unit_vector(bad)


def test_cache_key_separates_model_and_text():
    assert cache_key("m", "ab") != cache_key("ma", "b")


def test_cache_hit_is_bit_identical(tmp_path):
    backend = HashBackend()
    embedder = Embedder(backend, EmbeddingCache(tmp_path))
    first = embedder.embed_texts(["same text"])[0]
    second = embedder.embed_texts(["same text"])[0]
    assert first.tobytes() == second.tobytes()
    assert backend.calls == [["same text"]]
    fresh = Embedder(HashBackend(fail=True), EmbeddingCache(tmp_path)).embed_texts(["same text"])[0]
    assert fresh.tobytes() == first.tobytes()
    files = list((tmp_path / "emb").rglob("*.vec"))
    assert len(files) == 1 and files[0].parent.name == files[0].name[:2]


def test_corrupt_cache_entry_is_recomputed(tmp_path):
    Embedder(HashBackend(), EmbeddingCache(tmp_path)).embed_texts(["t"])
    [path] = list((tmp_path / "emb").rglob("*.vec"))
    path.write_bytes(b"garbage")
    backend = HashBackend()
    Embedder(backend, EmbeddingCache(tmp_path)).embed_texts(["t"])
    assert backend.calls == [["t"]]


def test_embedding_failure_names_chunk():
    chunks = chunk_text("some text here", 100, 10, doc_hash="abcdef123456789")
    with pytest.raises(EmbeddingError, match="abcdef123456#0"):
        embed(chunks, Embedder(HashBackend(fail=True)))


def test_embedding_client_against_mock(embed_server):
    usage = UsageMeter()
    client = EmbeddingClient(embed_server.base_url, embed_server.model, backoff_base=0.0)
    vectors = client.embed(["alpha", "beta"], usage=usage)
    assert vectors[0] == pytest.approx(hashed_embedding("alpha"))
    assert usage.to_dict()["embedding_tokens"] == 3  # ceil(5/4) + ceil(4/4)


def test_embedding_client_retries_transport(embed_server):
    embed_server.transport_remaining = 2
    client = EmbeddingClient(embed_server.base_url, embed_server.model, backoff_base=0.0)
    assert len(client.embed(["x"])) == 1
    embed_server.transport_remaining = 3
    with pytest.raises(TransportError):
        client.embed(["x"])


# --- index ---------------------------------------------------------------------


def entry(vec, doc="d", index=0, model="m") -> EmbeddedChunk:
    return EmbeddedChunk(Chunk(doc, index, f"{doc}{index}", (0, 1)), unit_vector(vec), model)


def test_orthonormal_basis():
    idx = build_index([entry(np.eye(4)[i], index=i) for i in range(4)])
    [(hit, sim)] = idx.search(np.eye(4)[1], 1)
    assert hit.chunk.index == 1 and sim == 1.0


def test_k_larger_than_index_returns_all_sorted():
    rng = np.random.default_rng(3)
    idx = build_index([entry(rng.standard_normal(8), index=i) for i in range(5)])
    hits = idx.search(rng.standard_normal(8), 50)
    sims = [s for _, s in hits]
    assert len(hits) == 5 and sims == sorted(sims, reverse=True)


def test_ties_broken_by_doc_hash_then_index():
    v = [1.0, 0.0]
    idx = build_index([entry(v, "b", 0), entry(v, "a", 1), entry(v, "a", 0), entry([0.0, 1.0], "0", 0)])
    assert [e.chunk.ref for e, _ in idx.search(v, 3)] == [("a", 0), ("a", 1), ("b", 0)]


def test_doc_filter():
    idx = build_index([entry([1, 0], "a", 0), entry([0.9, 0.1], "b", 0), entry([0, 1], "b", 1)])
    assert [e.chunk.ref for e, _ in idx.search([1, 0], 5, doc_hash="b")] == [("b", 0), ("b", 1)]
    assert idx.search([1, 0], 5, doc_hash="zzz") == []


def test_dimension_and_model_mismatch():
    idx = VectorIndex()
    idx.add([entry([1, 0, 0])])
    with pytest.raises(ConfigurationError):
        idx.add([entry([1, 0])])
    with pytest.raises(ConfigurationError):
        idx.add([entry([1, 0, 0], model="other")])
    idx.seal()
    with pytest.raises(ConfigurationError):
        idx.search([1, 0], 1)


def test_index_requires_seal_and_unit_vectors():
    idx = VectorIndex()
    with pytest.raises(ValueError):
        idx.add([EmbeddedChunk(Chunk("d", 0, "x", (0, 1)), np.array([2.0, 0.0], dtype="<f4"), "m")])
    idx.add([entry([1, 0])])
    with pytest.raises(RuntimeError):
        idx.search([1, 0], 1)
    idx.seal()
    with pytest.raises(RuntimeError):
        idx.add([entry([0, 1])])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 30), st.integers(1, 40))
def test_search_matches_brute_force(seed, n, k):
    rng = np.random.default_rng(seed)
    # Few distinct vectors among many entries so exact ties are common.
    base = rng.standard_normal((max(1, n // 3), 6))
    items = [entry(base[rng.integers(len(base))], f"doc{rng.integers(4)}", i) for i in range(n)]
    idx = build_index(items)
    q = rng.standard_normal(6)
    vectors = [it.vector.astype(np.float64) for it in items]
    expected = brute_force_top_k(vectors, [it.chunk.doc_hash for it in items], [it.chunk.index for it in items], q, k)
    got = idx.search(q, k)
    assert [e.chunk.ref for e, _ in got] == [items[i].chunk.ref for i, _ in expected]
    assert [s for _, s in got] == pytest.approx([s for _, s in expected], abs=1e-12)
    assert all(-1.0 <= s <= 1.0 for _, s in got)


def test_cache_transparency(tmp_path):
    text = "\n\n".join(f"Paragraph {i} mentions topic {i % 5} and item {i * 7}." for i in range(60))
    chunks = chunk_text(text, 200, 20, doc_hash="doc")
    queries = ["topic 3 item", "paragraph 12", "item 49"]

    def results(embedder):
        idx = build_index(embed(chunks, embedder))
        qv = embedder.embed_texts(queries)
        return [[(e.chunk.ref, s) for e, s in idx.search(v, 5)] for v in qv]

    plain = results(Embedder(HashBackend()))
    cached = Embedder(HashBackend(), EmbeddingCache(tmp_path))
    assert results(cached) == plain
    assert results(cached) == plain  # second pass served from cache
    assert cached.cache.hits >= len(chunks)
