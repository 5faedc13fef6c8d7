from __future__ import annotations

import json

import httpx
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ami_agent.core import Identity
from ami_agent.errors import RateLimitError, SnapshotFormatError, SnapshotMissError, TransportError
from ami_agent.search import (
    GoogleSearchProvider,
    RecordingSearchProvider,
    SearchResult,
    SearchSnapshot,
    SnapshotSearchProvider,
    build_query,
    canonical_query,
    filter_results,
    host_matches,
    record_snapshot,
)


def results_for(*hosts: str) -> list[SearchResult]:
    return [SearchResult(f"https://{h}/page{i}", f"t{i}", f"s{i}", i) for i, h in enumerate(hosts, start=1)]


class FakeProvider:
    provider_id = "fake"

    def __init__(self, hits: dict[str, list[SearchResult]], fail_on: str | None = None):
        self.hits = hits
        self.fail_on = fail_on
        self.calls: list[str] = []

    def search(self, query: str, n: int) -> list[SearchResult]:
        self.calls.append(query)
        if query == self.fail_on:
            raise TransportError("boom")
        return self.hits.get(query, [])[:n]


@pytest.mark.parametrize("identity, expected", [
    (Identity("Jane Roe"), '"Jane Roe"'),
    (Identity("Jane Roe", attributes={"country": "FR"}), '"Jane Roe" FR'),
    (Identity('Jane "JR" Roe'), '"Jane JR Roe"'),
    (Identity("Jane Roe", attributes={"z": "last", "a": "first"}), '"Jane Roe" first last'),
])
def test_build_query(identity, expected):
    assert build_query(identity) == expected


def test_canonical_query_collapses_whitespace_keeps_case():
    assert canonical_query('  "Jane   Roe"\tFR ') == '"Jane Roe" FR'


@pytest.mark.parametrize("host, pattern, expected", [
    ("facebook.com", "facebook.com", True),
    ("www.facebook.com", "facebook.com", True),
    ("notfacebook.com", "facebook.com", False),
    ("www.linkedin.com", "*.linkedin.com", True),
    ("linkedin.com", "*.linkedin.com", False),
    ("WWW.LinkedIn.COM", "*.linkedin.com", True),
    ("example.com", "", False),
])
def test_host_matches(host, pattern, expected):
    assert host_matches(host, pattern) is expected


def test_filter_direct_match():
    kept = filter_results(results_for("example.com", "facebook.com"), ["facebook.com"])
    assert [r.host for r in kept] == ["example.com"]


def test_filter_keeps_ranks_and_empty_blocklist_is_identity():
    res = results_for("a.com", "facebook.com", "b.com")
    assert [r.rank for r in filter_results(res, ["facebook.com"])] == [1, 3]
    assert filter_results(res, []) == res


def test_filter_extensions():
    res = [SearchResult("https://a.com/file.ZIP", "", "", 1), SearchResult("https://a.com/report.pdf", "", "", 2),
           SearchResult("https://a.com/page", "", "", 3)]
    assert [r.rank for r in filter_results(res, [], [".zip"])] == [2, 3]


hosts = st.lists(st.sampled_from(["a.com", "www.a.com", "b.org", "x.b.org", "c.net", "facebook.com"]), max_size=12)
patterns = st.lists(st.sampled_from(["a.com", "*.b.org", "facebook.com", "c.net", "*.a.com"]), max_size=3)


@given(hosts, patterns)
def test_filter_idempotent_and_order_preserving(hs, blocklist):
    res = results_for(*hs)
    once = filter_results(res, blocklist)
    assert filter_results(once, blocklist) == once
    it = iter(res)
    assert all(any(r == x for x in it) for r in once)  # subsequence
    assert not any(host_matches(r.host, p) for r in once for p in blocklist)


def test_search_result_validation():
    with pytest.raises(ValueError):
        SearchResult("ftp://a.com/x", "", "", 1)
    with pytest.raises(ValueError):
        SearchResult("https://a.com/x", "", "", 0)


def test_snapshot_replay_verbatim_and_under_supply():
    snap = SearchSnapshot(provider_id="p", created_at="2000-01-01T00:00:00Z")
    ten = results_for(*[f"h{i}.com" for i in range(10)])
    snap.put('"Jane Roe"', ten)
    snap.put('"Three Hits"', ten[:3])
    provider = SnapshotSearchProvider(snap)
    assert provider.search('"Jane Roe"', 10) == ten
    assert provider.search('  "Jane   Roe" ', 10) == ten
    assert provider.search('"Three Hits"', 10) == ten[:3]
    assert provider.search('"Jane Roe"', 4) == ten[:4]


def test_snapshot_miss_is_an_error():
    provider = SnapshotSearchProvider(SearchSnapshot())
    with pytest.raises(SnapshotMissError, match="Nobody"):
        provider.search('"Nobody"', 10)


def test_record_then_replay_byte_identical(tmp_path):
    hits = {'"A B"': results_for("a.com", "b.com"), '"C D"': results_for("c.net")}
    out = tmp_path / "search.json"
    snap = record_snapshot(list(hits), 10, out, FakeProvider(hits))
    assert len(snap.entries) == 2
    first = out.read_bytes()
    replay = SnapshotSearchProvider.from_path(out)
    for q, rs in hits.items():
        assert replay.search(q, 10) == rs
    assert SearchSnapshot.load(out).to_json().encode() == first
    data = json.loads(first)
    assert set(data) == {"created_at", "entries", "provider_id", "schema_version"}
    assert list(data["entries"]) == sorted(data["entries"])


def test_rerecord_overwrites_entry(tmp_path):
    out = tmp_path / "search.json"
    record_snapshot(['"A B"'], 10, out, FakeProvider({'"A B"': results_for("a.com")}))
    snap = record_snapshot(['"A B"'], 10, out, FakeProvider({'"A B"': results_for("z.com", "y.com")}))
    assert list(snap.entries) == ['"A B"']
    assert [r.host for r in SearchSnapshot.load(out).entries['"A B"']] == ["z.com", "y.com"]


def test_record_failure_leaves_no_file(tmp_path):
    out = tmp_path / "search.json"
    with pytest.raises(TransportError):
        record_snapshot(['"A"', '"B"'], 10, out, FakeProvider({}, fail_on='"B"'))
    assert not out.exists()
    assert list(tmp_path.iterdir()) == []


def test_recording_provider_writes_through(tmp_path):
    out = tmp_path / "snap" / "search.json"
    rec = RecordingSearchProvider(FakeProvider({'"A"': results_for("a.com")}), out)
    rec.search('"A"', 5)
    assert SnapshotSearchProvider.from_path(out).search('"A"', 5) == results_for("a.com")


@pytest.mark.parametrize("content", ["not json", '{"entries": {}}', '{"schema_version": 1, "entries": {"q": [{"rank": 1}]}}'])
def test_corrupt_snapshot(tmp_path, content):
    path = tmp_path / "search.json"
    path.write_text(content)
    with pytest.raises(SnapshotFormatError, match="search.json"):
        SearchSnapshot.load(path)


def google(handler) -> GoogleSearchProvider:
    return GoogleSearchProvider("key", "cx", "https://search.test/v1", client=httpx.Client(transport=httpx.MockTransport(handler)))


def test_google_provider_parses_items():
    seen = {}

    def handler(request: httpx.Request) -> httpx.Response:
        seen.update(request.url.params)
        items = [{"link": "https://a.com/1", "title": "A", "snippet": "sa"},
                 {"link": "mailto:x@y.z", "title": "bad"},
                 {"link": "https://b.com/2", "title": "B", "snippet": "sb"}]
        return httpx.Response(200, json={"items": items})

    res = google(handler).search('"Jane Roe"', 25)
    assert seen == {"key": "key", "cx": "cx", "q": '"Jane Roe"', "num": "10"}
    assert [(r.url, r.rank) for r in res] == [("https://a.com/1", 1), ("https://b.com/2", 2)]


def test_google_provider_no_items():
    assert google(lambda r: httpx.Response(200, json={})).search("q", 10) == []


@pytest.mark.parametrize("status, body, exc", [
    (429, "slow down", RateLimitError),
    (403, "Daily Limit Exceeded", RateLimitError),
    (500, "oops", TransportError),
    (400, "bad", TransportError),
])
def test_google_provider_errors(status, body, exc):
    with pytest.raises(exc):
        google(lambda r: httpx.Response(status, text=body)).search("q", 10)


def test_google_provider_transport_failure():
    def handler(request):
        raise httpx.ConnectError("down")

    with pytest.raises(TransportError):
        google(handler).search("q", 10)
