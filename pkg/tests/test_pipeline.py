from __future__ import annotations

import json
import time

import pytest

from ami_agent.core import Identity, default_playbook
from ami_agent.pipeline import ScreeningReport, screen, screen_batch
from ami_agent.search import SEARCH_SNAPSHOT_FILE, SearchResult, SearchSnapshot, build_query
from ami_agent.simkit import FixtureWeb, mock_llm, single_subject_corpus
from simenv import sim_backends, sim_config

NAME = "Mara Quell"


def make_snapshot(tmp_path, name=NAME, **corpus_kwargs):
    corpus = single_subject_corpus(tmp_path / f"corpus-{name}", name, **corpus_kwargs)
    out = tmp_path / "snapshot"
    FixtureWeb(corpus).write_snapshot(out)
    return out


def add_results(snapshot_dir, name, extra):
    path = snapshot_dir / SEARCH_SNAPSHOT_FILE
    snap = SearchSnapshot.load(path)
    query = build_query(Identity(name))
    snap.put(query, list(snap.entries.get(query, [])) + list(extra))
    snap.save(path)


def run(snapshot, llm, emb, name=NAME, **overrides):
    config = sim_config(snapshot, llm, emb, **overrides)
    return screen(Identity(name), default_playbook(), config, sim_backends(config))


def test_ten_documents_three_questions(tmp_path, llm_server, embed_server):
    snap = make_snapshot(tmp_path, adverse={0: "sanctions", 4: "fined"})
    report = run(snap, llm_server, embed_server)
    assert report.status == "complete"
    assert len(report.assessments) == 30
    assert len(llm_server.successful("score")) == 30
    assert len(llm_server.successful("verdict")) == 1
    assert all(d.disposition == "assessed" for d in report.documents)
    assert [d.rank for d in report.documents] == list(range(1, 11))


def test_question_means_and_verdict_follow_mock(tmp_path, llm_server, embed_server):
    snap = make_snapshot(tmp_path, n_pages=4, adverse={1: "banned"})
    report = run(snap, llm_server, embed_server)
    means = report.question_means
    assert set(means) == {"A", "B", "C"}
    for qid in means:
        scores = [a.response.score for a in report.assessments if a.question_id == qid]
        assert means[qid] == pytest.approx(sum(scores) / len(scores), abs=1e-12)
    assert report.ami_score == pytest.approx(sum(means.values()) / 3, abs=1e-12)


def test_zero_results_no_evidence(tmp_path, llm_server, embed_server):
    snap_dir = tmp_path / "snap"
    snap = SearchSnapshot()
    snap.put(build_query(Identity(NAME)), [])
    snap.save(snap_dir / SEARCH_SNAPSHOT_FILE)
    report = run(snap_dir, llm_server, embed_server)
    assert report.status == "no_evidence"
    assert report.verdict is None and report.ami_score is None
    assert llm_server.calls == []
    assert [s["mean_score"] for s in report.question_summaries] == [None, None, None]


def test_dispositions(tmp_path, llm_server, embed_server):
    snap = make_snapshot(tmp_path, statuses={3: 404})
    add_results(snap, NAME, [SearchResult("https://www.facebook.com/mara.quell", "profile", "", 11),
                             SearchResult("https://files.example.org/mara.zip", "archive", "", 12)])
    report = run(snap, llm_server, embed_server, top_n_results=12)
    dispositions = [(d.disposition, d.reason) for d in report.documents]
    assert dispositions.count(("assessed", "")) == 9
    assert dispositions[3] == ("fetch_failed", "http_404")
    assert dispositions[10:] == [("filtered", ""), ("filtered", "")]
    assert len(report.assessments) == 27


def test_report_is_deterministic(tmp_path, llm_server, embed_server):
    snap = make_snapshot(tmp_path, adverse={2: "money laundering"})
    first = run(snap, llm_server, embed_server).to_dict()
    second = run(snap, llm_server, embed_server).to_dict()
    first.pop("timing_ms"), second.pop("timing_ms")
    assert first == second


def test_report_json_roundtrip_fields(tmp_path, llm_server, embed_server):
    snap = make_snapshot(tmp_path, n_pages=2)
    report = run(snap, llm_server, embed_server)
    payload = json.loads(report.to_json())
    assert payload["schema_version"] == 1
    assert list(payload) == sorted(payload)
    assert {"identity", "documents", "assessments", "question_summaries", "verdict", "usage"} <= set(payload)


def test_usage_matches_mock_tallies(tmp_path, llm_server, embed_server):
    snap = make_snapshot(tmp_path, n_pages=5, adverse={0: "criticized"})
    usage = run(snap, llm_server, embed_server).usage
    calls = llm_server.successful()
    assert usage["llm_calls"] == len(calls) == 16
    assert usage["prompt_tokens"] == sum(c.prompt_tokens for c in calls)
    assert usage["completion_tokens"] == sum(c.completion_tokens for c in calls)
    embeds = embed_server.successful()
    assert usage["embedding_calls"] == len(embeds)
    assert usage["embedding_tokens"] == sum(c.tokens for c in embeds)
    assert usage["estimated"] is False
    assert usage["estimated_cost"] is None


def test_usage_cost_from_price_table(tmp_path, llm_server, embed_server):
    snap = make_snapshot(tmp_path, n_pages=2)
    prices = {llm_server.model: {"input_per_1k": 1.0, "output_per_1k": 2.0},
              embed_server.model: {"input_per_1k": 0.5}}
    usage = run(snap, llm_server, embed_server, price_table=prices).usage
    expected = (usage["prompt_tokens"] + 2 * usage["completion_tokens"] + 0.5 * usage["embedding_tokens"]) / 1000
    assert usage["estimated_cost"] == pytest.approx(expected)


def test_verdict_failure_keeps_evidence(tmp_path, embed_server):
    def reply(kind, messages):
        return "cannot decide" if kind == "verdict" else '{"score": 0.4, "justification": "ok"}'

    with mock_llm(reply_fn=reply) as llm:
        report = run(make_snapshot(tmp_path, n_pages=2), llm, embed_server)
    assert report.status == "verdict_failed"
    assert report.verdict is None and report.error
    assert len(report.assessments) == 6
    assert report.question_means == {"A": 0.4, "B": 0.4, "C": 0.4}


def test_all_scores_failing_is_no_evidence(tmp_path, embed_server):
    with mock_llm(reply_fn=lambda kind, messages: "garbage") as llm:
        report = run(make_snapshot(tmp_path, n_pages=2), llm, embed_server)
    assert report.status == "no_evidence"
    assert all(not a.ok for a in report.assessments)
    assert llm.successful("verdict") == []


def batch_snapshot(tmp_path, names, n_pages=3):
    out = tmp_path / "snapshot"
    snap = SearchSnapshot()
    for name in names:
        corpus = single_subject_corpus(tmp_path / "corpus", name, n_pages=n_pages)
        web = FixtureWeb(corpus)
        web.write_snapshot(out)
        part = web.snapshot()
        snap.entries.update(part.entries)
    snap.save(out / SEARCH_SNAPSHOT_FILE)
    return out


def test_batch_isolates_failures(tmp_path, llm_server, embed_server):
    snap = batch_snapshot(tmp_path, ["Ada One", "Cy Three"])
    config = sim_config(snap, llm_server, embed_server)
    ids = [Identity("Ada One"), Identity("Bo Missing"), Identity("Cy Three")]
    reports = screen_batch(ids, default_playbook(), config, sim_backends(config))
    assert [r.identity.name for r in reports] == ["Ada One", "Bo Missing", "Cy Three"]
    assert [r.status for r in reports] == ["complete", "error", "complete"]
    assert '"Bo Missing"' in reports[1].error
    assert reports[1].ami_score is None


def test_batch_empty(tmp_path, llm_server, embed_server):
    SearchSnapshot().save(tmp_path / SEARCH_SNAPSHOT_FILE)
    config = sim_config(tmp_path, llm_server, embed_server)
    assert screen_batch([], default_playbook(), config, sim_backends(config)) == []


def test_batch_concurrency_beats_sequential(tmp_path, embed_server):
    names = [f"Subject {chr(65 + i // 26)}{chr(97 + i % 26)}" for i in range(40)]
    snap = batch_snapshot(tmp_path, names, n_pages=1)
    with mock_llm(latency_s=0.02) as llm:
        config = sim_config(snap, llm, embed_server, max_concurrency=4)
        backends = sim_backends(config)
        sequential = 0.0
        for name in names:
            started = time.perf_counter()
            screen(Identity(name), default_playbook(), config, backends)
            sequential += time.perf_counter() - started
        started = time.perf_counter()
        reports = screen_batch([Identity(n) for n in names], default_playbook(), config, backends)
        batch = time.perf_counter() - started
    assert len(reports) == 40
    assert [r.identity.name for r in reports] == names
    assert all(r.status == "complete" for r in reports)
    assert batch < 2 * sequential
    assert batch <= 0.5 * sequential


def test_report_write(tmp_path, llm_server, embed_server):
    report = run(make_snapshot(tmp_path, n_pages=1), llm_server, embed_server)
    report.write(tmp_path / "r.json")
    assert (tmp_path / "r.json").read_text(encoding="utf-8") == report.to_json()
    assert isinstance(report, ScreeningReport)
