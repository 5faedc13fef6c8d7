"""End-to-end screening: search, filter, crawl, index, playbook, verdict."""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ami_agent.agent import ChatBackend, DocumentAssessment, Evidence, run_playbook
from ami_agent.backends import ChatClient, EmbeddingClient, UsageMeter
from ami_agent.core import Identity, Playbook, RunConfig, config_digest
from ami_agent.crawler import PageSource, WebDocument, crawl, page_source_for
from ami_agent.docproc import Embedder, EmbeddingCache, VectorIndex, chunk_text, embed
from ami_agent.errors import AMIError, ConfigurationError, EmbeddingError, ScoreParseError, TransportError
from ami_agent.search import (
    SEARCH_SNAPSHOT_FILE,
    GoogleSearchProvider,
    RecordingSearchProvider,
    SearchProvider,
    SearchResult,
    SnapshotSearchProvider,
    build_query,
    filter_results,
)
from ami_agent.verdict import Verdict, generate_verdict

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

ENV_VARS = {
    "AMI_SEARCH_API_KEY": "search_api_key",
    "AMI_SEARCH_ENGINE_ID": "search_engine_id",
    "AMI_SEARCH_BASE_URL": "search_base_url",
    "AMI_LLM_BASE_URL": "llm_base_url",
    "AMI_LLM_API_KEY": "llm_api_key",
    "AMI_LLM_MODEL": "llm_model",
    "AMI_EMBED_BASE_URL": "embed_base_url",
    "AMI_EMBED_API_KEY": "embed_api_key",
    "AMI_EMBED_MODEL": "embed_model",
    "AMI_HTTP_PROXY": "http_proxy",
}
FIELD_ENV = {v: k for k, v in ENV_VARS.items()}


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    return {name: environ[var] for var, name in ENV_VARS.items() if environ.get(var)}


def _require(config: RunConfig, *names: str) -> None:
    for name in names:
        if not getattr(config, name):
            raise ConfigurationError(f"missing {name.replace('_', ' ')}: set {FIELD_ENV[name]}")


@dataclass
class Backends:
    search: SearchProvider
    pages: PageSource
    llm: ChatBackend
    embedder: Embedder

    @classmethod
    def from_config(cls, config: RunConfig) -> Backends:
        return cls(search=search_provider_for(config), pages=page_source_for(config),
                   llm=chat_client_for(config), embedder=embedder_for(config))


def search_provider_for(config: RunConfig) -> SearchProvider:
    if config.snapshot_path and config.snapshot_mode == "replay":
        return SnapshotSearchProvider.from_path(Path(config.snapshot_path) / SEARCH_SNAPSHOT_FILE)
    _require(config, "search_api_key", "search_engine_id")
    live = GoogleSearchProvider(config.search_api_key, config.search_engine_id, config.search_base_url)  # type: ignore[arg-type]
    if config.snapshot_path:
        return RecordingSearchProvider(live, Path(config.snapshot_path) / SEARCH_SNAPSHOT_FILE)
    return live


def chat_client_for(config: RunConfig) -> ChatClient:
    _require(config, "llm_base_url", "llm_model")
    return ChatClient(config.llm_base_url, config.llm_model, config.llm_api_key,  # type: ignore[arg-type]
                      temperature=config.llm_temperature, attempts=config.transport_attempts,
                      backoff_base=config.backoff_base_s, timeout=config.request_timeout_s)


def embedder_for(config: RunConfig) -> Embedder:
    _require(config, "embed_base_url", "embed_model")
    client = EmbeddingClient(config.embed_base_url, config.embed_model, config.embed_api_key,  # type: ignore[arg-type]
                             attempts=config.transport_attempts, backoff_base=config.backoff_base_s,
                             timeout=config.request_timeout_s)
    return Embedder(client, EmbeddingCache(config.cache_dir))


@dataclass
class DocumentRecord:
    url: str
    rank: int
    title: str | None
    snippet: str
    disposition: str  # filtered | fetch_failed | assessed
    reason: str = ""
    retrieved_at: str = ""
    content_hash: str = ""

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


@dataclass
class ScreeningReport:
    identity: Identity
    playbook_name: str
    config_digest: str
    status: str  # complete | no_evidence | verdict_failed | error
    documents: list[DocumentRecord] = field(default_factory=list)
    assessments: list[DocumentAssessment] = field(default_factory=list)
    question_summaries: list[dict[str, Any]] = field(default_factory=list)
    verdict: Verdict | None = None
    timing_ms: int = 0
    usage: dict[str, Any] = field(default_factory=dict)
    error: str = ""

    @property
    def ami_score(self) -> float | None:
        return self.verdict.ami_score if self.verdict else None

    @property
    def question_means(self) -> dict[str, float | None]:
        return {s["question_id"]: s["mean_score"] for s in self.question_summaries}

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "identity": self.identity.to_dict(),
            "playbook_name": self.playbook_name,
            "config_digest": self.config_digest,
            "status": self.status,
            "error": self.error,
            "documents": [d.to_dict() for d in self.documents],
            "assessments": [a.to_dict() for a in self.assessments],
            "question_summaries": self.question_summaries,
            "verdict": self.verdict.to_dict() if self.verdict else None,
            "timing_ms": self.timing_ms,
            "usage": self.usage,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, ensure_ascii=False) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


def _summaries(playbook: Playbook, evidence: Evidence | None) -> list[dict[str, Any]]:
    out = []
    for q in playbook.questions:
        group = evidence.per_question.get(q.id, []) if evidence else []
        ok = sum(1 for a in group if a.ok)
        out.append({
            "question_id": q.id,
            "mean_score": evidence.question_means.get(q.id) if evidence else None,
            "n_assessed": ok,
            "n_failed": len(group) - ok,
        })
    return out


def build_document_index(
    documents: Sequence[WebDocument], config: RunConfig, embedder: Embedder, usage: UsageMeter | None = None,
) -> VectorIndex:
    """Chunk and embed each distinct fetched document into a fresh index.

    A document whose chunks cannot be embedded is left out; its assessments
    then fail with ``no_chunks``.
    """
    index = VectorIndex(model_id=embedder.model_id)
    seen: set[str] = set()
    for doc in documents:
        if not doc.fetched or doc.content_hash in seen:
            continue
        seen.add(doc.content_hash)
        chunks = chunk_text(doc.text, config.chunk_chars, config.overlap_chars, doc.content_hash, doc.url)
        try:
            index.add(embed(chunks, embedder, usage=usage))
        except EmbeddingError as exc:
            log.warning("dropping %s from the index: %s", doc.url, exc)
    return index.seal()


def screen(
    identity: Identity,
    playbook: Playbook,
    config: RunConfig,
    backends: Backends,
    clock: Callable[[], float] = time.perf_counter,
) -> ScreeningReport:
    """Run the full protocol for one subject.

    Search failures abort (there is nothing to score); every later failure is
    recorded per document or per assessment.
    """
    started = clock()
    usage = UsageMeter()
    digest = config_digest(config)

    results = backends.search.search(build_query(identity), config.top_n_results)
    kept = filter_results(results, config.domain_blocklist, config.blocked_extensions)
    crawled = crawl(kept, config, backends.pages)
    by_url = {d.url: d for d in crawled}

    records = []
    kept_urls = {r.url for r in kept}
    for r in results:
        doc = by_url.get(r.url) if r.url in kept_urls else None
        if doc is None:
            records.append(DocumentRecord(r.url, r.rank, r.title, r.snippet, "filtered"))
        elif not doc.fetched:
            records.append(DocumentRecord(r.url, r.rank, r.title, r.snippet, "fetch_failed",
                                          reason=doc.reason, retrieved_at=doc.retrieved_at))
        else:
            records.append(DocumentRecord(r.url, r.rank, doc.title or r.title, r.snippet, "assessed",
                                          retrieved_at=doc.retrieved_at, content_hash=doc.content_hash))

    fetched = [d for d in crawled if d.fetched]
    index = build_document_index(fetched, config, backends.embedder, usage)
    evidence = run_playbook(identity, playbook, fetched, index, backends.llm, backends.embedder, config, usage)

    verdict = None
    error = ""
    if not evidence.successful:
        status = "no_evidence"
    else:
        try:
            verdict = generate_verdict(evidence, playbook, backends.llm, config.parse_retries,
                                       config.verdict_budget_chars, usage)
            status = "complete"
        except (ScoreParseError, TransportError) as exc:
            log.warning("verdict failed for %s: %s", identity.name, exc)
            status = "verdict_failed"
            error = str(exc)

    return ScreeningReport(
        identity=identity,
        playbook_name=playbook.name,
        config_digest=digest,
        status=status,
        documents=records,
        assessments=evidence.assessments,
        question_summaries=_summaries(playbook, evidence),
        verdict=verdict,
        timing_ms=int(round((clock() - started) * 1000)),
        usage=usage.to_dict(config.price_table),
        error=error,
    )


def error_report(identity: Identity, playbook: Playbook, config: RunConfig, exc: BaseException) -> ScreeningReport:
    return ScreeningReport(identity=identity, playbook_name=playbook.name, config_digest=config_digest(config),
                           status="error", question_summaries=_summaries(playbook, None),
                           usage=UsageMeter().to_dict(config.price_table), error=f"{type(exc).__name__}: {exc}")


def screen_batch(
    identities: Sequence[Identity],
    playbook: Playbook,
    config: RunConfig,
    backends: Backends,
) -> list[ScreeningReport]:
    """Screen many subjects concurrently; output order follows input order and a
    failure for one subject becomes an ``error`` report for that subject only."""
    total = len(identities)
    if not total:
        return []
    done = 0
    lock = threading.Lock()

    def one(identity: Identity) -> ScreeningReport:
        nonlocal done
        try:
            report = screen(identity, playbook, config, backends)
        except AMIError as exc:
            log.error("screening %r failed: %s", identity.name, exc)
            report = error_report(identity, playbook, config, exc)
        except Exception as exc:  # noqa: BLE001 - one subject must not sink the batch
            log.exception("unexpected failure screening %r", identity.name)
            report = error_report(identity, playbook, config, exc)
        with lock:
            done += 1
            log.info("screened %d/%d: %s -> %s", done, total, identity.name, report.status)
        return report

    with ThreadPoolExecutor(max_workers=min(config.max_concurrency, total)) as pool:
        return list(pool.map(one, identities))
