"""Playbook execution: per-(question, document) retrieval and LLM scoring."""

from __future__ import annotations

import json
import logging
import math
import re
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Protocol

import numpy as np

from ami_agent.backends import Message, UsageMeter
from ami_agent.core import Identity, Playbook, Question, RunConfig, render_question
from ami_agent.crawler import WebDocument
from ami_agent.docproc import Embedder, VectorIndex
from ami_agent.errors import EmbeddingError, NoChunksError, ScoreParseError, TransportError

log = logging.getLogger(__name__)

CONTEXT_OPEN = "<context>"
CONTEXT_CLOSE = "</context>"

SCORE_SYSTEM_PROMPT = (
    "You are a compliance analyst performing adverse media screening for anti-money "
    "laundering due diligence. Answer the question using only the document excerpts "
    "given as context. Reply with a single JSON object and nothing else, of the form "
    '{{"score": <number from {lo} to {hi}>, "justification": "<short explanation citing the excerpts>"}}.'
)

REPAIR_PROMPT = (
    "Your previous reply could not be used: {problem}. Reply again with only a JSON "
    'object containing exactly the keys "score" (a number from {lo} to {hi}) and '
    '"justification" (a non-empty string).'
)


class ChatBackend(Protocol):
    model: str

    def complete(self, messages: Sequence[Message], usage: UsageMeter | None = None) -> str: ...


@dataclass(frozen=True)
class ScoreResponse:
    score: float
    justification: str
    raw: str
    retries_used: int = 0
    raw_score: float | None = None
    warnings: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "score": self.score,
            "raw_score": self.raw_score,
            "justification": self.justification,
            "raw": self.raw,
            "retries_used": self.retries_used,
            "warnings": list(self.warnings),
        }


@dataclass(frozen=True)
class DocumentAssessment:
    question_id: str
    doc_url: str
    doc_hash: str
    response: ScoreResponse | None
    chunk_refs: tuple[tuple[str, int], ...] = ()
    reason: str = ""
    raw: str = ""

    @property
    def ok(self) -> bool:
        return self.response is not None

    @property
    def status(self) -> str:
        return "ok" if self.ok else "failed"

    def to_dict(self) -> dict[str, Any]:
        return {
            "question_id": self.question_id,
            "doc_url": self.doc_url,
            "doc_hash": self.doc_hash,
            "status": self.status,
            "reason": self.reason,
            "response": self.response.to_dict() if self.response else None,
            "raw": self.raw,
            "chunk_refs": [list(r) for r in self.chunk_refs],
        }


@dataclass
class Evidence:
    identity: Identity
    per_question: dict[str, list[DocumentAssessment]] = field(default_factory=dict)
    question_means: dict[str, float | None] = field(default_factory=dict)

    @property
    def assessments(self) -> list[DocumentAssessment]:
        items = [a for group in self.per_question.values() for a in group]
        return sorted(items, key=lambda a: (a.question_id, a.doc_url))

    @property
    def successful(self) -> list[DocumentAssessment]:
        return [a for a in self.assessments if a.ok]

    def recompute_means(self, question_ids: Sequence[str] | None = None) -> None:
        ids = list(question_ids) if question_ids is not None else list(self.per_question)
        self.question_means = {q: mean_or_none(a.response.score for a in self.per_question.get(q, []) if a.response)
                               for q in ids}


def mean_or_none(values) -> float | None:
    values = list(values)
    if not values:
        return None
    return math.fsum(values) / len(values)


# --- structured output -------------------------------------------------------

_FENCE = re.compile(r"^```[a-zA-Z0-9_-]*\s*\n?(.*?)\n?```$", re.S)


def strip_code_fences(raw: str) -> str:
    text = raw.strip()
    m = _FENCE.match(text)
    return m.group(1).strip() if m else text


def parse_score_reply(raw: str, scale: tuple[float, float] = (0.0, 1.0)) -> tuple[float, str, list[str]]:
    """Parse ``{"score": number, "justification": string}``.

    Returns ``(score clamped to scale, justification, warnings)`` and raises
    ValueError describing the problem otherwise.
    """
    try:
        data = json.loads(strip_code_fences(raw))
    except ValueError as exc:
        raise ValueError(f"reply is not valid JSON ({exc.args[0] if exc.args else exc})") from None
    if not isinstance(data, dict):
        raise ValueError("reply is not a JSON object")
    if set(data) != {"score", "justification"}:
        raise ValueError(f"expected keys score and justification, got {sorted(data)}")
    score = data["score"]
    if isinstance(score, bool) or not isinstance(score, (int, float)) or not math.isfinite(score):
        raise ValueError("score is not a finite number")
    justification = data["justification"]
    if not isinstance(justification, str) or not justification.strip():
        raise ValueError("justification is empty")
    lo, hi = scale
    warnings = []
    clamped = min(max(float(score), lo), hi)
    if clamped != score:
        warnings.append(f"score {score} outside [{lo}, {hi}]; clamped to {clamped}")
    return clamped, justification.strip(), warnings


def request_score(
    llm: ChatBackend,
    messages: list[Message],
    scale: tuple[float, float],
    retries: int,
    usage: UsageMeter | None = None,
) -> ScoreResponse:
    """Ask for a JSON score, re-prompting up to ``retries`` times on bad output.

    Raises ScoreParseError (carrying the last raw reply) once repairs are
    exhausted; TransportError from the client propagates untouched.
    """
    lo, hi = scale
    convo = list(messages)
    raw = ""
    for attempt in range(retries + 1):
        raw = llm.complete(convo, usage=usage)
        try:
            value, justification, warnings = parse_score_reply(raw, scale)
        except ValueError as exc:
            log.debug("unparseable reply (attempt %d): %s", attempt + 1, exc)
            convo = convo + [
                {"role": "assistant", "content": raw},
                {"role": "user", "content": REPAIR_PROMPT.format(problem=exc, lo=lo, hi=hi)},
            ]
            problem = str(exc)
            continue
        for w in warnings:
            log.warning(w)
        normalized = (value - lo) / (hi - lo)
        return ScoreResponse(score=normalized, raw_score=value, justification=justification, raw=raw,
                             retries_used=attempt, warnings=tuple(warnings))
    raise ScoreParseError(f"no parseable score after {retries + 1} attempts: {problem}", raw, retries)


def score_messages(context: str, question_prompt: str, scale: tuple[float, float]) -> list[Message]:
    lo, hi = scale
    return [
        {"role": "system", "content": SCORE_SYSTEM_PROMPT.format(lo=_fmt(lo), hi=_fmt(hi))},
        {"role": "user", "content": f"Context:\n{CONTEXT_OPEN}\n{context}\n{CONTEXT_CLOSE}\n\nQuestion: {question_prompt}"},
    ]


def _fmt(x: float) -> str:
    return f"{x:g}"


def ask_score(
    llm: ChatBackend,
    context: str,
    question_prompt: str,
    scale: tuple[float, float] = (0.0, 1.0),
    retries: int = 2,
    usage: UsageMeter | None = None,
) -> ScoreResponse:
    if not context.strip() or not question_prompt.strip():
        raise ValueError("context and question must be non-empty")
    return request_score(llm, score_messages(context, question_prompt, scale), scale, retries, usage)


# --- retrieval ---------------------------------------------------------------


def build_context(
    index: VectorIndex,
    question_prompt: str,
    embedder: Embedder | None,
    k: int,
    doc_hash: str | None = None,
    query_vector: np.ndarray | None = None,
    usage: UsageMeter | None = None,
) -> tuple[str, list[tuple[str, int]]]:
    """Top-k chunks for the question, concatenated in similarity order.

    Each chunk is preceded by a delimiter line naming its source URL.
    """
    if k < 1:
        raise ValueError("k must be positive")
    if len(index) == 0:
        raise NoChunksError("index is empty")
    if query_vector is None:
        if embedder is None:
            raise ValueError("an embedder or a precomputed query vector is required")
        query_vector = embedder.embed_texts([question_prompt], usage=usage, labels=["question prompt"])[0]
    hits = index.search(query_vector, k, doc_hash=doc_hash)
    if not hits:
        raise NoChunksError(f"no chunks for document {doc_hash}")
    blocks = []
    refs = []
    for item, _sim in hits:
        chunk = item.chunk
        blocks.append(f"--- source: {chunk.source_url or chunk.doc_hash} (chunk {chunk.index}) ---\n{chunk.text}")
        refs.append(chunk.ref)
    return "\n\n".join(blocks), refs


def _assess(
    question: Question,
    prompt: str,
    doc: WebDocument,
    index: VectorIndex,
    query_vector: np.ndarray | None,
    query_error: str,
    llm: ChatBackend,
    config: RunConfig,
    usage: UsageMeter | None,
) -> DocumentAssessment:
    base = {"question_id": question.id, "doc_url": doc.url, "doc_hash": doc.content_hash}
    if query_vector is None:
        return DocumentAssessment(response=None, reason=query_error or "embedding_error", **base)
    try:
        context, refs = build_context(index, prompt, None, config.top_k_chunks, doc_hash=doc.content_hash,
                                      query_vector=query_vector)
    except NoChunksError:
        return DocumentAssessment(response=None, reason="no_chunks", **base)
    try:
        response = ask_score(llm, context, prompt, (question.scale_min, question.scale_max),
                             config.parse_retries, usage)
    except ScoreParseError as exc:
        return DocumentAssessment(response=None, reason="parse_error", raw=exc.raw, chunk_refs=tuple(refs), **base)
    except TransportError as exc:
        log.warning("scoring %s for %s failed: %s", question.id, doc.url, exc)
        return DocumentAssessment(response=None, reason="transport", chunk_refs=tuple(refs), **base)
    return DocumentAssessment(response=response, chunk_refs=tuple(refs), **base)


def run_playbook(
    identity: Identity,
    playbook: Playbook,
    documents: Sequence[WebDocument],
    index: VectorIndex,
    llm: ChatBackend,
    embedder: Embedder,
    config: RunConfig,
    usage: UsageMeter | None = None,
) -> Evidence:
    """Score every (question, fetched document) pair and average per question.

    Failed pairs are kept on the evidence but excluded from the means.
    """
    docs = sorted({d.url: d for d in documents if d.fetched}.values(), key=lambda d: d.url)
    evidence = Evidence(identity=identity)
    if not docs:
        evidence.question_means = {q: None for q in playbook.question_ids}
        return evidence

    prompts = {q.id: render_question(q, identity) for q in playbook.questions}
    query_vectors: dict[str, np.ndarray | None] = {}
    query_errors: dict[str, str] = {}
    for q in playbook.questions:
        try:
            query_vectors[q.id] = embedder.embed_texts([prompts[q.id]], usage=usage,
                                                       labels=[f"question {q.id}"])[0]
        except EmbeddingError as exc:
            log.warning("could not embed question %s: %s", q.id, exc)
            query_vectors[q.id] = None
            query_errors[q.id] = "embedding_error"

    pairs = [(q, d) for q in playbook.questions for d in docs]

    def work(pair: tuple[Question, WebDocument]) -> DocumentAssessment:
        q, d = pair
        return _assess(q, prompts[q.id], d, index, query_vectors[q.id], query_errors.get(q.id, ""),
                       llm, config, usage)

    workers = max(1, min(config.max_concurrency, len(pairs)))
    if workers == 1:
        results = [work(p) for p in pairs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, pairs))

    for q in playbook.questions:
        evidence.per_question[q.id] = sorted((a for a in results if a.question_id == q.id),
                                             key=lambda a: a.doc_url)
    evidence.recompute_means(playbook.question_ids)
    return evidence


def evidence_from_mapping(identity: Identity, scores: Mapping[str, Sequence[float | None]]) -> Evidence:
    """Evidence with synthetic documents; ``None`` marks a failed assessment."""
    ev = Evidence(identity=identity)
    for qid, values in scores.items():
        group = []
        for i, value in enumerate(values):
            url = f"https://doc.test/{i:04d}"
            resp = None if value is None else ScoreResponse(score=float(value), raw_score=float(value),
                                                            justification=f"doc {i}", raw="")
            group.append(DocumentAssessment(qid, url, f"h{i:04d}", resp, reason="" if resp else "parse_error"))
        ev.per_question[qid] = group
    ev.recompute_means(list(scores))
    return ev
