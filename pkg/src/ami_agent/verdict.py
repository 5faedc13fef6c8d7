"""Final AMI score: one LLM call over the accumulated evidence."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

from ami_agent.agent import ChatBackend, Evidence, request_score
from ami_agent.backends import UsageMeter
from ami_agent.core import Playbook, Question, render_question
from ami_agent.errors import NoEvidenceError

ELISION_MARKER = " [...elided]"
MEAN_LABEL = "Question mean:"
SCORE_LABEL = "Document score:"

VERDICT_SYSTEM_PROMPT = (
    "You are a senior compliance officer issuing the final verdict of an adverse media "
    "screening. You receive assessment questions with per-document scores and "
    "justifications. Weigh the consistency of the evidence across documents, the "
    "severity of the reported issues and how confidently the documents match the "
    "subject. Reply with a single JSON object and nothing else, of the form "
    '{"score": <number from 0 to 1>, "justification": "<summary explaining the score>"}.'
)


@dataclass(frozen=True)
class Verdict:
    ami_score: float
    summary: str
    raw: str
    retries_used: int = 0
    warnings: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not 0.0 <= self.ami_score <= 1.0:
            raise ValueError("ami_score must lie in [0, 1]")
        if not self.summary.strip():
            raise ValueError("verdict summary must be non-empty")

    def to_dict(self) -> dict[str, Any]:
        return {"ami_score": self.ami_score, "summary": self.summary, "raw": self.raw,
                "retries_used": self.retries_used, "warnings": list(self.warnings)}


def _format_score(value: float) -> str:
    # repr round-trips floats exactly.
    return repr(float(value))


def _ordered_questions(playbook: Playbook) -> list[Question]:
    return sorted(playbook.questions, key=lambda q: q.id)


def _render(evidence: Evidence, playbook: Playbook, justifications: list[str]) -> str:
    ident = evidence.identity
    lines = [f"Subject: {ident.name}"]
    if ident.date_of_birth:
        lines.append(f"Date of birth: {ident.date_of_birth.isoformat()}")
    for key in sorted(ident.attributes):
        lines.append(f"{key}: {ident.attributes[key]}")
    lines += ["", "Evidence from the screening playbook (all scores on a 0 to 1 scale):"]
    pos = 0
    for q in _ordered_questions(playbook):
        group = evidence.per_question.get(q.id, [])
        ok = sorted((a for a in group if a.ok), key=lambda a: a.doc_url)
        mean = evidence.question_means.get(q.id)
        lines += ["", f"Question {q.id}: {render_question(q, ident)}",
                  f"{MEAN_LABEL} {_format_score(mean) if mean is not None else 'n/a'}"]
        failed = len(group) - len(ok)
        if failed:
            lines.append(f"({failed} document(s) could not be assessed for this question)")
        for a in ok:
            assert a.response is not None
            lines += [f"- Document: {a.doc_url}",
                      f"  {SCORE_LABEL} {_format_score(a.response.score)}",
                      f"  Justification: {justifications[pos]}"]
            pos += 1
    lines += ["", playbook.verdict_prompt]
    return "\n".join(lines)


def _trimmed(justifications: list[str], cap: int) -> list[str]:
    return [j if len(j) <= cap else j[:cap] + ELISION_MARKER for j in justifications]


def _trimmed_cost(lengths: list[int], cap: int) -> int:
    marker = len(ELISION_MARKER)
    return sum(n if n <= cap else cap + marker for n in lengths)


def build_verdict_prompt(evidence: Evidence, playbook: Playbook, budget: int = 24_000) -> str:
    """Lay out every successful per-document score with its justification,
    ending with the playbook's verdict question.

    When the text would exceed ``budget`` characters, all justifications longer
    than a common cap are cut to that cap and marked; the largest cap that fits
    is used. Scores are never removed, so a tiny budget can still be exceeded.
    """
    ordered = [a for q in _ordered_questions(playbook)
               for a in sorted((x for x in evidence.per_question.get(q.id, []) if x.ok), key=lambda x: x.doc_url)]
    if not ordered:
        raise NoEvidenceError("no successful assessments to build a verdict from")
    full = [a.response.justification for a in ordered]  # type: ignore[union-attr]
    prompt = _render(evidence, playbook, full)
    if len(prompt) <= budget:
        return prompt
    fixed = len(_render(evidence, playbook, [""] * len(full)))
    available = budget - fixed
    lengths = [len(j) for j in full]
    cap = 0
    for candidate in range(max(lengths), -1, -1):
        if _trimmed_cost(lengths, candidate) <= available:
            cap = candidate
            break
    return _render(evidence, playbook, _trimmed(full, cap))


def verdict_messages(prompt: str) -> list[dict[str, str]]:
    return [{"role": "system", "content": VERDICT_SYSTEM_PROMPT}, {"role": "user", "content": prompt}]


def generate_verdict(
    evidence: Evidence,
    playbook: Playbook,
    llm: ChatBackend,
    retries: int = 2,
    budget: int = 24_000,
    usage: UsageMeter | None = None,
) -> Verdict:
    """Raises NoEvidenceError, ScoreParseError or TransportError."""
    prompt = build_verdict_prompt(evidence, playbook, budget)
    resp = request_score(llm, verdict_messages(prompt), (0.0, 1.0), retries, usage)
    return Verdict(ami_score=resp.score, summary=resp.justification, raw=resp.raw,
                   retries_used=resp.retries_used, warnings=resp.warnings)
