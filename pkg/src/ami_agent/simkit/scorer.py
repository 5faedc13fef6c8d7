"""Keyword rule scorer standing in for an LLM."""

from __future__ import annotations

import math
import re
from collections.abc import Mapping
from dataclasses import dataclass, field
from functools import cached_property

from ami_agent.agent import CONTEXT_CLOSE, CONTEXT_OPEN
from ami_agent.verdict import MEAN_LABEL

DEFAULT_KEYWORDS: dict[str, float] = {
    "controversy": 0.3,
    "criticized": 0.25,
    "regulator": 0.5,
    "fined": 0.6,
    "banned": 0.7,
    "sanctions": 0.9,
    "money laundering": 0.95,
    "terrorism": 1.0,
}


@dataclass(frozen=True)
class RuleBasedScorer:
    """Score = largest weight among keywords present (whole-word, case-insensitive)."""

    keyword_weights: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_KEYWORDS))
    default_score: float = 0.05
    verdict_mode: str = "mean_of_means"  # or "max_question"

    def __post_init__(self) -> None:
        for kw, w in self.keyword_weights.items():
            if not 0.0 <= w <= 1.0:
                raise ValueError(f"weight for {kw!r} outside [0, 1]")
        if self.verdict_mode not in ("mean_of_means", "max_question"):
            raise ValueError(f"unknown verdict mode {self.verdict_mode!r}")

    @cached_property
    def _patterns(self) -> list[tuple[str, float, re.Pattern[str]]]:
        return [(kw, w, re.compile(rf"\b{re.escape(kw)}\b", re.I))
                for kw, w in sorted(self.keyword_weights.items())]

    def score(self, context: str) -> tuple[float, str]:
        best: tuple[float, str] | None = None
        for kw, w, pattern in self._patterns:
            if pattern.search(context) and (best is None or w > best[0]):
                best = (w, kw)
        if best is None:
            return self.default_score, "No adverse keywords found in the context."
        return best[0], f"The context mentions '{best[1]}'."

    def verdict(self, prompt: str) -> tuple[float, str]:
        means = []
        for line in prompt.splitlines():
            if line.startswith(MEAN_LABEL):
                value = line[len(MEAN_LABEL):].strip()
                if value != "n/a":
                    means.append(float(value))
        if not means:
            return self.default_score, "No question means available."
        if self.verdict_mode == "max_question":
            return max(means), f"Highest question mean {max(means)!r}."
        value = math.fsum(means) / len(means)
        return value, f"Mean of {len(means)} question means."


def extract_context(text: str) -> str:
    start = text.find(CONTEXT_OPEN)
    end = text.find(CONTEXT_CLOSE, start + 1)
    if start == -1 or end == -1:
        return ""
    return text[start + len(CONTEXT_OPEN):end]
