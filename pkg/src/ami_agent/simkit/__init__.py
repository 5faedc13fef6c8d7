"""Deterministic stand-ins for the search provider, the web, the embedding model and the LLM."""

from ami_agent.simkit.corpus import build_population_corpus, single_subject_corpus, write_corpus
from ami_agent.simkit.scorer import DEFAULT_KEYWORDS, RuleBasedScorer
from ami_agent.simkit.servers import (
    FIXTURE_HOST,
    FixtureWeb,
    MockEmbeddingServer,
    MockLLMServer,
    fixture_web,
    hashed_embedding,
    mock_embedder,
    mock_llm,
)

__all__ = [
    "DEFAULT_KEYWORDS",
    "FIXTURE_HOST",
    "FixtureWeb",
    "MockEmbeddingServer",
    "MockLLMServer",
    "RuleBasedScorer",
    "build_population_corpus",
    "fixture_web",
    "hashed_embedding",
    "mock_embedder",
    "mock_llm",
    "single_subject_corpus",
    "write_corpus",
]
