"""Adverse media screening: web search, retrieval and LLM scoring of a subject's news coverage."""

from ami_agent.core import Identity, Playbook, Question, RunConfig, default_playbook, load_playbook
from ami_agent.pipeline import Backends, ScreeningReport, screen, screen_batch

__all__ = [
    "Backends",
    "Identity",
    "Playbook",
    "Question",
    "RunConfig",
    "ScreeningReport",
    "default_playbook",
    "load_playbook",
    "screen",
    "screen_batch",
]

__version__ = "0.1.0"
