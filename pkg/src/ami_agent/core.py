"""Shared domain types: screening subjects, playbooks and run configuration."""

from __future__ import annotations

import dataclasses
import datetime as dt
import hashlib
import json
import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from types import MappingProxyType
from typing import Any

import yaml

from ami_agent.errors import ConfigurationError, PlaybookError

NAME_PLACEHOLDER = "{name}"


@dataclass(frozen=True)
class Identity:
    """The person being screened."""

    name: str
    date_of_birth: dt.date | None = None
    attributes: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not isinstance(self.name, str) or not self.name.strip():
            raise ValueError("identity name must be non-empty")
        object.__setattr__(self, "name", self.name.strip())
        object.__setattr__(self, "attributes", MappingProxyType(dict(self.attributes)))

    @classmethod
    def from_pairs(
        cls,
        name: str,
        pairs: Iterable[tuple[str, str]] = (),
        date_of_birth: dt.date | None = None,
    ) -> Identity:
        attrs: dict[str, str] = {}
        for key, value in pairs:
            key = key.strip()
            if not key:
                raise ValueError("attribute key must be non-empty")
            if key in attrs:
                raise ValueError(f"duplicate attribute key {key!r}")
            attrs[key] = value.strip()
        return cls(name=name, date_of_birth=date_of_birth, attributes=attrs)

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "date_of_birth": self.date_of_birth.isoformat() if self.date_of_birth else None,
            "attributes": dict(sorted(self.attributes.items())),
        }


@dataclass(frozen=True)
class Question:
    id: str
    template: str
    scale_min: float = 0.0
    scale_max: float = 1.0

    def __post_init__(self) -> None:
        if not self.id or not str(self.id).strip():
            raise PlaybookError("question id must be non-empty")
        if NAME_PLACEHOLDER not in self.template:
            raise PlaybookError(f"question {self.id!r}: template lacks a {NAME_PLACEHOLDER} placeholder")
        if not (math.isfinite(self.scale_min) and math.isfinite(self.scale_max)):
            raise PlaybookError(f"question {self.id!r}: scale bounds must be finite")
        if not self.scale_min < self.scale_max:
            raise PlaybookError(f"question {self.id!r}: scale min must be below max")

    def normalize(self, raw: float) -> float:
        """Map a score on this question's scale onto [0, 1]."""
        return (raw - self.scale_min) / (self.scale_max - self.scale_min)


@dataclass(frozen=True)
class Playbook:
    name: str
    questions: tuple[Question, ...]
    verdict_prompt: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "questions", tuple(self.questions))
        if not self.questions:
            raise PlaybookError(f"playbook {self.name!r} has no questions")
        seen: set[str] = set()
        for q in self.questions:
            if q.id in seen:
                raise PlaybookError(f"duplicate question id {q.id!r}")
            seen.add(q.id)
        if not self.verdict_prompt or not self.verdict_prompt.strip():
            raise PlaybookError(f"playbook {self.name!r} has an empty verdict prompt")

    def question(self, question_id: str) -> Question:
        for q in self.questions:
            if q.id == question_id:
                return q
        raise KeyError(question_id)

    @property
    def question_ids(self) -> list[str]:
        return [q.id for q in self.questions]

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "questions": [
                {"id": q.id, "text": q.template, "scale": {"min": q.scale_min, "max": q.scale_max}}
                for q in self.questions
            ],
            "verdict_prompt": self.verdict_prompt,
        }


def _yaml_error_message(exc: yaml.YAMLError) -> str:
    mark = getattr(exc, "problem_mark", None)
    problem = getattr(exc, "problem", None) or str(exc)
    if mark is not None:
        return f"line {mark.line + 1}, column {mark.column + 1}: {problem}"
    return problem


def parse_playbook(data: Any, origin: str = "<playbook>") -> Playbook:
    if not isinstance(data, Mapping):
        raise PlaybookError(f"{origin}: top level must be a mapping")
    questions_raw = data.get("questions")
    if questions_raw is None:
        questions_raw = []
    if not isinstance(questions_raw, list):
        raise PlaybookError(f"{origin}: 'questions' must be a list")
    questions = []
    for pos, item in enumerate(questions_raw):
        if not isinstance(item, Mapping):
            raise PlaybookError(f"{origin}: question #{pos + 1} must be a mapping")
        qid = str(item.get("id", "")).strip()
        text = item.get("text")
        if not isinstance(text, str):
            raise PlaybookError(f"{origin}: question {qid or pos + 1!r} has no text")
        scale = item.get("scale") or {}
        try:
            lo = float(scale.get("min", 0.0))
            hi = float(scale.get("max", 1.0))
        except (TypeError, ValueError, AttributeError) as exc:
            raise PlaybookError(f"{origin}: question {qid!r} has an invalid scale") from exc
        questions.append(Question(id=qid, template=text, scale_min=lo, scale_max=hi))
    return Playbook(
        name=str(data.get("name", "unnamed")),
        questions=tuple(questions),
        verdict_prompt=str(data.get("verdict_prompt", "")),
    )


def load_playbook(path: str | Path) -> Playbook:
    """Load and validate a playbook YAML file.

    Raises PlaybookError with line information for malformed YAML, and naming
    the offending question for placeholder or id violations.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise PlaybookError(f"{path}: {exc.strerror or exc}") from exc
    return loads_playbook(text, origin=str(path))


def loads_playbook(text: str, origin: str = "<playbook>") -> Playbook:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise PlaybookError(f"{origin}: {_yaml_error_message(exc)}") from exc
    return parse_playbook(data, origin)


_YAML_LINE_BREAKS = ("\x85", "\u2028", "\u2029")


def dump_playbook(playbook: Playbook) -> str:
    data = playbook.to_dict()
    # PyYAML writes these raw under allow_unicode but reads them back as line breaks.
    flat = json.dumps(data, ensure_ascii=False)
    readable = not any(ch in flat for ch in _YAML_LINE_BREAKS)
    return yaml.safe_dump(data, sort_keys=False, allow_unicode=readable)


def default_playbook_path() -> Path:
    return Path(str(resources.files("ami_agent") / "playbooks" / "default.yaml"))


def default_playbook() -> Playbook:
    return load_playbook(default_playbook_path())


def render_question(question: Question, identity: Identity) -> str:
    # str.replace is single pass: a name containing "{name}" is not re-expanded.
    return question.template.replace(NAME_PLACEHOLDER, identity.name)


DEFAULT_DOMAIN_BLOCKLIST = (
    "facebook.com",
    "instagram.com",
    "linkedin.com",
    "twitter.com",
    "x.com",
    "tiktok.com",
    "pinterest.com",
    "youtube.com",
    "whitepages.com",
    "spokeo.com",
    "zoominfo.com",
    "peoplefinders.com",
    "rocketreach.co",
)

DEFAULT_BLOCKED_EXTENSIONS = (
    ".zip", ".gz", ".tar", ".rar", ".7z", ".exe", ".msi", ".dmg", ".iso",
    ".mp4", ".mp3", ".avi", ".mov", ".wav", ".jpg", ".jpeg", ".png", ".gif",
)

BACKEND_PROFILES: dict[str, dict[str, Any]] = {
    "api": {"chunk_size_tokens": 1000},
    "local": {"chunk_size_tokens": 500},
}

# Fields that never enter the config digest.
SECRET_FIELDS = frozenset({"search_api_key", "llm_api_key", "embed_api_key"})


@dataclass(frozen=True)
class RunConfig:
    top_n_results: int = 10
    top_k_chunks: int = 5
    chunk_size_tokens: int = 1000
    chunk_overlap_fraction: float = 0.10
    chars_per_token: float = 4.0
    max_concurrency: int = 4
    llm_temperature: float = 0.0
    parse_retries: int = 2
    domain_blocklist: tuple[str, ...] = DEFAULT_DOMAIN_BLOCKLIST
    blocked_extensions: tuple[str, ...] = DEFAULT_BLOCKED_EXTENSIONS
    snapshot_path: str | None = None
    snapshot_mode: str = "replay"
    cache_dir: str | None = None

    search_base_url: str = "https://www.googleapis.com/customsearch/v1"
    search_api_key: str | None = None
    search_engine_id: str | None = None
    llm_base_url: str = "https://api.openai.com/v1"
    llm_api_key: str | None = None
    llm_model: str | None = None
    embed_base_url: str = "https://api.openai.com/v1"
    embed_api_key: str | None = None
    embed_model: str | None = None
    http_proxy: str | None = None

    fetch_timeout_s: float = 15.0
    request_timeout_s: float = 120.0
    max_document_bytes: int = 5 * 1024 * 1024
    max_redirects: int = 5
    respect_robots: bool = True
    user_agent: str = "ami-agent/0.1 (adverse media screening)"
    transport_attempts: int = 3
    backoff_base_s: float = 0.5
    verdict_budget_chars: int = 24_000
    price_table: Mapping[str, Mapping[str, float]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "domain_blocklist", tuple(self.domain_blocklist))
        object.__setattr__(self, "blocked_extensions", tuple(self.blocked_extensions))
        object.__setattr__(
            self,
            "price_table",
            MappingProxyType({k: MappingProxyType(dict(v)) for k, v in dict(self.price_table).items()}),
        )
        for name in ("top_n_results", "top_k_chunks", "chunk_size_tokens", "max_concurrency",
                     "max_document_bytes", "transport_attempts", "verdict_budget_chars"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        if not isinstance(self.parse_retries, int) or self.parse_retries < 0:
            raise ConfigurationError("parse_retries must be a non-negative integer")
        if not 0.0 < self.chunk_overlap_fraction < 1.0:
            raise ConfigurationError("chunk_overlap_fraction must lie in (0, 1)")
        if self.chunk_overlap_fraction * self.chunk_size_tokens < 1.0:
            raise ConfigurationError("chunk overlap must amount to at least one token")
        if not self.chars_per_token > 0:
            raise ConfigurationError("chars_per_token must be positive")
        if self.llm_temperature < 0:
            raise ConfigurationError("llm_temperature must be >= 0")
        if self.snapshot_mode not in ("replay", "record"):
            raise ConfigurationError(f"snapshot_mode must be 'replay' or 'record', got {self.snapshot_mode!r}")
        if self.max_redirects < 0 or self.fetch_timeout_s <= 0 or self.backoff_base_s < 0:
            raise ConfigurationError("timeouts must be positive and redirect/backoff limits non-negative")

    @property
    def chunk_chars(self) -> int:
        return int(round(self.chunk_size_tokens * self.chars_per_token))

    @property
    def overlap_chars(self) -> int:
        return int(round(self.chunk_overlap_fraction * self.chunk_chars))

    def replace(self, **changes: Any) -> RunConfig:
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> RunConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"unknown configuration keys: {', '.join(unknown)}")
        return cls(**dict(data))

    def to_dict(self, include_secrets: bool = False) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for f in dataclasses.fields(self):
            if not include_secrets and f.name in SECRET_FIELDS:
                continue
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = list(value)
            elif isinstance(value, Mapping):
                value = {k: dict(v) for k, v in value.items()}
            out[f.name] = value
        return out


def load_config_file(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except OSError as exc:
        raise ConfigurationError(f"{path}: {exc.strerror or exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: {_yaml_error_message(exc)}") from exc
    if not isinstance(data, Mapping):
        raise ConfigurationError(f"{path}: configuration must be a mapping")
    return dict(data)


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def config_digest(config: RunConfig) -> str:
    """sha256 over the sorted-key serialization of the non-secret fields."""
    return hashlib.sha256(canonical_json(config.to_dict()).encode("utf-8")).hexdigest()


def utc_now() -> dt.datetime:
    return dt.datetime.now(dt.timezone.utc)


def isoformat_z(moment: dt.datetime) -> str:
    return moment.astimezone(dt.timezone.utc).isoformat(timespec="seconds").replace("+00:00", "Z")
