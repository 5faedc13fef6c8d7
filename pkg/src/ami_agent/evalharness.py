"""Population-separation evaluation: screen labelled populations and compare scores."""

from __future__ import annotations

import csv
import datetime as dt
import io
import json
import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ami_agent.core import Identity, Playbook, RunConfig
from ami_agent.errors import DatasetError
from ami_agent.pipeline import Backends, ScreeningReport, screen_batch
from ami_agent.search import atomic_write_text

log = logging.getLogger(__name__)

# Ascending risk.
POPULATIONS = ("Clean", "PEP", "RW", "SDN")
POPULATION_FILES = {p: f"{p.lower()}.csv" for p in POPULATIONS}
CSV_HEADER = ("name", "dob", "attributes", "source")


def parse_population(label: str) -> str:
    for p in POPULATIONS:
        if label.strip().lower() == p.lower():
            return p
    raise DatasetError(f"unknown population label {label!r}; expected one of {', '.join(POPULATIONS)}")


@dataclass(frozen=True)
class PopulationSample:
    population: str
    identity: Identity
    source: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "population", parse_population(self.population))


def parse_attributes(text: str) -> list[tuple[str, str]]:
    pairs = []
    for item in text.split(";"):
        item = item.strip()
        if not item:
            continue
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"attribute {item!r} is not key=value")
        pairs.append((key.strip(), value.strip()))
    return pairs


def load_population(path: str | Path, population_label: str) -> list[PopulationSample]:
    """Read ``name,dob,attributes,source`` rows; attributes are ``k=v;k=v``."""
    population = parse_population(population_label)
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8-sig")
    except OSError as exc:
        raise DatasetError(f"{path}: {exc.strerror or exc}") from exc
    reader = csv.DictReader(io.StringIO(text, newline=""))
    if reader.fieldnames is None or "name" not in reader.fieldnames:
        raise DatasetError(f"{path}: header must contain {', '.join(CSV_HEADER)}")
    samples = []
    try:
        for row in reader:
            line = reader.line_num
            if None in row:
                raise DatasetError(f"{path}: row at line {line} has more fields than the header")
            name = (row.get("name") or "").strip()
            if not name:
                raise DatasetError(f"{path}: row at line {line} has an empty name")
            dob_text = (row.get("dob") or "").strip()
            try:
                dob = dt.date.fromisoformat(dob_text) if dob_text else None
                identity = Identity.from_pairs(name, parse_attributes(row.get("attributes") or ""), dob)
            except ValueError as exc:
                raise DatasetError(f"{path}: row at line {line}: {exc}") from exc
            samples.append(PopulationSample(population, identity, (row.get("source") or "").strip()))
    except csv.Error as exc:
        raise DatasetError(f"{path}: malformed CSV: {exc}") from exc
    return samples


def load_dataset(directory: str | Path) -> tuple[list[PopulationSample], list[str]]:
    """All population files present in ``directory`` plus the labels that were missing."""
    directory = Path(directory)
    samples: list[PopulationSample] = []
    missing = []
    for population, filename in POPULATION_FILES.items():
        path = directory / filename
        if path.exists():
            samples.extend(load_population(path, population))
        else:
            log.warning("no %s population file (%s); continuing without it", population, path)
            missing.append(population)
    return samples, missing


def compute_ecdf(scores: Sequence[float]) -> list[tuple[float, float]]:
    """Sorted distinct values x with the fraction of scores <= x."""
    if not scores:
        raise ValueError("ECDF of an empty sample is undefined")
    ordered = sorted(float(s) for s in scores)
    n = len(ordered)
    points = []
    for i, value in enumerate(ordered):
        if i + 1 < n and ordered[i + 1] == value:
            continue
        points.append((value, (i + 1) / n))
    return points


def score_separation(means: Mapping[str, float | None]) -> tuple[dict[tuple[str, str], float], list[tuple[str, str]]]:
    """``mean(b) - mean(a)`` for every pair a < b in risk order.

    Pairs lacking either mean are returned in the second element instead.
    """
    deltas: dict[tuple[str, str], float] = {}
    missing: list[tuple[str, str]] = []
    for i, a in enumerate(POPULATIONS):
        for b in POPULATIONS[i + 1:]:
            ma, mb = means.get(a), means.get(b)
            if ma is None or mb is None:
                missing.append((a, b))
            else:
                deltas[(a, b)] = mb - ma
    return deltas, missing


@dataclass
class SampleOutcome:
    sample: PopulationSample
    ami_score: float | None
    status: str
    timing_ms: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0
    embedding_tokens: int = 0
    cost: float | None = None

    @classmethod
    def from_report(cls, sample: PopulationSample, report: ScreeningReport) -> SampleOutcome:
        usage = report.usage or {}
        return cls(sample=sample, ami_score=report.ami_score, status=report.status, timing_ms=report.timing_ms,
                   prompt_tokens=usage.get("prompt_tokens", 0), completion_tokens=usage.get("completion_tokens", 0),
                   embedding_tokens=usage.get("embedding_tokens", 0), cost=usage.get("estimated_cost"))


@dataclass
class EvalResult:
    model: str
    populations: list[str]
    per_sample: list[SampleOutcome]
    means: dict[str, float | None] = field(default_factory=dict)
    counts: dict[str, dict[str, int]] = field(default_factory=dict)
    separations: dict[tuple[str, str], float] = field(default_factory=dict)
    missing_separations: list[tuple[str, str]] = field(default_factory=list)
    ecdf: dict[str, list[tuple[float, float]]] = field(default_factory=dict)
    efficiency: dict[str, dict[str, float | None]] = field(default_factory=dict)

    def scores(self, population: str) -> list[float]:
        return [o.ami_score for o in self.per_sample
                if o.sample.population == population and o.ami_score is not None]


def _mean(values: Sequence[float]) -> float | None:
    return math.fsum(values) / len(values) if values else None


def _efficiency(outcomes: Sequence[SampleOutcome]) -> dict[str, float | None]:
    screened = [o for o in outcomes if o.status != "error"]
    costs = [o.cost for o in screened]
    return {
        "n_screened": len(screened),
        "mean_wall_ms": _mean([o.timing_ms for o in screened]),
        "mean_prompt_tokens": _mean([o.prompt_tokens for o in screened]),
        "mean_completion_tokens": _mean([o.completion_tokens for o in screened]),
        "mean_embedding_tokens": _mean([o.embedding_tokens for o in screened]),
        "mean_cost": None if not costs or any(c is None for c in costs) else _mean(costs),  # type: ignore[arg-type]
    }


def aggregate(outcomes: Sequence[SampleOutcome], model: str = "", populations: Sequence[str] | None = None) -> EvalResult:
    """Means, separations, ECDFs and efficiency from per-sample outcomes.

    Samples without a numeric score are left out of means and ECDFs and counted
    by status instead.
    """
    present = list(populations) if populations is not None else \
        [p for p in POPULATIONS if any(o.sample.population == p for o in outcomes)]
    result = EvalResult(model=model, populations=present, per_sample=list(outcomes))
    for p in present:
        group = [o for o in outcomes if o.sample.population == p]
        scores = [o.ami_score for o in group if o.ami_score is not None]
        result.means[p] = _mean(scores)
        result.counts[p] = {
            "n_samples": len(group),
            "n_scored": len(scores),
            "n_no_evidence": sum(o.status == "no_evidence" for o in group),
            "n_verdict_failed": sum(o.status == "verdict_failed" for o in group),
            "n_error": sum(o.status == "error" for o in group),
        }
        result.ecdf[p] = compute_ecdf(scores) if scores else []
        result.efficiency[p] = _efficiency(group)
    result.efficiency["all"] = _efficiency(outcomes)
    result.separations, result.missing_separations = score_separation(result.means)
    return result


def run_protocol(
    samples: Sequence[PopulationSample],
    playbook: Playbook,
    config: RunConfig,
    backends: Backends,
    populations: Sequence[str] | None = None,
) -> EvalResult:
    reports = screen_batch([s.identity for s in samples], playbook, config, backends)
    outcomes = [SampleOutcome.from_report(s, r) for s, r in zip(samples, reports)]
    return aggregate(outcomes, model=config.llm_model or "", populations=populations)


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _csv_text(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    return buf.getvalue()


EFFICIENCY_COLUMNS = ("n_screened", "mean_wall_ms", "mean_prompt_tokens", "mean_completion_tokens",
                      "mean_embedding_tokens", "mean_cost")


def summary_dict(result: EvalResult) -> dict[str, Any]:
    return {
        "model": result.model,
        "populations": result.populations,
        "means": result.means,
        "counts": result.counts,
        "no_evidence_rate": {p: (c["n_no_evidence"] / c["n_samples"] if c["n_samples"] else None)
                             for p, c in result.counts.items()},
        "separations": [{"from": a, "to": b, "delta": d} for (a, b), d in result.separations.items()],
        "missing_separations": [{"from": a, "to": b} for a, b in result.missing_separations],
        "samples": [
            {"population": o.sample.population, "name": o.sample.identity.name, "source": o.sample.source,
             "status": o.status, "ami_score": o.ami_score}
            for o in result.per_sample
        ],
    }


def emit_outputs(result: EvalResult, out_dir: str | Path) -> list[Path]:
    """Write means.csv, ecdf_<population>.csv, efficiency.csv and summary.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    means_rows = [(result.model, p, result.means.get(p), *(result.counts[p][k] for k in
                   ("n_samples", "n_scored", "n_no_evidence", "n_error"))) for p in result.populations]
    files = {
        "means.csv": _csv_text(("model", "population", "mean", "n_samples", "n_scored", "n_no_evidence", "n_error"),
                               means_rows),
        "efficiency.csv": _csv_text(("population", *EFFICIENCY_COLUMNS),
                                    [(p, *(result.efficiency[p][c] for c in EFFICIENCY_COLUMNS))
                                     for p in [*result.populations, "all"]]),
    }
    for p in result.populations:
        files[f"ecdf_{p.lower()}.csv"] = _csv_text(("score", "fraction"), result.ecdf.get(p, []))
    files["summary.json"] = json.dumps(summary_dict(result), sort_keys=True, indent=2, ensure_ascii=False) + "\n"

    for name, text in files.items():
        path = out_dir / name
        atomic_write_text(path, text)
        written.append(path)
    return written


def read_means_csv(path: str | Path) -> dict[str, float | None]:
    with open(path, newline="", encoding="utf-8") as fh:
        return {row["population"]: (float(row["mean"]) if row["mean"] else None) for row in csv.DictReader(fh)}


def format_means_table(result: EvalResult) -> str:
    """Model row by population columns, three decimals; '-' where undefined."""
    width = max(12, len(result.model) + 2)
    header = "Model".ljust(width) + "".join(p.rjust(8) for p in POPULATIONS)
    cells = []
    for p in POPULATIONS:
        m = result.means.get(p)
        cells.append(("-" if m is None else f"{m:.3f}").rjust(8))
    return header + "\n" + (result.model or "?").ljust(width) + "".join(cells)
