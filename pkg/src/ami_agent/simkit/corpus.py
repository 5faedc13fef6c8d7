"""Synthetic HTML corpora and population datasets for offline end-to-end runs.

Each population gets ten subjects with five pages apiece. Adverse keywords
are planted in the article body with population-dependent density; every page
also carries a navigation bar mentioning "Sanctions", so a crawler that fails
to strip boilerplate inflates Clean scores immediately.
"""

from __future__ import annotations

import csv
import html
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import yaml

from ami_agent.evalharness import POPULATION_FILES

FIRST_NAMES = ("Alina", "Bruno", "Chiara", "Dmitri", "Elena", "Farid", "Greta", "Hugo", "Ines", "Jonas")
SURNAMES = {"Clean": "Varga", "PEP": "Okafor", "RW": "Lindqvist", "SDN": "Petrenko"}

NEUTRAL = (
    "{name} gave a keynote talk at an international workshop on distributed systems.",
    "{name} co-authored a study on energy efficient data centres with colleagues from three universities.",
    "{name} was interviewed about open source software and the future of cloud computing.",
    "{name} joined the programme committee of a conference on machine learning.",
    "{name} published a book chapter on graph algorithms for large networks.",
)

ADVERSE = {
    "controversy": "{name}, a former deputy minister, faced public controversy over travel expenses.",
    "criticized": "{name} was criticized by opposition lawmakers over budget decisions.",
    "regulator": "A national regulator issued a public warning about investment schemes promoted by {name}.",
    "fined": "{name} was fined 40,000 euros after an inquiry into misleading statements to investors.",
    "banned": "{name} was banned from acting as a company director for five years.",
    "sanctions": "{name} is subject to sanctions imposed by the Office of Foreign Assets Control.",
    "money laundering": "Prosecutors allege that {name} ran a money laundering network through shell companies.",
    "terrorism": "{name} was designated for providing financial support to terrorism.",
}

# Keyword per page slot (None = neutral page), for even / odd subject index.
PAGE_PLAN: dict[str, tuple[tuple[str | None, ...], tuple[str | None, ...]]] = {
    "Clean": ((None,) * 5, (None,) * 5),
    "PEP": (("controversy", None, None, None, None), ("criticized", None, None, None, None)),
    "RW": (("fined", "banned", None, None, None), ("fined", "regulator", None, None, None)),
    "SDN": (("sanctions", "money laundering", "sanctions", "terrorism", None),
            ("sanctions", "sanctions", "sanctions", "sanctions", None)),
}

PAGE_TEMPLATE = """<!DOCTYPE html>
<html lang="en">
<head>
<meta charset="utf-8">
<title>{title}</title>
<style>body {{ font-family: serif; }}</style>
</head>
<body>
<header><a href="/">Daily Ledger</a></header>
<nav><ul><li>Home</li><li>World</li><li>Business</li><li>Sanctions desk</li></ul></nav>
<article>
<h1>{title}</h1>
{paragraphs}
</article>
<aside>Most read: sanctions, money laundering and terrorism explained.</aside>
<footer>Copyright Daily Ledger. Subscribe for fraud and sanctions alerts.</footer>
<script>track("sanctions");</script>
</body>
</html>
"""


@dataclass(frozen=True)
class PageSpec:
    path: str
    title: str
    paragraphs: tuple[str, ...] = ()
    status: int = 200


def render_page(title: str, paragraphs: Sequence[str]) -> str:
    body = "\n".join(f"<p>{html.escape(p)}</p>" for p in paragraphs)
    return PAGE_TEMPLATE.format(title=html.escape(title), paragraphs=body)


def write_corpus(corpus_dir: str | Path, pages: dict[str, Sequence[PageSpec]]) -> Path:
    """Write HTML files plus ``manifest.yaml`` (identity -> page list)."""
    corpus_dir = Path(corpus_dir)
    manifest: dict[str, list[dict]] = {}
    for name, specs in pages.items():
        entries = []
        for spec in specs:
            if spec.status < 400:
                target = corpus_dir / spec.path
                target.parent.mkdir(parents=True, exist_ok=True)
                target.write_text(render_page(spec.title, spec.paragraphs), encoding="utf-8")
            entries.append({"path": spec.path, "title": spec.title, "status": spec.status})
        manifest[name] = entries
    (corpus_dir / "manifest.yaml").write_text(yaml.safe_dump(manifest, sort_keys=True), encoding="utf-8")
    return corpus_dir


def subject_name(population: str, i: int) -> str:
    return f"{FIRST_NAMES[i]} {SURNAMES[population]}"


def page_keywords(population: str, i: int) -> tuple[str | None, ...]:
    return PAGE_PLAN[population][i % 2]


def subject_pages(population: str, i: int) -> list[PageSpec]:
    name = subject_name(population, i)
    specs = []
    for j, keyword in enumerate(page_keywords(population, i)):
        paragraphs = [NEUTRAL[j].format(name=name), NEUTRAL[(j + 1) % len(NEUTRAL)].format(name=name)]
        if keyword is not None:
            paragraphs.insert(1, ADVERSE[keyword].format(name=name))
        slug = name.lower().replace(" ", "-")
        specs.append(PageSpec(path=f"{population.lower()}/{slug}/article-{j}.html",
                              title=f"{name} profile {j + 1}", paragraphs=tuple(paragraphs)))
    return specs


def build_population_corpus(root: str | Path, per_population: int = 10) -> tuple[Path, Path]:
    """Create ``<root>/corpus`` and ``<root>/dataset``; returns both paths."""
    if not 1 <= per_population <= len(FIRST_NAMES):
        raise ValueError(f"per_population must be between 1 and {len(FIRST_NAMES)}")
    root = Path(root)
    corpus = root / "corpus"
    dataset = root / "dataset"
    dataset.mkdir(parents=True, exist_ok=True)
    pages: dict[str, list[PageSpec]] = {}
    for population, filename in POPULATION_FILES.items():
        with open(dataset / filename, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["name", "dob", "attributes", "source"])
            for i in range(per_population):
                name = subject_name(population, i)
                pages[name] = subject_pages(population, i)
                writer.writerow([name, "", "", f"simkit:{population.lower()}"])
    write_corpus(corpus, pages)
    return corpus, dataset


def single_subject_corpus(root: str | Path, name: str, n_pages: int = 10,
                          adverse: dict[int, str] | None = None,
                          extra_paragraphs: dict[int, str] | None = None,
                          statuses: dict[int, int] | None = None) -> Path:
    """One subject with ``n_pages`` pages; page j may carry an adverse keyword,
    an extra paragraph, or an error status."""
    adverse = adverse or {}
    extra_paragraphs = extra_paragraphs or {}
    statuses = statuses or {}
    slug = name.lower().replace(" ", "-")
    specs = []
    for j in range(n_pages):
        paragraphs = [NEUTRAL[j % len(NEUTRAL)].format(name=name)]
        if j in adverse:
            paragraphs.append(ADVERSE[adverse[j]].format(name=name))
        if j in extra_paragraphs:
            paragraphs.append(extra_paragraphs[j])
        specs.append(PageSpec(path=f"{slug}/page-{j}.html", title=f"{name} article {j + 1}",
                              paragraphs=tuple(paragraphs), status=statuses.get(j, 200)))
    return write_corpus(root, {name: specs})
