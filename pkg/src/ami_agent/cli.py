"""``ami-agent`` command line: screen one subject, evaluate populations, manage snapshots.

Exit codes: 0 success, 1 error, 2 no evidence found, 64 usage error.
Configuration precedence: flags > environment > ``--config`` file > defaults.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

from ami_agent.core import (
    BACKEND_PROFILES,
    Identity,
    RunConfig,
    default_playbook,
    load_config_file,
    load_playbook,
)
from ami_agent.crawler import PAGES_DIR, RecordingPageSource, LiveFetcher, crawl, read_page_record
from ami_agent.errors import AMIError
from ami_agent.evalharness import emit_outputs, format_means_table, load_dataset, run_protocol
from ami_agent.pipeline import Backends, ScreeningReport, env_overrides, screen, search_provider_for
from ami_agent.search import SEARCH_SNAPSHOT_FILE, SearchSnapshot, build_query, filter_results

log = logging.getLogger("ami_agent")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NO_EVIDENCE = 2
EXIT_USAGE = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _attr(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    return key.strip(), value.strip()


def _date(text: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected YYYY-MM-DD, got {text!r}") from None


def _positive(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--playbook", metavar="PATH", help="playbook YAML (default: bundled 3-question playbook)")
    p.add_argument("--config", metavar="PATH", help="YAML file with run configuration keys")
    p.add_argument("--backend-profile", choices=sorted(BACKEND_PROFILES),
                   help="preset for the model backend (api: 1000-token chunks, local: 500-token chunks)")
    p.add_argument("--snapshot", metavar="PATH",
                   help="snapshot directory to replay search results and pages from (no live search)")
    p.add_argument("--top-n", type=_positive, metavar="INT", help="search results to retrieve (default 10)")
    p.add_argument("--top-k", type=_positive, metavar="INT", help="chunks retrieved per question (default 5)")
    p.add_argument("--max-concurrency", type=_positive, metavar="INT", help="parallel workers (default 4)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ami-agent", description="Adverse media screening with retrieval-augmented LLM scoring.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("screen", help="screen one subject and write a JSON report")
    s.add_argument("--name", required=True, help="full name of the subject")
    s.add_argument("--dob", type=_date, metavar="YYYY-MM-DD", help="date of birth (recorded, not searched)")
    s.add_argument("--attr", type=_attr, action="append", default=[], metavar="KEY=VALUE",
                   help="disambiguating attribute added to the search query (repeatable)")
    s.add_argument("--out", metavar="PATH", default="report.json", help="report path (default report.json)")
    _add_run_options(s)

    e = sub.add_parser("eval", help="screen population CSVs and write means, ECDF and efficiency outputs")
    e.add_argument("--dataset", required=True, metavar="DIR", help="directory holding clean/pep/rw/sdn.csv")
    e.add_argument("--out", required=True, metavar="DIR", help="output directory")
    _add_run_options(e)

    snap = sub.add_parser("snapshot", help="record or verify snapshots")
    ssub = snap.add_subparsers(dest="action", metavar="ACTION", parser_class=_Parser)
    ssub.required = True
    r = ssub.add_parser("record", help="query the live search provider and store the results")
    r.add_argument("--snapshot", required=True, metavar="PATH", help="snapshot directory to write")
    r.add_argument("--name", action="append", default=[], help="subject name to record (repeatable)")
    r.add_argument("--dataset", metavar="DIR", help="also record every subject in these population CSVs")
    r.add_argument("--with-pages", action="store_true", help="also fetch and store the result pages")
    r.add_argument("--config", metavar="PATH", help="YAML file with run configuration keys")
    r.add_argument("--top-n", type=_positive, metavar="INT", help="search results to retrieve (default 10)")
    r.add_argument("--max-concurrency", type=_positive, metavar="INT", help="parallel page fetches (default 4)")
    r.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    v = ssub.add_parser("verify", help="check snapshot files for integrity and schema version")
    v.add_argument("--snapshot", required=True, metavar="PATH", help="snapshot directory to check")
    return parser


def resolve_config(args: argparse.Namespace, environ: dict[str, str] | None = None) -> RunConfig:
    """Layer defaults, config file, environment and flags (later wins)."""
    values: dict[str, Any] = {}
    if getattr(args, "config", None):
        values.update(load_config_file(args.config))
    values.update(env_overrides(environ))
    profile = getattr(args, "backend_profile", None)
    if profile:
        values.update(BACKEND_PROFILES[profile])
    flags = {"top_n_results": getattr(args, "top_n", None), "top_k_chunks": getattr(args, "top_k", None),
             "max_concurrency": getattr(args, "max_concurrency", None)}
    values.update({k: v for k, v in flags.items() if v is not None})
    snapshot = getattr(args, "snapshot", None)
    if snapshot:
        values["snapshot_path"] = snapshot
        values["snapshot_mode"] = "replay"
    return RunConfig.from_mapping(values)


def _playbook(args: argparse.Namespace):
    return load_playbook(args.playbook) if args.playbook else default_playbook()


def _excerpt(text: str, width: int = 100) -> str:
    text = " ".join(text.split())
    return text if len(text) <= width else text[: width - 3] + "..."


def format_summary(report: ScreeningReport) -> str:
    lines = [f"subject: {report.identity.name}", f"status: {report.status}"]
    score = report.ami_score
    lines.append(f"AMI score: {'-' if score is None else f'{score:.3f}'}")
    for s in report.question_summaries:
        mean = s["mean_score"]
        lines.append(f"  {s['question_id']}: mean {'-' if mean is None else f'{mean:.3f}'}"
                     f" ({s['n_assessed']} assessed, {s['n_failed']} failed)")
    top = sorted((a for a in report.assessments if a.ok), key=lambda a: (-a.response.score, a.question_id, a.doc_url))
    for a in top[:3]:
        lines.append(f"  [{a.response.score:.2f}] {a.question_id} {a.doc_url}: {_excerpt(a.response.justification)}")
    if report.verdict is not None:
        lines.append(f"verdict: {_excerpt(report.verdict.summary, 200)}")
    if report.error:
        lines.append(f"error: {report.error}")
    return "\n".join(lines)


def cmd_screen(args: argparse.Namespace) -> int:
    identity = Identity.from_pairs(args.name, args.attr, args.dob)
    playbook = _playbook(args)
    config = resolve_config(args)
    report = screen(identity, playbook, config, Backends.from_config(config))
    report.write(args.out)
    print(format_summary(report))
    print(f"report written to {args.out}", file=sys.stderr)
    if report.status == "complete":
        return EXIT_OK
    if report.status == "no_evidence":
        return EXIT_NO_EVIDENCE
    return EXIT_ERROR


def cmd_eval(args: argparse.Namespace) -> int:
    samples, missing = load_dataset(args.dataset)
    if not samples:
        print(f"error: no population files found in {args.dataset}", file=sys.stderr)
        return EXIT_ERROR
    present = [p for p in ("Clean", "PEP", "RW", "SDN") if p not in missing]
    for p in missing:
        print(f"warning: {p} population missing; continuing with {', '.join(present)}", file=sys.stderr)
    playbook = _playbook(args)
    config = resolve_config(args)
    result = run_protocol(samples, playbook, config, Backends.from_config(config), populations=present)
    emit_outputs(result, args.out)
    print(format_means_table(result))
    for (a, b), delta in result.separations.items():
        print(f"{b} - {a}: {delta:+.3f}")
    for a, b in result.missing_separations:
        print(f"warning: separation {b} - {a} unavailable (population missing or unscored)", file=sys.stderr)
    return EXIT_OK


def cmd_snapshot_record(args: argparse.Namespace) -> int:
    names = list(args.name)
    if args.dataset:
        samples, _ = load_dataset(args.dataset)
        names.extend(s.identity.name for s in samples)
    names = list(dict.fromkeys(names))
    if not names:
        print("error: give at least one --name or a --dataset", file=sys.stderr)
        return EXIT_USAGE
    config = resolve_config(args).replace(snapshot_path=args.snapshot, snapshot_mode="record")
    provider = search_provider_for(config)
    fetcher = RecordingPageSource(LiveFetcher(config), args.snapshot) if args.with_pages else None
    for name in names:
        results = provider.search(build_query(Identity(name)), config.top_n_results)
        log.info("recorded %d results for %r", len(results), name)
        if fetcher is not None:
            crawl(filter_results(results, config.domain_blocklist, config.blocked_extensions), config, fetcher)
    print(f"recorded {len(names)} queries in {Path(args.snapshot) / SEARCH_SNAPSHOT_FILE}")
    return EXIT_OK


def verify_snapshot(snapshot_dir: str | Path) -> list[str]:
    """Problems found in a snapshot directory, each naming the offending path."""
    snapshot_dir = Path(snapshot_dir)
    problems = []
    search_file = snapshot_dir / SEARCH_SNAPSHOT_FILE
    if not search_file.is_file():
        problems.append(f"{search_file}: missing")
    else:
        try:
            SearchSnapshot.load(search_file)
        except AMIError as exc:
            problems.append(str(exc))
    pages = snapshot_dir / PAGES_DIR
    if pages.is_dir():
        for path in sorted(pages.iterdir()):
            if path.name.startswith("."):
                continue
            try:
                record = read_page_record(path)
            except AMIError as exc:
                problems.append(str(exc))
                continue
            expected = hashlib.sha256(record["url"].encode("utf-8")).hexdigest() + ".json"
            if path.name != expected:
                problems.append(f"{path}: file name does not match the digest of {record['url']!r}")
    return problems


def cmd_snapshot_verify(args: argparse.Namespace) -> int:
    problems = verify_snapshot(args.snapshot)
    for problem in problems:
        print(f"error: {problem}", file=sys.stderr)
    if problems:
        return EXIT_ERROR
    print(f"snapshot {args.snapshot} OK")
    return EXIT_OK


COMMANDS = {
    ("screen", None): cmd_screen,
    ("eval", None): cmd_eval,
    ("snapshot", "record"): cmd_snapshot_record,
    ("snapshot", "verify"): cmd_snapshot_verify,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    stream = logging.StreamHandler(sys.stderr)
    stream.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    previous_level = log.level
    log.addHandler(stream)
    log.setLevel(logging.INFO if getattr(args, "verbose", False) else logging.WARNING)
    command = COMMANDS[(args.command, getattr(args, "action", None))]
    try:
        return command(args)
    except AMIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    finally:
        log.removeHandler(stream)
        log.setLevel(previous_level)


if __name__ == "__main__":
    sys.exit(main())
