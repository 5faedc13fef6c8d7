"""Offline demo helpers.

``python -m ami_agent.simkit build DIR`` writes a synthetic corpus, the four
population CSVs and a replayable snapshot under DIR.

``python -m ami_agent.simkit serve`` starts the mock LLM and embedding
endpoints and prints the environment variables that point the CLI at them.
"""

from __future__ import annotations

import argparse
import sys
import threading

from ami_agent.simkit.corpus import build_population_corpus
from ami_agent.simkit.servers import FixtureWeb, mock_embedder, mock_llm


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="python -m ami_agent.simkit")
    sub = parser.add_subparsers(dest="command", required=True)
    b = sub.add_parser("build", help="write corpus/, dataset/ and snapshot/ under DIR")
    b.add_argument("root")
    b.add_argument("--per-population", type=int, default=10)
    sub.add_parser("serve", help="run mock LLM and embedding endpoints until interrupted")
    args = parser.parse_args(argv)

    if args.command == "build":
        corpus, dataset = build_population_corpus(args.root, args.per_population)
        snapshot = corpus.parent / "snapshot"
        FixtureWeb(corpus).write_snapshot(snapshot)
        print(f"corpus:   {corpus}\ndataset:  {dataset}\nsnapshot: {snapshot}")
        return 0

    llm, emb = mock_llm(), mock_embedder()
    print(f"export AMI_LLM_BASE_URL={llm.base_url} AMI_LLM_MODEL={llm.model}")
    print(f"export AMI_EMBED_BASE_URL={emb.base_url} AMI_EMBED_MODEL={emb.model}")
    sys.stdout.flush()
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        pass
    finally:
        llm.stop()
        emb.stop()
    return 0


if __name__ == "__main__":
    sys.exit(main())
