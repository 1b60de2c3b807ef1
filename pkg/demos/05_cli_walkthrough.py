"""
Command-line walkthrough
========================

The same retrieve, rerank, evaluate loop as the other demos, driven through
the ``thinkrank`` command. Each call below is equivalent to typing
``thinkrank <args>`` in a shell; outputs go to a temporary directory.
"""

import shlex
import tempfile
from pathlib import Path

from thinkrank.cli import main

DATA = Path(__file__).parent / "data"
out = Path(tempfile.mkdtemp(prefix="thinkrank-demo-"))


def thinkrank(args):
    print(f"\n$ thinkrank {args}")
    code = main(shlex.split(args))
    if code != 0:
        raise SystemExit(f"exit code {code}")


common = f"--corpus {DATA}/corpus.jsonl --queries {DATA}/queries.jsonl"

thinkrank(f"index --corpus {DATA}/corpus.jsonl")
thinkrank(f"retrieve {common} --out {out}/bm25.trec --k 100")

# the mock script replays canned chains and answer logprobs; with a server,
# use --config demos/data/thinkrank.ini or --endpoint URL --model NAME instead
thinkrank(f"rerank --run {out}/bm25.trec {common} --out {out}/reasoner.trec "
          f"--judgments {out}/judgments.jsonl --mock-script {DATA}/mock_script.json --run-tag reasoner")

for run in ("bm25", "reasoner"):
    thinkrank(f"evaluate --run {out}/{run}.trec --qrels {DATA}/qrels.txt --k 5 10 --metrics ndcg,mrr,judged "
              f"--out {out}/{run}.report")
thinkrank(f"report --report {out}/reasoner.report --format csv --per-query")

thinkrank(f"audit-find --runs {out}/bm25.trec {out}/reasoner.trec --qrels {DATA}/qrels.txt "
          f"--out {out}/sheet.csv {common}")
print(f"\nfiles written to {out}")
