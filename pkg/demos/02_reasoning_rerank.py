"""
Reasoning rerank with a scripted backend
========================================

Rerank the BM25 candidates with a backend that writes a short reasoning
chain, then reads the probability of answering ``true`` after ``</think>``.
A scripted mock stands in for the model so the demo runs offline; swap in
``OpenAICompletionsBackend`` to talk to a real server.
"""

import json
from pathlib import Path

from thinkrank import (
    DEFAULT_TEMPLATE,
    GenParams,
    RerankConfig,
    assemble_prompt,
    build_index,
    evaluate,
    judge,
    relevance_score,
    rerank_run,
    retrieve,
)
from thinkrank.backend import load_mock_script
from thinkrank.core import RunEntry
from thinkrank.trec_io import load_corpus, load_queries, parse_qrels, read_lines

DATA = Path(__file__).parent / "data"

corpus = load_corpus(read_lines(DATA / "corpus.jsonl"))
queries = load_queries(read_lines(DATA / "queries.jsonl"))
qrels = parse_qrels(read_lines(DATA / "qrels.txt"))
backend = load_mock_script(json.loads((DATA / "mock_script.json").read_text()))

# For a live model:
#   from thinkrank import BackendConfig, OpenAICompletionsBackend
#   backend = OpenAICompletionsBackend(BackendConfig("http://localhost:8000/v1", "my-model"))

# --- what the model sees ---
print(assemble_prompt(DEFAULT_TEMPLATE, queries["q1"], corpus["d02"]))
print("...")

# --- one judgment ---
j = judge(backend, queries["q1"], corpus["d02"])
print(f"chain: {j.chain!r}")
print(f"lp(true)={j.lp_true:.4f} lp(false)={j.lp_false:.4f} score={j.score:.4f} prediction={j.prediction}")
# the score is a two-way softmax, so it only depends on the logprob gap
assert abs(relevance_score(j.lp_true + 5, j.lp_false + 5) - j.score) < 1e-12

# --- rerank the first stage ---
index = build_index(corpus.values())
first_stage = [
    RunEntry(qid, c.doc_id, c.first_stage_rank, c.score, "bm25")
    for qid, q in queries.items()
    for c in retrieve(index, q, k=10)
]
config = RerankConfig(params=GenParams(max_tokens=256), concurrency=4, run_tag="reasoner")
reranked, judgments = rerank_run(backend, queries, first_stage, corpus, config)

for e, jd in zip(reranked, judgments):
    print(f"{e.query_id} {e.rank:2d} {e.doc_id} {e.score:.3f}  {jd.chain[:60]}")

before = evaluate(first_stage, qrels, k_values=(5,), metrics=("ndcg",))
after = evaluate(reranked, qrels, k_values=(5,), metrics=("ndcg",))
print(f"nDCG@5  bm25 {before.means['ndcg@5']:.4f}  reranked {after.means['ndcg@5']:.4f}")

# --- ablation: skip the reasoning ---
direct, _ = rerank_run(backend, queries, first_stage, corpus, RerankConfig(mode="direct", run_tag="direct"))
print(f"nDCG@5  direct {evaluate(direct, qrels, (5,), ('ndcg',)).means['ndcg@5']:.4f}")
