"""
BM25 first stage and ranking metrics
====================================

Index a toy corpus, retrieve candidates for each query and score the run
with nDCG, MRR and Judged@k.
"""

from pathlib import Path

import numpy as np

from thinkrank import build_index, evaluate, ndcg_at_k, retrieve, tokenize
from thinkrank.trec_io import load_corpus, load_queries, parse_qrels, read_lines

DATA = Path(__file__).parent / "data"

corpus = load_corpus(read_lines(DATA / "corpus.jsonl"))
queries = load_queries(read_lines(DATA / "queries.jsonl"))
qrels = parse_qrels(read_lines(DATA / "qrels.txt"))

# --- tokenizing and indexing ---
print(tokenize("Mount Everest is 8,849 metres tall"))
index = build_index(corpus.values())
print(f"{index.doc_count} docs, avgdl {index.avgdl:.2f}, idf('bees') = {index.idf('bees'):.4f}")

# every document's score for one query, as a numpy vector
scores = index.score_all(queries["q1"].text)
print("nonzero scores:", np.count_nonzero(scores), "max:", scores.max().round(4))

# --- retrieval ---
run = {}
for qid, query in queries.items():
    hits = retrieve(index, query, k=10)
    run[qid] = [h.doc_id for h in hits]
    print(qid, query.text, "->", run[qid])

# --- metrics ---
# the grades 0,3,2 ranking used as a sanity check throughout the tests
print("nDCG@3 of grades [0,3,2]:", round(ndcg_at_k(["x", "a", "b"], {"x": 0, "a": 3, "b": 2}, 3), 4))

report = evaluate(run, qrels, k_values=(1, 5, 10))
print(report.format_table(per_query=True))

# Judged@10 is low: BM25 returns only the few documents sharing a query term,
# and the empty slots count as unjudged.
