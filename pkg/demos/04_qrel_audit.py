"""
Auditing relevance judgments
============================

A reranker that surfaces documents the original assessors never saw looks
worse than it is: unjudged documents count as non-relevant. This demo
collects the unjudged and low-graded top-10 documents of two runs, applies
annotations, and compares nDCG@10 before and after.
"""

import random

from thinkrank import QrelEntry, RunEntry
from thinkrank.audit import (
    find_audit_set,
    format_delta_table,
    merge_annotations,
    metric_delta,
    read_annotation_sheet,
    write_annotation_sheet,
)

rng = random.Random(1)
qrels, runs = [], {"bm25": [], "reasoner": []}
hidden = {}  # what a careful annotator would say

for q in range(20):
    qid = f"q{q}"
    judged = [f"{qid}-j{i}" for i in range(8)]
    grades = [3, 2, 2, 1, 0, 0, 0, 0]
    qrels += [QrelEntry(qid, d, g) for d, g in zip(judged, grades)]
    fresh = [f"{qid}-new{i}" for i in range(4)]
    for d in fresh:
        hidden[(qid, d)] = 3 if rng.random() < 0.7 else 0
    # the first stage mostly returns what the pool was built from
    bm25 = judged[:3] + judged[4:8] + judged[3:4] + fresh[:1] + [f"{qid}-bg"]
    # the reasoner finds the unseen relevant documents
    reasoner = fresh[:3] + judged[:4] + judged[4:6] + fresh[3:]
    for tag, docs in (("bm25", bm25), ("reasoner", reasoner)):
        runs[tag] += [RunEntry(qid, d, r, 10.0 - r, tag) for r, d in enumerate(docs, 1)]

# --- what needs a look ---
items = find_audit_set(runs, qrels, k=10, rel_threshold=2)
print(f"{len(items)} pairs to annotate, {sum(i.current_grade is None for i in items)} never judged")

# the sheet is a CSV that annotators fill in; we fill it programmatically
sheet = write_annotation_sheet(items)
print(sheet.splitlines()[0])
annotated = read_annotation_sheet(sheet)
for item in annotated:
    if item.current_grade is None:
        item.proposed_grade = hidden.get((item.query_id, item.doc_id), 0)
    else:
        item.proposed_grade = item.current_grade  # confirmed

# --- merge and compare ---
fixed, log = merge_annotations(qrels, annotated)
print(log.to_text().split("\nchange")[0])
print(format_delta_table(metric_delta(runs, qrels, fixed, k=10)))
