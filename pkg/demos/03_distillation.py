"""
Building a distillation set
===========================

Sample (query, passage) candidates from four pools, ask a teacher for a
reasoning trace and verdict, drop traces that contradict a trusted label or
a trained scorer, then export prompt/completion records for fine-tuning.

Both the teacher and the scorer are mocks with a hidden notion of relevance
that sometimes disagrees with the pool labels, the way a real teacher
disagrees with noisy training labels.
"""

import math
import random

from thinkrank import Document, MockReply, Prefix, Query, mock_register
from thinkrank.distill import (
    MixSpec,
    Pool,
    PoolRecord,
    agreement_filter,
    allocate_quotas,
    assemble_mix,
    chain_length_stats,
    export_training,
    generate_traces,
    sample_candidates,
    self_filter,
    status_counts,
    training_config_template,
    write_training_jsonl,
)

rng = random.Random(0)

# --- pools ---
queries, corpus, truth, pools = {}, {}, {}, {}
for pool in Pool:
    records = []
    for i in range(120):
        qid, did = f"{pool.value}-q{i}", f"{pool.value}-d{i}"
        queries[qid] = Query(qid, f"question number {i} about {pool.value}")
        corpus[did] = Document(did, f"passage {did} " + " ".join(rng.choice("abcdefgh") * 3 for _ in range(rng.randint(5, 60))))
        implied = pool is Pool.OFFICIAL_POSITIVE
        # hard negatives are often secretly relevant, labels elsewhere are mostly right
        flip = {Pool.OFFICIAL_POSITIVE: 0.1, Pool.EASY_NEGATIVE: 0.05}.get(pool, 0.3)
        truth[did] = implied if rng.random() > flip else not implied
        records.append(PoolRecord(qid, did, implied, pool))
    pools[pool] = records

spec = MixSpec({Pool.OFFICIAL_POSITIVE: 0.25, Pool.EASY_NEGATIVE: 0.25,
                Pool.HARD_NEGATIVE_1_5: 0.25, Pool.HARD_NEGATIVE_5_10: 0.25}, target_total=400)
print("quotas:", {p.value: n for p, n in allocate_quotas(spec).items()})
examples = sample_candidates(pools, spec, seed=13)


def doc_id(prompt):
    return prompt.split("Passage: passage ", 1)[1].split(" ", 1)[0]


def teacher(prompt, params):
    did = doc_id(prompt)
    steps = " ".join(f"Step {n}: weigh the evidence." for n in range(rng.randint(1, 8)))
    if rng.random() < 0.02:
        return steps  # ran out of budget without a verdict
    return f"{steps}</think> {'true' if truth[did] else 'false'}"


def scorer(prompt, params):
    p = 0.85 if truth[doc_id(prompt)] else 0.15
    if rng.random() < 0.05:
        p = 1 - p
    return MockReply(text="quick check", answer={" true": math.log(p), " false": math.log1p(-p)})


def show(stage):
    counts = status_counts(examples)
    print(f"{stage:<12}", {s.value: n for s, n in sorted(counts.items())}, "total", sum(counts.values()))


# --- teacher traces ---
report = generate_traces(mock_register({Prefix("Determine"): teacher}), examples, queries, corpus, concurrency=1)
print(f"generated {report.generated}, malformed {report.malformed}")
show("generated")

# --- filters ---
print(agreement_filter(examples).to_text(), end="")
show("agreement")
print(self_filter(mock_register({Prefix("Determine"): scorer}), examples, queries, corpus, concurrency=1).to_text(), end="")
show("self-filter")

# --- final mix and export ---
mix = assemble_mix(examples, spec)
print(mix.to_text(), end="")
# negatives the teacher called relevant stay "generated": they are never kept
show("mixed")

records = export_training(examples, queries, corpus)
print(write_training_jsonl(records[:1]))
print(chain_length_stats([e for e in examples if e.chain]).to_text(), end="")
print(training_config_template())
