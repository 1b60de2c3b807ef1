"""Independent reference implementations used as test oracles.

Nothing here imports the code under test; each oracle recomputes its
quantity by brute force or a deliberately different route.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


# --- ranking ---------------------------------------------------------------

def pairwise_sort(items):
    """Position of each ``(key, score, tiebreak)`` by counting who beats it.

    O(n^2): item i precedes j iff score_i > score_j, or equal and tiebreak_i < tiebreak_j.
    """
    pos = {}
    for key, s, t in items:
        beaten_by = sum(1 for _, s2, t2 in items if s2 > s or (s2 == s and t2 < t))
        pos[key] = beaten_by
    return [k for k, _ in sorted(pos.items(), key=lambda kv: kv[1])]


# --- tokenization / BM25 ---------------------------------------------------

def char_tokenize(text):
    out, cur = [], []
    for ch in text.lower():
        if ch.isalnum():
            cur.append(ch)
        elif cur:
            out.append("".join(cur))
            cur = []
    if cur:
        out.append("".join(cur))
    return out


def bm25_exhaustive(docs, query, k1=1.5, b=0.75):
    """Score every doc from scratch; ``docs`` is a list of raw strings."""
    toks = [char_tokenize(d) for d in docs]
    n = len(toks)
    avgdl = sum(len(t) for t in toks) / n
    qterms = set(char_tokenize(query))
    scores = []
    for t in toks:
        s = 0.0
        for term in qterms:
            tf = t.count(term)
            if tf == 0:
                continue
            df = sum(1 for other in toks if term in other)
            idf = math.log(1 + (n - df + 0.5) / (df + 0.5))
            s += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len(t) / avgdl))
        scores.append(s)
    return scores


def document_frequencies(docs):
    df = {}
    for d in docs:
        for term in set(char_tokenize(d)):
            df[term] = df.get(term, 0) + 1
    return df


# --- metrics ---------------------------------------------------------------

def dcg_np(gains):
    gains = np.asarray(gains, dtype=float)
    if gains.size == 0:
        return 0.0
    return float(np.sum(gains / np.log2(np.arange(2, gains.size + 2))))


def ideal_dcg(grades, k):
    """Max DCG@k over arrangements of the judged grades.

    Enumerates permutations for up to 7 grades; beyond that uses the
    rearrangement inequality with numpy sorting.
    """
    grades = [g for g in grades if g > 0]
    if len(grades) <= 7:
        best = 0.0
        for perm in itertools.permutations(grades):
            best = max(best, dcg_np(perm[:k]))
        return best
    return dcg_np(-np.sort(-np.asarray(grades))[:k])


def ndcg_oracle(ranked, qrels, k):
    idcg = ideal_dcg(list(qrels.values()), k)
    if idcg == 0:
        return 0.0
    return dcg_np([qrels.get(d, 0) for d in ranked[:k]]) / idcg


def worst_ndcg(pool, qrels, k):
    """Min nDCG@k over all orderings of a candidate pool (grades ascending first)."""
    idcg = ideal_dcg(list(qrels.values()), k)
    if idcg == 0:
        return 0.0
    gains = np.sort(np.asarray([qrels.get(d, 0) for d in pool], dtype=float))
    return dcg_np(gains[:k]) / idcg


def mrr_oracle(ranked, qrels, k, threshold=1):
    hits = np.array([qrels.get(d, 0) >= threshold for d in ranked[:k]], dtype=bool)
    if not hits.any():
        return 0.0
    return 1.0 / (int(np.argmax(hits)) + 1)


def p_mrr_oracle(og_rank, new_rank):
    """Per-doc term written from the definition with explicit min/max."""
    lo, hi = min(og_rank, new_rank), max(og_rank, new_rank)
    magnitude = hi / lo - 1.0
    if new_rank < og_rank:
        return magnitude
    if new_rank > og_rank:
        return -magnitude
    return 0.0


def softmax2(a, b):
    m = max(a, b)
    ea, eb = math.exp(a - m), math.exp(b - m)
    return ea / (ea + eb)
