"""Okapi BM25 first-stage retrieval over an in-memory inverted index."""

from __future__ import annotations

import math
import re
from collections import Counter
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field

import numpy as np

from .core import Document, Query, ScoredCandidate
from .errors import ValidationError

_SPLIT = re.compile(r"[\W_]+")


def tokenize(text: str, stopwords: frozenset[str] | None = None) -> list[str]:
    """Lowercase and split on every non-alphanumeric character. No stemming."""
    terms = [t for t in _SPLIT.split(text.lower()) if t]
    if stopwords:
        terms = [t for t in terms if t not in stopwords]
    return terms


@dataclass(frozen=True)
class Bm25Params:
    k1: float = 1.5
    b: float = 0.75

    def __post_init__(self):
        if not self.k1 > 0:
            raise ValidationError(f"k1 must be > 0, got {self.k1}")
        if not 0.0 <= self.b <= 1.0:
            raise ValidationError(f"b must lie in [0, 1], got {self.b}")


@dataclass
class Bm25Index:
    """Postings are ``term -> (doc ordinals, term frequencies)`` as int arrays."""

    postings: dict[str, tuple[np.ndarray, np.ndarray]]
    doc_lengths: np.ndarray
    avgdl: float
    doc_ids: list[str]
    params: Bm25Params = field(default_factory=Bm25Params)
    stopwords: frozenset[str] | None = None

    @property
    def doc_count(self) -> int:
        return len(self.doc_ids)

    def df(self, term: str) -> int:
        post = self.postings.get(term)
        return 0 if post is None else len(post[0])

    def idf(self, term: str) -> float:
        n, df = self.doc_count, self.df(term)
        return math.log(1.0 + (n - df + 0.5) / (df + 0.5))

    def _length_norm(self) -> np.ndarray:
        k1, b = self.params.k1, self.params.b
        if self.avgdl == 0:
            return np.full(self.doc_count, k1 * (1.0 - b))
        return k1 * (1.0 - b + b * self.doc_lengths / self.avgdl)

    def score_all(self, query_text: str) -> np.ndarray:
        """BM25 score of every document for ``query_text`` (0 for non-matching docs)."""
        scores = np.zeros(self.doc_count)
        norm = self._length_norm()
        k1 = self.params.k1
        # each distinct query term counts once
        for term in dict.fromkeys(tokenize(query_text, self.stopwords)):
            post = self.postings.get(term)
            if post is None:
                continue
            ords, tf = post
            tf = tf.astype(float)
            scores[ords] += self.idf(term) * tf * (k1 + 1.0) / (tf + norm[ords])
        return scores

    def matching(self, query_text: str) -> np.ndarray:
        """Ordinals of documents containing at least one query term."""
        hits = [self.postings[t][0] for t in set(tokenize(query_text, self.stopwords)) if t in self.postings]
        if not hits:
            return np.empty(0, dtype=np.int64)
        return np.unique(np.concatenate(hits))


def build_index(
    corpus: Iterable[Document] | Mapping[str, Document],
    params: Bm25Params | None = None,
    stopwords: Iterable[str] | None = None,
) -> Bm25Index:
    """Index ``title + " " + text`` of each document, in input order."""
    if isinstance(corpus, Mapping):
        corpus = corpus.values()
    params = params or Bm25Params()
    stop = frozenset(stopwords) if stopwords else None

    doc_ids: list[str] = []
    lengths: list[int] = []
    raw: dict[str, tuple[list[int], list[int]]] = {}
    for ordinal, doc in enumerate(corpus):
        terms = tokenize(f"{doc.title or ''} {doc.text}", stop)
        doc_ids.append(doc.id)
        lengths.append(len(terms))
        for term, tf in Counter(terms).items():
            ords, tfs = raw.setdefault(term, ([], []))
            ords.append(ordinal)
            tfs.append(tf)
    if not doc_ids:
        raise ValidationError("cannot index an empty corpus")

    postings = {
        t: (np.asarray(o, dtype=np.int64), np.asarray(f, dtype=np.int64)) for t, (o, f) in raw.items()
    }
    doc_lengths = np.asarray(lengths, dtype=np.int64)
    return Bm25Index(
        postings=postings,
        doc_lengths=doc_lengths,
        avgdl=float(doc_lengths.mean()),
        doc_ids=doc_ids,
        params=params,
        stopwords=stop,
    )


def retrieve(index: Bm25Index, query: Query | str, k: int = 100) -> list[ScoredCandidate]:
    """Top-``k`` matching documents, score descending then ascending doc ordinal.

    Candidate scores are the raw BM25 scores; ``first_stage_rank`` is the
    1-based position in the returned list.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    text = query.text if isinstance(query, Query) else query
    ords = index.matching(text)
    if ords.size == 0:
        return []
    scores = index.score_all(text)[ords]
    order = np.lexsort((ords, -scores))[:k]
    return [
        ScoredCandidate(doc_id=index.doc_ids[ords[i]], first_stage_rank=pos, score=float(scores[i]))
        for pos, i in enumerate(order, start=1)
    ]
