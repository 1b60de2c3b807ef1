"""Domain records for retrieval experiments and small ranking helpers."""

from __future__ import annotations

import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass

from .errors import ValidationError


@dataclass(frozen=True)
class Document:
    id: str
    text: str
    title: str | None = None

    def __post_init__(self):
        if not self.id:
            raise ValidationError("document id must be nonempty")

    @property
    def passage(self) -> str:
        """Title and body joined by a space; just the body when there is no title."""
        if self.title:
            return f"{self.title} {self.text}"
        return self.text


@dataclass(frozen=True)
class Query:
    id: str
    text: str
    instruction: str | None = None
    dataset_key: str | None = None

    def __post_init__(self):
        if not self.id:
            raise ValidationError("query id must be nonempty")
        if self.instruction is not None and not self.text:
            raise ValidationError(f"query {self.id}: instruction given but text is empty")


@dataclass(frozen=True)
class QrelEntry:
    query_id: str
    doc_id: str
    grade: int

    def __post_init__(self):
        if isinstance(self.grade, bool) or not isinstance(self.grade, int):
            raise ValidationError(f"grade must be an integer, got {self.grade!r}")
        if self.grade < 0:
            raise ValidationError(f"grade must be >= 0, got {self.grade}")


@dataclass(frozen=True)
class RunEntry:
    query_id: str
    doc_id: str
    rank: int
    score: float
    run_tag: str

    def __post_init__(self):
        if self.rank < 1:
            raise ValidationError(f"rank must be >= 1, got {self.rank}")


@dataclass(frozen=True)
class ScoredCandidate:
    """A document waiting to be (re)ranked.

    ``score`` is whatever the producing stage emits: a reranker probability in
    [0, 1], or a raw first-stage score (BM25, dense similarity) which is not
    bounded. Only finiteness is enforced here.
    """

    doc_id: str
    first_stage_rank: int
    score: float

    def __post_init__(self):
        if self.first_stage_rank < 1:
            raise ValidationError(f"first_stage_rank must be >= 1, got {self.first_stage_rank}")


def stable_rank(
    candidates: Sequence[ScoredCandidate],
    query_id: str = "",
    run_tag: str = "",
) -> list[RunEntry]:
    """Order candidates by score descending, ties by ascending first-stage rank.

    Ranks in the output run from 1 to ``len(candidates)``.
    """
    if not candidates:
        raise ValidationError("stable_rank needs at least one candidate")
    for c in candidates:
        if not math.isfinite(c.score):
            raise ValidationError(f"non-finite score {c.score!r} for doc {c.doc_id}")
    ordered = sorted(candidates, key=lambda c: (-c.score, c.first_stage_rank))
    return [
        RunEntry(query_id=query_id, doc_id=c.doc_id, rank=i, score=c.score, run_tag=run_tag)
        for i, c in enumerate(ordered, start=1)
    ]


def binarize(grade: int, threshold: int) -> bool:
    if threshold < 1:
        raise ValueError(f"threshold must be >= 1, got {threshold}")
    return grade >= threshold


def candidates_from_run(entries: Iterable[RunEntry]) -> list[ScoredCandidate]:
    """Turn one query's first-stage run into candidates, keeping its ranks."""
    return [
        ScoredCandidate(doc_id=e.doc_id, first_stage_rank=e.rank, score=e.score)
        for e in sorted(entries, key=lambda e: e.rank)
    ]


def group_by_query(entries: Iterable[RunEntry]) -> dict[str, list[RunEntry]]:
    """Split a flat run into per-query lists sorted by rank, keeping first-seen query order."""
    out: dict[str, list[RunEntry]] = {}
    for e in entries:
        out.setdefault(e.query_id, []).append(e)
    for qid in out:
        out[qid].sort(key=lambda e: e.rank)
    return out


def qrels_by_query(entries: Iterable[QrelEntry]) -> dict[str, dict[str, int]]:
    """``{query_id: {doc_id: grade}}`` view of a qrels collection."""
    out: dict[str, dict[str, int]] = {}
    for q in entries:
        out.setdefault(q.query_id, {})[q.doc_id] = q.grade
    return out
