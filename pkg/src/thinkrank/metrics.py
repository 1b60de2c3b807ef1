"""Ranking metrics: nDCG@k, MRR@k, Judged@k, p-MRR and paired (NevIR-style) accuracy.

A per-query run is either a list of :class:`RunEntry` (ordered by ``rank``)
or a plain list of doc ids already in rank order. Per-query qrels are
``{doc_id: grade}``.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field

from .core import Document, QrelEntry, Query, RunEntry, group_by_query, qrels_by_query
from .trec_io import PairedInstance

logger = logging.getLogger(__name__)

Ranking = Sequence[RunEntry] | Sequence[str]


def ranked_ids(run: Ranking) -> list[str]:
    run = list(run)
    if run and isinstance(run[0], RunEntry):
        return [e.doc_id for e in sorted(run, key=lambda e: e.rank)]
    return list(run)


def ndcg_at_k(run: Ranking, qrels: Mapping[str, int], k: int) -> float:
    """Linear-gain nDCG with a ``log2(i + 1)`` discount; unjudged docs gain 0.

    Returns 0.0 when the query has no relevant document (callers that
    aggregate should exclude such queries; :func:`evaluate` does).
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    docs = ranked_ids(run)[:k]
    dcg = sum(qrels.get(d, 0) / math.log2(i + 1) for i, d in enumerate(docs, start=1))
    ideal = sorted((g for g in qrels.values() if g > 0), reverse=True)[:k]
    idcg = sum(g / math.log2(i + 1) for i, g in enumerate(ideal, start=1))
    return dcg / idcg if idcg > 0 else 0.0


def mrr_at_k(run: Ranking, qrels: Mapping[str, int], k: int, rel_threshold: int = 1) -> float:
    if rel_threshold < 1:
        raise ValueError(f"rel_threshold must be >= 1, got {rel_threshold}")
    for i, d in enumerate(ranked_ids(run)[:k], start=1):
        if qrels.get(d, 0) >= rel_threshold:
            return 1.0 / i
    return 0.0


def judged_at_k(run: Ranking, qrels: Mapping[str, int], k: int) -> float:
    """Share of the top-``k`` slots holding a judged doc (any grade, 0 included).

    The denominator is ``k`` itself, so short runs are penalized for their
    empty slots.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return sum(1 for d in ranked_ids(run)[:k] if d in qrels) / k


# --- p-MRR -----------------------------------------------------------------

def _rank_of(doc_id: str, docs: list[str]) -> int:
    try:
        return docs.index(doc_id) + 1
    except ValueError:
        return len(docs) + 1


def rank_change(r_og: int, r_new: int) -> float:
    """Per-document p-MRR term: positive when the document moved up."""
    if r_new < r_og:
        return r_og / r_new - 1.0
    return 1.0 - r_new / r_og


def p_mrr_per_query(
    original: Mapping[str, Ranking],
    instructed: Mapping[str, Ranking],
    changed_docs: Mapping[str, Sequence[str]],
) -> dict[str, float]:
    """Mean rank change of each query's instruction-affected documents.

    A document missing from a run counts as ranked just past its end.
    Queries without changed documents are left out.
    """
    if set(original) != set(instructed):
        raise ValueError("original and instructed runs cover different query sets")
    out: dict[str, float] = {}
    for qid in original:
        changed = changed_docs.get(qid) or []
        if not changed:
            continue
        og, new = ranked_ids(original[qid]), ranked_ids(instructed[qid])
        deltas = [rank_change(_rank_of(d, og), _rank_of(d, new)) for d in changed]
        out[qid] = sum(deltas) / len(deltas)
    return out


def p_mrr(
    original: Mapping[str, Ranking],
    instructed: Mapping[str, Ranking],
    changed_docs: Mapping[str, Sequence[str]],
) -> float:
    """Mean over queries of :func:`p_mrr_per_query`, scaled by 100."""
    per_query = p_mrr_per_query(original, instructed, changed_docs)
    if not per_query:
        return 0.0
    return 100.0 * sum(per_query.values()) / len(per_query)


# --- paired accuracy -------------------------------------------------------

@dataclass(frozen=True)
class PairOutcome:
    instance_id: str
    correct: bool
    error: str | None = None


def pairwise_outcomes(
    instances: Iterable[PairedInstance],
    scorer: Callable[[Query, Document], float],
) -> list[PairOutcome]:
    out = []
    for inst in instances:
        try:
            aa = scorer(inst.query_a, inst.doc_a)
            ab = scorer(inst.query_a, inst.doc_b)
            bb = scorer(inst.query_b, inst.doc_b)
            ba = scorer(inst.query_b, inst.doc_a)
        except Exception as exc:  # a failing scorer only costs this instance
            logger.warning("scorer failed on instance %s: %s", inst.id, exc)
            out.append(PairOutcome(inst.id, False, f"{type(exc).__name__}: {exc}"))
            continue
        out.append(PairOutcome(inst.id, aa > ab and bb > ba))
    return out


def pairwise_accuracy(
    instances: Sequence[PairedInstance],
    scorer: Callable[[Query, Document], float],
) -> float:
    """Fraction of instances where each query scores its own document strictly higher."""
    if not instances:
        raise ValueError("pairwise_accuracy needs at least one instance")
    outcomes = pairwise_outcomes(instances, scorer)
    return sum(o.correct for o in outcomes) / len(outcomes)


# --- aggregate reports -----------------------------------------------------

METRICS = ("ndcg", "mrr", "judged")


@dataclass
class MetricReport:
    per_query: dict[str, dict[str, float]]
    means: dict[str, float]
    k_values: list[int]
    query_count: int
    excluded: list[str] = field(default_factory=list)

    def to_text(self) -> str:
        """Keyed text: ``meta``, ``mean`` and ``query`` rows, tab-separated."""
        lines = [
            f"meta\tquery_count\t{self.query_count}",
            f"meta\tk_values\t{','.join(map(str, self.k_values))}",
        ]
        if self.excluded:
            lines.append(f"meta\texcluded\t{','.join(self.excluded)}")
        lines += [f"mean\t{m}\t{v:.6f}" for m, v in self.means.items()]
        for qid, row in self.per_query.items():
            lines += [f"query\t{qid}\t{m}\t{v:.6f}" for m, v in row.items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, lines: Iterable[str]) -> MetricReport:
        per_query: dict[str, dict[str, float]] = {}
        means: dict[str, float] = {}
        k_values: list[int] = []
        query_count = 0
        excluded: list[str] = []
        for line in lines:
            if not line.strip():
                continue
            kind, *rest = line.rstrip("\n").split("\t")
            if kind == "meta":
                key, value = rest
                if key == "query_count":
                    query_count = int(value)
                elif key == "k_values":
                    k_values = [int(v) for v in value.split(",") if v]
                elif key == "excluded":
                    excluded = [v for v in value.split(",") if v]
            elif kind == "mean":
                means[rest[0]] = float(rest[1])
            elif kind == "query":
                per_query.setdefault(rest[0], {})[rest[1]] = float(rest[2])
        return cls(per_query, means, k_values, query_count, excluded)

    def format_table(self, per_query: bool = False) -> str:
        """Aligned plain-text table of the means (optionally one row per query)."""
        names = list(self.means)
        rows = [["query", *names]]
        if per_query:
            for qid, row in self.per_query.items():
                rows.append([qid, *(f"{row[m]:.4f}" if m in row else "-" for m in names)])
        rows.append([f"mean ({self.query_count})", *(f"{self.means[m]:.4f}" for m in names)])
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        return "\n".join(
            "  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(r, widths)))
            for r in rows
        ) + "\n"

    def to_csv(self) -> str:
        names = list(self.means)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["query_id", *names])
        for qid, row in self.per_query.items():
            w.writerow([qid, *(f"{row[m]:.6f}" if m in row else "" for m in names)])
        w.writerow(["mean", *(f"{self.means[m]:.6f}" for m in names)])
        return buf.getvalue()


def evaluate(
    run: Mapping[str, Ranking] | Iterable[RunEntry],
    qrels: Mapping[str, Mapping[str, int]] | Iterable[QrelEntry],
    k_values: Sequence[int] = (10,),
    metrics: Sequence[str] = METRICS,
    rel_threshold: int = 1,
) -> MetricReport:
    """Per-query and mean metrics over queries present in both run and qrels.

    nDCG is skipped (and the query listed in ``excluded``) for queries with
    no relevant document.
    """
    if not isinstance(run, Mapping):
        run = group_by_query(run)
    if not isinstance(qrels, Mapping):
        qrels = qrels_by_query(qrels)
    unknown = set(metrics) - set(METRICS)
    if unknown:
        raise ValueError(f"unknown metrics {sorted(unknown)}; choose from {METRICS}")

    per_query: dict[str, dict[str, float]] = {}
    excluded: list[str] = []
    for qid, ranking in run.items():
        if qid not in qrels:
            continue
        judged = qrels[qid]
        has_relevant = any(g > 0 for g in judged.values())
        if "ndcg" in metrics and not has_relevant:
            excluded.append(qid)
        row: dict[str, float] = {}
        for k in k_values:
            if "ndcg" in metrics and has_relevant:
                row[f"ndcg@{k}"] = ndcg_at_k(ranking, judged, k)
            if "mrr" in metrics:
                row[f"mrr@{k}"] = mrr_at_k(ranking, judged, k, rel_threshold)
            if "judged" in metrics:
                row[f"judged@{k}"] = judged_at_k(ranking, judged, k)
        per_query[qid] = row

    names = [f"{m}@{k}" for m in metrics for k in k_values]
    means = {}
    for name in names:
        values = [row[name] for row in per_query.values() if name in row]
        means[name] = sum(values) / len(values) if values else 0.0
    return MetricReport(per_query, means, list(k_values), len(per_query), excluded)
