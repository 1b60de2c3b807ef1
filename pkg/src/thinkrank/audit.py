"""Relevance-judgment auditing: find suspect top-k documents, collect human
grades through a CSV sheet, merge them into the qrels and measure the effect."""

from __future__ import annotations

import csv
import io
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum

from .core import Document, QrelEntry, Query, RunEntry, group_by_query, qrels_by_query
from .errors import ParseError, ValidationError
from .metrics import MetricReport, evaluate

SHEET_COLUMNS = (
    "query_id",
    "doc_id",
    "query_text",
    "doc_text_excerpt",
    "current_grade",
    "proposed_grade",
    "rank_positions",
    "source_runs",
)
EXCERPT_CHARS = 500


@dataclass
class AnnotationItem:
    query_id: str
    doc_id: str
    query_text: str = ""
    doc_text: str = ""
    source_runs: list[str] = field(default_factory=list)
    current_grade: int | None = None
    proposed_grade: int | None = None
    rank_positions: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.proposed_grade is not None and self.proposed_grade < 0:
            raise ValidationError(f"({self.query_id}, {self.doc_id}): proposed grade {self.proposed_grade} < 0")


RunSet = Mapping[str, Mapping[str, Sequence[RunEntry]]]


def _as_run_set(runs: Mapping[str, Iterable[RunEntry] | Mapping[str, Sequence[RunEntry]]]) -> RunSet:
    return {tag: r if isinstance(r, Mapping) else group_by_query(r) for tag, r in runs.items()}


def find_audit_set(
    runs: Mapping[str, Iterable[RunEntry] | Mapping[str, Sequence[RunEntry]]],
    qrels: Iterable[QrelEntry] | Mapping[str, Mapping[str, int]],
    k: int = 10,
    rel_threshold: int = 2,
    queries: Mapping[str, Query] | None = None,
    corpus: Mapping[str, Document] | None = None,
) -> list[AnnotationItem]:
    """Top-``k`` documents, across all runs, that are unjudged or graded below
    ``rel_threshold``. ``runs`` maps run tag to that run's entries.

    One item per (query, doc), sorted by query then doc id, listing every run
    that surfaced it and its rank there.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not isinstance(qrels, Mapping):
        qrels = qrels_by_query(qrels)
    items: dict[tuple[str, str], AnnotationItem] = {}
    for tag, by_query in _as_run_set(runs).items():
        for qid, entries in by_query.items():
            judged = qrels.get(qid, {})
            for e in sorted(entries, key=lambda e: e.rank)[:k]:
                grade = judged.get(e.doc_id)
                if grade is not None and grade >= rel_threshold:
                    continue
                item = items.get((qid, e.doc_id))
                if item is None:
                    item = items[(qid, e.doc_id)] = AnnotationItem(
                        query_id=qid,
                        doc_id=e.doc_id,
                        query_text=queries[qid].text if queries and qid in queries else "",
                        doc_text=corpus[e.doc_id].passage if corpus and e.doc_id in corpus else "",
                        current_grade=grade,
                    )
                if tag not in item.source_runs:
                    item.source_runs.append(tag)
                item.rank_positions[tag] = e.rank
    return [items[key] for key in sorted(items)]


def write_annotation_sheet(items: Iterable[AnnotationItem]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SHEET_COLUMNS)
    for it in items:
        w.writerow([
            it.query_id,
            it.doc_id,
            it.query_text,
            it.doc_text[:EXCERPT_CHARS],
            "" if it.current_grade is None else it.current_grade,
            "" if it.proposed_grade is None else it.proposed_grade,
            ";".join(f"{tag}:{rank}" for tag, rank in it.rank_positions.items()),
            ";".join(it.source_runs),
        ])
    return buf.getvalue()


def _opt_int(value: str, column: str, line_no: int) -> int | None:
    value = value.strip()
    if not value:
        return None
    try:
        return int(value)
    except ValueError:
        raise ParseError(f"{column} {value!r} is not an integer", line_no) from None


def read_annotation_sheet(text: str) -> list[AnnotationItem]:
    reader = csv.DictReader(io.StringIO(text))
    missing = set(SHEET_COLUMNS) - set(reader.fieldnames or [])
    if missing:
        raise ParseError(f"annotation sheet lacks columns {sorted(missing)}", 1)
    items = []
    for row in reader:
        no = reader.line_num
        positions = {}
        for part in filter(None, row["rank_positions"].split(";")):
            tag, _, rank = part.rpartition(":")
            positions[tag] = int(rank)
        try:
            items.append(AnnotationItem(
                query_id=row["query_id"],
                doc_id=row["doc_id"],
                query_text=row["query_text"],
                doc_text=row["doc_text_excerpt"],
                source_runs=[s for s in row["source_runs"].split(";") if s],
                current_grade=_opt_int(row["current_grade"], "current_grade", no),
                proposed_grade=_opt_int(row["proposed_grade"], "proposed_grade", no),
                rank_positions=positions,
            ))
        except ValidationError as exc:
            raise ParseError(str(exc), no) from None
    return items


class ChangeCategory(str, Enum):
    UNJUDGED_TO_GRADED = "unjudged_to_graded"
    CHANGED = "changed"


@dataclass(frozen=True)
class Change:
    category: ChangeCategory
    query_id: str
    doc_id: str
    old_grade: int | None
    new_grade: int


@dataclass
class ChangeLog:
    """Every applied annotation. ``changed`` covers all re-annotated existing
    judgments, including ones whose grade was confirmed unchanged."""

    changes: list[Change] = field(default_factory=list)

    def count(self, category: ChangeCategory) -> int:
        return sum(1 for c in self.changes if c.category is category)

    def to_text(self) -> str:
        lines = [f"count\t{cat.value}\t{self.count(cat)}" for cat in ChangeCategory]
        for c in self.changes:
            old = "-" if c.old_grade is None else c.old_grade
            lines.append(f"change\t{c.category.value}\t{c.query_id}\t{c.doc_id}\t{old}\t{c.new_grade}")
        return "\n".join(lines) + "\n"


def merge_annotations(
    qrels: Sequence[QrelEntry],
    annotations: Iterable[AnnotationItem],
    policy: str = "add-and-override",
) -> tuple[list[QrelEntry], ChangeLog]:
    """Apply human grades: new judgments are appended (sorted by query, doc),
    existing ones are replaced in place. The input list is left untouched."""
    if policy != "add-and-override":
        raise ValueError(f"unsupported merge policy {policy!r}")
    decided: dict[tuple[str, str], AnnotationItem] = {}
    for item in annotations:
        if item.proposed_grade is None:
            raise ValidationError(f"({item.query_id}, {item.doc_id}) has no proposed grade")
        key = (item.query_id, item.doc_id)
        prior = decided.get(key)
        if prior is not None and prior.proposed_grade != item.proposed_grade:
            raise ValidationError(
                f"conflicting annotations for {key}: grade {prior.proposed_grade} vs {item.proposed_grade}"
            )
        decided[key] = item

    log = ChangeLog()
    fixed = []
    for q in qrels:
        item = decided.get((q.query_id, q.doc_id))
        if item is None:
            fixed.append(q)
            continue
        fixed.append(QrelEntry(q.query_id, q.doc_id, item.proposed_grade))
        log.changes.append(Change(ChangeCategory.CHANGED, q.query_id, q.doc_id, q.grade, item.proposed_grade))
    existing = {(q.query_id, q.doc_id) for q in qrels}
    for key in sorted(set(decided) - existing):
        grade = decided[key].proposed_grade
        fixed.append(QrelEntry(key[0], key[1], grade))
        log.changes.append(Change(ChangeCategory.UNJUDGED_TO_GRADED, key[0], key[1], None, grade))
    return fixed, log


@dataclass
class RunDelta:
    run_tag: str
    original: MetricReport
    fixed: MetricReport
    k: int

    def delta(self, metric: str) -> float:
        name = f"{metric}@{self.k}"
        return self.fixed.means.get(name, 0.0) - self.original.means.get(name, 0.0)


def metric_delta(
    runs: Mapping[str, Iterable[RunEntry] | Mapping[str, Sequence[RunEntry]]],
    qrels_original: Iterable[QrelEntry],
    qrels_fixed: Iterable[QrelEntry],
    k: int = 10,
) -> dict[str, RunDelta]:
    """nDCG@k and Judged@k of each run under the original and fixed qrels."""
    original, fixed = qrels_by_query(qrels_original), qrels_by_query(qrels_fixed)
    if not original or not fixed:
        raise ValidationError("both qrels collections must be nonempty")
    out = {}
    for tag, by_query in _as_run_set(runs).items():
        out[tag] = RunDelta(
            tag,
            evaluate(by_query, original, (k,), ("ndcg", "judged")),
            evaluate(by_query, fixed, (k,), ("ndcg", "judged")),
            k,
        )
    return out


def format_delta_table(deltas: Mapping[str, RunDelta]) -> str:
    if not deltas:
        return ""
    k = next(iter(deltas.values())).k
    rows = [["run", f"judged@{k}", f"ndcg@{k}", f"fixed judged@{k}", f"fixed ndcg@{k}", "delta ndcg"]]
    for tag, d in deltas.items():
        rows.append([
            tag,
            f"{d.original.means[f'judged@{k}']:.4f}",
            f"{d.original.means[f'ndcg@{k}']:.4f}",
            f"{d.fixed.means[f'judged@{k}']:.4f}",
            f"{d.fixed.means[f'ndcg@{k}']:.4f}",
            f"{d.delta('ndcg'):+.4f}",
        ])
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join(
        "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in rows
    ) + "\n"
