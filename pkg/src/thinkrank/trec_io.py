"""Readers and writers for TREC runs/qrels, BEIR-style JSONL and the prompt map.

Every writer is the exact inverse of its reader: ``parse(write(x)) == x``
(run scores up to the 6-decimal print precision) and writing a parsed file
reproduces its bytes.
"""

from __future__ import annotations

import json
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass
from importlib import resources

from .core import Document, QrelEntry, Query, RunEntry
from .errors import ParseError, ValidationError

QUERY_PLACEHOLDER = "FILL_QUERY_HERE"
NEWLINE_MARKER = "<newline>"


def _numbered(lines: Iterable[str]) -> Iterator[tuple[int, str]]:
    for i, line in enumerate(lines, start=1):
        line = line.rstrip("\r\n")
        if line.strip():
            yield i, line


# --- qrels -----------------------------------------------------------------

def parse_qrels(lines: Iterable[str]) -> list[QrelEntry]:
    out: list[QrelEntry] = []
    seen: set[tuple[str, str]] = set()
    for no, line in _numbered(lines):
        fields = line.split()
        if len(fields) != 4:
            raise ParseError(f"expected 4 fields 'qid 0 docid grade', got {len(fields)}", no)
        qid, _, docid, raw_grade = fields
        try:
            grade = int(raw_grade)
        except ValueError:
            raise ParseError(f"grade {raw_grade!r} is not an integer", no) from None
        if grade < 0:
            raise ParseError(f"grade {grade} is negative", no)
        if (qid, docid) in seen:
            raise ParseError(f"duplicate judgment for ({qid}, {docid})", no)
        seen.add((qid, docid))
        out.append(QrelEntry(qid, docid, grade))
    return out


def write_qrels(entries: Iterable[QrelEntry]) -> str:
    return "".join(f"{e.query_id} 0 {e.doc_id} {e.grade}\n" for e in entries)


# --- runs ------------------------------------------------------------------

def validate_run(entries: Iterable[RunEntry]) -> None:
    """Check per-query rank contiguity, score monotonicity and doc uniqueness."""
    by_query: dict[str, list[RunEntry]] = {}
    for e in entries:
        by_query.setdefault(e.query_id, []).append(e)
    for qid, rows in by_query.items():
        docs = [r.doc_id for r in rows]
        if len(set(docs)) != len(docs):
            dup = next(d for d in docs if docs.count(d) > 1)
            raise ValidationError(f"query {qid}: doc {dup} appears more than once")
        rows = sorted(rows, key=lambda r: r.rank)
        for expected, r in enumerate(rows, start=1):
            if r.rank != expected:
                raise ValidationError(f"query {qid}: ranks are not 1..n (found {r.rank}, expected {expected})")
        for prev, cur in zip(rows, rows[1:]):
            if cur.score > prev.score:
                raise ValidationError(
                    f"query {qid}: score rises from {prev.score} at rank {prev.rank} "
                    f"to {cur.score} at rank {cur.rank}"
                )


def parse_run(lines: Iterable[str], validate: bool = True) -> list[RunEntry]:
    """Parse a 6-column TREC run. ``validate=False`` accepts foreign runs as-is."""
    out: list[RunEntry] = []
    for no, line in _numbered(lines):
        fields = line.split()
        if len(fields) != 6:
            raise ParseError(f"expected 6 fields 'qid Q0 docid rank score tag', got {len(fields)}", no)
        qid, _, docid, raw_rank, raw_score, tag = fields
        try:
            rank = int(raw_rank)
        except ValueError:
            raise ParseError(f"rank {raw_rank!r} is not an integer", no) from None
        try:
            score = float(raw_score)
        except ValueError:
            raise ParseError(f"score {raw_score!r} is not a number", no) from None
        if rank < 1:
            raise ParseError(f"rank {rank} must be >= 1", no)
        out.append(RunEntry(qid, docid, rank, score, tag))
    if validate:
        validate_run(out)
    return out


def write_run(entries: Iterable[RunEntry]) -> str:
    entries = list(entries)
    validate_run(entries)
    return "".join(
        f"{e.query_id} Q0 {e.doc_id} {e.rank} {e.score:.6f} {e.run_tag}\n" for e in entries
    )


# --- JSONL corpus / queries ------------------------------------------------

def _json_records(lines: Iterable[str]) -> Iterator[tuple[int, dict]]:
    for no, line in _numbered(lines):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", no) from None
        if not isinstance(rec, dict):
            raise ParseError("record is not a JSON object", no)
        yield no, rec


def _require(rec: dict, key: str, no: int) -> str:
    if key not in rec or rec[key] is None:
        raise ParseError(f"missing required key {key!r}", no)
    return str(rec[key])


def _document(rec: dict, no: int) -> Document:
    title = rec.get("title")
    return Document(
        id=_require(rec, "_id", no),
        text=_require(rec, "text", no),
        title=None if title is None else str(title),
    )


def _query(rec: dict, no: int) -> Query:
    return Query(
        id=_require(rec, "_id", no),
        text=_require(rec, "text", no),
        instruction=rec.get("instruction"),
        dataset_key=rec.get("dataset_key"),
    )


def load_corpus(lines: Iterable[str]) -> dict[str, Document]:
    """Load BEIR-style ``{"_id", "title", "text"}`` records keyed by id, in file order."""
    out: dict[str, Document] = {}
    for no, rec in _json_records(lines):
        doc = _document(rec, no)
        if doc.id in out:
            raise ParseError(f"duplicate document id {doc.id!r}", no)
        out[doc.id] = doc
    return out


def load_queries(lines: Iterable[str]) -> dict[str, Query]:
    out: dict[str, Query] = {}
    for no, rec in _json_records(lines):
        q = _query(rec, no)
        if q.id in out:
            raise ParseError(f"duplicate query id {q.id!r}", no)
        out[q.id] = q
    return out


def _dump(rec: dict) -> str:
    return json.dumps(rec, ensure_ascii=False) + "\n"


def _document_record(d: Document) -> dict:
    rec: dict = {"_id": d.id}
    if d.title is not None:
        rec["title"] = d.title
    rec["text"] = d.text
    return rec


def _query_record(q: Query) -> dict:
    rec: dict = {"_id": q.id, "text": q.text}
    if q.instruction is not None:
        rec["instruction"] = q.instruction
    if q.dataset_key is not None:
        rec["dataset_key"] = q.dataset_key
    return rec


def write_corpus(docs: Iterable[Document]) -> str:
    return "".join(_dump(_document_record(d)) for d in docs)


def write_queries(queries: Iterable[Query]) -> str:
    return "".join(_dump(_query_record(q)) for q in queries)


# --- paired instances ------------------------------------------------------

@dataclass(frozen=True)
class PairedInstance:
    """Two contrastive queries, each with the one document relevant to it."""

    id: str
    query_a: Query
    query_b: Query
    doc_a: Document
    doc_b: Document

    def __post_init__(self):
        ids = [self.query_a.id, self.query_b.id, self.doc_a.id, self.doc_b.id]
        if len(set(ids)) != 4:
            raise ValidationError(f"paired instance {self.id}: ids {ids} are not all distinct")


def load_paired_instances(lines: Iterable[str]) -> list[PairedInstance]:
    out: list[PairedInstance] = []
    for no, rec in _json_records(lines):
        for key in ("id", "q1", "q2", "doc1", "doc2"):
            if key not in rec:
                raise ParseError(f"missing required key {key!r}", no)
        try:
            out.append(
                PairedInstance(
                    id=str(rec["id"]),
                    query_a=_query(rec["q1"], no),
                    query_b=_query(rec["q2"], no),
                    doc_a=_document(rec["doc1"], no),
                    doc_b=_document(rec["doc2"], no),
                )
            )
        except ValidationError as exc:
            raise ParseError(str(exc), no) from None
    return out


def write_paired_instances(instances: Iterable[PairedInstance]) -> str:
    return "".join(
        _dump({
            "id": p.id,
            "q1": _query_record(p.query_a),
            "q2": _query_record(p.query_b),
            "doc1": _document_record(p.doc_a),
            "doc2": _document_record(p.doc_b),
        })
        for p in instances
    )


# --- prompt map ------------------------------------------------------------

class PromptMap(Mapping[str, str]):
    """Dataset key -> query template containing ``FILL_QUERY_HERE``.

    Templates are kept verbatim; ``<newline>`` markers are expanded only when
    a prompt is assembled.
    """

    def __init__(self, entries: Mapping[str, str]):
        for key, tpl in entries.items():
            if QUERY_PLACEHOLDER not in tpl:
                raise ValidationError(f"prompt for {key!r} lacks the {QUERY_PLACEHOLDER} placeholder")
        self._entries = dict(entries)

    def __getitem__(self, key: str) -> str:
        return self._entries[key]

    def __iter__(self):
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        return f"PromptMap({list(self._entries)})"


def load_prompt_map(lines: Iterable[str]) -> PromptMap:
    """Read ``key<TAB>template`` lines; ``#`` lines are comments."""
    entries: dict[str, str] = {}
    for no, line in _numbered(lines):
        if line.startswith("#"):
            continue
        key, sep, tpl = line.partition("\t")
        if not sep or not key:
            raise ParseError("expected 'dataset_key<TAB>template'", no)
        if key in entries:
            raise ParseError(f"duplicate dataset key {key!r}", no)
        if QUERY_PLACEHOLDER not in tpl:
            raise ValidationError(f"line {no}: prompt for {key!r} lacks the {QUERY_PLACEHOLDER} placeholder")
        entries[key] = tpl
    return PromptMap(entries)


def write_prompt_map(prompt_map: Mapping[str, str]) -> str:
    return "".join(f"{k}\t{v}\n" for k, v in prompt_map.items())


def default_prompt_map() -> PromptMap:
    """The packaged dataset-specific prompts for BEIR and BRIGHT subsets."""
    text = resources.files("thinkrank").joinpath("data/dataset_prompts.tsv").read_text("utf-8")
    return load_prompt_map(text.splitlines())


def read_lines(path) -> list[str]:
    # only "\n" ends a line; str.splitlines would also break on U+2028 inside JSON strings
    with open(path, encoding="utf-8") as fh:
        return fh.read().split("\n")


def write_text(path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)

