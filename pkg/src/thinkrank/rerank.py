"""Reasoning-based pointwise reranking.

Each (query, passage) pair is judged by letting the backend reason inside a
``<think>`` block, closing the block, and reading the probability of the
answer token ``true`` against ``false``. That two-way probability is the
document's relevance score.
"""

from __future__ import annotations

import json
import math
import re
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum

from .backend import THINK_CLOSE, THINK_OPEN, CompletionBackend, FinishReason, GenParams
from .core import Document, Query, RunEntry, ScoredCandidate, candidates_from_run, stable_rank
from .errors import (
    BackendError,
    ConfigurationError,
    JudgmentError,
    ThinkrankError,
    UndecidableError,
    ValidationError,
)
from .trec_io import NEWLINE_MARKER, QUERY_PLACEHOLDER, PromptMap

QUERY_SLOT = "{{query}}"
PASSAGE_SLOT = "{{document}}"

DEFAULT_TEMPLATE_BODY = (
    "Determine if the following passage is relevant to the query. "
    "Answer only with 'true' or 'false'.\n\n"
    f"Query: {QUERY_SLOT}\n\n"
    f"Passage: {PASSAGE_SLOT}\n\n"
    f"{THINK_OPEN}"
)

_SLOTS = re.compile(re.escape(QUERY_SLOT) + "|" + re.escape(PASSAGE_SLOT))


class Mode(str, Enum):
    REASONING = "reasoning"
    DIRECT = "direct"


@dataclass(frozen=True)
class PromptTemplate:
    body: str = DEFAULT_TEMPLATE_BODY

    def __post_init__(self):
        if self.body.count(QUERY_SLOT) != 1 or self.body.count(PASSAGE_SLOT) != 1:
            raise ConfigurationError(f"template needs exactly one {QUERY_SLOT} and one {PASSAGE_SLOT}")
        if not self.body.endswith(THINK_OPEN):
            raise ConfigurationError(f"template must end with {THINK_OPEN!r}")

    @classmethod
    def from_file(cls, path) -> PromptTemplate:
        with open(path, encoding="utf-8") as fh:
            return cls(fh.read().rstrip("\n"))

    def fill(self, query_text: str, passage: str) -> str:
        # single pass, so slot-like text inside the query or passage stays literal
        values = {QUERY_SLOT: query_text, PASSAGE_SLOT: passage}
        return _SLOTS.sub(lambda m: values[m.group(0)], self.body)


DEFAULT_TEMPLATE = PromptTemplate()


def effective_query_text(query: Query, prompt_map: PromptMap | None = None) -> str:
    """Query text after instruction appending and dataset-prompt expansion."""
    text = query.text
    if query.instruction:
        text = f"{text} {query.instruction}"
    if query.dataset_key and prompt_map is not None:
        if query.dataset_key not in prompt_map:
            raise ConfigurationError(f"no dataset prompt for key {query.dataset_key!r}")
        template = prompt_map[query.dataset_key].replace(NEWLINE_MARKER, "\n")
        text = template.replace(QUERY_PLACEHOLDER, text)
    return text


def assemble_prompt(
    template: PromptTemplate,
    query: Query,
    doc: Document,
    prompt_map: PromptMap | None = None,
) -> str:
    return template.fill(effective_query_text(query, prompt_map), doc.passage)


def relevance_score(lp_true: float, lp_false: float) -> float:
    """``exp(lp_true) / (exp(lp_true) + exp(lp_false))`` without overflow."""
    if lp_true == -math.inf and lp_false == -math.inf:
        raise UndecidableError("both answer logprobs are -inf")
    if lp_false == -math.inf:
        return 1.0
    if lp_true == -math.inf:
        return 0.0
    d = lp_true - lp_false
    if d >= 0:
        return 1.0 / (1.0 + math.exp(-d))
    e = math.exp(d)
    return e / (1.0 + e)


@dataclass(frozen=True)
class ReasoningJudgment:
    query_id: str
    doc_id: str
    chain: str
    prediction: bool
    lp_true: float
    lp_false: float
    score: float
    mode: Mode
    tokens_used: int = 0
    finish_reason: FinishReason = FinishReason.STOP
    error: str | None = None

    @classmethod
    def from_logprobs(cls, query_id, doc_id, chain, lp_true, lp_false, mode, tokens_used=0,
                      finish_reason=FinishReason.STOP) -> ReasoningJudgment:
        score = relevance_score(lp_true, lp_false)
        return cls(query_id, doc_id, chain, score > 0.5, lp_true, lp_false, score, Mode(mode),
                   tokens_used, finish_reason)

    @classmethod
    def failed(cls, query_id: str, doc_id: str, mode: Mode, error: str) -> ReasoningJudgment:
        return cls(query_id, doc_id, "", False, -math.inf, -math.inf, 0.0, Mode(mode), 0,
                   FinishReason.ERROR, error)

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["mode"] = self.mode.value
        rec["finish_reason"] = self.finish_reason.value
        # JSON has no -inf; null stands in for it
        for key in ("lp_true", "lp_false"):
            if rec[key] == -math.inf:
                rec[key] = None
        return rec

    @classmethod
    def from_record(cls, rec: Mapping) -> ReasoningJudgment:
        def lp(v):
            return -math.inf if v is None else float(v)

        return cls(
            query_id=rec["query_id"],
            doc_id=rec["doc_id"],
            chain=rec.get("chain", ""),
            prediction=bool(rec["prediction"]),
            lp_true=lp(rec.get("lp_true")),
            lp_false=lp(rec.get("lp_false")),
            score=float(rec["score"]),
            mode=Mode(rec.get("mode", "reasoning")),
            tokens_used=int(rec.get("tokens_used", 0)),
            finish_reason=FinishReason(rec.get("finish_reason", "stop")),
            error=rec.get("error"),
        )


def judge(
    backend: CompletionBackend,
    query: Query,
    doc: Document,
    params: GenParams | None = None,
    mode: Mode | str = Mode.REASONING,
    template: PromptTemplate = DEFAULT_TEMPLATE,
    prompt_map: PromptMap | None = None,
) -> ReasoningJudgment:
    """Judge one pair. Raises :class:`JudgmentError` when the answer is undecidable.

    In reasoning mode the backend first writes a chain up to ``</think>`` (or
    until ``max_tokens``; a truncated chain is closed and scored anyway). In
    direct mode the think block is closed immediately.
    """
    mode = Mode(mode)
    params = params or GenParams()
    prompt = assemble_prompt(template, query, doc, prompt_map)
    chain, tokens_used, finish = "", 0, FinishReason.STOP
    if mode is Mode.REASONING:
        if THINK_CLOSE not in params.stop_sequences:
            raise ConfigurationError(f"reasoning mode needs {THINK_CLOSE!r} among the stop sequences")
        completion = backend.complete(prompt, params)
        chain = completion.text.split(THINK_CLOSE, 1)[0]
        tokens_used, finish = completion.tokens_used, completion.finish_reason
    try:
        lp_true, lp_false = backend.answer_logprobs(prompt + chain + THINK_CLOSE)
    except UndecidableError as exc:
        raise JudgmentError(f"query {query.id}, doc {doc.id}: {exc}") from exc
    return ReasoningJudgment.from_logprobs(query.id, doc.id, chain, lp_true, lp_false, mode, tokens_used, finish)


@dataclass
class RerankConfig:
    params: GenParams = field(default_factory=GenParams)
    mode: Mode = Mode.REASONING
    k_max: int = 100
    concurrency: int = 8
    run_tag: str = "thinkrank"
    template: PromptTemplate = DEFAULT_TEMPLATE
    prompt_map: PromptMap | None = None

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if self.concurrency < 1:
            raise ConfigurationError("concurrency must be >= 1")
        if self.k_max < 1:
            raise ConfigurationError("k_max must be >= 1")


class RerankError(ThinkrankError):
    """Every judgment in a batch failed on the transport layer."""


def _safe_judge(backend, query, doc, config: RerankConfig) -> tuple[ReasoningJudgment, bool]:
    """Judgment plus whether a failure came from the backend transport."""
    try:
        return judge(backend, query, doc, config.params, config.mode, config.template, config.prompt_map), False
    except JudgmentError as exc:
        return ReasoningJudgment.failed(query.id, doc.id, config.mode, str(exc)), False
    except BackendError as exc:
        return ReasoningJudgment.failed(query.id, doc.id, config.mode, f"{type(exc).__name__}: {exc}"), True


def rerank(
    backend: CompletionBackend,
    query: Query,
    candidates: Sequence[ScoredCandidate],
    corpus: Mapping[str, Document],
    config: RerankConfig | None = None,
) -> tuple[list[RunEntry], list[ReasoningJudgment]]:
    """Judge every candidate and order them by relevance score.

    Calls run concurrently (at most ``config.concurrency`` in flight); the
    output order does not depend on completion order. Failed judgments score
    0 and sit below every successful one, in first-stage order. Judgments are
    returned in final rank order.
    """
    config = config or RerankConfig()
    if not candidates:
        return [], []
    if len(candidates) > config.k_max:
        raise ValidationError(f"{len(candidates)} candidates exceed k_max={config.k_max}")
    missing = [c.doc_id for c in candidates if c.doc_id not in corpus]
    if missing:
        raise ValidationError(f"candidates not in corpus: {missing[:5]}")

    with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
        outcomes = list(pool.map(lambda c: _safe_judge(backend, query, corpus[c.doc_id], config), candidates))
    if all(transport for _, transport in outcomes):
        raise RerankError(f"query {query.id}: backend failed on all {len(candidates)} candidates: {outcomes[0][0].error}")

    by_doc = {j.doc_id: j for j, _ in outcomes}
    good = [ScoredCandidate(c.doc_id, c.first_stage_rank, by_doc[c.doc_id].score)
            for c in candidates if by_doc[c.doc_id].ok]
    bad = sorted((c for c in candidates if not by_doc[c.doc_id].ok), key=lambda c: c.first_stage_rank)
    ordered = [(e.doc_id, e.score) for e in stable_rank(good)] if good else []
    ordered += [(c.doc_id, 0.0) for c in bad]
    run = [RunEntry(query.id, doc_id, rank, score, config.run_tag)
           for rank, (doc_id, score) in enumerate(ordered, start=1)]
    return run, [by_doc[e.doc_id] for e in run]


def rerank_run(
    backend: CompletionBackend,
    queries: Mapping[str, Query],
    first_stage: Iterable[RunEntry],
    corpus: Mapping[str, Document],
    config: RerankConfig | None = None,
) -> tuple[list[RunEntry], list[ReasoningJudgment]]:
    """Rerank the top ``k_max`` of every query in a first-stage run."""
    config = config or RerankConfig()
    by_query: dict[str, list[RunEntry]] = {}
    for e in first_stage:
        by_query.setdefault(e.query_id, []).append(e)
    run: list[RunEntry] = []
    judgments: list[ReasoningJudgment] = []
    for qid, entries in by_query.items():
        if qid not in queries:
            raise ValidationError(f"run mentions unknown query {qid!r}")
        cands = candidates_from_run(entries)[: config.k_max]
        r, j = rerank(backend, queries[qid], cands, corpus, config)
        run.extend(r)
        judgments.extend(j)
    return run, judgments


def write_judgments(judgments: Iterable[ReasoningJudgment]) -> str:
    return "".join(json.dumps(j.to_record(), ensure_ascii=False) + "\n" for j in judgments)


def read_judgments(lines: Iterable[str]) -> list[ReasoningJudgment]:
    return [ReasoningJudgment.from_record(json.loads(line)) for line in lines if line.strip()]
