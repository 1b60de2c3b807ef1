"""Teacher-trace harvesting and filtering for reasoning-reranker training data.

Stages, each operating on a list of :class:`DistillExample`:

1. :func:`sample_candidates` draws (query, passage) pairs from labeled pools.
2. :func:`generate_traces` asks a teacher model to reason and give a verdict.
3. :func:`agreement_filter` drops trusted-pool examples whose verdict
   contradicts the pool's implied label.
4. :func:`self_filter` drops examples a trained scorer disagrees with.
5. :func:`assemble_mix` selects the final positives and negatives.
6. :func:`export_training` writes prompt/completion records.

Statuses only move forward, and an optional :class:`Journal` records every
transition so an interrupted generation run resumes where it stopped.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import random
import re
import threading
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path

import numpy as np

from .backend import THINK_CLOSE, CompletionBackend, GenParams
from .core import Document, Query
from .errors import (
    BackendError,
    ConfigurationError,
    JudgmentError,
    MalformedVerdict,
    ParseError,
    PipelinePaused,
    ValidationError,
)
from .rerank import DEFAULT_TEMPLATE, Mode, PromptTemplate, assemble_prompt, judge
from .trec_io import PromptMap

logger = logging.getLogger(__name__)


class Pool(str, Enum):
    OFFICIAL_POSITIVE = "official_positive"
    EASY_NEGATIVE = "easy_negative"
    HARD_NEGATIVE_1_5 = "hard_negative_1_5"
    HARD_NEGATIVE_5_10 = "hard_negative_5_10"


TRUSTED_POOLS = frozenset({Pool.OFFICIAL_POSITIVE, Pool.EASY_NEGATIVE})


class Status(str, Enum):
    PENDING = "pending"
    GENERATED = "generated"
    DROPPED_AGREEMENT = "dropped_agreement"
    DROPPED_SELF_FILTER = "dropped_self_filter"
    DROPPED_MALFORMED = "dropped_malformed"
    KEPT = "kept"


_NEXT = {
    Status.PENDING: {Status.GENERATED, Status.DROPPED_MALFORMED},
    Status.GENERATED: {Status.DROPPED_AGREEMENT, Status.DROPPED_SELF_FILTER, Status.KEPT},
}

# teacher runs to a natural end; "</think>" must not stop it before the verdict
TEACHER_PARAMS = GenParams(temperature=0.3, max_tokens=1000, stop_sequences=(), logprob_top_k=2)


@dataclass(frozen=True)
class PoolRecord:
    query_id: str
    doc_id: str
    implied_label: bool
    pool: Pool


@dataclass
class DistillExample:
    query_id: str
    doc_id: str
    pool: Pool
    implied_label: bool
    chain: str | None = None
    teacher_prediction: bool | None = None
    self_prediction: bool | None = None
    status: Status = Status.PENDING
    flag: str | None = None

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.query_id, self.doc_id, self.pool.value)

    def advance(self, status: Status) -> None:
        if status not in _NEXT.get(self.status, set()):
            raise ValidationError(f"{self.key}: illegal transition {self.status.value} -> {status.value}")
        self.status = status

    def to_record(self) -> dict:
        return {
            "query_id": self.query_id,
            "doc_id": self.doc_id,
            "pool": self.pool.value,
            "implied_label": self.implied_label,
            "chain": self.chain,
            "teacher_prediction": self.teacher_prediction,
            "self_prediction": self.self_prediction,
            "status": self.status.value,
            "flag": self.flag,
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> DistillExample:
        return cls(
            query_id=str(rec["query_id"]),
            doc_id=str(rec["doc_id"]),
            pool=Pool(rec["pool"]),
            implied_label=bool(rec["implied_label"]),
            chain=rec.get("chain"),
            teacher_prediction=rec.get("teacher_prediction"),
            self_prediction=rec.get("self_prediction"),
            status=Status(rec.get("status", "pending")),
            flag=rec.get("flag"),
        )


def write_examples(examples: Iterable[DistillExample]) -> str:
    return "".join(json.dumps(e.to_record(), ensure_ascii=False) + "\n" for e in examples)


def read_examples(lines: Iterable[str]) -> list[DistillExample]:
    out = []
    for no, line in enumerate(lines, start=1):
        if line.strip():
            try:
                out.append(DistillExample.from_record(json.loads(line)))
            except (KeyError, ValueError) as exc:
                raise ParseError(f"bad example record: {exc}", no) from None
    return out


def load_pool_records(lines: Iterable[str]) -> dict[Pool, list[PoolRecord]]:
    """Read ``{query_id, doc_id, implied_label, pool}`` JSONL, grouped by pool."""
    pools: dict[Pool, list[PoolRecord]] = {}
    for no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            pr = PoolRecord(str(rec["query_id"]), str(rec["doc_id"]), bool(rec["implied_label"]), Pool(rec["pool"]))
        except (KeyError, ValueError, TypeError) as exc:
            raise ParseError(f"bad pool record: {exc}", no) from None
        pools.setdefault(pr.pool, []).append(pr)
    return pools


def status_counts(examples: Iterable[DistillExample]) -> Counter:
    return Counter(e.status for e in examples)


def merge_rounds(*rounds: Iterable[DistillExample]) -> list[DistillExample]:
    """Concatenate generation rounds, keeping the first copy of each (query, doc, pool)."""
    seen: set[tuple[str, str, str]] = set()
    out = []
    for rnd in rounds:
        for ex in rnd:
            if ex.key not in seen:
                seen.add(ex.key)
                out.append(ex)
    return out


# --- journal ---------------------------------------------------------------

class Journal:
    """Append-only JSONL log of example snapshots, one line per transition."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def record(self, example: DistillExample, stage: str) -> None:
        rec = {"ts": datetime.now(timezone.utc).isoformat(), "stage": stage, **example.to_record()}
        line = json.dumps(rec, ensure_ascii=False) + "\n"
        with self._lock, self.path.open("a", encoding="utf-8") as fh:
            fh.write(line)
            fh.flush()

    def replay(self) -> dict[tuple[str, str, str], dict]:
        """Latest snapshot per example key. A torn final line is ignored."""
        state: dict[tuple[str, str, str], dict] = {}
        if not self.path.exists():
            return state
        with self.path.open(encoding="utf-8") as fh:
            for line in fh:
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError:
                    logger.warning("skipping unreadable journal line in %s", self.path)
                    continue
                state[(rec["query_id"], rec["doc_id"], rec["pool"])] = rec
        return state

    def restore(self, examples: Iterable[DistillExample]) -> list[DistillExample]:
        """Examples with any journaled progress applied."""
        state = self.replay()
        return [DistillExample.from_record(state[ex.key]) if ex.key in state else ex for ex in examples]


def _log(journal: Journal | None, ex: DistillExample, stage: str) -> None:
    if journal is not None:
        journal.record(ex, stage)


# --- sampling --------------------------------------------------------------

@dataclass(frozen=True)
class MixSpec:
    proportions: Mapping[Pool, float]
    target_total: int
    positive_source: Pool = Pool.OFFICIAL_POSITIVE
    negative_sources: tuple[Pool, ...] = (Pool.EASY_NEGATIVE, Pool.HARD_NEGATIVE_1_5, Pool.HARD_NEGATIVE_5_10)

    def __post_init__(self):
        props = {Pool(p): float(v) for p, v in self.proportions.items()}
        if any(v < 0 for v in props.values()):
            raise ValidationError("proportions must be nonnegative")
        if abs(sum(props.values()) - 1.0) > 1e-9:
            raise ValidationError(f"proportions sum to {sum(props.values())}, not 1")
        if self.target_total < 0:
            raise ValidationError("target_total must be >= 0")
        object.__setattr__(self, "proportions", props)
        object.__setattr__(self, "negative_sources", tuple(Pool(p) for p in self.negative_sources))


def allocate_quotas(spec: MixSpec) -> dict[Pool, int]:
    """Largest-remainder rounding of ``proportion * target_total``; sums exactly to the target.

    Remainder ties go to the pool listed first in :class:`Pool`.
    """
    pools = [p for p in Pool if p in spec.proportions]
    exact = {p: spec.proportions[p] * spec.target_total for p in pools}
    quotas = {p: math.floor(exact[p]) for p in pools}
    short = spec.target_total - sum(quotas.values())
    by_remainder = sorted(pools, key=lambda p: (-(exact[p] - quotas[p]), list(Pool).index(p)))
    for p in by_remainder[:short]:
        quotas[p] += 1
    return quotas


def sample_candidates(
    pools: Mapping[Pool, Sequence[PoolRecord]],
    spec: MixSpec,
    seed: int,
) -> list[DistillExample]:
    """Sample each pool's quota without replacement; deterministic in ``seed``."""
    out: list[DistillExample] = []
    for pool, quota in allocate_quotas(spec).items():
        if quota == 0:
            continue
        records = pools.get(pool, [])
        if len(records) < quota:
            raise ValidationError(
                f"pool {pool.value} has {len(records)} records but needs {quota} (short by {quota - len(records)})"
            )
        rng = random.Random(f"{seed}:{pool.value}")
        for i in rng.sample(range(len(records)), quota):
            r = records[i]
            out.append(DistillExample(r.query_id, r.doc_id, pool, r.implied_label))
    return out


# --- teacher generation ----------------------------------------------------

_VERDICT_AFTER_MARKER = re.compile(r"^\W*(true|false)\b")
_VERDICT_WORD = re.compile(r"\b(true|false)\b")


def parse_teacher_verdict(completion_text: str) -> bool:
    """Final true/false verdict of a teacher completion.

    Reads the first word after the last ``</think>``; without a marker, the
    last 20 characters must mention exactly one of the two words.
    """
    if THINK_CLOSE in completion_text:
        tail = completion_text.rsplit(THINK_CLOSE, 1)[1].strip().lower()
        m = _VERDICT_AFTER_MARKER.match(tail)
        if m is None:
            raise MalformedVerdict(f"no true/false after {THINK_CLOSE}: {tail[:40]!r}")
        return m.group(1) == "true"
    words = set(_VERDICT_WORD.findall(completion_text[-20:].lower()))
    if len(words) != 1:
        raise MalformedVerdict(f"no unambiguous verdict in {completion_text[-20:]!r}")
    return words.pop() == "true"


@dataclass
class GenerationReport:
    generated: int = 0
    malformed: int = 0
    skipped: int = 0


def _apply_teacher_output(ex: DistillExample, text: str) -> None:
    ex.chain = text.rsplit(THINK_CLOSE, 1)[0] if THINK_CLOSE in text else text
    try:
        ex.teacher_prediction = parse_teacher_verdict(text)
    except MalformedVerdict as exc:
        ex.flag = str(exc)
        ex.advance(Status.DROPPED_MALFORMED)
    else:
        ex.advance(Status.GENERATED)


def _lookup(queries: Mapping[str, Query], corpus: Mapping[str, Document], ex: DistillExample):
    try:
        return queries[ex.query_id], corpus[ex.doc_id]
    except KeyError as exc:
        raise ValidationError(f"example {ex.key} refers to unknown id {exc}") from None


def generate_traces(
    backend: CompletionBackend,
    examples: Sequence[DistillExample],
    queries: Mapping[str, Query],
    corpus: Mapping[str, Document],
    params: GenParams = TEACHER_PARAMS,
    journal: Journal | None = None,
    concurrency: int = 8,
    template: PromptTemplate = DEFAULT_TEMPLATE,
    prompt_map: PromptMap | None = None,
) -> GenerationReport:
    """Ask the teacher about every pending example (in place).

    Non-pending examples are skipped, so rerunning after a restore from the
    journal only requests what is left. If the backend gives out, finished
    results are kept and :class:`PipelinePaused` is raised.
    """
    if THINK_CLOSE in params.stop_sequences:
        raise ConfigurationError(f"teacher generation must not stop at {THINK_CLOSE!r}; the verdict follows it")
    report = GenerationReport()
    todo = [ex for ex in examples if ex.status is Status.PENDING]
    report.skipped = len(examples) - len(todo)
    prompts = [assemble_prompt(template, *_lookup(queries, corpus, ex), prompt_map) for ex in todo]

    failure: BackendError | None = None
    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        futures = [pool.submit(backend.complete, p, params) for p in prompts]
        for ex, fut in zip(todo, futures):
            if failure is not None and fut.cancel():
                continue
            try:
                text = fut.result().text
            except BackendError as exc:
                if failure is None:
                    failure = exc
                    for f in futures:
                        f.cancel()
                continue
            _apply_teacher_output(ex, text)
            if ex.status is Status.GENERATED:
                report.generated += 1
            else:
                report.malformed += 1
            _log(journal, ex, "generate")
    if failure is not None:
        raise PipelinePaused(
            f"backend failed after {report.generated + report.malformed} completions; rerun to resume: {failure}"
        ) from failure
    return report


def teacher_positive_rate(examples: Iterable[DistillExample]) -> float:
    """Share of teacher verdicts that are ``true`` among examples that have one."""
    verdicts = [e.teacher_prediction for e in examples if e.teacher_prediction is not None]
    return sum(verdicts) / len(verdicts) if verdicts else 0.0


# --- filters ---------------------------------------------------------------

@dataclass
class FilterReport:
    stage: str
    considered: dict[Pool, int] = field(default_factory=dict)
    dropped: dict[Pool, int] = field(default_factory=dict)
    flagged: int = 0

    def rate(self, pool: Pool) -> float:
        n = self.considered.get(pool, 0)
        return self.dropped.get(pool, 0) / n if n else 0.0

    @property
    def drop_rate(self) -> float:
        n = sum(self.considered.values())
        return sum(self.dropped.values()) / n if n else 0.0

    def to_text(self) -> str:
        lines = [f"{self.stage}\tdrop_rate\t{self.drop_rate:.6f}", f"{self.stage}\tflagged\t{self.flagged}"]
        for pool in Pool:
            if pool in self.considered:
                lines.append(
                    f"{self.stage}\t{pool.value}\t{self.dropped.get(pool, 0)}/{self.considered[pool]}\t{self.rate(pool):.6f}"
                )
        return "\n".join(lines) + "\n"


def agreement_filter(
    examples: Iterable[DistillExample],
    trusted_pools: Iterable[Pool] = TRUSTED_POOLS,
    journal: Journal | None = None,
) -> FilterReport:
    """Drop generated trusted-pool examples whose verdict contradicts the implied label."""
    trusted = frozenset(trusted_pools)
    report = FilterReport("agreement")
    for ex in examples:
        if ex.status is not Status.GENERATED or ex.pool not in trusted:
            continue
        report.considered[ex.pool] = report.considered.get(ex.pool, 0) + 1
        if ex.teacher_prediction != ex.implied_label:
            ex.advance(Status.DROPPED_AGREEMENT)
            report.dropped[ex.pool] = report.dropped.get(ex.pool, 0) + 1
            _log(journal, ex, "agreement")
    return report


def self_filter(
    scorer_backend: CompletionBackend,
    examples: Iterable[DistillExample],
    queries: Mapping[str, Query],
    corpus: Mapping[str, Document],
    params: GenParams | None = None,
    mode: Mode | str = Mode.REASONING,
    pools: Iterable[Pool] | None = None,
    journal: Journal | None = None,
    concurrency: int = 8,
    template: PromptTemplate = DEFAULT_TEMPLATE,
    prompt_map: PromptMap | None = None,
) -> FilterReport:
    """Drop generated examples where a trained scorer disagrees with the teacher.

    A scorer failure keeps the example and flags it.
    """
    params = params or GenParams()
    only = frozenset(pools) if pools is not None else None
    todo = [ex for ex in examples if ex.status is Status.GENERATED and (only is None or ex.pool in only)]

    def run(ex: DistillExample):
        q, d = _lookup(queries, corpus, ex)
        try:
            return judge(scorer_backend, q, d, params, mode, template, prompt_map), None
        except (JudgmentError, BackendError) as exc:
            return None, f"self_filter: {type(exc).__name__}: {exc}"

    report = FilterReport("self_filter")
    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        results = list(pool.map(run, todo))
    for ex, (judgment, error) in zip(todo, results):
        report.considered[ex.pool] = report.considered.get(ex.pool, 0) + 1
        if judgment is None:
            ex.flag = error
            report.flagged += 1
            _log(journal, ex, "self_filter")
            continue
        ex.self_prediction = judgment.prediction
        if judgment.prediction != ex.teacher_prediction:
            ex.advance(Status.DROPPED_SELF_FILTER)
            report.dropped[ex.pool] = report.dropped.get(ex.pool, 0) + 1
        _log(journal, ex, "self_filter")
    return report


# --- final mix -------------------------------------------------------------

@dataclass
class MixReport:
    selected: list[DistillExample]
    counts: dict[Pool, int]
    warnings: list[str] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"mix\t{p.value}\t{n}" for p, n in self.counts.items()]
        lines.append(f"mix\ttotal\t{sum(self.counts.values())}")
        lines += [f"warning\t{w}" for w in self.warnings]
        return "\n".join(lines) + "\n"


def assemble_mix(
    examples: Iterable[DistillExample],
    spec: MixSpec,
    counts: Mapping[Pool, int] | None = None,
    journal: Journal | None = None,
) -> MixReport:
    """Select teacher-true positives from the positive source and teacher-false
    negatives from the negative sources, marking them kept.

    ``counts`` caps the number taken per pool (input order); without it every
    eligible example is taken. A pool that cannot meet its cap yields what it
    has, with a warning.
    """
    eligible: dict[Pool, list[DistillExample]] = {}
    for ex in examples:
        if ex.status is not Status.GENERATED:
            continue
        if ex.pool == spec.positive_source and ex.teacher_prediction is True:
            eligible.setdefault(ex.pool, []).append(ex)
        elif ex.pool in spec.negative_sources and ex.teacher_prediction is False:
            eligible.setdefault(ex.pool, []).append(ex)

    report = MixReport([], {})
    for pool in (spec.positive_source, *spec.negative_sources):
        available = eligible.get(pool, [])
        want = len(available) if counts is None or pool not in counts else counts[pool]
        if want > len(available):
            report.warnings.append(f"{pool.value}: wanted {want}, only {len(available)} available")
            logger.warning(report.warnings[-1])
        if not available and counts is None:
            side = "positive" if pool == spec.positive_source else "negative"
            report.warnings.append(f"{pool.value}: no surviving {side} examples")
            logger.warning(report.warnings[-1])
        chosen = available[:want]
        for ex in chosen:
            ex.advance(Status.KEPT)
            _log(journal, ex, "mix")
        report.selected.extend(chosen)
        report.counts[pool] = len(chosen)
    return report


# --- export ----------------------------------------------------------------

def export_training(
    examples: Iterable[DistillExample],
    queries: Mapping[str, Query],
    corpus: Mapping[str, Document],
    template: PromptTemplate = DEFAULT_TEMPLATE,
    prompt_map: PromptMap | None = None,
) -> list[dict]:
    """Prompt/completion records for kept examples; the completion closes the
    reasoning block and states the verdict."""
    records = []
    for ex in examples:
        if ex.status is not Status.KEPT:
            continue
        q, d = _lookup(queries, corpus, ex)
        verdict = "true" if ex.teacher_prediction else "false"
        records.append({
            "prompt": assemble_prompt(template, q, d, prompt_map),
            "completion": f"{ex.chain or ''}{THINK_CLOSE} {verdict}",
            "label": bool(ex.teacher_prediction),
            "pool": ex.pool.value,
            "query_id": ex.query_id,
            "doc_id": ex.doc_id,
        })
    return records


def write_training_jsonl(records: Iterable[Mapping]) -> str:
    return "".join(json.dumps(dict(r), ensure_ascii=False) + "\n" for r in records)


def load_training_jsonl(lines: Iterable[str]) -> list[dict]:
    return [json.loads(line) for line in lines if line.strip()]


@dataclass
class ChainLengthStats:
    count: int
    mean: float
    median: float
    percentiles: dict[int, float]
    bin_edges: list[float]
    bin_counts: list[int]

    def to_text(self) -> str:
        lines = [f"count\t{self.count}", f"mean\t{self.mean:.4f}", f"median\t{self.median:.4f}"]
        lines += [f"p{p}\t{v:.4f}" for p, v in self.percentiles.items()]
        return "\n".join(lines) + "\n"

    def histogram_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_start", "bin_end", "count"])
        for lo, hi, n in zip(self.bin_edges, self.bin_edges[1:], self.bin_counts):
            w.writerow([f"{lo:g}", f"{hi:g}", n])
        return buf.getvalue()


def chain_length_stats(
    chains: Iterable[DistillExample | str],
    bins: int | Sequence[float] = 20,
    percentiles: Sequence[int] = (5, 25, 75, 95),
) -> ChainLengthStats:
    """Distribution of reasoning-chain lengths in whitespace-separated words."""
    texts = [(c.chain or "") if isinstance(c, DistillExample) else c for c in chains]
    lengths = np.array([len(t.split()) for t in texts], dtype=float)
    if lengths.size == 0:
        return ChainLengthStats(0, 0.0, 0.0, {p: 0.0 for p in percentiles}, [], [])
    counts, edges = np.histogram(lengths, bins=bins)
    return ChainLengthStats(
        count=int(lengths.size),
        mean=float(lengths.mean()),
        median=float(np.median(lengths)),
        percentiles={p: float(np.percentile(lengths, p)) for p in percentiles},
        bin_edges=[float(e) for e in edges],
        bin_counts=[int(n) for n in counts],
    )


def training_config_template() -> dict:
    """Fine-tuning settings to pair with an export. Descriptive only; nothing here trains."""
    return {
        "finetuning_type": "lora",
        "lora_target": "all",
        "lora_rank": 32,
        "lora_alpha": 64,
        "learning_rate": 1e-4,
        "effective_batch_size": 128,
        "num_train_epochs": 2,
        "base_model": "<base (non-instruct) causal LM>",
        "dataset": "<path to exported training JSONL>",
    }
