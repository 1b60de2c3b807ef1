"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 2 usage error, 3 parse error, 4 backend error,
5 validation or configuration error, 1 any other failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import audit, distill
from .backend import BackendConfig, CompletionBackend, GenParams, OpenAICompletionsBackend, load_mock_script
from .bm25 import Bm25Params, build_index, retrieve
from .core import group_by_query, stable_rank
from .errors import (
    BackendError,
    ConfigurationError,
    ParseError,
    PipelinePaused,
    ThinkrankError,
    ValidationError,
)
from .metrics import METRICS, MetricReport, evaluate, pairwise_outcomes
from .rerank import DEFAULT_TEMPLATE, Mode, PromptTemplate, RerankConfig, RerankError, judge, rerank_run, write_judgments
from .trec_io import (
    PromptMap,
    default_prompt_map,
    load_corpus,
    load_paired_instances,
    load_prompt_map,
    load_queries,
    parse_qrels,
    parse_run,
    read_lines,
    write_qrels,
    write_run,
    write_text,
)

logger = logging.getLogger("thinkrank")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_PARSE, EXIT_BACKEND, EXIT_VALIDATION = 0, 1, 2, 3, 4, 5


@dataclass
class RunConfig:
    backend: BackendConfig | None = None
    backend_kind: str = "openai"
    mock_script: str | None = None
    gen: GenParams = field(default_factory=GenParams)
    concurrency_limit: int = 8
    k_rerank: int = 100
    prompt_map_path: str | None = None
    template_path: str | None = None
    seed: int = 0
    mode: Mode = Mode.REASONING
    run_tag: str = "thinkrank"

    def __post_init__(self):
        if self.concurrency_limit < 1:
            raise ConfigurationError("concurrency_limit must be >= 1")
        if self.k_rerank < 1:
            raise ConfigurationError("k_rerank must be >= 1")
        self.mode = Mode(self.mode)


def load_config(path: str | None) -> RunConfig:
    """Read an INI-style config with [backend], [generation] and [run] sections.

    API keys never live here: ``api_key_env`` names the environment variable.
    """
    if path is None:
        return RunConfig()
    cp = configparser.ConfigParser(interpolation=None)
    if not cp.read(path, encoding="utf-8"):
        raise ConfigurationError(f"cannot read config file {path}")
    b = cp["backend"] if cp.has_section("backend") else {}
    g = cp["generation"] if cp.has_section("generation") else {}
    r = cp["run"] if cp.has_section("run") else {}
    if "api_key" in b:
        raise ConfigurationError("put the API key in an environment variable and name it with api_key_env")
    base = Path(path).parent
    try:
        backend = None
        if b.get("endpoint_url"):
            backend = BackendConfig(
                endpoint_url=b["endpoint_url"],
                model_name=b.get("model_name", ""),
                api_key_env=b.get("api_key_env", "OPENAI_API_KEY"),
                timeout=float(b.get("timeout", 120)),
                max_retries=int(b.get("max_retries", 3)),
                retry_base_delay=float(b.get("retry_base_delay", 1.0)),
            )
        stops = g.get("stop")
        gen = GenParams(
            temperature=float(g.get("temperature", 0.3)),
            max_tokens=int(g.get("max_tokens", 1000)),
            stop_sequences=tuple(s for s in stops.split("\n") if s) if stops is not None else ("</think>",),
            logprob_top_k=int(g.get("logprob_top_k", 10)),
        )

        def rel(value):
            return str(base / value) if value else None

        return RunConfig(
            backend=backend,
            backend_kind=b.get("kind", "openai"),
            mock_script=rel(b.get("mock_script")),
            gen=gen,
            concurrency_limit=int(r.get("concurrency_limit", 8)),
            k_rerank=int(r.get("k_rerank", 100)),
            prompt_map_path=rel(r.get("prompt_map_path")),
            template_path=rel(r.get("template_path")),
            seed=int(r.get("seed", 0)),
            mode=r.get("mode", "reasoning"),
            run_tag=r.get("run_tag", "thinkrank"),
        )
    except ValueError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None


def _config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    overrides = {
        "mock_script": getattr(args, "mock_script", None),
        "concurrency_limit": getattr(args, "concurrency", None),
        "k_rerank": getattr(args, "k_rerank", None),
        "prompt_map_path": getattr(args, "prompt_map", None),
        "template_path": getattr(args, "template", None),
        "seed": getattr(args, "seed", None),
        "mode": getattr(args, "mode", None),
        "run_tag": getattr(args, "run_tag", None),
    }
    cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    if getattr(args, "mock_script", None):
        cfg.backend_kind = "mock"
    endpoint, model = getattr(args, "endpoint", None), getattr(args, "model", None)
    if endpoint:
        # keep api_key_env, timeouts and retries from the config file
        if cfg.backend is not None:
            cfg.backend = replace(cfg.backend, endpoint_url=endpoint, model_name=model or cfg.backend.model_name)
        else:
            cfg.backend = BackendConfig(endpoint, model or "")
        cfg.backend_kind = "openai"
    elif model and cfg.backend is not None:
        cfg.backend = replace(cfg.backend, model_name=model)
    if getattr(args, "max_tokens", None):
        cfg.gen = replace(cfg.gen, max_tokens=args.max_tokens)
    return cfg


def _backend(cfg: RunConfig) -> CompletionBackend:
    if cfg.backend_kind == "mock":
        if not cfg.mock_script:
            raise ConfigurationError("mock backend needs a mock_script")
        with open(cfg.mock_script, encoding="utf-8") as fh:
            return load_mock_script(json.load(fh))
    if cfg.backend is None:
        raise ConfigurationError("no backend configured: give --endpoint/--model, --mock-script or a config file")
    return OpenAICompletionsBackend(cfg.backend)


def _template(cfg: RunConfig) -> PromptTemplate:
    return PromptTemplate.from_file(cfg.template_path) if cfg.template_path else DEFAULT_TEMPLATE


def _prompt_map(cfg: RunConfig) -> PromptMap:
    if cfg.prompt_map_path:
        return load_prompt_map(read_lines(cfg.prompt_map_path))
    return default_prompt_map()


def _runs(paths: Sequence[str], validate: bool) -> dict[str, list]:
    """Run files keyed by their run tag (file stem when a file mixes tags)."""
    out: dict[str, list] = {}
    for p in paths:
        entries = parse_run(read_lines(p), validate=validate)
        tags = {e.run_tag for e in entries}
        tag = tags.pop() if len(tags) == 1 else Path(p).stem
        if tag in out:
            tag = f"{tag}:{Path(p).name}"
        out[tag] = entries
    return out


# --- subcommands -----------------------------------------------------------

def cmd_index(args) -> int:
    index = build_index(load_corpus(read_lines(args.corpus)), Bm25Params(args.k1, args.b))
    print(f"doc_count\t{index.doc_count}")
    print(f"avgdl\t{index.avgdl:.6f}")
    print(f"vocabulary\t{len(index.postings)}")
    return EXIT_OK


def cmd_retrieve(args) -> int:
    index = build_index(load_corpus(read_lines(args.corpus)), Bm25Params(args.k1, args.b))
    run = []
    for q in load_queries(read_lines(args.queries)).values():
        cands = retrieve(index, q, args.k)
        if cands:
            run.extend(stable_rank(cands, q.id, args.run_tag))
    write_text(args.out, write_run(run))
    return EXIT_OK


def cmd_rerank(args) -> int:
    cfg = _config(args)
    rc = RerankConfig(
        params=cfg.gen,
        mode=cfg.mode,
        k_max=cfg.k_rerank,
        concurrency=cfg.concurrency_limit,
        run_tag=cfg.run_tag,
        template=_template(cfg),
        prompt_map=_prompt_map(cfg),
    )
    first_stage = parse_run(read_lines(args.run), validate=not args.foreign_run)
    run, judgments = rerank_run(
        _backend(cfg),
        load_queries(read_lines(args.queries)),
        first_stage,
        load_corpus(read_lines(args.corpus)),
        rc,
    )
    write_text(args.out, write_run(run))
    if args.judgments:
        write_text(args.judgments, write_judgments(judgments))
    failed = sum(1 for j in judgments if not j.ok)
    if failed:
        logger.warning("%d of %d judgments failed and were ranked last", failed, len(judgments))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    report = evaluate(
        group_by_query(parse_run(read_lines(args.run), validate=not args.foreign_run)),
        parse_qrels(read_lines(args.qrels)),
        args.k,
        metrics,
        args.rel_threshold,
    )
    if args.out:
        write_text(args.out, report.to_text())
    sys.stdout.write(report.format_table(per_query=args.per_query))
    if report.excluded:
        logger.info("nDCG excludes %d queries without relevant documents", len(report.excluded))
    return EXIT_OK


def cmd_paired_eval(args) -> int:
    cfg = _config(args)
    backend = _backend(cfg)
    template, pmap = _template(cfg), _prompt_map(cfg)

    def scorer(q, d):
        return judge(backend, q, d, cfg.gen, cfg.mode, template, pmap).score

    outcomes = pairwise_outcomes(load_paired_instances(read_lines(args.instances)), scorer)
    if not outcomes:
        raise ValidationError("no paired instances")
    flagged = [o.instance_id for o in outcomes if o.error]
    if flagged:
        logger.warning("%d instances had scorer failures: %s", len(flagged), ",".join(flagged[:10]))
    print(f"{sum(o.correct for o in outcomes) / len(outcomes):.6f}")
    return EXIT_OK


def _parse_pool_numbers(spec: str, cast) -> dict:
    out = {}
    for part in filter(None, (p.strip() for p in spec.split(","))):
        name, _, value = part.partition("=")
        out[distill.Pool(name)] = cast(value)
    return out


def cmd_distill_sample(args) -> int:
    cfg = _config(args)
    pools = distill.load_pool_records(read_lines(args.pools))
    spec = distill.MixSpec(_parse_pool_numbers(args.proportions, float), args.total)
    examples = distill.sample_candidates(pools, spec, cfg.seed)
    write_text(args.out, distill.write_examples(examples))
    return EXIT_OK


def _load_examples(args):
    examples = distill.read_examples(read_lines(args.candidates))
    journal = distill.Journal(args.journal) if getattr(args, "journal", None) else None
    if journal is not None:
        examples = journal.restore(examples)
    return examples, journal


def cmd_distill_generate(args) -> int:
    cfg = _config(args)
    examples, journal = _load_examples(args)
    params = replace(distill.TEACHER_PARAMS, max_tokens=cfg.gen.max_tokens, temperature=cfg.gen.temperature,
                     stop_sequences=tuple(args.stop or ()))
    try:
        report = distill.generate_traces(
            _backend(cfg), examples, load_queries(read_lines(args.queries)), load_corpus(read_lines(args.corpus)),
            params, journal, cfg.concurrency_limit, _template(cfg), _prompt_map(cfg),
        )
    finally:
        write_text(args.out, distill.write_examples(examples))
    print(f"generated\t{report.generated}\nmalformed\t{report.malformed}\nskipped\t{report.skipped}")
    return EXIT_OK


def cmd_distill_filter(args) -> int:
    cfg = _config(args)
    examples, journal = _load_examples(args)
    trusted = [distill.Pool(p) for p in args.trusted.split(",") if p] if args.trusted else distill.TRUSTED_POOLS
    if args.self_filter and not (args.corpus and args.queries):
        raise ConfigurationError("--self-filter needs --corpus and --queries")
    out = [distill.agreement_filter(examples, trusted, journal).to_text()]
    if args.self_filter:
        out.append(distill.self_filter(
            _backend(cfg), examples, load_queries(read_lines(args.queries)), load_corpus(read_lines(args.corpus)),
            cfg.gen, cfg.mode, None, journal, cfg.concurrency_limit, _template(cfg), _prompt_map(cfg),
        ).to_text())
    write_text(args.out, distill.write_examples(examples))
    sys.stdout.write("".join(out))
    return EXIT_OK


def cmd_distill_export(args) -> int:
    cfg = _config(args)
    examples, journal = _load_examples(args)
    spec = distill.MixSpec({distill.Pool.OFFICIAL_POSITIVE: 1.0}, 0)
    counts = _parse_pool_numbers(args.counts, int) if args.counts else None
    mix = distill.assemble_mix(examples, spec, counts, journal)
    records = distill.export_training(
        examples, load_queries(read_lines(args.queries)), load_corpus(read_lines(args.corpus)),
        _template(cfg), _prompt_map(cfg),
    )
    write_text(args.out, distill.write_training_jsonl(records))
    stats = distill.chain_length_stats(mix.selected, args.bins)
    if args.stats:
        write_text(args.stats, mix.to_text() + stats.to_text())
    if args.histogram:
        write_text(args.histogram, stats.histogram_csv())
    if args.training_config:
        write_text(args.training_config, json.dumps(distill.training_config_template(), indent=2) + "\n")
    sys.stdout.write(mix.to_text())
    return EXIT_OK


def cmd_audit_find(args) -> int:
    items = audit.find_audit_set(
        _runs(args.runs, not args.foreign_run),
        parse_qrels(read_lines(args.qrels)),
        args.k,
        args.rel_threshold,
        load_queries(read_lines(args.queries)) if args.queries else None,
        load_corpus(read_lines(args.corpus)) if args.corpus else None,
    )
    write_text(args.out, audit.write_annotation_sheet(items))
    print(f"items\t{len(items)}")
    return EXIT_OK


def cmd_audit_merge(args) -> int:
    qrels = parse_qrels(read_lines(args.qrels))
    with open(args.sheet, encoding="utf-8", newline="") as fh:
        items = audit.read_annotation_sheet(fh.read())
    fixed, log = audit.merge_annotations(qrels, items)
    write_text(args.out, write_qrels(fixed))
    if args.changelog:
        write_text(args.changelog, log.to_text())
    for cat in audit.ChangeCategory:
        print(f"{cat.value}\t{log.count(cat)}")
    return EXIT_OK


def cmd_audit_delta(args) -> int:
    deltas = audit.metric_delta(
        _runs(args.runs, not args.foreign_run),
        parse_qrels(read_lines(args.qrels_original)),
        parse_qrels(read_lines(args.qrels_fixed)),
        args.k,
    )
    sys.stdout.write(audit.format_delta_table(deltas))
    return EXIT_OK


def cmd_report(args) -> int:
    report = MetricReport.from_text(read_lines(args.report))
    text = report.to_csv() if args.format == "csv" else report.format_table(per_query=args.per_query)
    if args.out:
        write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --- parser ----------------------------------------------------------------

def _backend_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file with [backend], [generation], [run] sections")
    p.add_argument("--endpoint", help="OpenAI-compatible base URL, e.g. http://localhost:8000/v1")
    p.add_argument("--model", help="model name sent to the endpoint")
    p.add_argument("--mock-script", help="JSON mock script; replaces the network backend")
    p.add_argument("--concurrency", type=int, help="max in-flight backend requests (default 8)")
    p.add_argument("--mode", choices=[m.value for m in Mode], help="reasoning (default) or direct")
    p.add_argument("--max-tokens", type=int, help="reasoning budget per completion (default 1000)")
    p.add_argument("--prompt-map", help="dataset prompt map file (default: packaged map)")
    p.add_argument("--template", help="prompt template file with {{query}} and {{document}} slots")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="thinkrank", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index", help="build a BM25 index and print its statistics")
    p.add_argument("--corpus", required=True)
    p.add_argument("--k1", type=float, default=1.5)
    p.add_argument("--b", type=float, default=0.75)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("retrieve", help="BM25 top-k retrieval to a TREC run")
    p.add_argument("--corpus", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--k1", type=float, default=1.5)
    p.add_argument("--b", type=float, default=0.75)
    p.add_argument("--run-tag", default="bm25")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("rerank", help="rerank a first-stage run with the reasoning reranker")
    p.add_argument("--run", required=True, help="first-stage TREC run")
    p.add_argument("--corpus", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--judgments", help="JSONL sidecar with one judgment per (query, doc)")
    p.add_argument("--k-rerank", type=int, help="candidates per query (default 100)")
    p.add_argument("--run-tag")
    p.add_argument("--foreign-run", action="store_true", help="skip rank/score validation of --run")
    _backend_flags(p)
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("evaluate", help="nDCG / MRR / Judged at k")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--k", type=int, nargs="+", default=[10])
    p.add_argument("--metrics", default=",".join(METRICS), help="comma list of ndcg,mrr,judged")
    p.add_argument("--rel-threshold", type=int, default=1, help="minimum grade counted relevant by MRR")
    p.add_argument("--per-query", action="store_true")
    p.add_argument("--out", help="write the keyed-text report here")
    p.add_argument("--foreign-run", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("paired-eval", help="pairwise accuracy on paired contrastive instances")
    p.add_argument("--instances", required=True)
    _backend_flags(p)
    p.set_defaults(func=cmd_paired_eval)

    p = sub.add_parser("distill-sample", help="sample candidate pairs from labeled pools")
    p.add_argument("--pools", required=True, help="JSONL {query_id, doc_id, implied_label, pool}")
    p.add_argument("--proportions", required=True, help="e.g. official_positive=0.25,easy_negative=0.25,...")
    p.add_argument("--total", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_distill_sample)

    p = sub.add_parser("distill-generate", help="harvest teacher reasoning traces")
    p.add_argument("--candidates", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--journal", help="append-only progress journal; reuse it to resume")
    p.add_argument("--stop", action="append", help="teacher stop sequence (repeatable)")
    _backend_flags(p)
    p.set_defaults(func=cmd_distill_generate)

    p = sub.add_parser("distill-filter", help="agreement filter, then optional self-filter")
    p.add_argument("--candidates", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trusted", help="comma list of trusted pools (default official_positive,easy_negative)")
    p.add_argument("--self-filter", action="store_true", help="also run the scorer backend")
    p.add_argument("--corpus")
    p.add_argument("--queries")
    p.add_argument("--journal")
    _backend_flags(p)
    p.set_defaults(func=cmd_distill_filter)

    p = sub.add_parser("distill-export", help="assemble the final mix and export training JSONL")
    p.add_argument("--candidates", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--counts", help="per-pool caps, e.g. official_positive=136,easy_negative=154")
    p.add_argument("--stats", help="keyed-text mix and chain-length statistics")
    p.add_argument("--histogram", help="chain-length histogram CSV")
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--training-config", help="write a fine-tuning config template (JSON)")
    p.add_argument("--journal")
    p.add_argument("--config")
    p.add_argument("--prompt-map")
    p.add_argument("--template")
    p.set_defaults(func=cmd_distill_export)

    p = sub.add_parser("audit-find", help="write an annotation sheet of unjudged / low-graded top-k docs")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--rel-threshold", type=int, default=2)
    p.add_argument("--queries")
    p.add_argument("--corpus")
    p.add_argument("--foreign-run", action="store_true")
    p.set_defaults(func=cmd_audit_find)

    p = sub.add_parser("audit-merge", help="merge a completed annotation sheet into qrels")
    p.add_argument("--qrels", required=True)
    p.add_argument("--sheet", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--changelog")
    p.set_defaults(func=cmd_audit_merge)

    p = sub.add_parser("audit-delta", help="compare runs under original and fixed qrels")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--qrels-original", required=True)
    p.add_argument("--qrels-fixed", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--foreign-run", action="store_true")
    p.set_defaults(func=cmd_audit_delta)

    p = sub.add_parser("report", help="render a saved metric report as a table or CSV")
    p.add_argument("--report", required=True)
    p.add_argument("--format", choices=["table", "csv"], default="table")
    p.add_argument("--per-query", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ParseError as exc:
        logger.error("parse error: %s", exc)
        return EXIT_PARSE
    except (BackendError, RerankError, PipelinePaused) as exc:
        logger.error("backend error: %s", exc)
        return EXIT_BACKEND
    except (ValidationError, ConfigurationError) as exc:
        logger.error("invalid input: %s", exc)
        return EXIT_VALIDATION
    except (ThinkrankError, OSError, ValueError) as exc:
        logger.error("%s", exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
