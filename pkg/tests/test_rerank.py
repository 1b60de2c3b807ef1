import math
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import pairwise_sort, softmax2
from synthetic import scored_backend
from thinkrank.backend import FinishReason, GenParams, MockReply, Prefix, mock_register
from thinkrank.core import Document, Query, RunEntry, ScoredCandidate
from thinkrank.errors import BackendError, ConfigurationError, JudgmentError, UndecidableError, ValidationError
from thinkrank.rerank import (
    DEFAULT_TEMPLATE,
    Mode,
    PromptTemplate,
    ReasoningJudgment,
    RerankConfig,
    RerankError,
    assemble_prompt,
    effective_query_text,
    judge,
    read_judgments,
    relevance_score,
    rerank,
    rerank_run,
    write_judgments,
)
from thinkrank.trec_io import PromptMap, default_prompt_map


def answer(p):
    return {" true": math.log(p), " false": math.log1p(-p)}


# --- prompt assembly -----------------------------------------------------------

def test_plain_prompt():
    prompt = assemble_prompt(DEFAULT_TEMPLATE, Query("q", "what is a spruce"), Document("d", "Spruces are large trees"))
    assert prompt == (
        "Determine if the following passage is relevant to the query. Answer only with 'true' or 'false'.\n\n"
        "Query: what is a spruce\n\nPassage: Spruces are large trees\n\n<think>"
    )


def test_dataset_prompt_expands_newlines():
    q = Query("q", "X causes Y", dataset_key="SciFact")
    text = effective_query_text(q, default_prompt_map())
    assert text.startswith("Claim: X causes Y\n\n")
    assert "**supports** or **refutes**" in text
    assert "<newline>" not in text


def test_instruction_appended_before_template_fill():
    pm = PromptMap({"K": "Topic: FILL_QUERY_HERE!"})
    q = Query("q", "cats", instruction="Only about lions.", dataset_key="K")
    assert effective_query_text(q, pm) == "Topic: cats Only about lions.!"
    assert effective_query_text(Query("q", "cats", instruction="Only lions.")) == "cats Only lions."


def test_missing_dataset_key_is_configuration_error():
    with pytest.raises(ConfigurationError):
        effective_query_text(Query("q", "x", dataset_key="Nope"), PromptMap({"K": "FILL_QUERY_HERE"}))


def test_title_and_empty_passage():
    p = assemble_prompt(DEFAULT_TEMPLATE, Query("q", "x"), Document("d", "body", "Head"))
    assert "Passage: Head body\n\n<think>" in p
    p = assemble_prompt(DEFAULT_TEMPLATE, Query("q", "x"), Document("d", ""))
    assert p.endswith("Passage: \n\n<think>")


def test_slot_text_in_query_stays_literal():
    p = DEFAULT_TEMPLATE.fill("{{document}}", "real passage")
    assert "Query: {{document}}" in p and "Passage: real passage" in p


@pytest.mark.parametrize(
    "body",
    ["no slots <think>", "{{query}} {{document}}", "{{query}} {{query}} {{document}}<think>"],
)
def test_template_validation(body):
    with pytest.raises(ConfigurationError):
        PromptTemplate(body)


def test_template_from_file(tmp_path):
    path = tmp_path / "t.txt"
    path.write_text("Q={{query}} P={{document}} <think>\n")
    assert PromptTemplate.from_file(path).fill("a", "b") == "Q=a P=b <think>"


# --- scoring -------------------------------------------------------------------

@given(st.floats(-60, 0), st.floats(-60, 0))
def test_relevance_score_is_two_way_softmax(lt, lf):
    assert relevance_score(lt, lf) == pytest.approx(softmax2(lt, lf), abs=1e-15)


def test_relevance_score_infinities():
    assert relevance_score(-1.0, -math.inf) == 1.0
    assert relevance_score(-math.inf, -1.0) == 0.0
    with pytest.raises(UndecidableError):
        relevance_score(-math.inf, -math.inf)


def test_exact_half_predicts_false():
    j = ReasoningJudgment.from_logprobs("q", "d", "", math.log(0.5), math.log(0.5), Mode.DIRECT)
    assert j.score == 0.5 and j.prediction is False


# --- judge ---------------------------------------------------------------------

def test_judge_reasoning_mode():
    mock = mock_register({Prefix("Determine"): MockReply("passage defines spruce physically", answer(0.9))})
    j = judge(mock, Query("q", "spruce"), Document("d", "tree"))
    assert j.chain == "passage defines spruce physically"
    assert j.score == pytest.approx(0.9) and j.prediction
    assert j.mode is Mode.REASONING and j.finish_reason is FinishReason.STOP
    # the answer request continues from the closed chain
    assert mock.calls[1].endswith("<think>passage defines spruce physically</think>")


def test_judge_direct_mode_skips_chain():
    mock = mock_register({Prefix("Determine"): MockReply("never used", answer(0.2))})
    j = judge(mock, Query("q", "x"), Document("d", "y"), mode="direct")
    assert j.chain == "" and j.tokens_used == 0 and not j.prediction
    assert len(mock.calls) == 1 and mock.calls[0].endswith("<think></think>")


def test_judge_truncated_chain_is_scored():
    chain = " ".join(f"w{i}" for i in range(20))
    mock = mock_register({Prefix("Determine"): MockReply(chain, answer(0.7))})
    j = judge(mock, Query("q", "x"), Document("d", "y"), GenParams(max_tokens=8))
    assert j.tokens_used == 8 and j.finish_reason is FinishReason.LENGTH
    assert j.chain == "w0 w1 w2 w3 w4 w5 w6 w7 "
    assert j.score == pytest.approx(0.7)


def test_judge_cuts_chain_at_close_marker():
    mock = mock_register({Prefix("Determine"): MockReply("short</think> true", answer(0.6))})
    j = judge(mock, Query("q", "x"), Document("d", "y"), GenParams(stop_sequences=("</think>", "\n\n\n")))
    assert j.chain == "short"


def test_judge_requires_close_stop_in_reasoning_mode():
    mock = mock_register({Prefix("Determine"): MockReply("x", answer(0.5))})
    with pytest.raises(ConfigurationError):
        judge(mock, Query("q", "x"), Document("d", "y"), GenParams(stop_sequences=()))


def test_judge_undecidable_becomes_judgment_error():
    mock = mock_register({Prefix("Determine"): MockReply("x", {" yes": -0.1, " no": -2.0})})
    with pytest.raises(JudgmentError):
        judge(mock, Query("q", "x"), Document("d", "y"))


def test_judgment_record_round_trip():
    j = ReasoningJudgment.from_logprobs("q", "d", "chain", -0.2, -math.inf, Mode.REASONING, 5, FinishReason.LENGTH)
    failed = ReasoningJudgment.failed("q", "e", Mode.DIRECT, "boom")
    assert read_judgments(write_judgments([j, failed]).splitlines()) == [j, failed]
    assert "null" in write_judgments([j])


# --- rerank --------------------------------------------------------------------

def corpus_of(n):
    return {f"d{i}": Document(f"d{i}", f"passage number {i}") for i in range(n)}


def test_oracle_puts_relevant_first():
    corpus = corpus_of(10)
    q = Query("q", "query")
    relevant = {"d3", "d7", "d9"}
    mock = scored_backend({"q": q}, corpus, lambda qid, did: 0.99 if did in relevant else 0.01)
    cands = [ScoredCandidate(f"d{i}", i + 1, 10.0 - i) for i in range(10)]
    run, judgments = rerank(mock, q, cands, corpus, RerankConfig(run_tag="t"))
    assert {e.doc_id for e in run[:3]} == relevant
    assert [e.doc_id for e in run[:3]] == ["d3", "d7", "d9"]
    assert [j.doc_id for j in judgments] == [e.doc_id for e in run]
    assert {e.run_tag for e in run} == {"t"}


def test_all_judgments_failing_keeps_first_stage_order():
    corpus = corpus_of(5)
    mock = mock_register({Prefix("Determine"): MockReply("x", {" maybe": -0.1})})
    cands = [ScoredCandidate(f"d{i}", i + 1, 0.0) for i in (4, 2, 0, 1, 3)]
    cands = [ScoredCandidate(c.doc_id, r, 0.0) for r, c in enumerate(cands, start=1)]
    run, judgments = rerank(mock, Query("q", "x"), cands, corpus)
    assert [e.doc_id for e in run] == ["d4", "d2", "d0", "d1", "d3"]
    assert all(e.score == 0.0 for e in run)
    assert all(not j.ok for j in judgments)


def test_failed_judgments_rank_below_successes():
    corpus = corpus_of(4)
    bad = {"d0", "d2"}

    def respond(prompt, params):
        if any(f"passage number {i}\n" in prompt for i in (0, 2)):
            return MockReply("x", {" unsure": -0.1})
        return MockReply("x", answer(0.001))

    mock = mock_register({Prefix("Determine"): respond})
    cands = [ScoredCandidate(f"d{i}", i + 1, 1.0) for i in range(4)]
    run, judgments = rerank(mock, Query("q", "x"), cands, corpus)
    assert [e.doc_id for e in run] == ["d1", "d3", "d0", "d2"]
    assert {j.doc_id for j in judgments if not j.ok} == bad


def test_backend_unreachable_raises_batch_error():
    def respond(prompt, params):
        raise BackendError("down", 503)

    mock = mock_register({Prefix("Determine"): respond})
    with pytest.raises(RerankError):
        rerank(mock, Query("q", "x"), [ScoredCandidate("d0", 1, 1.0)], corpus_of(1))


def test_rerank_matches_sort_oracle_on_100_random_scores():
    rng = random.Random(3)
    corpus = corpus_of(100)
    probs = {did: rng.choice([0.1, 0.3, 0.5, 0.7, rng.random()]) for did in corpus}
    q = Query("q", "x")
    mock = scored_backend({"q": q}, corpus, lambda qid, did: probs[did])
    cands = [ScoredCandidate(f"d{i}", i + 1, 0.0) for i in range(100)]
    run, judgments = rerank(mock, q, cands, corpus, RerankConfig(concurrency=16))
    scores = {j.doc_id: j.score for j in judgments}
    expected = pairwise_sort([(c.doc_id, scores[c.doc_id], c.first_stage_rank) for c in cands])
    assert [e.doc_id for e in run] == expected
    assert sorted(e.doc_id for e in run) == sorted(corpus)


def test_concurrency_bound_is_respected():
    corpus = corpus_of(24)
    mock = mock_register({Prefix("Determine"): MockReply("x", answer(0.5))})
    mock.delay = 0.005
    cands = [ScoredCandidate(f"d{i}", i + 1, 0.0) for i in range(24)]
    rerank(mock, Query("q", "x"), cands, corpus, RerankConfig(concurrency=3))
    assert 1 <= mock.max_in_flight <= 3


def test_k_max_and_missing_docs():
    corpus = corpus_of(3)
    mock = mock_register({Prefix("Determine"): MockReply("x", answer(0.5))})
    cands = [ScoredCandidate(f"d{i}", i + 1, 0.0) for i in range(3)]
    with pytest.raises(ValidationError):
        rerank(mock, Query("q", "x"), cands, corpus, RerankConfig(k_max=2))
    with pytest.raises(ValidationError):
        rerank(mock, Query("q", "x"), [ScoredCandidate("nope", 1, 0.0)], corpus)
    assert rerank(mock, Query("q", "x"), [], corpus) == ([], [])


def test_modes_produce_different_runs():
    corpus = corpus_of(6)

    def respond(prompt, params):
        i = int(prompt.split("passage number ")[1].split("\n")[0])
        reasoned = "</think>" in prompt and not prompt.endswith("<think></think>")
        p = (i + 1) / 10 if reasoned else (6 - i) / 10
        return MockReply("thinking", answer(p))

    mock = mock_register({Prefix("Determine"): respond})
    cands = [ScoredCandidate(f"d{i}", i + 1, 0.0) for i in range(6)]
    r1, _ = rerank(mock, Query("q", "x"), cands, corpus, RerankConfig(mode="reasoning"))
    r2, _ = rerank(mock, Query("q", "x"), cands, corpus, RerankConfig(mode="direct"))
    assert [e.doc_id for e in r1] != [e.doc_id for e in r2]


def test_rerank_run_takes_top_k_per_query():
    corpus = corpus_of(5)
    queries = {"a": Query("a", "first"), "b": Query("b", "second")}
    first = [RunEntry(q, f"d{i}", i + 1, 5.0 - i, "bm25") for q in ("a", "b") for i in range(5)]
    mock = mock_register({Prefix("Determine"): MockReply("x", answer(0.4))})
    run, judgments = rerank_run(mock, queries, first, corpus, RerankConfig(k_max=3))
    assert len(run) == 6 and len(judgments) == 6
    assert [e.doc_id for e in run if e.query_id == "b"] == ["d0", "d1", "d2"]
    with pytest.raises(ValidationError):
        rerank_run(mock, {}, first, corpus)
