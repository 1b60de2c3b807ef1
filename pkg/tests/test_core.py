import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import pairwise_sort
from thinkrank.core import (
    Document,
    QrelEntry,
    Query,
    RunEntry,
    ScoredCandidate,
    binarize,
    candidates_from_run,
    group_by_query,
    qrels_by_query,
    stable_rank,
)
from thinkrank.errors import ValidationError


def test_passage_joins_title_and_text():
    assert Document("d", "body", "Title").passage == "Title body"
    assert Document("d", "body").passage == "body"
    assert Document("d", "body", "").passage == "body"


@pytest.mark.parametrize(
    "build",
    [
        lambda: Document("", "x"),
        lambda: Query("", "x"),
        lambda: Query("q", "", instruction="be strict"),
        lambda: QrelEntry("q", "d", -1),
        lambda: QrelEntry("q", "d", 1.5),
        lambda: QrelEntry("q", "d", True),
        lambda: RunEntry("q", "d", 0, 1.0, "t"),
        lambda: ScoredCandidate("d", 0, 0.5),
    ],
)
def test_constructors_validate(build):
    with pytest.raises(ValidationError):
        build()


def test_stable_rank_breaks_ties_by_first_stage_rank():
    cands = [ScoredCandidate("a", 3, 0.9), ScoredCandidate("b", 1, 0.9), ScoredCandidate("c", 2, 0.95)]
    run = stable_rank(cands, "q1", "tag")
    assert [e.doc_id for e in run] == ["c", "b", "a"]
    assert [e.rank for e in run] == [1, 2, 3]
    assert {e.query_id for e in run} == {"q1"} and {e.run_tag for e in run} == {"tag"}


def test_stable_rank_rejects_empty_and_nonfinite():
    with pytest.raises(ValidationError):
        stable_rank([])
    with pytest.raises(ValidationError):
        stable_rank([ScoredCandidate("a", 1, math.nan)])


@given(st.lists(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]), min_size=1, max_size=30))
def test_stable_rank_matches_pairwise_oracle(scores):
    cands = [ScoredCandidate(f"d{i}", i + 1, s) for i, s in enumerate(scores)]
    got = [e.doc_id for e in stable_rank(cands)]
    expected = pairwise_sort([(c.doc_id, c.score, c.first_stage_rank) for c in cands])
    assert got == expected


@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.randoms())
def test_stable_rank_ignores_input_order(scores, rnd):
    cands = [ScoredCandidate(f"d{i}", i + 1, s) for i, s in enumerate(scores)]
    shuffled = list(cands)
    rnd.shuffle(shuffled)
    assert stable_rank(cands) == stable_rank(shuffled)


def test_binarize():
    assert binarize(2, 2) and not binarize(1, 2)
    with pytest.raises(ValueError):
        binarize(1, 0)


def test_grouping_helpers():
    run = [RunEntry("q2", "x", 2, 0.1, "t"), RunEntry("q1", "y", 1, 0.5, "t"), RunEntry("q2", "z", 1, 0.9, "t")]
    grouped = group_by_query(run)
    assert list(grouped) == ["q2", "q1"]
    assert [e.doc_id for e in grouped["q2"]] == ["z", "x"]
    cands = candidates_from_run(grouped["q2"])
    assert [(c.doc_id, c.first_stage_rank) for c in cands] == [("z", 1), ("x", 2)]
    assert qrels_by_query([QrelEntry("q", "a", 1), QrelEntry("q", "b", 0)]) == {"q": {"a": 1, "b": 0}}
