import pytest
from hypothesis import given
from hypothesis import strategies as st

from thinkrank.core import Document, QrelEntry, Query, RunEntry
from thinkrank.errors import ParseError, ValidationError
from thinkrank.trec_io import (
    PairedInstance,
    PromptMap,
    default_prompt_map,
    load_corpus,
    load_paired_instances,
    load_prompt_map,
    load_queries,
    parse_qrels,
    parse_run,
    read_lines,
    validate_run,
    write_corpus,
    write_paired_instances,
    write_prompt_map,
    write_qrels,
    write_queries,
    write_run,
    write_text,
)


def test_parse_qrels_basic():
    entries = parse_qrels(["q1 0 d1 2\n", "\n", "q1 0 d2 0\n"])
    assert entries == [QrelEntry("q1", "d1", 2), QrelEntry("q1", "d2", 0)]


@pytest.mark.parametrize(
    "line, fragment",
    [
        ("q1 0 d1", "4 fields"),
        ("q1 0 d1 x", "not an integer"),
        ("q1 0 d1 -1", "negative"),
    ],
)
def test_parse_qrels_errors_carry_line_numbers(line, fragment):
    with pytest.raises(ParseError) as err:
        parse_qrels(["q0 0 d0 1", line])
    assert err.value.line_no == 2
    assert fragment in str(err.value)
    assert str(err.value).startswith("line 2:")


def test_parse_qrels_rejects_duplicates():
    with pytest.raises(ParseError, match="duplicate"):
        parse_qrels(["q 0 d 1", "q 0 d 2"])


def test_parse_run_and_validation():
    lines = ["q1 Q0 a 1 3.5 bm25", "q1 Q0 b 2 1.25 bm25"]
    run = parse_run(lines)
    assert run[1] == RunEntry("q1", "b", 2, 1.25, "bm25")
    with pytest.raises(ValidationError, match="more than once"):
        parse_run(["q Q0 a 1 2 t", "q Q0 a 2 1 t"])
    with pytest.raises(ValidationError, match="1..n"):
        parse_run(["q Q0 a 1 2 t", "q Q0 b 3 1 t"])
    with pytest.raises(ValidationError, match="score rises"):
        parse_run(["q Q0 a 1 1 t", "q Q0 b 2 2 t"])
    # foreign runs may be loaded unvalidated
    assert len(parse_run(["q Q0 a 1 1 t", "q Q0 b 2 2 t"], validate=False)) == 2


@pytest.mark.parametrize("line", ["q Q0 a 1 t", "q Q0 a one 1 t", "q Q0 a 1 high t", "q Q0 a 0 1 t"])
def test_parse_run_rejects_bad_lines(line):
    with pytest.raises(ParseError):
        parse_run([line])


def test_write_run_formats_six_decimals():
    text = write_run([RunEntry("q", "d", 1, 0.5, "x")])
    assert text == "q Q0 d 1 0.500000 x\n"
    with pytest.raises(ValidationError):
        validate_run([RunEntry("q", "d", 2, 0.5, "x")])


def test_corpus_and_queries_round_trip():
    docs = [Document("d1", "text one", "Title"), Document("d2", "text two")]
    text = write_corpus(docs)
    assert '"title"' not in text.splitlines()[1]
    assert list(load_corpus(text.splitlines()).values()) == docs
    queries = [Query("q1", "hi"), Query("q2", "there", instruction="only recent", dataset_key="SciFact")]
    assert list(load_queries(write_queries(queries).splitlines()).values()) == queries


def test_corpus_errors():
    with pytest.raises(ParseError, match="text"):
        load_corpus(['{"_id": "a"}'])
    with pytest.raises(ParseError, match="duplicate"):
        load_corpus(['{"_id": "a", "text": "x"}', '{"_id": "a", "text": "y"}'])
    with pytest.raises(ParseError, match="invalid JSON"):
        load_queries(["{nope"])


def test_paired_instances_round_trip():
    inst = PairedInstance("p1", Query("qa", "a"), Query("qb", "b"), Document("da", "x"), Document("db", "y"))
    assert load_paired_instances(write_paired_instances([inst]).splitlines()) == [inst]
    with pytest.raises(ValidationError):
        PairedInstance("p", Query("q", "a"), Query("q", "b"), Document("x", "1"), Document("y", "2"))


def test_prompt_map_parsing():
    pm = load_prompt_map(["# comment", "A\tFILL_QUERY_HERE now"])
    assert dict(pm) == {"A": "FILL_QUERY_HERE now"}
    assert load_prompt_map(write_prompt_map(pm).splitlines()) == pm
    with pytest.raises(ValidationError):
        load_prompt_map(["A\tno placeholder"])
    with pytest.raises(ParseError):
        load_prompt_map(["no tab here FILL_QUERY_HERE"])
    with pytest.raises(ValidationError):
        PromptMap({"x": "nothing"})


def test_default_prompt_map_contents():
    pm = default_prompt_map()
    assert len(pm) == 15
    # values checked against the published prompt table
    assert pm["SciFact"].startswith("Claim: FILL_QUERY_HERE<newline><newline>")
    assert "either **supports** or **refutes** this claim" in pm["SciFact"]
    assert pm["Touche2020"] == "FILL_QUERY_HERE **any** arguments for or against"
    assert pm["TRECCOVID"] == "FILL_QUERY_HERE If the article answers any part of the question it is relevant."
    assert pm["BrightRetrieval theoremqa questions"] == pm["BrightRetrieval theoremqa theorems"]


_ids = st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789_-", min_size=1, max_size=8)


@given(st.lists(st.tuples(_ids, _ids, st.integers(0, 3)), max_size=30, unique_by=lambda t: (t[0], t[1])))
def test_qrels_round_trip_property(rows):
    entries = [QrelEntry(*r) for r in rows]
    text = write_qrels(entries)
    assert parse_qrels(text.splitlines()) == entries
    assert write_qrels(parse_qrels(text.splitlines())) == text


@given(st.lists(st.text(min_size=0, max_size=40), min_size=1, max_size=10))
def test_corpus_round_trip_arbitrary_text(texts):
    docs = [Document(f"d{i}", t, title=None if i % 2 else t[:5]) for i, t in enumerate(texts)]
    text = write_corpus(docs)
    assert list(load_corpus(text.split("\n")).values()) == docs


def test_read_lines_keeps_unicode_separators(tmp_path):
    doc = Document("d", "before\u2028after\x85end")
    path = tmp_path / "corpus.jsonl"
    write_text(path, write_corpus([doc]))
    assert load_corpus(read_lines(path)) == {"d": doc}
