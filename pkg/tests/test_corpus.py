"""Corpus layer tests: ingest, slice planning, splits, vocabulary filter."""
from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chronolm.corpus import (
    Budgets,
    CorpusError,
    CorpusStore,
    Document,
    count_ws_tokens,
    extract_word_spans,
    extract_words,
    filter_in_vocab,
    ingest,
    plan_slices,
    split_slice,
    word_counts,
)


def test_word_rule():
    text = "Don't stop, O'Brien's 42nd idea_x café!"
    assert extract_words(text) == ["don't", "stop", "o'brien's", "nd", "idea", "x", "café"]
    for word, s, e in extract_word_spans(text):
        assert text[s:e].lower() == word


def test_count_ws_tokens():
    assert count_ws_tokens("a b  c\n d") == 4
    assert count_ws_tokens("") == 0


# -- store and ingest --------------------------------------------------------


def test_store_rejects_bad_documents():
    store = CorpusStore((1900, 1950))
    store.add(Document("a", 1900, "x"))
    with pytest.raises(CorpusError):
        store.add(Document("a", 1910, "y"))  # duplicate id
    with pytest.raises(CorpusError):
        store.add(Document("b", 1899, "y"))  # year below range
    with pytest.raises(CorpusError):
        store.add(Document("c", 1951, "y"))  # year above range
    with pytest.raises(CorpusError):
        store.add(Document("d", 1910, ""))  # empty text
    assert len(store) == 1 and "a" in store


def _write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write((r if isinstance(r, str) else json.dumps(r)) + "\n")


def test_ingest_accepts_and_rejects_per_record(tmp_path):
    path = tmp_path / "docs.jsonl"
    _write_jsonl(path, [
        {"id": "d1", "year": 1900, "text": "alpha beta"},
        {"id": "d2", "year": "1905", "text": "gamma"},   # numeric string year parses
        "not json at all {",
        {"id": "d3", "year": "about 1910", "text": "x"},  # unparseable year
        {"id": "d4", "year": 2005, "text": "x"},          # outside range
        {"year": 1900, "text": "missing id"},
        {"id": "d5", "year": 1900},                       # missing text
        {"id": "d1", "year": 1901, "text": "dup"},        # duplicate id
        {"id": "d6", "year": 1912, "text": "ok", "title": "T", "author": "A"},
    ])
    store, report = ingest([str(path)], (1890, 1950))
    assert sorted(store.ids()) == ["d1", "d2", "d6"]
    assert store.get("d2").year == 1905
    assert store.get("d6").title == "T" and store.get("d6").author == "A"
    assert report.n_read == 9
    assert report.n_accepted == 3
    assert len(report.rejects) == 6
    reasons = " | ".join(r.reason for r in report.rejects)
    for frag in ("bad json", "unparseable year", "outside", "missing id",
                 "missing or empty text", "duplicate"):
        assert frag in reasons


def test_ingest_schema_mapping(tmp_path):
    path = tmp_path / "odd.jsonl"
    _write_jsonl(path, [{"key": "w1", "published": 1920, "body": "hello world"}])
    store, report = ingest(
        [str(path)], (1900, 1950),
        schema={"id": "key", "year": "published", "text": "body"},
    )
    assert store.get("w1").text == "hello world"
    assert report.n_accepted == 1
    with pytest.raises(CorpusError):
        ingest([str(path)], (1900, 1950), schema={"bogus": "x"})


def test_ingest_unreadable_file_raises(tmp_path):
    with pytest.raises(CorpusError):
        ingest([str(tmp_path / "absent.jsonl")], (1900, 1950))


# -- slice planning ----------------------------------------------------------


def histogram_store(tokens_by_year: dict[int, int], year_range) -> CorpusStore:
    """One document per year, with an exact whitespace token count."""
    store = CorpusStore(year_range)
    for year, n in tokens_by_year.items():
        if n:
            store.add(Document(f"y{year}", year, " ".join(["tok"] * n)))
    return store


def oracle_boundaries(tokens_by_year, year_range, n_slices, need):
    """Reference boundary rule: scan every candidate end, keep the
    smallest one whose cumulative count covers the combined budget."""
    lo, hi = year_range
    out = []
    start = lo
    for i in range(n_slices):
        if i == n_slices - 1:
            # ran past the range: an empty open slice, nothing left to close
            if start > hi:
                out.append((start, start, False))
            else:
                out.append((start, hi, True))
            break
        best = None
        for end in range(start, hi + 2):
            got = sum(tokens_by_year.get(y, 0) for y in range(start, end))
            if got >= need:
                best = end
                break
        if best is None:
            best = hi + 1  # ran dry
        out.append((start, best, False))
        start = best
    return out


HISTOGRAM = {
    1900: 5, 1901: 0, 1902: 7, 1903: 3, 1904: 9, 1905: 1,
    1906: 0, 1907: 12, 1908: 2, 1909: 4, 1910: 6, 1911: 8,
}


def test_plan_matches_boundary_oracle():
    store = histogram_store(HISTOGRAM, (1900, 1911))
    budgets = Budgets(train=8, val=2, test=2)
    plan = plan_slices(store, 3, budgets)
    expect = oracle_boundaries(HISTOGRAM, (1900, 1911), 3, budgets.total)
    got = [(s.start_year, s.end_year, s.closed) for s in plan.slices]
    assert got == expect
    assert plan.feasible
    for sl in plan.slices:
        years = range(sl.start_year, sl.end_year + (1 if sl.closed else 0))
        assert plan.realized_tokens[sl.label] == sum(
            HISTOGRAM.get(y, 0) for y in years
        )


@given(
    st.dictionaries(
        st.integers(min_value=1900, max_value=1919),
        st.integers(min_value=0, max_value=20),
        min_size=1,
    ),
    st.integers(min_value=1, max_value=4),
    st.integers(min_value=1, max_value=30),
)
@settings(max_examples=200, deadline=None)
def test_plan_matches_boundary_oracle_random(tokens_by_year, n_slices, need):
    if not any(tokens_by_year.values()):
        tokens_by_year[1900] = 1
    store = histogram_store(tokens_by_year, (1900, 1919))
    plan = plan_slices(store, n_slices, Budgets(train=need, val=0, test=0))
    expect = oracle_boundaries(tokens_by_year, (1900, 1919), n_slices, need)
    assert [(s.start_year, s.end_year, s.closed) for s in plan.slices] == expect


def test_plan_slice_contract():
    store = histogram_store(HISTOGRAM, (1900, 1911))
    plan = plan_slices(store, 3, Budgets(train=8, val=2, test=2))
    # Contiguous cover: each slice starts where the previous ended, the
    # last is closed at the range end, earlier ones are half-open.
    assert plan.slices[0].start_year == 1900
    for prev, cur in zip(plan.slices, plan.slices[1:]):
        assert not prev.closed
        assert cur.start_year == prev.end_year
    assert plan.slices[-1].closed
    assert plan.slices[-1].end_year == 1911
    # Budgets are carried onto each slice.
    for sl in plan.slices:
        assert (sl.train_budget, sl.val_budget, sl.test_budget) == (8, 2, 2)
    # Every document lands in the slice containing its year.
    for doc in store:
        sl = next(s for s in plan.slices if s.label == plan.assignment[doc.id])
        assert sl.contains(doc.year)
    assert len(plan.assignment) == len(store)


def test_plan_infeasible_reports_shortfall_never_silent():
    store = histogram_store(HISTOGRAM, (1900, 1911))
    budgets = Budgets(train=30, val=5, test=5)  # 40 needed, 57 total
    plan = plan_slices(store, 3, budgets)
    assert not plan.feasible
    assert plan.shortfalls
    short_labels = {s.label for s in plan.shortfalls}
    for sl in plan.slices:
        got = plan.realized_tokens[sl.label]
        if got < budgets.total:
            assert sl.label in short_labels
            s = next(x for x in plan.shortfalls if x.label == sl.label)
            assert s.required == budgets.total
            assert s.available == got
        else:
            assert sl.label not in short_labels


def test_plan_single_slice_spans_range():
    store = histogram_store(HISTOGRAM, (1900, 1911))
    plan = plan_slices(store, 1, Budgets(train=1, val=0, test=0))
    [sl] = plan.slices
    assert (sl.start_year, sl.end_year, sl.closed) == (1900, 1911, True)


def test_plan_input_validation():
    store = histogram_store(HISTOGRAM, (1900, 1911))
    with pytest.raises(CorpusError):
        plan_slices(store, 0, Budgets(train=1, val=0, test=0))
    with pytest.raises(CorpusError):
        plan_slices(CorpusStore((1900, 1911)), 2, Budgets(train=1, val=0, test=0))
    with pytest.raises(CorpusError):
        Budgets(train=-1, val=0, test=0)


def test_time_slice_interval_convention():
    store = histogram_store(HISTOGRAM, (1900, 1911))
    plan = plan_slices(store, 3, Budgets(train=8, val=2, test=2))
    first = plan.slices[0]
    assert first.contains(first.start_year)
    assert not first.contains(first.end_year)
    last = plan.slices[-1]
    assert last.contains(last.end_year)


# -- splits ------------------------------------------------------------------


def docs_store(n_docs=40, tokens_each=5, year=1900):
    store = CorpusStore((1900, 1910))
    for i in range(n_docs):
        store.add(Document(f"d{i:02d}", year, " ".join(["w"] * tokens_each)))
    return store


def test_split_partitions_and_orders_phases():
    store = docs_store()
    plan = plan_slices(store, 1, Budgets(train=120, val=25, test=25))
    [label] = plan.labels()
    ss = split_slice(store, plan, label, seed=3)
    all_ids = sorted(ss.train + ss.val + ss.test)
    assert all_ids == sorted(plan.slice_doc_ids(label))
    assert not (set(ss.train) & set(ss.val) | set(ss.train) & set(ss.test)
                | set(ss.val) & set(ss.test))
    assert ss.feasible and not ss.shortfalls
    # Minimality: each capped phase stops as soon as its budget is met.
    for ids, budget in ((ss.test, 25), (ss.val, 25)):
        got = sum(count_ws_tokens(store.get(d).text) for d in ids)
        assert got >= budget
        without_last = got - count_ws_tokens(store.get(ids[-1]).text)
        assert without_last < budget
    assert ss.realized["train"] == 5 * len(ss.train)


def test_split_deterministic_and_seed_sensitive():
    store = docs_store()
    plan = plan_slices(store, 1, Budgets(train=120, val=25, test=25))
    [label] = plan.labels()
    a = split_slice(store, plan, label, seed=3)
    b = split_slice(store, plan, label, seed=3)
    assert (a.train, a.val, a.test) == (b.train, b.val, b.test)
    c = split_slice(store, plan, label, seed=4)
    assert (a.train, a.val, a.test) != (c.train, c.val, c.test)


def test_split_shortfalls_cover_val_and_test_only():
    store = docs_store(n_docs=10)  # 50 tokens total
    plan = plan_slices(store, 1, Budgets(train=100, val=30, test=30))
    [label] = plan.labels()
    ss = split_slice(store, plan, label, seed=0)
    assert not ss.feasible
    assert {s.label for s in ss.shortfalls} == {f"{label}/val"}
    # Test fills first and reaches budget; val gets the rest; train none.
    assert ss.realized["test"] >= 30
    assert ss.realized["val"] < 30
    assert ss.train == ()
    # A train shortfall is not an infeasibility: remainder semantics.
    assert all("/train" not in s.label for s in ss.shortfalls)


def test_split_unknown_label():
    store = docs_store()
    plan = plan_slices(store, 1, Budgets(train=1, val=0, test=0))
    with pytest.raises(CorpusError):
        split_slice(store, plan, "1800-1900", seed=0)


# -- word counts and filtering ----------------------------------------------


def test_word_counts_additive_and_lowercased():
    t1 = ["The cat SAT", "the mat"]
    t2 = ["A cat naps"]
    whole = word_counts(t1 + t2)
    parts = word_counts(t1), word_counts(t2)
    vocab = set(whole.counts)
    assert vocab == set(parts[0].counts) | set(parts[1].counts)
    for w in vocab:
        assert whole.count(w) == parts[0].count(w) + parts[1].count(w)
    assert whole.count("the") == 2
    assert whole.count("missing") == 0


def test_filter_matches_exhaustive_lookup():
    vocab_texts = [
        ["alpha alpha beta beta gamma", "alpha delta delta"],
        ["alpha alpha beta beta delta delta epsilon"],
    ]
    vocabularies = [word_counts(ts) for ts in vocab_texts]
    items = [
        "alpha beta",          # both >= 2 everywhere: kept
        "alpha gamma",         # gamma count 1 in v1, 0 in v2: dropped
        "beta delta",          # delta 2 in v1, 2 in v2: kept
        "alpha epsilon",       # epsilon only in v2: dropped
        "unknown",             # nowhere: dropped
    ]
    kept, report = filter_in_vocab(items, vocabularies, min_count=2)

    def ok(item):
        return all(
            all(v.count(w) >= 2 for v in vocabularies)
            for w in extract_words(item)
        )

    assert kept == [it for it in items if ok(it)]
    assert kept == ["alpha beta", "beta delta"]
    assert report.total == 5 and report.retained == 2
    assert report.by_group == {"all": (2, 5)}
    dropped_keys = [k for k, _ in report.dropped]
    assert dropped_keys == ["alpha gamma", "alpha epsilon", "unknown"]
    # The reported word is the first failing one.
    assert report.dropped[0][1] == "gamma"


def test_filter_min_count_boundary():
    # count 1 excluded, count 2 retained, in every vocabulary.
    v1 = word_counts(["once twice twice"])
    v2 = word_counts(["once once twice twice"])
    kept, _ = filter_in_vocab(["once", "twice"], [v1, v2], min_count=2)
    assert kept == ["twice"]


def test_filter_min_count_zero_is_identity():
    items = ["anything at all", "zzz qqq"]
    kept, report = filter_in_vocab(items, [word_counts(["unrelated"])], min_count=0)
    assert kept == items
    assert report.retained == report.total == 2


def test_filter_groups_and_custom_accessors():
    class Item:
        def __init__(self, id, words, subtask):
            self.id = id
            self._words = words
            self.subtask = subtask

        def filter_words(self):
            return self._words

    v = word_counts(["aa aa bb bb"])
    items = [
        Item("i1", ["aa"], "g1"),
        Item("i2", ["bb", "cc"], "g1"),
        Item("i3", ["aa", "bb"], "g2"),
    ]
    kept, report = filter_in_vocab(items, [v], min_count=2)
    assert [it.id for it in kept] == ["i1", "i3"]
    assert report.by_group == {"g1": (1, 2), "g2": (1, 1)}
    assert report.dropped == [("i2", "cc")]


def test_filter_needs_a_vocabulary():
    with pytest.raises(CorpusError):
        filter_in_vocab(["x"], [], min_count=2)
