"""Evaluation tests: cloze construction, metric arithmetic, pair scoring."""
from __future__ import annotations

import math

import pytest
import torch
import torch.nn.functional as F

from chronolm.corpus import word_counts
from chronolm.evaluation import (
    ClozeRanking,
    ClozeTask,
    EvaluationError,
    MinimalPair,
    SenseRecord,
    build_cloze_set,
    cross_time_matrix,
    grouped_accuracy,
    leakage_report,
    minimal_pair_accuracy,
    mrr,
    rank_cloze,
    sentence_logprob,
    year_group_fn,
)
from chronolm.model import perplexity

from conftest import TableModel, ToyTokenizer


def sense(word="lamp", sid="s1", year=1900, examples=(), freq=50.0):
    return SenseRecord(
        word=word, sense_id=sid, year=year,
        examples=tuple(examples), frequency_per_million=freq,
    )


def rich_vocab(extra=""):
    text = "the old lamp glowed in the old dark room with a lamp " + extra
    return [word_counts([text, text])]


# -- cloze construction ------------------------------------------------------


def test_cloze_tail_rule():
    # Target at the very end passes; the same target mid-sentence fails.
    ok = "the old room glowed dark with the old lamp"
    early = "the lamp glowed in the old dark room"
    tasks, report = build_cloze_set(
        [sense(examples=[ok, early])], rich_vocab(), min_count=2
    )
    assert len(tasks) == 1
    assert tasks[0].prefix == "the old room glowed dark with the old "
    assert tasks[0].target_word == "lamp"
    assert tasks[0].id == "s1:0"
    assert report.rejected.get("target_not_in_tail") == 1


def test_cloze_tail_uses_last_occurrence():
    # An early mention does not disqualify a sentence whose final
    # occurrence sits in the tail.
    both = "the lamp room glowed dark in the old lamp"
    tasks, _ = build_cloze_set([sense(examples=[both])], rich_vocab(), min_count=2)
    assert len(tasks) == 1
    assert tasks[0].prefix.endswith("old ")


def test_cloze_frequency_band():
    texts = rich_vocab()
    example = "the old room glowed dark with the old lamp"
    lo, _ = build_cloze_set([sense(examples=[example], freq=0.5)], texts, min_count=2)
    hi, hi_report = build_cloze_set(
        [sense(examples=[example], freq=1500.0)], texts, min_count=2
    )
    assert lo == [] and hi == []
    assert hi_report.rejected.get("frequency_out_of_range") == 1
    edge, _ = build_cloze_set(
        [sense(examples=[example], freq=1000.0)], texts, min_count=2
    )
    assert len(edge) == 1  # the band is inclusive at both ends


def test_cloze_vocabulary_filter():
    # "glowed" clears the threshold in vocab A but is absent from vocab B.
    va = word_counts(["the old room glowed dark with the old room glowed dark with lamp lamp"])
    vb = word_counts(["the old room dark with the old room dark with lamp lamp"])
    tasks, report = build_cloze_set(
        [sense(examples=["the old room glowed dark with the old lamp"])],
        [va, vb], min_count=2,
    )
    assert tasks == []
    assert report.rejected["out_of_vocabulary"] == 1
    assert report.dropped_oov == [("s1:0", "glowed")]


def test_cloze_rejects_unusable_inputs():
    tasks, report = build_cloze_set(
        [
            sense(word="123", sid="bad-word", examples=["x 123"]),
            sense(sid="absent", examples=["the old dark room"]),
            sense(sid="no-prefix", examples=["-" * 40 + " lamp"]),
        ],
        rich_vocab(), min_count=2,
    )
    assert tasks == []
    assert report.rejected.get("unusable_target_word") == 1
    assert report.rejected.get("target_absent") == 1
    assert report.rejected.get("empty_prefix") == 1
    assert report.n_senses == 3


def test_cloze_tail_fraction_validation():
    with pytest.raises(EvaluationError):
        build_cloze_set([], rich_vocab(), tail_fraction=0.0)


def test_cloze_filter_words_include_target():
    task = ClozeTask("t", "the old ", "Lamp", "s", 1900, 10.0)
    assert task.filter_words() == ["the", "old", "lamp"]


# -- rank_cloze --------------------------------------------------------------

AB = ToyTokenizer(letters="ab", puncts="")


def ab_battery(bias_word: str):
    """One-model battery that strongly prefers ``bias_word`` after anything."""
    table = torch.zeros((7, 7))
    first_id = {"a": 3, "b": 5}[bias_word]
    table[:, first_id] = 4.0
    return {"m": (TableModel(table, context_length=12), AB)}


def test_rank_cloze_ranks_and_sentinel():
    tasks = [
        ClozeTask("t-a", "ab ", "a", "s1", 1900, 10.0),
        ClozeTask("t-b", "ab ", "b", "s2", 1900, 10.0),
        ClozeTask("t-x", "ab ", "xyz", "s3", 1900, 10.0),  # unreachable word
    ]
    run = rank_cloze(ab_battery("a"), tasks, k=3, max_word_tokens=1)
    by_id = {r.task_id: r for r in run.rankings}
    assert by_id["t-a"].rank == 0 and by_id["t-a"].hit
    assert by_id["t-b"].rank == 1 and by_id["t-b"].hit
    assert by_id["t-x"].rank == 4 and not by_id["t-x"].hit  # sentinel k + 1
    assert all(r.k == 3 for r in run.rankings)
    assert run.failures == []


def test_rank_cloze_target_matches_case_insensitively():
    tasks = [ClozeTask("t", "ab ", "A", "s", 1900, 10.0)]
    run = rank_cloze(ab_battery("a"), tasks, k=2, max_word_tokens=1)
    assert run.rankings[0].rank == 0


def test_rank_cloze_records_failures_instead_of_scoring():
    # A prefix that overflows the context cannot be scored silently.
    tasks = [
        ClozeTask("long", "ab " * 40, "a", "s", 1900, 10.0),
        ClozeTask("fine", "ab ", "a", "s", 1900, 10.0),
    ]
    run = rank_cloze(ab_battery("a"), tasks, k=2, max_word_tokens=1)
    assert [f.task_id for f in run.failures] == ["long"]
    assert [r.task_id for r in run.rankings] == ["fine"]


# -- metric arithmetic -------------------------------------------------------


def rk(task_id, model_id, rank, k=10):
    return ClozeRanking(task_id=task_id, model_id=model_id, rank=rank, k=k)


def task_with_year(tid, year):
    return ClozeTask(tid, "p ", "w", f"sense-{tid}", year, 10.0)


def test_leakage_report_hand_values():
    tasks = {t.id: t for t in [
        task_with_year("f1", 1950), task_with_year("f2", 1960),
        task_with_year("f3", 1970), task_with_year("f4", 1980),
        task_with_year("p1", 1900), task_with_year("p2", 1910),
        task_with_year("p3", 1920), task_with_year("p4", 1930),
        task_with_year("p5", 1940),
    ]}
    rankings = [
        rk("f1", "m", 2), rk("f2", "m", 11), rk("f3", "m", 11), rk("f4", "m", 9),
        rk("p1", "m", 0), rk("p2", "m", 3), rk("p3", "m", 11),
        rk("p4", "m", 5), rk("p5", "m", 1),
        rk("p1", "other", 0),  # other models are ignored
    ]
    rep = leakage_report(rankings, tasks, "m", cutoff_year=1945, k=10)
    assert (rep.n_future, rep.n_past) == (4, 5)
    assert (rep.hits_future, rep.hits_past) == (2, 4)
    assert rep.leakage == pytest.approx(0.5)
    assert rep.recall == pytest.approx(0.8)
    assert rep.rnl == pytest.approx(0.625)
    assert rep.leakage_defined and rep.recall_defined and rep.rnl_defined


def test_leakage_cutoff_year_is_inclusive_past():
    tasks = {t.id: t for t in [task_with_year("t", 1945)]}
    rep = leakage_report([rk("t", "m", 0)], tasks, "m", cutoff_year=1945, k=10)
    assert rep.n_past == 1 and rep.n_future == 0


def test_leakage_undefined_flags_not_zeros():
    tasks = {t.id: t for t in [task_with_year("p1", 1900), task_with_year("f1", 1990)]}
    # No future tasks at all: leakage undefined, rnl undefined.
    rep = leakage_report([rk("p1", "m", 0)], tasks, "m", cutoff_year=1950, k=10)
    assert rep.leakage is None and rep.rnl is None
    assert rep.recall == 1.0
    assert not rep.leakage_defined and not rep.rnl_defined
    # Recall of zero: rnl undefined even though leakage is defined.
    rep2 = leakage_report(
        [rk("p1", "m", 11), rk("f1", "m", 0)], tasks, "m", cutoff_year=1950, k=10
    )
    assert rep2.recall == 0.0 and rep2.leakage == 1.0
    assert rep2.rnl is None


def test_leakage_rejects_mismatched_k():
    tasks = {t.id: t for t in [task_with_year("t", 1900)]}
    with pytest.raises(EvaluationError):
        leakage_report([rk("t", "m", 0, k=5)], tasks, "m", cutoff_year=1950, k=10)


def test_leakage_rejects_unknown_task():
    with pytest.raises(EvaluationError):
        leakage_report([rk("ghost", "m", 0)], {}, "m", cutoff_year=1950, k=10)


def test_mrr_hand_values():
    rankings = [rk("a", "m", 0), rk("b", "m", 1), rk("c", "m", 3), rk("d", "m", 11)]
    expect = (1.0 + 0.5 + 0.25 + 0.0) / 4
    assert mrr(rankings) == pytest.approx(expect)
    with pytest.raises(EvaluationError):
        mrr([])


def test_mrr_sentinel_and_rank_k_contribute_zero():
    assert mrr([rk("a", "m", 10)]) == 0.0  # rank == k counts as a miss
    assert mrr([rk("a", "m", 11)]) == 0.0


def test_grouped_accuracy_hand_values_and_weighted_mean():
    tasks = {t.id: t for t in [
        task_with_year("a", 1900), task_with_year("b", 1905),
        task_with_year("c", 1950), task_with_year("d", 1955),
        task_with_year("e", 1960),
    ]}
    rankings = [
        rk("a", "m", 0), rk("b", "m", 11),
        rk("c", "m", 1), rk("d", "m", 2), rk("e", "m", 11),
    ]
    group_of = lambda t: "early" if t.year < 1950 else "late"
    result, omitted = grouped_accuracy(
        rankings, tasks, group_of, expected_groups=["early", "late", "empty"]
    )
    assert result == {"early": (0.5, 2), "late": (pytest.approx(2 / 3), 3)}
    assert omitted == ["empty"]
    overall = sum(acc * n for acc, n in result.values()) / sum(
        n for _, n in result.values()
    )
    assert overall == pytest.approx(3 / 5)


def test_grouped_accuracy_unknown_task():
    with pytest.raises(EvaluationError):
        grouped_accuracy([rk("ghost", "m", 0)], {}, lambda t: "g")


def test_year_group_fn_mapping():
    bounds = [("1800-1830", 1800, 1830), ("1830-1860", 1830, 1860),
              ("1860-1889", 1860, 1889)]
    f = year_group_fn(bounds)
    cases = {
        1799: "pre", 1800: "1800-1830", 1829: "1800-1830",
        1830: "1830-1860", 1860: "1860-1889", 1889: "1860-1889",
        1890: "post",
    }
    for year, label in cases.items():
        assert f(task_with_year("t", year)) == label, year


def test_year_group_fn_open_last():
    bounds = [("a", 1800, 1850), ("b", 1850, 1900)]
    f = year_group_fn(bounds, closed_last=False)
    assert f(task_with_year("t", 1900)) == "post"


# -- minimal pairs -----------------------------------------------------------


def test_sentence_logprob_matches_hand_sum():
    model = TableModel(torch.randn((7, 7), generator=torch.Generator().manual_seed(0)),
                       context_length=16)
    ids = AB.encode("ab ba")
    lp = F.log_softmax(model.table.double(), dim=-1)
    seq = [AB.bos_id] + ids
    expect = sum(lp[seq[i], seq[i + 1]].item() for i in range(len(seq) - 1))
    got = sentence_logprob(model, AB, "ab ba")
    assert got == pytest.approx(expect, abs=1e-9)
    norm = sentence_logprob(model, AB, "ab ba", normalize=True)
    assert norm == pytest.approx(expect / len(ids), abs=1e-9)


def test_minimal_pair_accuracy_counts_and_tie_rule():
    # Table favouring "a"-initial tokens makes "a" the acceptable form.
    table = torch.zeros((7, 7))
    table[:, 3] = 3.0
    model = TableModel(table, context_length=16)
    pairs = [
        MinimalPair("p1", good="a", bad="b", subtask="s1"),
        MinimalPair("p2", good="b", bad="a", subtask="s1"),
        MinimalPair("p3", good="aa", bad="ba", subtask="s2"),
        MinimalPair("p4", good="ab", bad="ab", subtask="s2"),  # tie: incorrect
    ]
    rep = minimal_pair_accuracy(model, AB, pairs, model_id="m")
    assert rep.n == 4
    assert rep.accuracy == pytest.approx(0.5)
    assert rep.by_subtask == {"s1": (0.5, 2), "s2": (0.5, 2)}
    with pytest.raises(EvaluationError):
        minimal_pair_accuracy(model, AB, [])


def test_minimal_pair_normalization_removes_length_preference():
    # With per-token normalization a pair of identical per-token quality
    # but different lengths scores as a tie, not a win for the short one.
    v = 7
    table = torch.zeros((v, v))
    model = TableModel(table, context_length=16)  # uniform everywhere
    raw_good = sentence_logprob(model, AB, "a")
    raw_bad = sentence_logprob(model, AB, "aa")
    assert raw_good > raw_bad  # sum scoring prefers the shorter form
    norm_good = sentence_logprob(model, AB, "a", normalize=True)
    norm_bad = sentence_logprob(model, AB, "aa", normalize=True)
    assert norm_good == pytest.approx(norm_bad, abs=1e-12)


# -- cross-time matrix -------------------------------------------------------


class MiniTok:
    def __init__(self):
        self.bos_id, self.eos_id = 0, 1

    def encode(self, text):
        return [3 + (ord(c) % 4) for c in text if c != " "]


def test_cross_time_matrix_values_and_labels():
    tok = MiniTok()
    g = torch.Generator().manual_seed(1)
    battery = {
        "old": (TableModel(torch.randn((7, 7), generator=g), context_length=8), tok),
        "new": (TableModel(torch.randn((7, 7), generator=g), context_length=8), tok),
    }
    texts = {"old": ["abcd ab", "ddd"], "new": ["aabb ccd"]}
    m = cross_time_matrix(battery, texts)
    assert m.model_labels == ["old", "new"]
    assert m.slice_labels == ["old", "new"]
    for ml in battery:
        model, t = battery[ml]
        for sl in texts:
            assert m.value(ml, sl) == pytest.approx(
                perplexity(model, t, texts[sl]), rel=1e-12
            )


def test_cross_time_matrix_label_mismatch_raises():
    tok = MiniTok()
    model = TableModel(torch.zeros((7, 7)), context_length=8)
    with pytest.raises(EvaluationError):
        cross_time_matrix({"a": (model, tok)}, {"b": ["x"]})
    with pytest.raises(EvaluationError):
        cross_time_matrix({"a": (model, tok)}, {"a": []})
