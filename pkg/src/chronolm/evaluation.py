"""Time-sensitive evaluation: cloze ranking, leakage, minimal pairs.

Cloze tasks come from a sense inventory: a dated word sense plus example
sentences.  A model is asked to complete the sentence prefix before the
target word; the target's rank among the model's top-k single-word
completions is the measurement.  Failing to rank within k yields the
sentinel rank k + 1 so means stay defined.

Leakage statistics split tasks by a cutoff year: senses from after the
cutoff form the F set (the model should not know them), senses from
before form the T set (it should).  leakage = C_F / |F| and
recall = C_T / |T| where C is the count ranked within k; their ratio is
the relative normalized leakage.  Empty denominators are reported as
undefined, never as zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import torch
import torch.nn.functional as F

from .corpus import WordCounts, extract_words, filter_in_vocab
from .decoding import DecodingError, top_k_single_words


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class SenseRecord:
    """One dated word sense from an inventory."""

    word: str
    sense_id: str
    year: int
    examples: tuple[str, ...]
    frequency_per_million: float
    definition: str = ""


@dataclass(frozen=True)
class ClozeTask:
    id: str
    prefix: str
    target_word: str
    sense_id: str
    year: int
    frequency_per_million: float

    def filter_words(self) -> list[str]:
        return extract_words(self.prefix) + [self.target_word.lower()]


@dataclass
class ClozeBuildReport:
    n_senses: int = 0
    n_examples: int = 0
    n_tasks: int = 0
    rejected: dict[str, int] = field(default_factory=dict)
    dropped_oov: list[tuple[str, str]] = field(default_factory=list)

    def bump(self, reason: str):
        self.rejected[reason] = self.rejected.get(reason, 0) + 1


def build_cloze_set(
    senses: Iterable[SenseRecord],
    vocabularies: Sequence[WordCounts],
    tail_fraction: float = 0.10,
    freq_range: tuple[float, float] = (1.0, 1000.0),
    min_count: int = 2,
) -> tuple[list[ClozeTask], ClozeBuildReport]:
    """Turn inventory examples into cloze tasks.

    An example survives when the target word's last occurrence starts in
    the final ``tail_fraction`` of the sentence (so the prefix carries
    nearly all the context), the sense frequency lies in ``freq_range``
    (per million), and every prefix word plus the target clears
    ``min_count`` in every vocabulary.
    """
    if not 0.0 < tail_fraction <= 1.0:
        raise EvaluationError("tail_fraction must be in (0, 1]")
    lo, hi = freq_range
    report = ClozeBuildReport()
    candidates: list[ClozeTask] = []
    for sense in senses:
        report.n_senses += 1
        if not sense.word or not extract_words(sense.word):
            report.bump("unusable_target_word")
            continue
        if not lo <= sense.frequency_per_million <= hi:
            report.bump("frequency_out_of_range")
            continue
        target = sense.word.lower()
        for i, sentence in enumerate(sense.examples):
            report.n_examples += 1
            spans = [
                (w, s, e) for (w, s, e) in _word_spans(sentence) if w == target
            ]
            if not spans:
                report.bump("target_absent")
                continue
            _, start, _ = spans[-1]
            if start < (1.0 - tail_fraction) * len(sentence):
                report.bump("target_not_in_tail")
                continue
            prefix = sentence[:start]
            if not extract_words(prefix):
                report.bump("empty_prefix")
                continue
            candidates.append(
                ClozeTask(
                    id=f"{sense.sense_id}:{i}",
                    prefix=prefix,
                    target_word=target,
                    sense_id=sense.sense_id,
                    year=sense.year,
                    frequency_per_million=sense.frequency_per_million,
                )
            )
    kept, retention = filter_in_vocab(
        candidates, vocabularies, min_count=min_count,
        group_fn=lambda t: "cloze", key_fn=lambda t: t.id,
    )
    report.dropped_oov = retention.dropped
    report.rejected["out_of_vocabulary"] = len(retention.dropped)
    report.n_tasks = len(kept)
    return kept, report


def _word_spans(text: str):
    from .corpus import extract_word_spans

    return extract_word_spans(text)


@dataclass(frozen=True)
class ClozeRanking:
    task_id: str
    model_id: str
    rank: int  # 0-based; k + 1 when the target is not in the top k
    k: int

    @property
    def hit(self) -> bool:
        return self.rank < self.k


@dataclass
class ClozeRunFailure:
    task_id: str
    model_id: str
    error: str


@dataclass
class ClozeRun:
    rankings: list[ClozeRanking]
    failures: list[ClozeRunFailure]


def rank_cloze(
    battery: Mapping[str, tuple],
    tasks: Sequence[ClozeTask],
    k: int = 100,
    beam_width: int | None = None,
    max_word_tokens: int = 8,
) -> ClozeRun:
    """Rank every task's target under every model's top-k completions.

    The target matches case-insensitively.  A decoding failure is
    recorded and the (task, model) pair is excluded, never scored as a
    silent miss.
    """
    rankings: list[ClozeRanking] = []
    failures: list[ClozeRunFailure] = []
    for model_id, (model, tokenizer) in battery.items():
        for task in tasks:
            try:
                result = top_k_single_words(
                    model, tokenizer, task.prefix, k=k,
                    beam_width=beam_width, max_word_tokens=max_word_tokens,
                )
            except DecodingError as exc:
                failures.append(ClozeRunFailure(task.id, model_id, str(exc)))
                continue
            rank = k + 1
            target = task.target_word.casefold()
            for c in result.completions:
                if c.word.casefold() == target:
                    rank = c.rank
                    break
            rankings.append(ClozeRanking(task_id=task.id, model_id=model_id, rank=rank, k=k))
    return ClozeRun(rankings=rankings, failures=failures)


@dataclass
class LeakageReport:
    model_id: str
    cutoff_year: int
    k: int
    n_future: int
    n_past: int
    hits_future: int
    hits_past: int
    leakage: float | None  # None when undefined (no future tasks)
    recall: float | None
    rnl: float | None  # leakage / recall; None when recall is 0 or undefined

    @property
    def leakage_defined(self) -> bool:
        return self.leakage is not None

    @property
    def recall_defined(self) -> bool:
        return self.recall is not None

    @property
    def rnl_defined(self) -> bool:
        return self.rnl is not None


def leakage_report(
    rankings: Sequence[ClozeRanking],
    tasks_by_id: Mapping[str, ClozeTask],
    model_id: str,
    cutoff_year: int,
    k: int,
) -> LeakageReport:
    """Leakage and recall of one model at a cutoff year.

    Future set: tasks whose sense year is strictly after the cutoff.
    Past set: the rest.  A hit is rank < k (within the top k).
    """
    n_f = n_t = c_f = c_t = 0
    for r in rankings:
        if r.model_id != model_id:
            continue
        task = tasks_by_id.get(r.task_id)
        if task is None:
            raise EvaluationError(f"ranking references unknown task {r.task_id!r}")
        if r.k != k:
            raise EvaluationError(f"ranking for {r.task_id!r} used k={r.k}, expected {k}")
        hit = r.rank < k
        if task.year > cutoff_year:
            n_f += 1
            c_f += hit
        else:
            n_t += 1
            c_t += hit
    leakage = (c_f / n_f) if n_f else None
    recall = (c_t / n_t) if n_t else None
    rnl = (leakage / recall) if (leakage is not None and recall) else None
    return LeakageReport(
        model_id=model_id, cutoff_year=cutoff_year, k=k,
        n_future=n_f, n_past=n_t, hits_future=c_f, hits_past=c_t,
        leakage=leakage, recall=recall, rnl=rnl,
    )


def mrr(rankings: Sequence[ClozeRanking]) -> float:
    """Mean reciprocal rank; sentinel ranks contribute zero."""
    if not rankings:
        raise EvaluationError("mrr of an empty ranking list is undefined")
    total = 0.0
    for r in rankings:
        if r.rank < r.k:
            total += 1.0 / (r.rank + 1)
    return total / len(rankings)


def grouped_accuracy(
    rankings: Sequence[ClozeRanking],
    tasks_by_id: Mapping[str, ClozeTask],
    group_fn: Callable[[ClozeTask], str],
    expected_groups: Sequence[str] = (),
) -> tuple[dict[str, tuple[float, int]], list[str]]:
    """Top-k hit rate per task group: group -> (accuracy, n).

    Groups named in ``expected_groups`` that receive no tasks come back
    in the omitted list instead of appearing with a fabricated zero.
    """
    agg: dict[str, list[int]] = {}
    for r in rankings:
        task = tasks_by_id.get(r.task_id)
        if task is None:
            raise EvaluationError(f"ranking references unknown task {r.task_id!r}")
        g = group_fn(task)
        tally = agg.setdefault(g, [0, 0])
        tally[1] += 1
        tally[0] += r.rank < r.k
    result = {g: (hits / n, n) for g, (hits, n) in agg.items()}
    omitted = [g for g in expected_groups if g not in result]
    return result, omitted


def year_group_fn(slice_bounds: Sequence[tuple[str, int, int]], closed_last: bool = True):
    """Group tasks by which slice interval their sense year falls in.

    Years before the first interval map to "pre", after the last to
    "post".  ``slice_bounds`` is (label, start, end) per slice.
    """
    def f(task: ClozeTask) -> str:
        y = task.year
        for i, (label, start, end) in enumerate(slice_bounds):
            last = i == len(slice_bounds) - 1
            if last and closed_last:
                if start <= y <= end:
                    return label
            elif start <= y < end:
                return label
        if slice_bounds and y < slice_bounds[0][1]:
            return "pre"
        return "post"

    return f


# -- minimal pairs -----------------------------------------------------------


@dataclass(frozen=True)
class MinimalPair:
    id: str
    good: str
    bad: str
    subtask: str = "all"

    def filter_words(self) -> list[str]:
        return extract_words(self.good) + extract_words(self.bad)


@dataclass
class MinimalPairReport:
    model_id: str
    accuracy: float
    n: int
    by_subtask: dict[str, tuple[float, int]]


def sentence_logprob(model, tokenizer, sentence: str, normalize: bool = False) -> float:
    """Log probability of the sentence's tokens after BOS.

    By default the unnormalized sum; with ``normalize`` the per-token
    mean, which removes the length preference between two forms.
    """
    ids = tokenizer.encode(sentence)
    if not ids:
        raise EvaluationError(f"sentence tokenizes to nothing: {sentence!r}")
    t = torch.tensor([[tokenizer.bos_id] + ids], dtype=torch.long)
    with torch.no_grad():
        logits = model(t).double()
    lp = F.log_softmax(logits[0, :-1], dim=-1)
    total = lp.gather(1, t[0, 1:].unsqueeze(1)).sum().item()
    return total / len(ids) if normalize else total


def minimal_pair_accuracy(
    model, tokenizer, pairs: Sequence[MinimalPair], model_id: str = "",
    normalize: bool = False,
) -> MinimalPairReport:
    """Fraction of pairs where the acceptable sentence scores higher.

    Ties count as incorrect: the model failed to prefer the acceptable
    form.
    """
    if not pairs:
        raise EvaluationError("no minimal pairs to evaluate")
    per: dict[str, list[int]] = {}
    correct = 0
    for pair in pairs:
        good = sentence_logprob(model, tokenizer, pair.good, normalize=normalize)
        bad = sentence_logprob(model, tokenizer, pair.bad, normalize=normalize)
        ok = good > bad
        correct += ok
        tally = per.setdefault(pair.subtask, [0, 0])
        tally[1] += 1
        tally[0] += ok
    return MinimalPairReport(
        model_id=model_id,
        accuracy=correct / len(pairs),
        n=len(pairs),
        by_subtask={s: (h / n, n) for s, (h, n) in per.items()},
    )


# -- cross-time perplexity ---------------------------------------------------


@dataclass
class PerplexityMatrix:
    model_labels: list[str]
    slice_labels: list[str]
    values: list[list[float]]  # [model][slice]

    def value(self, model_label: str, slice_label: str) -> float:
        return self.values[self.model_labels.index(model_label)][
            self.slice_labels.index(slice_label)
        ]


def cross_time_matrix(
    battery: Mapping[str, tuple],
    test_texts: Mapping[str, Sequence[str]],
    stride: int | None = None,
) -> PerplexityMatrix:
    """Perplexity of every model on every slice's test texts.

    The battery and the test sets must cover the same slice labels;
    a missing side is an error, not a silently skipped cell.
    """
    from .model import perplexity

    model_labels = list(battery.keys())
    slice_labels = list(test_texts.keys())
    if set(model_labels) != set(slice_labels):
        raise EvaluationError(
            f"battery labels {sorted(model_labels)} do not match "
            f"test slice labels {sorted(slice_labels)}"
        )
    values = []
    for ml in model_labels:
        model, tokenizer = battery[ml]
        row = []
        for sl in slice_labels:
            texts = test_texts[sl]
            if not texts:
                raise EvaluationError(f"slice {sl!r} has no test texts")
            row.append(perplexity(model, tokenizer, texts, stride=stride))
        values.append(row)
    return PerplexityMatrix(
        model_labels=model_labels, slice_labels=slice_labels, values=values
    )
