"""Dated document store, time slicing, splits, and vocabulary filters.

Slice boundaries are year intervals, half-open [start, end) except the
final slice which is closed.  Budgets count whitespace-separated tokens;
the word-level operations use the lowercased alphabetic word rule
identified by :data:`WORD_RULE_ID`.
"""
from __future__ import annotations

import json
import random
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

# Maximal runs of letters, with apostrophes allowed word-internally.
# [^\W\d_] matches unicode letters only.
WORD_RULE_ID = "lower-alpha-apostrophe-v1"
_WORD_RE = re.compile(r"[^\W\d_]+(?:'[^\W\d_]+)*")


def extract_word_spans(text: str) -> list[tuple[str, int, int]]:
    """All words in ``text`` with character spans, lowercased."""
    return [(m.group(0).lower(), m.start(), m.end()) for m in _WORD_RE.finditer(text)]


def extract_words(text: str) -> list[str]:
    return [m.group(0).lower() for m in _WORD_RE.finditer(text)]


def count_ws_tokens(text: str) -> int:
    """Whitespace-separated token count (the budgeting unit)."""
    return len(text.split())


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Document:
    id: str
    year: int
    text: str
    title: str | None = None
    author: str | None = None


@dataclass
class RejectRecord:
    path: str
    line_no: int
    reason: str


@dataclass
class IngestReport:
    n_read: int = 0
    n_accepted: int = 0
    rejects: list[RejectRecord] = field(default_factory=list)


class CorpusStore:
    """Insertion-ordered collection of documents with unique ids."""

    def __init__(self, year_range: tuple[int, int]):
        lo, hi = year_range
        if lo > hi:
            raise CorpusError(f"empty year range {year_range}")
        self.year_range = (int(lo), int(hi))
        self._docs: dict[str, Document] = {}

    def add(self, doc: Document) -> None:
        lo, hi = self.year_range
        if doc.id in self._docs:
            raise CorpusError(f"duplicate document id {doc.id!r}")
        if not doc.text:
            raise CorpusError(f"document {doc.id!r} has empty text")
        if not lo <= doc.year <= hi:
            raise CorpusError(f"document {doc.id!r} year {doc.year} outside {self.year_range}")
        self._docs[doc.id] = doc

    def __len__(self) -> int:
        return len(self._docs)

    def __iter__(self):
        return iter(self._docs.values())

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._docs

    def get(self, doc_id: str) -> Document:
        return self._docs[doc_id]

    def ids(self) -> list[str]:
        return list(self._docs.keys())


_DEFAULT_SCHEMA = {"id": "id", "year": "year", "text": "text", "title": "title", "author": "author"}


def ingest(
    paths: Sequence[str],
    year_range: tuple[int, int],
    schema: Mapping[str, str] | None = None,
) -> tuple[CorpusStore, IngestReport]:
    """Read JSONL document files into a store.

    ``schema`` maps the canonical field names (id, year, text, title,
    author) to the keys used in the input files.  Records that fail
    validation (bad JSON, missing id/text, unparseable or out-of-range
    year, duplicate id) are rejected individually and reported; an
    unreadable file raises.
    """
    mapping = dict(_DEFAULT_SCHEMA)
    if schema:
        unknown = set(schema) - set(_DEFAULT_SCHEMA)
        if unknown:
            raise CorpusError(f"unknown schema fields {sorted(unknown)}")
        mapping.update(schema)

    store = CorpusStore(year_range)
    report = IngestReport()
    for path in paths:
        try:
            fh = open(path, "r", encoding="utf-8")
        except OSError as exc:
            raise CorpusError(f"cannot read corpus file {path}: {exc}") from exc
        with fh:
            for line_no, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                report.n_read += 1
                try:
                    raw = json.loads(line)
                except json.JSONDecodeError as exc:
                    report.rejects.append(RejectRecord(path, line_no, f"bad json: {exc.msg}"))
                    continue
                if not isinstance(raw, dict):
                    report.rejects.append(RejectRecord(path, line_no, "record is not an object"))
                    continue
                doc_id = raw.get(mapping["id"])
                text = raw.get(mapping["text"])
                year_raw = raw.get(mapping["year"])
                if doc_id is None or str(doc_id) == "":
                    report.rejects.append(RejectRecord(path, line_no, "missing id"))
                    continue
                if not isinstance(text, str) or not text:
                    report.rejects.append(RejectRecord(path, line_no, "missing or empty text"))
                    continue
                try:
                    year = int(year_raw)
                except (TypeError, ValueError):
                    report.rejects.append(
                        RejectRecord(path, line_no, f"unparseable year {year_raw!r}")
                    )
                    continue
                title = raw.get(mapping["title"])
                author = raw.get(mapping["author"])
                doc = Document(
                    id=str(doc_id),
                    year=year,
                    text=text,
                    title=str(title) if title is not None else None,
                    author=str(author) if author is not None else None,
                )
                try:
                    store.add(doc)
                except CorpusError as exc:
                    report.rejects.append(RejectRecord(path, line_no, str(exc)))
                    continue
                report.n_accepted += 1
    return store, report


@dataclass(frozen=True)
class Budgets:
    train: int
    val: int
    test: int

    def __post_init__(self):
        for name in ("train", "val", "test"):
            if getattr(self, name) < 0:
                raise CorpusError(f"{name} budget must be non-negative")

    @property
    def total(self) -> int:
        return self.train + self.val + self.test


@dataclass(frozen=True)
class TimeSlice:
    label: str
    start_year: int
    end_year: int  # inclusive only for the final slice
    closed: bool
    train_budget: int = 0
    val_budget: int = 0
    test_budget: int = 0

    def contains(self, year: int) -> bool:
        if self.closed:
            return self.start_year <= year <= self.end_year
        return self.start_year <= year < self.end_year


@dataclass
class Shortfall:
    label: str
    required: int
    available: int


@dataclass
class SlicePlan:
    slices: list[TimeSlice]
    budgets: Budgets
    assignment: dict[str, str]  # doc id -> slice label
    realized_tokens: dict[str, int]  # slice label -> whitespace tokens
    feasible: bool
    shortfalls: list[Shortfall] = field(default_factory=list)

    def slice_doc_ids(self, label: str) -> list[str]:
        return [d for d, lab in self.assignment.items() if lab == label]

    def labels(self) -> list[str]:
        return [s.label for s in self.slices]


def plan_slices(
    store: CorpusStore,
    n_slices: int,
    budgets: Budgets,
    token_counter: Callable[[str], int] = count_ws_tokens,
) -> SlicePlan:
    """Choose contiguous year boundaries greedily, left to right.

    Each slice ends at the smallest year by which its cumulative token
    count covers train+val+test; the final slice takes the remaining
    years.  When a slice cannot be filled the plan is still returned,
    marked infeasible, with the shortfall per slice.
    """
    if n_slices < 1:
        raise CorpusError("n_slices must be at least 1")
    if len(store) == 0:
        raise CorpusError("empty corpus store")
    lo, hi = store.year_range
    tokens_by_year: Counter = Counter()
    docs_by_year: dict[int, list[str]] = {}
    for doc in store:
        tokens_by_year[doc.year] += token_counter(doc.text)
        docs_by_year.setdefault(doc.year, []).append(doc.id)

    need = budgets.total
    slices: list[TimeSlice] = []
    shortfalls: list[Shortfall] = []
    realized: dict[str, int] = {}
    used_labels: set[str] = set()
    start = lo
    for i in range(n_slices):
        last = i == n_slices - 1
        if last and start <= hi:
            end = hi
            closed = True
            got = sum(tokens_by_year[y] for y in range(start, hi + 1))
        else:
            # Half-open [start, end); ends at the smallest year meeting the
            # combined budget.  Runs dry when the years are exhausted.
            got = 0
            end = start
            while end <= hi and got < need:
                got += tokens_by_year[end]
                end += 1
            closed = False
        label = f"{start}-{end}"
        while label in used_labels:
            label += "+"
        used_labels.add(label)
        sl = TimeSlice(
            label=label, start_year=start, end_year=end, closed=closed,
            train_budget=budgets.train, val_budget=budgets.val,
            test_budget=budgets.test,
        )
        slices.append(sl)
        realized[label] = got
        if got < need:
            shortfalls.append(Shortfall(label, need, got))
        start = end if not closed else hi + 1

    assignment: dict[str, str] = {}
    for sl in slices:
        years = range(sl.start_year, sl.end_year + 1 if sl.closed else sl.end_year)
        for y in years:
            for doc_id in docs_by_year.get(y, ()):
                if doc_id not in assignment:
                    assignment[doc_id] = sl.label
    return SlicePlan(
        slices=slices,
        budgets=budgets,
        assignment=assignment,
        realized_tokens=realized,
        feasible=not shortfalls,
        shortfalls=shortfalls,
    )


@dataclass
class SplitSet:
    slice_label: str
    seed: int
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]
    realized: dict[str, int]
    feasible: bool
    shortfalls: list[Shortfall] = field(default_factory=list)


def split_slice(
    store: CorpusStore,
    plan: SlicePlan,
    label: str,
    seed: int,
    token_counter: Callable[[str], int] = count_ws_tokens,
) -> SplitSet:
    """Partition one slice's documents into train/val/test.

    Documents are shuffled with ``seed`` and assigned whole: test fills
    first, then val, then the remainder goes to train.  The same seed
    always yields the same split.  Only val and test budgets decide
    feasibility; train takes whatever is left, which may fall short of
    its nominal budget when test and val overshoot on whole documents.
    """
    if label not in plan.labels():
        raise CorpusError(f"unknown slice label {label!r}")
    doc_ids = plan.slice_doc_ids(label)
    rng = random.Random(seed)
    rng.shuffle(doc_ids)

    budgets = plan.budgets
    phases = ("test", "val", "train")
    splits: dict[str, list[str]] = {"train": [], "val": [], "test": []}
    realized = {"train": 0, "val": 0, "test": 0}
    pi = 0
    for doc_id in doc_ids:
        while pi < 2 and realized[phases[pi]] >= getattr(budgets, phases[pi]):
            pi += 1
        name = phases[pi]
        splits[name].append(doc_id)
        realized[name] += token_counter(store.get(doc_id).text)

    shortfalls = [
        Shortfall(f"{label}/{name}", getattr(budgets, name), realized[name])
        for name in ("val", "test")
        if realized[name] < getattr(budgets, name)
    ]
    return SplitSet(
        slice_label=label,
        seed=seed,
        train=tuple(splits["train"]),
        val=tuple(splits["val"]),
        test=tuple(splits["test"]),
        realized=realized,
        feasible=not shortfalls,
        shortfalls=shortfalls,
    )


@dataclass
class WordCounts:
    counts: Counter
    source: str
    word_rule: str = WORD_RULE_ID

    def count(self, word: str) -> int:
        return self.counts.get(word.lower(), 0)


def word_counts(texts: Iterable[str], source: str = "") -> WordCounts:
    """Word frequency table over ``texts`` under the standard word rule."""
    counts: Counter = Counter()
    for text in texts:
        counts.update(extract_words(text))
    return WordCounts(counts=counts, source=source)


@dataclass
class RetentionReport:
    total: int
    retained: int
    by_group: dict[str, tuple[int, int]]  # group -> (retained, total)
    dropped: list[tuple[str, str]]  # (item key, first failing word)


def _default_words(item) -> list[str]:
    fn = getattr(item, "filter_words", None)
    if callable(fn):
        return fn()
    return extract_words(str(item))


def filter_in_vocab(
    items: Sequence,
    vocabularies: Sequence[WordCounts],
    min_count: int = 2,
    words_fn: Callable[[object], list[str]] | None = None,
    group_fn: Callable[[object], str] | None = None,
    key_fn: Callable[[object], str] | None = None,
) -> tuple[list, RetentionReport]:
    """Keep items whose every word clears ``min_count`` in every vocabulary.

    ``words_fn`` extracts the words to check (defaults to the item's
    ``filter_words()`` method, else the word rule over ``str(item)``).
    With ``min_count=0`` this is the identity filter.
    """
    if not vocabularies:
        raise CorpusError("filter_in_vocab needs at least one vocabulary")
    words_of = words_fn or _default_words
    group_of = group_fn or (lambda it: getattr(it, "subtask", None) or "all")
    key_of = key_fn or (lambda it: str(getattr(it, "id", it)))

    kept = []
    dropped: list[tuple[str, str]] = []
    by_group: dict[str, list[int]] = {}
    for item in items:
        g = group_of(item)
        tally = by_group.setdefault(g, [0, 0])
        tally[1] += 1
        bad = None
        for w in words_of(item):
            if any(v.count(w) < min_count for v in vocabularies):
                bad = w
                break
        if bad is None:
            kept.append(item)
            tally[0] += 1
        else:
            dropped.append((key_of(item), bad))
    report = RetentionReport(
        total=len(items),
        retained=len(kept),
        by_group={g: (r, t) for g, (r, t) in by_group.items()},
        dropped=dropped,
    )
    return kept, report
