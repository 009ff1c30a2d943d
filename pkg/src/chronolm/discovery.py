"""Finding words whose difficulty shifts across the model battery.

Every occurrence of every word in a sentence sample is scored under
each model; surprisal is min-max normalized within each (model,
sentence) row so models with different overall confidence stay
comparable.  For each word the per-model delta is the mean normalized
surprisal under that model minus the mean under a baseline model
(typically the most recent slice).  Words whose deltas fall slice over
slice, or whose positive deltas accumulate, are trajectory candidates:
their difficulty under older models exceeds their difficulty under
newer ones, the signature of an emerging usage.

Results are independent of sentence order: occurrences are aggregated
by sorted (sentence, position) key before averaging.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from .model import surprisal_profile


class DiscoveryError(ValueError):
    pass


@dataclass
class TrajectoryRecord:
    word: str
    occurrences: int
    deltas: dict[str, float]  # model label -> mean normalized delta vs baseline
    first_last_change: float  # delta under the earliest model minus the latest
    cumulative: float  # sum of positive deltas
    monotone: bool  # strictly decreasing across the battery within slack


@dataclass
class OccurrenceRow:
    sentence_index: int
    position: int  # character offset of the word
    context: str
    values: dict[str, float]  # model label -> normalized surprisal
    sense_label: str = ""  # left empty for hand annotation


@dataclass
class OccurrenceTable:
    word: str
    rows: list[OccurrenceRow]
    note: str = ""


def _collect(
    battery: Mapping[str, tuple],
    sentences: Sequence[str],
    use_normalized: bool,
):
    """Score every word occurrence of every sentence under every model.

    Returns {word: [(sent_idx, char_pos, {label: value})]} with
    occurrences sorted by (sentence index, position).
    """
    if not battery:
        raise DiscoveryError("empty model battery")
    occ: dict[str, list[tuple[int, int, dict[str, float]]]] = {}
    labels = list(battery.keys())
    for si, sentence in enumerate(sentences):
        if not sentence.strip():
            continue
        try:
            profile = surprisal_profile(battery, sentence)
        except Exception as exc:
            raise DiscoveryError(f"cannot score sentence {si}: {exc}") from exc
        rows = profile.normalized if use_normalized else profile.raw
        # recover character positions per word occurrence
        from .corpus import extract_word_spans

        spans = extract_word_spans(sentence)
        if len(spans) != len(profile.words):
            raise DiscoveryError(f"word alignment failed for sentence {si}")
        for wi, (word, start, _end) in enumerate(spans):
            values = {lab: rows[lab][wi] for lab in labels}
            occ.setdefault(word, []).append((si, start, values))
    for word in occ:
        occ[word].sort(key=lambda t: (t[0], t[1]))
    return occ


def _aggregate(values: Sequence[float], how: str) -> float:
    if how == "mean":
        return sum(values) / len(values)
    if how == "median":
        s = sorted(values)
        n = len(s)
        mid = n // 2
        return s[mid] if n % 2 else 0.5 * (s[mid - 1] + s[mid])
    raise DiscoveryError(f"unknown aggregate {how!r}")


def _word_records(
    battery: Mapping[str, tuple],
    baseline_label: str,
    sentences: Sequence[str],
    min_occurrences: int,
    epsilon: float,
    aggregate: str,
    use_normalized: bool,
) -> list[TrajectoryRecord]:
    labels = list(battery.keys())
    if baseline_label not in battery:
        raise DiscoveryError(f"baseline {baseline_label!r} not in battery {labels}")
    if min_occurrences < 1:
        raise DiscoveryError("min_occurrences must be positive")
    occ = _collect(battery, sentences, use_normalized)

    records = []
    for word in sorted(occ):
        entries = occ[word]
        if len(entries) < min_occurrences:
            continue
        deltas = {}
        for lab in labels:
            diffs = [v[lab] - v[baseline_label] for _, _, v in entries]
            deltas[lab] = _aggregate(diffs, aggregate)
        seq = [deltas[lab] for lab in labels]
        monotone = all(seq[i] > seq[i + 1] + epsilon for i in range(len(seq) - 1))
        records.append(
            TrajectoryRecord(
                word=word,
                occurrences=len(entries),
                deltas=deltas,
                first_last_change=seq[0] - seq[-1],
                cumulative=sum(d for d in seq if d > 0),
                monotone=monotone,
            )
        )
    return records


def trajectory_candidates(
    battery: Mapping[str, tuple],
    baseline_label: str,
    sentences: Sequence[str],
    min_occurrences: int = 5,
    top_n: int = 50,
    epsilon: float = 0.0,
    aggregate: str = "mean",
    use_normalized: bool = True,
) -> list[TrajectoryRecord]:
    """Words whose surprisal decreases strictly across the battery.

    The battery mapping must be ordered oldest to newest.  Only words
    with at least ``min_occurrences`` occurrences are considered;
    monotone means every consecutive delta drops by more than
    ``epsilon``.  Candidates are ranked by the first-to-last change,
    largest first.
    """
    records = _word_records(
        battery, baseline_label, sentences, min_occurrences, epsilon,
        aggregate, use_normalized,
    )
    cands = [r for r in records if r.monotone]
    cands.sort(key=lambda r: (-r.first_last_change, -r.occurrences, r.word))
    return cands[:top_n]


def cumulative_divergence(
    battery: Mapping[str, tuple],
    baseline_label: str,
    sentences: Sequence[str],
    min_occurrences: int = 5,
    top_n: int = 50,
    aggregate: str = "mean",
    use_normalized: bool = True,
) -> list[TrajectoryRecord]:
    """Words ranked by accumulated positive delta against the baseline.

    Catches words that got easier without being strictly monotone.
    Ties break by occurrence count (more first), then alphabetically.
    """
    records = _word_records(
        battery, baseline_label, sentences, min_occurrences, 0.0,
        aggregate, use_normalized,
    )
    records.sort(key=lambda r: (-r.cumulative, -r.occurrences, r.word))
    return records[:top_n]


def occurrence_trajectories(
    battery: Mapping[str, tuple],
    word: str,
    sentences: Sequence[str],
    context_chars: int = 40,
    use_normalized: bool = True,
) -> OccurrenceTable:
    """Per-occurrence score table for one word, for manual inspection.

    The sense label column is intentionally empty: annotating which
    sense each occurrence carries is the human step.  A word with no
    occurrences yields an empty table with a note, not an error.
    """
    target = word.lower()
    occ = _collect(battery, sentences, use_normalized)
    entries = occ.get(target, [])
    rows = []
    for si, pos, values in entries:
        sentence = sentences[si]
        lo = max(0, pos - context_chars)
        hi = min(len(sentence), pos + len(target) + context_chars)
        rows.append(
            OccurrenceRow(
                sentence_index=si,
                position=pos,
                context=sentence[lo:hi],
                values=dict(values),
            )
        )
    note = "" if rows else f"word {word!r} does not occur in the sample"
    return OccurrenceTable(word=target, rows=rows, note=note)
