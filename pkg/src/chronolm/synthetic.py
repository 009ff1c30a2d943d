"""Synthetic diachronic corpus with planted answers.

A templated grammar over a small lexicon generates dated documents in
three (or more) era slices.  Three kinds of structure are planted:

* Era vocabulary pools whose mixture weights shift gradually across
  slices, so each slice's language is most like its neighbours.  This
  makes cross-time perplexity grow with temporal distance.

* "Past" pseudo-words: present in every slice, each welded to a unique
  two-word cue ("... kept the silver basket vorand ...").  A model from
  any slice should predict them from their cue; they populate the
  known-sense side of leakage evaluations.

* "Future" pseudo-words: their word form occurs in every slice (in a
  bland base frame, so vocabulary filters keep them), but their cue
  collocation appears only in the final slice.  Early models know the
  word but not the usage; late models predict it from the cue.  These
  populate the unknown-sense side.

The sense inventory and minimal pairs are built from the same lexicon,
so every prefix word passes the in-vocabulary filter in every slice.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import Document
from .evaluation import MinimalPair, SenseRecord

# The lexicon is deliberately wide (a few hundred word types): sentinel
# cloze ranks only mean something when far more than top-k legitimate
# candidate words exist.
FUNCTION_WORDS = ["the", "a", "and", "near", "in", "for", "by", "of", "to",
                  "every", "beside", "from", "with", "at"]
PERSONS = ["merchant", "weaver", "sailor", "farmer", "clerk", "baker",
           "keeper", "carter", "miller", "smith", "porter", "gardener",
           "shepherd", "cooper", "mason", "tailor"]
PLACES = ["village", "town", "harbour", "valley", "square", "lane", "market",
          "bridge", "hamlet", "wharf", "quay", "parish", "county", "district",
          "station", "inn"]
CORE_NOUNS = ["road", "letter", "river", "garden", "winter", "morning",
              "basket", "stone", "house", "field", "lamp", "wall",
              "barn", "gate", "well", "orchard", "meadow", "cellar",
              "chimney", "fence", "pond", "grove", "shed", "tower"]
VERBS = ["kept", "sold", "found", "carried", "watched", "made", "brought",
         "left", "mended", "counted", "cleaned", "painted", "weighed",
         "stored", "moved", "traded"]
ADJECTIVES = ["old", "young", "small", "great", "quiet", "busy", "silver",
              "broken", "eastern", "northern", "western", "southern",
              "narrow", "wide", "bright", "dull"]

ERA_POOLS = [
    ["tapestry", "chalice", "falcon", "dagger", "fresco", "parapet", "moat",
     "drawbridge", "herald", "minstrel", "longbow", "trebuchet", "scroll",
     "abbey", "cloister", "banner", "shield", "helm", "lance", "mead"],
    ["loom", "musket", "parchment", "quill", "hearth", "smithy", "tallow",
     "coach", "scythe", "plough", "lantern", "spindle", "anvil", "bellows",
     "cask", "millstone", "saddle", "harness", "churn", "kiln"],
    ["railway", "telegraph", "factory", "steamer", "gaslight", "omnibus",
     "foundry", "engine", "boiler", "furnace", "piston", "dynamo",
     "viaduct", "turnpike", "gasworks", "locomotive", "carriage",
     "warehouse", "dockyard", "ledger"],
    ["wireless", "motorcar", "cinema", "aeroplane", "telephone",
     "gramophone", "tramway", "turbine", "aerial", "petrol", "garage",
     "studio", "camera", "projector", "typewriter", "elevator", "subway",
     "radio", "antenna", "reel"],
    ["television", "computer", "satellite", "transistor", "rocket", "radar",
     "laser", "plastic", "nylon", "helicopter", "jet", "microphone",
     "circuit", "socket", "dial", "valve", "amplifier", "turntable",
     "freezer", "scooter"],
]

# cue -> planted word; cues are (adjective, noun) pairs unique per word
PAST_PLANTS = {
    ("silver", "basket"): "vorand",
    ("broken", "lamp"): "chelim",
    ("quiet", "stone"): "dresko",
    ("eastern", "letter"): "palver",
}
FUTURE_PLANTS = {
    ("northern", "road"): "setrin",
    ("great", "river"): "galdor",
    ("busy", "garden"): "mivane",
    ("small", "wall"): "korvel",
}

# built only from words the sentence templates emit, so inventory
# examples survive the in-vocabulary filter in every slice
_EXAMPLE_PREAMBLES = [
    "the quiet clerk of the village carried the letter near the market in the morning and",
    "every young baker in the town brought a basket by the harbour beside the bridge and",
]


@dataclass(frozen=True)
class SyntheticSpec:
    seed: int = 0
    n_slices: int = 3
    start_year: int = 1800
    years_per_slice: int = 30
    sentences_per_slice: int = 22000
    sentences_per_doc: int = 45
    cue_rate: float = 0.05  # fraction of sentences drawn from cue templates
    # bland base-frame sentences per planted word, as a fraction of the
    # slice; a fraction (not a count) keeps per-million frequencies inside
    # the cloze band at any corpus size
    base_share: float = 0.0014
    # future words get a smaller base footprint: their form must stay
    # in-vocabulary everywhere, but a high unigram rate would pull them
    # into early models' top completions for the wrong reason
    future_base_share: float = 0.0005
    dominance: float = 0.8  # P(planted word | its cue) where the sense is live

    def __post_init__(self):
        if self.n_slices < 2:
            raise ValueError("need at least 2 slices")
        if self.n_slices + 2 > len(ERA_POOLS):
            raise ValueError(
                f"at most {len(ERA_POOLS) - 2} slices supported: each slice "
                f"needs its own kernel of three era pools"
            )


@dataclass
class SyntheticCorpus:
    spec: SyntheticSpec
    slice_labels: list[str]
    slice_bounds: list[tuple[str, int, int]]  # (label, start, end) closed intervals
    documents: list[Document]
    texts_by_slice: dict[str, list[str]]
    senses: list[SenseRecord]
    pairs: list[MinimalPair]
    form_frequency: dict[str, float] = field(default_factory=dict)  # per million


def _era_weights(slice_idx: int, n_slices: int, n_pools: int) -> np.ndarray:
    """Overlapping pool mixture: neighbouring slices share vocabulary.

    Slice i draws from pools (i, i+1, i+2) with fixed weights
    (0.15, 0.70, 0.15).  The kernel is identical for every slice, so
    slices differ only in WHICH pools they use, never in how mixed they
    are; otherwise edge slices would be intrinsically easier to model
    and the cross-time matrix diagonal would not be comparable.
    Adjacent slices share two pools, distance-2 slices share one, and
    farther slices none, so perplexity grows with temporal distance.
    """
    w = np.zeros(n_pools)
    w[slice_idx] = 0.15
    w[slice_idx + 1] = 0.70
    w[slice_idx + 2] = 0.15
    return w


def _choice(rng: np.random.Generator, seq: Sequence[str]) -> str:
    return seq[int(rng.integers(len(seq)))]


def generate(spec: SyntheticSpec) -> SyntheticCorpus:
    rng = np.random.default_rng(spec.seed)
    n = spec.n_slices
    labels = []
    bounds = []
    for i in range(n):
        start = spec.start_year + i * spec.years_per_slice
        end = start + spec.years_per_slice - 1
        label = f"{start}-{end}"
        labels.append(label)
        bounds.append((label, start, end))

    past_cues = list(PAST_PLANTS.items())
    future_cues = list(FUTURE_PLANTS.items())
    all_cues = past_cues + future_cues
    # Legitimate cue-slot fillers.  A wide set matters: an early model's
    # top completions for a future cue should all be words it actually
    # saw there, pushing the planted word past any reasonable k.
    fillers = CORE_NOUNS + PLACES + [w for pool in ERA_POOLS for w in pool]

    def generic_sentence(era_pool_words: list[str]) -> str:
        t = int(rng.integers(5))
        person = _choice(rng, PERSONS)
        place = _choice(rng, PLACES)
        verb = _choice(rng, VERBS)
        adj = _choice(rng, ADJECTIVES)
        noun = _choice(rng, CORE_NOUNS)
        era = _choice(rng, era_pool_words)
        if t == 0:
            return f"the {adj} {person} {verb} the {era} near the {place}."
        if t == 1:
            return f"a {person} in the {place} {verb} a {era} for the {_choice(rng, PERSONS)}."
        if t == 2:
            return f"the {era} stood beside the {noun} in the {adj} {place}."
        if t == 3:
            return f"every {person} watched the {era} and {verb} the {noun} with care."
        return f"the {person} of the {place} {verb} the {noun} by the {era} at {_choice(rng, ['dawn', 'dusk', 'noon'])}."

    def cue_sentence(slice_idx: int) -> str:
        (c1, c2), word = all_cues[int(rng.integers(len(all_cues)))]
        is_future = (c1, c2) in FUTURE_PLANTS
        live = (not is_future) or slice_idx == n - 1
        if live and rng.random() < spec.dominance:
            target = word
        else:
            target = _choice(rng, fillers)
        person = _choice(rng, PERSONS)
        verb = _choice(rng, VERBS)
        place = _choice(rng, PLACES)
        return f"the {person} {verb} the {c1} {c2} {target} at the {place}."

    def base_sentence(word: str) -> str:
        return f"the {word} lay beside the {_choice(rng, CORE_NOUNS)} in the {_choice(rng, PLACES)}."

    documents: list[Document] = []
    texts_by_slice: dict[str, list[str]] = {lab: [] for lab in labels}
    form_counts: dict[str, int] = {w: 0 for w in
                                   list(PAST_PLANTS.values()) + list(FUTURE_PLANTS.values())}
    total_ws_tokens = 0

    # the floor keeps enough occurrences that an ~80% train split still
    # holds at least two of each planted form (the in-vocabulary rule)
    past_quota = max(8, round(spec.base_share * spec.sentences_per_slice))
    future_quota = max(8, round(spec.future_base_share * spec.sentences_per_slice))
    quotas = [(w, past_quota) for w in PAST_PLANTS.values()] + [
        (w, future_quota) for w in FUTURE_PLANTS.values()
    ]
    for si, label in enumerate(labels):
        pools = _era_weights(si, n, len(ERA_POOLS))
        start, end = bounds[si][1], bounds[si][2]
        sentences: list[str] = []
        # base frames first so every planted word form exists in every slice
        for word, quota in quotas:
            for _ in range(quota):
                sentences.append(base_sentence(word))
        while len(sentences) < spec.sentences_per_slice:
            r = rng.random()
            if r < spec.cue_rate:
                sentences.append(cue_sentence(si))
            else:
                pool = ERA_POOLS[int(rng.choice(len(ERA_POOLS), p=pools))]
                sentences.append(generic_sentence(pool))
        order = rng.permutation(len(sentences))
        sentences = [sentences[i] for i in order]

        for w in form_counts:
            form_counts[w] += sum(s.count(f" {w}") + s.startswith(f"{w} ") for s in sentences)
        total_ws_tokens += sum(len(s.split()) for s in sentences)

        for d0 in range(0, len(sentences), spec.sentences_per_doc):
            chunk = sentences[d0 : d0 + spec.sentences_per_doc]
            year = int(rng.integers(start, end + 1))
            doc = Document(
                id=f"s{si}-d{d0 // spec.sentences_per_doc:04d}",
                year=year,
                text=" ".join(chunk),
            )
            documents.append(doc)
            texts_by_slice[label].append(doc.text)

    per_slice_tokens = total_ws_tokens / n
    form_frequency = {
        w: (c / n) / per_slice_tokens * 1e6 for w, c in form_counts.items()
    }

    senses = _build_senses(spec, bounds, form_frequency)
    pairs = _build_pairs(spec, rng)
    return SyntheticCorpus(
        spec=spec,
        slice_labels=labels,
        slice_bounds=bounds,
        documents=documents,
        texts_by_slice=texts_by_slice,
        senses=senses,
        pairs=pairs,
        form_frequency=form_frequency,
    )


def _build_senses(
    spec: SyntheticSpec,
    bounds: list[tuple[str, int, int]],
    form_frequency: dict[str, float],
) -> list[SenseRecord]:
    first_start, first_end = bounds[0][1], bounds[0][2]
    last_start, last_end = bounds[-1][1], bounds[-1][2]
    senses = []
    for (c1, c2), word in PAST_PLANTS.items():
        year = (first_start + first_end) // 2
        examples = tuple(
            f"{pre} kept the {c1} {c2} {word}." for pre in _EXAMPLE_PREAMBLES
        )
        senses.append(
            SenseRecord(
                word=word,
                sense_id=f"past-{word}",
                year=year,
                examples=examples,
                frequency_per_million=round(form_frequency.get(word, 100.0), 3),
                definition=f"the {c1} {c2} kind",
            )
        )
    for (c1, c2), word in FUTURE_PLANTS.items():
        year = (last_start + last_end) // 2
        examples = tuple(
            f"{pre} kept the {c1} {c2} {word}." for pre in _EXAMPLE_PREAMBLES
        )
        senses.append(
            SenseRecord(
                word=word,
                sense_id=f"future-{word}",
                year=year,
                examples=examples,
                frequency_per_million=round(form_frequency.get(word, 100.0), 3),
                definition=f"the {c1} {c2} kind",
            )
        )
    return senses


def _build_pairs(spec: SyntheticSpec, rng: np.random.Generator) -> list[MinimalPair]:
    pairs = []
    for i in range(40):
        person = _choice(rng, PERSONS)
        verb = _choice(rng, VERBS)
        noun = _choice(rng, CORE_NOUNS)
        place = _choice(rng, PLACES)
        adj = _choice(rng, ADJECTIVES)
        good = f"the {adj} {person} {verb} the {noun} near the {place}."
        if i % 2 == 0:
            words = good[:-1].split()
            words[-1], words[-2] = words[-2], words[-1]
            bad = " ".join(words) + "."
            subtask = "order"
        else:
            bad = good.replace("the ", "the the ", 1)
            subtask = "repetition"
        pairs.append(MinimalPair(id=f"pair-{i:03d}", good=good, bad=bad, subtask=subtask))
    return pairs
