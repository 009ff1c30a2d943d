"""Constrained decoding of single-word completions.

A completion is a token path that starts with a word-initiating token
and then continues with word-internal tokens until it terminates.  At
every step past the first, the probability mass of all word-initiating
tokens plus EOS is folded into a single "terminate" event: the word is
over, whatever would have started next.  A completion's score is the
raw sum of token log probabilities including the terminate event; no
length penalty or normalization.

Two implementations share scoring and final ranking: a beam search and
an exhaustive enumeration used as its oracle.  Paths never share
probability mass (every non-terminal continuation excludes the
terminate event), so the scores of all completions sum to at most one.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

_WORD_ONLY_RE = re.compile(r"[^\W\d_]+(?:'[^\W\d_]+)*\Z")


class DecodingError(ValueError):
    pass


class BruteForceBudgetExceeded(DecodingError):
    def __init__(self, estimate: int, budget: int):
        super().__init__(
            f"exhaustive enumeration needs about {estimate} forward rows, "
            f"budget is {budget}; shrink max_word_tokens or raise node_budget"
        )
        self.estimate = estimate
        self.budget = budget


@dataclass
class Completion:
    word: str
    score: float  # log probability, terminate event included
    rank: int
    tokens: tuple[int, ...]


@dataclass
class DecodingResult:
    completions: list[Completion]
    exhausted: bool  # fewer than k distinct words were reachable
    prefix: str

    def words(self) -> list[str]:
        return [c.word for c in self.completions]


class _Tables:
    """Per-tokenizer masks for the constrained decoder."""

    def __init__(self, tokenizer):
        v = tokenizer.vocab_size
        specials = {tokenizer.bos_id, tokenizer.eos_id, tokenizer.unk_id}
        word_init = [tokenizer.is_word_initiating(i) for i in range(v)]

        self.first_any = [word_init[i] and i not in specials for i in range(v)]
        # words-only mode: a bare boundary marker (word continues in later
        # tokens) or a marker-led piece whose first own byte is a letter.
        self.first_words = list(self.first_any)
        for i in range(v):
            if not self.first_words[i]:
                continue
            surf = tokenizer.token_surface(i)
            self.first_words[i] = surf == b" " or (
                len(surf) >= 2 and surf[0] == 0x20 and _is_letter(surf[1])
            )

        term = [i for i in range(v) if word_init[i] or i == tokenizer.eos_id]
        cont = [
            i for i in range(v)
            if not word_init[i] and i not in specials
        ]
        self.terminate_ids = torch.tensor(term, dtype=torch.long)
        self.continuation_ids = torch.tensor(cont, dtype=torch.long)

    def first_ids(self, words_only: bool) -> list[int]:
        mask = self.first_words if words_only else self.first_any
        return [i for i, ok in enumerate(mask) if ok]


def _is_letter(b: int) -> bool:
    return (0x41 <= b <= 0x5A) or (0x61 <= b <= 0x7A) or b >= 0x80


_tables_cache: dict[int, _Tables] = {}


def _tables(tokenizer) -> _Tables:
    key = id(tokenizer)
    t = _tables_cache.get(key)
    if t is None or len(t.first_any) != tokenizer.vocab_size:
        t = _Tables(tokenizer)
        _tables_cache[key] = t
    return t


def _prepare_prefix(tokenizer, prefix: str) -> list[int]:
    # One trailing space belongs to the upcoming word: completions carry
    # their own boundary marker.
    if prefix.endswith(" "):
        prefix = prefix[:-1]
    return [tokenizer.bos_id] + tokenizer.encode(prefix)


def _logprob_rows(model, rows: list[list[int]], batch_size: int = 64) -> torch.Tensor:
    """Next-token log probabilities (float64) after each row."""
    out = []
    with torch.no_grad():
        for i in range(0, len(rows), batch_size):
            chunk = rows[i : i + batch_size]
            t = torch.tensor(chunk, dtype=torch.long)
            logits = model(t)[:, -1, :].double()
            out.append(F.log_softmax(logits, dim=-1))
    return torch.cat(out, dim=0)


def _effective_depth(model, prefix_len: int, max_word_tokens: int) -> int:
    room = model.config.context_length - prefix_len
    if room < 1:
        raise DecodingError(
            f"prefix of {prefix_len} tokens leaves no room in context "
            f"{model.config.context_length}"
        )
    return min(max_word_tokens, room)


def _surface_word(tokenizer, tokens: Sequence[int]) -> str:
    text = tokenizer.decode(tokens)
    if text.startswith(" "):
        text = text[1:]
    return text


def _finalize(
    raw: list[tuple[float, tuple[int, ...]]],
    tokenizer,
    k: int | None,
    words_only: bool,
) -> list[Completion]:
    """Shared ranking: validity filter, case-insensitive dedup, sort, rank."""
    raw = sorted(raw, key=lambda sc: (-sc[0], sc[1]))
    best: dict[str, tuple[float, tuple[int, ...], str]] = {}
    for score, toks in raw:
        word = _surface_word(tokenizer, toks)
        if not word or any(ch.isspace() for ch in word):
            continue
        if words_only and not _WORD_ONLY_RE.match(word.casefold()):
            continue
        key = word.casefold()
        if key not in best:  # raw is sorted, first hit is the best
            best[key] = (score, toks, word)
    ordered = sorted(best.values(), key=lambda e: (-e[0], e[1]))
    if k is not None:
        ordered = ordered[:k]
    return [
        Completion(word=w, score=s, rank=r, tokens=t)
        for r, (s, t, w) in enumerate(ordered)
    ]


def top_k_single_words(
    model,
    tokenizer,
    prefix: str,
    k: int,
    beam_width: int | None = None,
    max_word_tokens: int = 8,
    words_only: bool = True,
) -> DecodingResult:
    """Beam search for the k most probable next words after ``prefix``.

    ``beam_width`` defaults to 4k.  With ``words_only`` the first token
    must open an alphabetic word; otherwise any word-initiating token is
    admissible.  Distinct words that differ only by case collapse to the
    best-scoring variant.
    """
    if k < 1:
        raise DecodingError("k must be positive")
    if beam_width is None:
        beam_width = 4 * k
    if beam_width < 1:
        raise DecodingError("beam_width must be positive")

    tables = _tables(tokenizer)
    prefix_ids = _prepare_prefix(tokenizer, prefix)
    depth_cap = _effective_depth(model, len(prefix_ids), max_word_tokens)

    first = tables.first_ids(words_only)
    lp0 = _logprob_rows(model, [prefix_ids])[0]
    live: list[tuple[float, tuple[int, ...]]] = sorted(
        ((lp0[i].item(), (i,)) for i in first), key=lambda sc: (-sc[0], sc[1])
    )[:beam_width]

    term_ids = tables.terminate_ids
    cont_ids = tables.continuation_ids
    completed: list[tuple[float, tuple[int, ...]]] = []
    completed_words: dict[str, float] = {}

    while live:
        rows = [prefix_ids + list(toks) for _, toks in live]
        lps = _logprob_rows(model, rows)
        term_lp = torch.logsumexp(lps[:, term_ids], dim=1)

        extensions: list[tuple[float, tuple[int, ...]]] = []
        for r, (score, toks) in enumerate(live):
            total = score + term_lp[r].item()
            completed.append((total, toks))
            word = _surface_word(tokenizer, toks).casefold()
            if word and (words_only is False or _WORD_ONLY_RE.match(word)):
                if completed_words.get(word, -math.inf) < total:
                    completed_words[word] = total
            if len(toks) < depth_cap:
                row = lps[r]
                for c in cont_ids.tolist():
                    extensions.append((score + row[c].item(), toks + (c,)))
        extensions.sort(key=lambda sc: (-sc[0], sc[1]))
        live = extensions[:beam_width]

        if live and len(completed_words) >= k:
            kth = sorted(completed_words.values(), reverse=True)[k - 1]
            # Scores only decrease along a path, so a live hypothesis
            # whose score is already below the k-th completed word can
            # never displace it.
            if live[0][0] < kth:
                break

    completions = _finalize(completed, tokenizer, k, words_only)
    return DecodingResult(
        completions=completions, exhausted=len(completions) < k, prefix=prefix
    )


def brute_force_single_words(
    model,
    tokenizer,
    prefix: str,
    k: int | None,
    max_word_tokens: int = 8,
    words_only: bool = True,
    node_budget: int = 200_000,
    return_all: bool = False,
) -> DecodingResult:
    """Exact enumeration of every single-word completion.

    The oracle for :func:`top_k_single_words`: identical scoring, no
    pruning.  Refuses upfront (with an estimate) when the enumeration
    would exceed ``node_budget`` forward rows.  With ``return_all`` the
    result keeps every terminated path, undeduplicated and unfiltered,
    so probability-mass identities can be checked directly.
    """
    tables = _tables(tokenizer)
    prefix_ids = _prepare_prefix(tokenizer, prefix)
    depth_cap = _effective_depth(model, len(prefix_ids), max_word_tokens)

    first = tables.first_ids(words_only)
    n_cont = int(tables.continuation_ids.shape[0])
    estimate, level_size = 1, len(first)
    for _ in range(depth_cap):
        estimate += level_size
        level_size *= max(n_cont, 1)
        if estimate > node_budget:
            raise BruteForceBudgetExceeded(estimate, node_budget)

    term_ids = tables.terminate_ids
    cont_list = tables.continuation_ids.tolist()
    lp0 = _logprob_rows(model, [prefix_ids])[0]
    level: list[tuple[float, tuple[int, ...]]] = [(lp0[i].item(), (i,)) for i in first]

    completed: list[tuple[float, tuple[int, ...]]] = []
    while level:
        rows = [prefix_ids + list(toks) for _, toks in level]
        lps = _logprob_rows(model, rows)
        term_lp = torch.logsumexp(lps[:, term_ids], dim=1)
        nxt: list[tuple[float, tuple[int, ...]]] = []
        for r, (score, toks) in enumerate(level):
            completed.append((score + term_lp[r].item(), toks))
            if len(toks) < depth_cap:
                row = lps[r]
                for c in cont_list:
                    nxt.append((score + row[c].item(), toks + (c,)))
        level = nxt

    if return_all:
        ordered = sorted(completed, key=lambda sc: (-sc[0], sc[1]))
        comps = [
            Completion(word=_surface_word(tokenizer, t), score=s, rank=r, tokens=t)
            for r, (s, t) in enumerate(ordered)
        ]
        return DecodingResult(completions=comps, exhausted=True, prefix=prefix)

    completions = _finalize(completed, tokenizer, k, words_only)
    exhausted = k is not None and len(completions) < k
    return DecodingResult(completions=completions, exhausted=exhausted, prefix=prefix)
