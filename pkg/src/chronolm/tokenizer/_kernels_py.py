"""Pure-Python BPE kernels.

Fallback for the compiled extension in ``_kernels_fast.pyx``.  The two
modules must stay behaviourally identical; the test suite runs both
against each other.  Words are tuples of symbol ids throughout.
"""
from __future__ import annotations

# Symbol ids fit comfortably below 2**21, so a pair packs into one int.
PACK_SHIFT = 21


def backend_name() -> str:
    return "python"


def count_pairs(words, freqs):
    """Count adjacent symbol pairs over a weighted word list.

    Returns (counts, index) where counts maps pair -> total frequency and
    index maps pair -> set of word indices containing it.
    """
    counts = {}
    index = {}
    for wid, word in enumerate(words):
        f = freqs[wid]
        for i in range(len(word) - 1):
            p = (word[i], word[i + 1])
            c = counts.get(p)
            counts[p] = f if c is None else c + f
            s = index.get(p)
            if s is None:
                index[p] = s = set()
            s.add(wid)
    return counts, index


def merge_word(word, a, b, new_id):
    """Replace every (a, b) occurrence in ``word`` left to right.

    Returns (new_word, delta, present): delta maps pair -> net change in
    occurrence count within this word, present is the set of pairs in the
    merged word.  Overlapping occurrences resolve leftmost-first.
    """
    n = len(word)
    out = []
    i = 0
    while i < n:
        if i < n - 1 and word[i] == a and word[i + 1] == b:
            out.append(new_id)
            i += 2
        else:
            out.append(word[i])
            i += 1
    new_word = tuple(out)
    delta = {}
    for i in range(n - 1):
        p = (word[i], word[i + 1])
        delta[p] = delta.get(p, 0) - 1
    present = set()
    for i in range(len(new_word) - 1):
        p = (new_word[i], new_word[i + 1])
        delta[p] = delta.get(p, 0) + 1
        present.add(p)
    delta = {p: d for p, d in delta.items() if d != 0}
    return new_word, delta, present


def encode_word(word, ranks, first_merge_id):
    """Apply learned merges to one pre-token, lowest rank first.

    ``ranks`` maps packed pairs ((a << PACK_SHIFT) | b) to merge rank; the
    merge with rank r produces symbol first_merge_id + r.  Equal-rank
    never happens (ranks are unique); the leftmost occurrence of the best
    pair is merged each round.
    """
    sym = list(word)
    while len(sym) > 1:
        best_rank = -1
        best_i = -1
        for i in range(len(sym) - 1):
            r = ranks.get((sym[i] << PACK_SHIFT) | sym[i + 1])
            if r is not None and (best_rank < 0 or r < best_rank):
                best_rank = r
                best_i = i
        if best_i < 0:
            break
        sym[best_i : best_i + 2] = [first_merge_id + best_rank]
    return tuple(sym)
