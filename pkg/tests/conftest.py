"""Shared toy fixtures.

The decoding and scoring APIs only need a tokenizer-shaped object and a
model-shaped object, so most tests run against tiny hand-built stand-ins
whose behaviour can be derived by hand.  The trained toy model is the
one expensive fixture and is shared across the session.
"""
from __future__ import annotations

import random
from types import SimpleNamespace

import pytest
import torch

from chronolm.model import ModelConfig
from chronolm.training import TrainConfig, train_teacher


class ToyTokenizer:
    """Character-level tokenizer exposing the decoding protocol.

    Each letter gets two ids: a marker-led form that opens a word and a
    bare continuation form.  Punctuation gets marker-led forms only, so
    it can terminate a word but never extend one.  Small enough (20 ids)
    that exhaustive enumeration over completions stays cheap.
    """

    def __init__(self, letters: str = "abcdefgh", puncts: str = "."):
        self.bos_id, self.eos_id, self.unk_id = 0, 1, 2
        surfaces: dict[int, bytes] = {0: b"", 1: b"", 2: b""}
        initiating = {0: False, 1: False, 2: False}
        self._first: dict[str, int] = {}
        self._cont: dict[str, int] = {}
        nid = 3
        for ch in letters:
            surfaces[nid] = b" " + ch.encode("ascii")
            initiating[nid] = True
            self._first[ch] = nid
            nid += 1
            surfaces[nid] = ch.encode("ascii")
            initiating[nid] = False
            self._cont[ch] = nid
            nid += 1
        for ch in puncts:
            surfaces[nid] = b" " + ch.encode("ascii")
            initiating[nid] = True
            self._first[ch] = nid
            nid += 1
        self.vocab_size = nid
        self._surfaces = surfaces
        self._initiating = initiating

    def encode(self, text: str) -> list[int]:
        ids = []
        for word in text.split():
            for pos, ch in enumerate(word):
                table = self._first if pos == 0 else self._cont
                ids.append(table.get(ch, self.unk_id))
        return ids

    def decode(self, ids) -> str:
        return b"".join(self._surfaces[int(i)] for i in ids).decode("ascii")

    def token_surface(self, token_id: int) -> bytes:
        return self._surfaces[token_id]

    def is_word_initiating(self, token_id: int) -> bool:
        return self._initiating[token_id]


class TableModel(torch.nn.Module):
    """Model whose next-token logits depend only on the previous token.

    ``logits_table`` is [V, V]: row i is the logit vector emitted after
    token i, at every position.  Analytic scores follow directly from
    the table, which makes this the oracle for the scoring paths.
    """

    def __init__(self, logits_table, context_length: int = 16):
        super().__init__()
        t = torch.as_tensor(logits_table, dtype=torch.float32)
        assert t.dim() == 2 and t.shape[0] == t.shape[1]
        self.table = torch.nn.Parameter(t, requires_grad=False)
        self.config = SimpleNamespace(
            vocab_size=t.shape[1], context_length=context_length
        )

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return self.table[ids]


TOY_WORDS = ["ab", "ba", "cab", "dag", "be", "fa", "gad", "ha", "ce", "fe", "ad", "ga"]
TOY_WEIGHTS = [9, 8, 7, 6, 6, 5, 4, 4, 3, 3, 2, 2]


def toy_sentences(n: int, seed: int) -> list[str]:
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        k = rng.randint(3, 7)
        out.append(" ".join(rng.choices(TOY_WORDS, weights=TOY_WEIGHTS, k=k)) + " .")
    return out


@pytest.fixture(scope="session")
def toy_tokenizer() -> ToyTokenizer:
    return ToyTokenizer()


@pytest.fixture(scope="session")
def toy_model(toy_tokenizer):
    """A small trained model over the toy vocabulary (not random logits:
    beam pruning behaviour only gets exercised on a peaked distribution)."""
    texts = toy_sentences(300, seed=5)
    docs = [toy_tokenizer.encode(t) for t in texts]
    config = ModelConfig(
        n_layers=2, n_heads=2, n_kv_heads=1, d_model=32, d_ff=64,
        vocab_size=toy_tokenizer.vocab_size, context_length=32, seed=7,
    )
    train = TrainConfig(
        learning_rate=1e-2, epochs=3, batch_size=16, weight_decay=0.0, seed=7,
    )
    ckpt, _ = train_teacher(
        config, train, docs[:270], docs[270:],
        toy_tokenizer.bos_id, toy_tokenizer.eos_id,
    )
    return ckpt.to_model()
