"""Decoder-only transformer and sequence scoring.

Pre-norm RMSNorm blocks, rotary position embeddings, grouped-query
attention, SwiGLU feed-forward, no biases, untied output head.  All
scoring paths (NLL, perplexity, surprisal) upcast logits to float64
before the softmax so analytic reference values can be matched to tight
tolerances.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Callable, Mapping, Sequence

import torch
import torch.nn.functional as F
from torch import nn


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    n_kv_heads: int
    d_model: int
    d_ff: int
    vocab_size: int
    context_length: int = 512
    rope_theta: float = 10000.0
    norm_eps: float = 1e-5
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "n_kv_heads", "d_model", "d_ff",
                     "vocab_size", "context_length"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ModelError("d_model must be divisible by n_heads")
        if self.n_heads % self.n_kv_heads != 0:
            raise ModelError("n_heads must be divisible by n_kv_heads")
        if self.context_length < 2:
            raise ModelError("context_length must be at least 2")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count for a model built from ``config``."""
    d, ff, v = config.d_model, config.d_ff, config.vocab_size
    kv_dim = config.head_dim * config.n_kv_heads
    per_layer = d * d + 2 * d * kv_dim + d * d + 3 * d * ff + 2 * d
    return v * d + config.n_layers * per_layer + d + v * d


def _rope_tables(config: ModelConfig) -> tuple[torch.Tensor, torch.Tensor]:
    hd = config.head_dim
    inv = 1.0 / (config.rope_theta ** (torch.arange(0, hd, 2, dtype=torch.float32) / hd))
    t = torch.arange(config.context_length, dtype=torch.float32)
    freqs = torch.outer(t, inv)
    return freqs.cos(), freqs.sin()


def _apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    # x: [B, H, L, D]; cos/sin: [L, D/2] (rotate-half convention)
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    cos = cos[: x.shape[2]].unsqueeze(0).unsqueeze(0)
    sin = sin[: x.shape[2]].unsqueeze(0).unsqueeze(0)
    return torch.cat([x1 * cos - x2 * sin, x2 * cos + x1 * sin], dim=-1)


class _Attention(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        d, hd = config.d_model, config.head_dim
        self.n_heads = config.n_heads
        self.n_kv_heads = config.n_kv_heads
        self.head_dim = hd
        self.wq = nn.Linear(d, config.n_heads * hd, bias=False)
        self.wk = nn.Linear(d, config.n_kv_heads * hd, bias=False)
        self.wv = nn.Linear(d, config.n_kv_heads * hd, bias=False)
        self.wo = nn.Linear(config.n_heads * hd, d, bias=False)

    def forward(self, x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
        b, l, _ = x.shape
        q = self.wq(x).view(b, l, self.n_heads, self.head_dim).transpose(1, 2)
        k = self.wk(x).view(b, l, self.n_kv_heads, self.head_dim).transpose(1, 2)
        v = self.wv(x).view(b, l, self.n_kv_heads, self.head_dim).transpose(1, 2)
        q = _apply_rope(q, cos, sin)
        k = _apply_rope(k, cos, sin)
        groups = self.n_heads // self.n_kv_heads
        if groups > 1:
            k = k.repeat_interleave(groups, dim=1)
            v = v.repeat_interleave(groups, dim=1)
        y = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        return self.wo(y.transpose(1, 2).reshape(b, l, -1))


class _SwiGLU(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.w_gate = nn.Linear(config.d_model, config.d_ff, bias=False)
        self.w_up = nn.Linear(config.d_model, config.d_ff, bias=False)
        self.w_down = nn.Linear(config.d_ff, config.d_model, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.w_down(F.silu(self.w_gate(x)) * self.w_up(x))


class _Block(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.attn_norm = nn.RMSNorm(config.d_model, eps=config.norm_eps)
        self.attn = _Attention(config)
        self.mlp_norm = nn.RMSNorm(config.d_model, eps=config.norm_eps)
        self.mlp = _SwiGLU(config)

    def forward(self, x, cos, sin):
        x = x + self.attn(self.attn_norm(x), cos, sin)
        return x + self.mlp(self.mlp_norm(x))


class CausalLM(nn.Module):
    """Language model mapping token ids [B, L] to logits [B, L, V]."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.embed = nn.Embedding(config.vocab_size, config.d_model)
        self.blocks = nn.ModuleList(_Block(config) for _ in range(config.n_layers))
        self.final_norm = nn.RMSNorm(config.d_model, eps=config.norm_eps)
        self.lm_head = nn.Linear(config.d_model, config.vocab_size, bias=False)
        cos, sin = _rope_tables(config)
        self.register_buffer("rope_cos", cos, persistent=False)
        self.register_buffer("rope_sin", sin, persistent=False)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.dim() != 2:
            raise ModelError(f"expected [batch, length] ids, got shape {tuple(ids.shape)}")
        if ids.shape[1] > self.config.context_length:
            raise ModelError(
                f"sequence length {ids.shape[1]} exceeds context {self.config.context_length}"
            )
        x = self.embed(ids)
        for block in self.blocks:
            x = block(x, self.rope_cos, self.rope_sin)
        return self.lm_head(self.final_norm(x))


def init_model(config: ModelConfig) -> CausalLM:
    """Build a model with seeded normal(0, init_std) weights.

    Norm gains stay at one.  The same config always yields bitwise
    identical parameters.
    """
    model = CausalLM(config)
    gen = torch.Generator().manual_seed(config.seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if p.dim() >= 2:
                p.normal_(0.0, config.init_std, generator=gen)
            else:
                p.fill_(1.0)  # RMSNorm gains
    model.eval()
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# -- scoring -----------------------------------------------------------------


def _model_vocab(model) -> int:
    return model.config.vocab_size


def _logits(model, ids_batch: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return model(ids_batch)


def nll(model, ids: Sequence[int]) -> list[float]:
    """Per-position negative log likelihood of ``ids`` under the model.

    Position 0 conditions only; the returned list has len(ids) - 1
    entries, float64 precision.
    """
    if len(ids) < 2:
        raise ModelError("need at least two tokens to score")
    t = torch.tensor([list(ids)], dtype=torch.long)
    logits = _logits(model, t).double()
    logprobs = F.log_softmax(logits[0, :-1], dim=-1)
    targets = t[0, 1:]
    return (-logprobs.gather(1, targets.unsqueeze(1)).squeeze(1)).tolist()


def _window_nll_sum(model, stream: list[int], no_score: set[int], window: int,
                    stride: int) -> tuple[float, int]:
    """Sliding-window NLL over a token stream.

    Windows advance by ``stride``; only the final ``stride`` targets of
    each window are scored (all targets in the first window), so every
    position is scored exactly once with the longest available context.
    Positions in ``no_score`` (e.g. BOS) are never scored as targets.
    """
    total = 0.0
    count = 0
    n = len(stream)
    batch: list[tuple[list[int], int, int]] = []

    def flush():
        nonlocal total, count
        if not batch:
            return
        width = max(len(ids) for ids, _, _ in batch)
        t = torch.full((len(batch), width), 0, dtype=torch.long)
        for r, (ids, _, _) in enumerate(batch):
            t[r, : len(ids)] = torch.tensor(ids, dtype=torch.long)
        logits = _logits(model, t).double()
        for r, (ids, first_target, begin) in enumerate(batch):
            length = len(ids)
            lp = F.log_softmax(logits[r, : length - 1], dim=-1)
            tgt = torch.tensor(ids[first_target:], dtype=torch.long)
            vals = -lp[first_target - 1 :].gather(1, tgt.unsqueeze(1)).squeeze(1)
            skip = [j for j, pos in enumerate(range(first_target, length))
                    if begin + pos in no_score]
            total += vals.sum().item() - (vals[skip].sum().item() if skip else 0.0)
            count += len(vals) - len(skip)
        batch.clear()

    begin = 0
    prev_end = 1  # stream position after the last scored target so far
    while prev_end < n:
        end = min(begin + window, n)
        ids = stream[begin:end]
        first_target = prev_end - begin
        batch.append((ids, first_target, begin))
        if len(batch) >= 8:
            flush()
        prev_end = end
        if end == n:
            break
        begin += stride
    flush()
    return total, count


def perplexity(model, tokenizer, texts: Sequence[str], stride: int | None = None) -> float:
    """Corpus perplexity: exp of the mean token NLL.

    Texts are concatenated as BOS + ids + EOS each; windows of the
    model's context length slide by ``stride`` (default half a window)
    so tokens beyond the first window keep long contexts.  BOS is never
    scored as a target; EOS is.
    """
    window = model.config.context_length
    if stride is None:
        stride = max(1, window // 2)
    # stride == window would leave each later window's first position
    # without a preceding logit, silently dropping it from the average.
    if not 1 <= stride < window:
        raise ModelError(f"stride {stride} must be in [1, {window - 1}]")
    stream: list[int] = []
    no_score: set[int] = set()
    for text in texts:
        no_score.add(len(stream))
        stream.append(tokenizer.bos_id)
        stream.extend(tokenizer.encode(text))
        stream.append(tokenizer.eos_id)
    scorable = len(stream) - 1 - sum(1 for p in no_score if 0 < p < len(stream))
    if len(stream) < 2 or scorable <= 0:
        raise ModelError("nothing to score: corpus is empty after tokenization")
    total, count = _window_nll_sum(model, stream, no_score, window, stride)
    return math.exp(total / count)


@dataclass
class WordSurprisal:
    word: str
    start: int  # character offset
    end: int
    value: float
    n_tokens: int


def per_word_surprisal(model, tokenizer, sentence: str) -> list[WordSurprisal]:
    """Mean subword NLL for each word of ``sentence``.

    The sentence is scored once as BOS + ids; each word (standard word
    rule) receives the mean NLL of the tokens overlapping its span.
    """
    from .corpus import extract_word_spans

    ids, spans = tokenizer.encode_with_spans(sentence)
    if not ids:
        raise ModelError("sentence has no tokens")
    values = nll(model, [tokenizer.bos_id] + ids)  # values[i] scores ids[i]

    # Character offset -> byte offset map for span conversion.
    byte_off = [0]
    for ch in sentence:
        byte_off.append(byte_off[-1] + len(ch.encode("utf-8")))

    out = []
    for word, cs, ce in extract_word_spans(sentence):
        bs, be = byte_off[cs], byte_off[ce]
        tok_vals = [values[i] for i, (ts, te) in enumerate(spans) if ts < be and te > bs]
        if not tok_vals:
            continue
        out.append(
            WordSurprisal(
                word=word, start=cs, end=ce,
                value=sum(tok_vals) / len(tok_vals), n_tokens=len(tok_vals),
            )
        )
    return out


@dataclass
class SurprisalProfile:
    """Per-word surprisal rows for one sentence under several models."""

    sentence: str
    words: list[str]
    raw: dict[str, list[float]]
    normalized: dict[str, list[float]] = field(default_factory=dict)

    def __post_init__(self):
        for label, row in self.raw.items():
            if len(row) != len(self.words):
                raise ModelError(f"row {label!r} length {len(row)} != {len(self.words)} words")
        if not self.normalized:
            self.normalized = {k: normalize_row(v) for k, v in self.raw.items()}


def normalize_row(values: Sequence[float]) -> list[float]:
    """Min-max normalize to [0, 1]; a constant row maps to zeros."""
    if not values:
        return []
    lo, hi = min(values), max(values)
    if hi == lo:
        return [0.0] * len(values)
    return [(v - lo) / (hi - lo) for v in values]


def surprisal_profile(models: Mapping[str, tuple], sentence: str) -> SurprisalProfile:
    """Profile one sentence under a battery of (model, tokenizer) pairs."""
    words: list[str] | None = None
    raw: dict[str, list[float]] = {}
    for label, (model, tokenizer) in models.items():
        scores = per_word_surprisal(model, tokenizer, sentence)
        ws = [s.word for s in scores]
        if words is None:
            words = ws
        elif ws != words:
            raise ModelError(f"word segmentation disagrees between models for {sentence!r}")
        raw[label] = [s.value for s in scores]
    if words is None:
        raise ModelError("no models given")
    return SurprisalProfile(sentence=sentence, words=words, raw=raw)
