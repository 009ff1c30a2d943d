from .bpe import (
    BOS_ID,
    EOS_ID,
    UNK_ID,
    MARKER_ID,
    N_RESERVED,
    BpeTokenizer,
    TokenizerError,
    kernel_backend,
    pre_tokenize,
    train_bpe,
)

__all__ = [
    "BOS_ID",
    "EOS_ID",
    "UNK_ID",
    "MARKER_ID",
    "N_RESERVED",
    "BpeTokenizer",
    "TokenizerError",
    "kernel_backend",
    "pre_tokenize",
    "train_bpe",
]
