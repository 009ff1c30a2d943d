"""Benchmark the compiled BPE kernels against the pure-Python fallback.

Trains a tokenizer and encodes a synthetic corpus under both kernel
implementations, checks they produce identical merges and token
streams, and reports wall times.

Run from the repository root:

    python3 benchmarks/bench_bpe.py --sentences 4000 --vocab-size 600
"""
from __future__ import annotations

import argparse
import random
import string
import time

from chronolm.synthetic import SyntheticSpec, generate
from chronolm.tokenizer import bpe
from chronolm.tokenizer import _kernels_py

try:
    from chronolm.tokenizer import _kernels_fast
except ImportError:
    _kernels_fast = None


def open_vocab_corpus(n_sentences: int, seed: int) -> list[str]:
    """Zipf-weighted sentences over a large random lexicon.

    The package's own synthetic corpus reuses a few hundred forms, so
    the per-word cache absorbs most encoding work there.  Kernel cost
    scales with unique words; this corpus keeps the vocabulary open.
    """
    rng = random.Random(seed)
    lexicon = [
        "".join(rng.choices(string.ascii_lowercase, k=rng.randint(3, 12)))
        for _ in range(30_000)
    ]
    weights = [1.0 / r for r in range(1, len(lexicon) + 1)]
    return [
        " ".join(rng.choices(lexicon, weights=weights, k=12)) + "."
        for _ in range(n_sentences)
    ]


def timed(fn, repeat: int) -> tuple[float, object]:
    """Best wall time over ``repeat`` runs and the last result."""
    best, result = float("inf"), None
    for _ in range(repeat):
        t0 = time.perf_counter()
        result = fn()
        best = min(best, time.perf_counter() - t0)
    return best, result


def run_backend(kernels, texts: list[str], vocab_size: int, repeat: int):
    saved = bpe._K
    bpe._K = kernels
    try:
        train_s, tok = timed(lambda: bpe.train_bpe(texts, vocab_size), repeat)

        def encode_all():
            tok._cache.clear()  # cold cache: every unique word hits the kernel
            return [tok.encode(t) for t in texts]

        encode_s, ids = timed(encode_all, repeat)
    finally:
        bpe._K = saved
    return {
        "backend": kernels.backend_name(),
        "train_s": train_s,
        "encode_s": encode_s,
        "merges": tok.merges,
        "ids": ids,
        "n_tokens": sum(len(x) for x in ids),
    }


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--corpus", choices=["open", "synthetic"], default="open",
                    help="open: random lexicon, many unique words; "
                         "synthetic: the package's closed-vocabulary corpus")
    ap.add_argument("--sentences", type=int, default=20_000,
                    help="sentences (per slice for --corpus synthetic)")
    ap.add_argument("--vocab-size", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--repeat", type=int, default=3,
                    help="timed repetitions; best run is reported")
    args = ap.parse_args()

    if args.corpus == "open":
        texts = open_vocab_corpus(args.sentences, args.seed)
    else:
        data = generate(SyntheticSpec(seed=args.seed,
                                      sentences_per_slice=args.sentences))
        texts = [d.text for d in data.documents]
    uniq = len({w for t in texts for w in t.split()})
    n_chars = sum(len(t) for t in texts)
    print(f"corpus: {args.corpus}, {len(texts)} texts, {n_chars} characters, "
          f"{uniq} unique space-split words")
    print(f"vocab_size={args.vocab_size}  repeat={args.repeat}")
    print()

    results = [run_backend(_kernels_py, texts, args.vocab_size, args.repeat)]
    if _kernels_fast is None:
        print("compiled extension not built; benchmarking the fallback only")
    else:
        results.append(run_backend(_kernels_fast, texts,
                                   args.vocab_size, args.repeat))

    if len(results) == 2:
        a, b = results
        if a["merges"] != b["merges"]:
            print("ERROR: backends learned different merges")
            return 1
        if a["ids"] != b["ids"]:
            print("ERROR: backends encoded different token streams")
            return 1
        print("backends agree: identical merges and token streams")
        print()

    header = f"{'backend':<10} {'train (s)':>10} {'encode (s)':>11} {'tokens/s':>12}"
    print(header)
    print("-" * len(header))
    for r in results:
        rate = r["n_tokens"] / r["encode_s"] if r["encode_s"] > 0 else float("inf")
        print(f"{r['backend']:<10} {r['train_s']:>10.3f} "
              f"{r['encode_s']:>11.3f} {rate:>12.0f}")
    if len(results) == 2:
        a, b = results
        print()
        print(f"speedup: train {a['train_s'] / b['train_s']:.1f}x, "
              f"encode {a['encode_s'] / b['encode_s']:.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
