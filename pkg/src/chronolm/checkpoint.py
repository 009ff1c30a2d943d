"""Self-contained model checkpoint container.

Layout (all integers little-endian):

    bytes 0..7    magic b"CLMCKPT1"
    bytes 8..15   uint64 header length H
    bytes 16..16+H-1   JSON header, UTF-8, sorted keys:
        {"config": {...model config...},
         "meta": {...free-form...},
         "tokenizer_hash": str | null,
         "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    remainder     raw tensor data; offsets are relative to the end of the
                  header, tensors stored contiguous, C order, little-endian

Loading rebuilds the model from the embedded config, so a checkpoint
round-trips to bitwise identical weights and logits.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .model import CausalLM, ModelConfig, init_model

MAGIC = b"CLMCKPT1"

_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


class CheckpointError(ValueError):
    pass


class TokenizerHashMismatch(UserWarning):
    pass


@dataclass
class Checkpoint:
    """In-memory checkpoint: config, named tensors, provenance."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]
    tokenizer_hash: str | None = None
    meta: dict = field(default_factory=dict)

    def to_model(self) -> CausalLM:
        model = CausalLM(self.config)
        state = {k: torch.from_numpy(v.copy()) for k, v in self.tensors.items()}
        missing, unexpected = model.load_state_dict(state, strict=False)
        missing = [m for m in missing if not m.startswith("rope_")]
        if missing or unexpected:
            raise CheckpointError(
                f"tensor names do not match the config: missing {missing}, "
                f"unexpected {unexpected}"
            )
        model.eval()
        return model


def checkpoint_from_model(
    model: CausalLM, tokenizer_hash: str | None = None, meta: dict | None = None
) -> Checkpoint:
    tensors = {
        name: p.detach().cpu().numpy().copy()
        for name, p in model.state_dict().items()
        if not name.startswith("rope_")
    }
    return Checkpoint(
        config=model.config,
        tensors=tensors,
        tokenizer_hash=tokenizer_hash,
        meta=dict(meta or {}),
    )


def save_checkpoint(obj, path, tokenizer_hash: str | None = None, meta: dict | None = None) -> None:
    """Write a model or Checkpoint to ``path``."""
    if isinstance(obj, CausalLM):
        ckpt = checkpoint_from_model(obj, tokenizer_hash=tokenizer_hash, meta=meta)
    elif isinstance(obj, Checkpoint):
        ckpt = obj
        if tokenizer_hash is not None:
            ckpt.tokenizer_hash = tokenizer_hash
        if meta:
            ckpt.meta.update(meta)
    else:
        raise CheckpointError(f"cannot checkpoint object of type {type(obj).__name__}")

    entries = []
    blobs = []
    offset = 0
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name])
        key = f"{arr.dtype.kind}{arr.dtype.itemsize}"
        if key not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        raw = arr.astype(_DTYPES[key], copy=False).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": key,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)

    header = {
        "config": ckpt.config.to_dict(),
        "meta": ckpt.meta,
        "tokenizer_hash": ckpt.tokenizer_hash,
        "tensors": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(header_bytes).to_bytes(8, "little"))
        f.write(header_bytes)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path, expected_tokenizer_hash: str | None = None) -> Checkpoint:
    """Read a checkpoint; warns if the tokenizer hash disagrees."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < 16 or data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    header_len = int.from_bytes(data[8:16], "little")
    if 16 + header_len > len(data):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[16 : 16 + header_len].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        entries = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed header: {exc}") from exc

    base = 16 + header_len
    tensors: dict[str, np.ndarray] = {}
    for e in entries:
        try:
            dtype = _DTYPES[e["dtype"]]
            lo = base + int(e["offset"])
            hi = lo + int(e["nbytes"])
            shape = tuple(int(s) for s in e["shape"])
        except (KeyError, ValueError, TypeError) as exc:
            raise CheckpointError(f"{path}: malformed tensor entry: {exc}") from exc
        if hi > len(data):
            raise CheckpointError(f"{path}: truncated data for tensor {e.get('name')!r}")
        arr = np.frombuffer(data[lo:hi], dtype=dtype)
        if arr.nbytes != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            raise CheckpointError(f"{path}: size/shape mismatch for tensor {e.get('name')!r}")
        tensors[e["name"]] = arr.reshape(shape).copy()

    ckpt = Checkpoint(
        config=config,
        tensors=tensors,
        tokenizer_hash=header.get("tokenizer_hash"),
        meta=header.get("meta") or {},
    )
    if (
        expected_tokenizer_hash is not None
        and ckpt.tokenizer_hash is not None
        and ckpt.tokenizer_hash != expected_tokenizer_hash
    ):
        warnings.warn(
            f"checkpoint {path} was trained with tokenizer {ckpt.tokenizer_hash[:12]}..., "
            f"got {expected_tokenizer_hash[:12]}...",
            TokenizerHashMismatch,
            stacklevel=2,
        )
    return ckpt


def load_model(path, expected_tokenizer_hash: str | None = None) -> CausalLM:
    return load_checkpoint(path, expected_tokenizer_hash).to_model()
