"""Teacher training and two-teacher distillation.

Teachers train on plain next-token cross-entropy with AdamW: weight
decay applies to matrix-shaped parameters only (not embeddings or norm
gains).  The student trains against frozen teachers with

    L = alpha * CE(student, target)
        + (1 - alpha) * T^2 * KL(teacher || student)

where both distributions are softened by temperature T and the KL term
is the mean over the two teachers (``kl_mode="mean_kl"``) or the KL
against their averaged softened distribution (``kl_mode="avg_teacher"``).
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, asdict
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint, checkpoint_from_model
from .model import CausalLM, ModelConfig, init_model


class TrainingError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became non-finite at step {step} ({loss})")
        self.step = step
        self.loss = loss


@dataclass
class TrainConfig:
    learning_rate: float = 7e-4
    epochs: int = 8
    batch_size: int = 128
    weight_decay: float = 5.0
    distillation_alpha: float = 0.5
    temperature: float = 1.0
    lr_schedule: str = "cosine"  # or "constant"
    warmup_frac: float = 0.01
    eval_interval: int | None = None  # steps; None evaluates once per epoch
    kl_mode: str = "mean_kl"  # or "avg_teacher"
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise TrainingError("learning_rate must be positive")
        if self.epochs < 0:
            raise TrainingError("epochs must be non-negative")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be positive")
        if not 0.0 <= self.distillation_alpha <= 1.0:
            raise TrainingError("distillation_alpha must be in [0, 1]")
        if self.temperature <= 0:
            raise TrainingError("temperature must be positive")
        if self.lr_schedule not in ("cosine", "constant"):
            raise TrainingError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.kl_mode not in ("mean_kl", "avg_teacher"):
            raise TrainingError(f"unknown kl_mode {self.kl_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EvalRecord:
    step: int
    epoch: int
    val_loss: float


@dataclass
class TrainingLog:
    steps: list[tuple[int, float]] = field(default_factory=list)
    evals: list[EvalRecord] = field(default_factory=list)
    wall_time_s: float = 0.0
    selected_eval: int = -1  # index into evals of the returned checkpoint


def pack_blocks(doc_token_ids: Sequence[Sequence[int]], context_length: int,
                bos_id: int, eos_id: int) -> torch.Tensor:
    """Concatenate BOS + ids + EOS per document and cut [N, L+1] blocks.

    Blocks overlap by one position so input block[:, :-1] predicts
    target block[:, 1:].  The tail shorter than a full block is dropped.
    """
    stream: list[int] = []
    for ids in doc_token_ids:
        stream.append(bos_id)
        stream.extend(int(i) for i in ids)
        stream.append(eos_id)
    length = context_length
    n = (len(stream) - 1) // length
    if n == 0:
        raise TrainingError(
            f"corpus too small: {len(stream)} tokens cannot fill one "
            f"block of {length + 1}"
        )
    arr = np.empty((n, length + 1), dtype=np.int64)
    for i in range(n):
        arr[i] = stream[i * length : i * length + length + 1]
    return torch.from_numpy(arr)


def _param_groups(model: CausalLM, weight_decay: float):
    decay, no_decay = [], []
    embed_params = {id(p) for p in model.embed.parameters()}
    for p in model.parameters():
        if p.dim() >= 2 and id(p) not in embed_params:
            decay.append(p)
        else:
            no_decay.append(p)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


def _lr_lambda(config: TrainConfig, total_steps: int):
    warmup = max(1, int(round(config.warmup_frac * total_steps)))

    def f(step: int) -> float:
        if config.lr_schedule == "constant":
            return 1.0
        if step < warmup:
            return (step + 1) / warmup
        if total_steps <= warmup:
            return 1.0
        progress = (step - warmup) / (total_steps - warmup)
        return 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))

    return f


def evaluate_loss(model, blocks: torch.Tensor, batch_size: int = 64) -> float:
    """Mean next-token cross-entropy over packed blocks."""
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, blocks.shape[0], batch_size):
            b = blocks[i : i + batch_size]
            logits = model(b[:, :-1])
            loss = F.cross_entropy(
                logits.reshape(-1, logits.shape[-1]), b[:, 1:].reshape(-1),
                reduction="sum",
            )
            total += loss.item()
            count += b[:, 1:].numel()
    return total / count


def distillation_loss(
    student_logits: torch.Tensor,
    teacher_logits: Sequence[torch.Tensor],
    targets: torch.Tensor,
    alpha: float,
    temperature: float,
    kl_mode: str = "mean_kl",
) -> torch.Tensor:
    """Combined hard/soft loss on [..., V] logits and [...] targets."""
    if not 0.0 <= alpha <= 1.0:
        raise TrainingError("alpha must be in [0, 1]")
    v = student_logits.shape[-1]
    s_flat = student_logits.reshape(-1, v)
    t_flats = [t.reshape(-1, v) for t in teacher_logits]
    ce = F.cross_entropy(s_flat, targets.reshape(-1))
    if alpha == 1.0 or not t_flats:
        return ce

    log_q = F.log_softmax(s_flat / temperature, dim=-1)
    if kl_mode == "mean_kl":
        kl = s_flat.new_zeros(())
        for t in t_flats:
            log_p = F.log_softmax(t / temperature, dim=-1)
            kl = kl + F.kl_div(log_q, log_p, log_target=True, reduction="batchmean")
        kl = kl / len(t_flats)
    elif kl_mode == "avg_teacher":
        probs = torch.stack([F.softmax(t / temperature, dim=-1) for t in t_flats]).mean(0)
        kl = F.kl_div(log_q, probs, reduction="batchmean")
    else:
        raise TrainingError(f"unknown kl_mode {kl_mode!r}")
    soft = (temperature ** 2) * kl
    return alpha * ce + (1.0 - alpha) * soft


def _run_training(
    model: CausalLM,
    loss_fn,
    train_blocks: torch.Tensor,
    val_blocks: torch.Tensor,
    config: TrainConfig,
    meta: dict,
    tokenizer_hash: str | None,
) -> tuple[Checkpoint, TrainingLog]:
    t0 = time.monotonic()
    log = TrainingLog()
    snapshots: list[Checkpoint] = []

    def snapshot(step: int, epoch: int):
        val = evaluate_loss(model, val_blocks)
        log.evals.append(EvalRecord(step=step, epoch=epoch, val_loss=val))
        ck = checkpoint_from_model(
            model,
            tokenizer_hash=tokenizer_hash,
            meta={**meta, "step": step, "epoch": epoch, "val_loss": val},
        )
        snapshots.append(ck)

    if config.epochs == 0:
        snapshot(0, 0)
    else:
        opt = torch.optim.AdamW(
            _param_groups(model, config.weight_decay), lr=config.learning_rate
        )
        n_blocks = train_blocks.shape[0]
        steps_per_epoch = math.ceil(n_blocks / config.batch_size)
        total_steps = steps_per_epoch * config.epochs
        lr_f = _lr_lambda(config, total_steps)
        rng = np.random.default_rng(config.seed)
        step = 0
        for epoch in range(config.epochs):
            model.train()
            perm = rng.permutation(n_blocks)
            since_eval = 0
            for i in range(0, n_blocks, config.batch_size):
                batch = train_blocks[perm[i : i + config.batch_size]]
                for g in opt.param_groups:
                    g["lr"] = config.learning_rate * lr_f(step)
                opt.zero_grad(set_to_none=True)
                loss = loss_fn(model, batch)
                lv = loss.item()
                if not math.isfinite(lv):
                    raise TrainingDiverged(step, lv)
                loss.backward()
                opt.step()
                log.steps.append((step, lv))
                step += 1
                since_eval += 1
                if config.eval_interval and since_eval >= config.eval_interval:
                    snapshot(step, epoch)
                    since_eval = 0
                    model.train()
            snapshot(step, epoch)
            model.train()
    model.eval()

    best = min(range(len(log.evals)), key=lambda i: (log.evals[i].val_loss, i))
    log.selected_eval = best
    log.wall_time_s = time.monotonic() - t0
    return snapshots[best], log


def train_teacher(
    model_config: ModelConfig,
    train_config: TrainConfig,
    train_doc_ids: Sequence[Sequence[int]],
    val_doc_ids: Sequence[Sequence[int]],
    bos_id: int,
    eos_id: int,
    tokenizer_hash: str | None = None,
) -> tuple[Checkpoint, TrainingLog]:
    """Train one teacher; returns the best-validation checkpoint.

    With ``epochs=0`` the initial model comes back unchanged (still
    validated once).  Ties on validation loss resolve to the earliest
    snapshot.  A non-finite loss aborts with :class:`TrainingDiverged`.
    """
    model = init_model(model_config)
    train_blocks = pack_blocks(train_doc_ids, model_config.context_length, bos_id, eos_id)
    val_blocks = pack_blocks(val_doc_ids, model_config.context_length, bos_id, eos_id)

    def loss_fn(m, batch):
        logits = m(batch[:, :-1])
        return F.cross_entropy(
            logits.reshape(-1, logits.shape[-1]), batch[:, 1:].reshape(-1)
        )

    return _run_training(
        model, loss_fn, train_blocks, val_blocks, train_config,
        {"role": "teacher", "model_seed": model_config.seed}, tokenizer_hash,
    )


def distill_student(
    teacher_a: CausalLM,
    teacher_b: CausalLM,
    model_config: ModelConfig,
    train_config: TrainConfig,
    train_doc_ids: Sequence[Sequence[int]],
    val_doc_ids: Sequence[Sequence[int]],
    bos_id: int,
    eos_id: int,
    tokenizer_hash: str | None = None,
) -> tuple[Checkpoint, TrainingLog]:
    """Distill a student from two frozen teachers.

    Teachers must share the student's vocabulary; their parameters are
    never touched.  Validation (for snapshot selection) uses plain
    cross-entropy so teacher and student scores are comparable.
    """
    for t in (teacher_a, teacher_b):
        if t.config.vocab_size != model_config.vocab_size:
            raise TrainingError(
                f"teacher vocab {t.config.vocab_size} != student vocab "
                f"{model_config.vocab_size}"
            )
        t.eval()
    alpha = train_config.distillation_alpha
    temp = train_config.temperature

    model = init_model(model_config)
    train_blocks = pack_blocks(train_doc_ids, model_config.context_length, bos_id, eos_id)
    val_blocks = pack_blocks(val_doc_ids, model_config.context_length, bos_id, eos_id)

    def loss_fn(m, batch):
        inputs, targets = batch[:, :-1], batch[:, 1:]
        student_logits = m(inputs)
        with torch.no_grad():
            t_logits = [teacher_a(inputs), teacher_b(inputs)]
        return distillation_loss(
            student_logits, t_logits, targets, alpha, temp, train_config.kl_mode
        )

    return _run_training(
        model, loss_fn, train_blocks, val_blocks, train_config,
        {"role": "student", "alpha": alpha, "temperature": temp}, tokenizer_hash,
    )


def select_best(
    checkpoints: Sequence[Checkpoint],
    val_doc_ids: Sequence[Sequence[int]],
    bos_id: int,
    eos_id: int,
) -> tuple[Checkpoint, list[float]]:
    """Pick the checkpoint with the lowest validation loss (ties: earliest)."""
    if not checkpoints:
        raise TrainingError("no checkpoints to select from")
    losses = []
    for ck in checkpoints:
        model = ck.to_model()
        blocks = pack_blocks(val_doc_ids, ck.config.context_length, bos_id, eos_id)
        losses.append(evaluate_loss(model, blocks))
    best = min(range(len(losses)), key=lambda i: (losses[i], i))
    return checkpoints[best], losses
