"""Pipeline driver.

    chronolm run <stage> --config cfg.yaml [--slice LABEL]
    chronolm run all --config cfg.yaml
    chronolm validate --config cfg.yaml
    chronolm decode --checkpoint m.ckpt --tokenizer t.tok --prefix-file p.txt -k 10
    chronolm synth --out-dir DIR [--seed N] [--sentences N]

Each stage writes its artifacts under the configured output directory
plus a manifest recording the sha256 of its config slice, inputs, and
outputs.  A stage whose manifest still matches is skipped, so ``run
all`` resumes cleanly after an interruption.  Metric reports contain no
timestamps or machine state; rerunning a pipeline from scratch on the
same config produces byte-identical reports.

Exit codes: 0 success, 1 validation error, 2 stage failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import re
import sys
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import yaml

from . import checkpoint as ckpt_mod
from . import corpus as corpus_mod
from .attribution import (
    AttributionError,
    HttpCompletionClient,
    WorkRef,
    attribute_dates,
    evaluate_attribution,
)
from .decoding import top_k_single_words
from .discovery import cumulative_divergence, occurrence_trajectories, trajectory_candidates
from .evaluation import (
    ClozeTask,
    MinimalPair,
    SenseRecord,
    build_cloze_set,
    cross_time_matrix,
    grouped_accuracy,
    leakage_report,
    minimal_pair_accuracy,
    mrr,
    rank_cloze,
    year_group_fn,
)
from .model import ModelConfig
from .tokenizer import BpeTokenizer, train_bpe
from .training import TrainConfig, distill_student, train_teacher

STAGES = [
    "ingest", "slice", "split", "tokenize", "train-teachers", "distill",
    "eval-ppl", "eval-pairs", "build-cloze", "eval-cloze", "leakage",
    "discover", "attribute",
]
# `run all` excludes the stage that talks to an external service
ALL_STAGES = [s for s in STAGES if s != "attribute"]


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    pass


# -- configuration -----------------------------------------------------------


def _get(d: dict, path: str, default=None):
    cur = d
    for part in path.split("."):
        if not isinstance(cur, dict) or part not in cur:
            return default
        cur = cur[part]
    return cur


@dataclass
class PipelineConfig:
    raw: dict
    path: str

    def __getitem__(self, path: str):
        return _get(self.raw, path)

    def get(self, path: str, default=None):
        return _get(self.raw, path, default)

    @property
    def output_dir(self) -> str:
        return self.raw["output_dir"]

    def validate(self) -> list[str]:
        """All problems at once, as "field: message" strings."""
        errs: list[str] = []
        c = self.raw

        def need(path, typ, msg):
            v = _get(c, path)
            if v is None:
                errs.append(f"{path}: missing")
                return None
            if typ is not None and not isinstance(v, typ):
                errs.append(f"{path}: {msg}")
                return None
            return v

        if not isinstance(c, dict):
            return ["config root must be a mapping"]
        need("output_dir", str, "must be a string path")

        paths = need("corpus.paths", list, "must be a list of file paths")
        if paths is not None:
            if not paths:
                errs.append("corpus.paths: empty")
            for p in paths:
                if not isinstance(p, str) or not os.path.exists(self._rel(p)):
                    errs.append(f"corpus.paths: file not found: {p}")
        yr = need("corpus.year_range", list, "must be [first_year, last_year]")
        if yr is not None and (
            len(yr) != 2 or not all(isinstance(y, int) for y in yr) or yr[0] > yr[1]
        ):
            errs.append(f"corpus.year_range: invalid range {yr}")
        ns = need("corpus.n_slices", int, "must be an integer")
        if ns is not None and ns < 1:
            errs.append("corpus.n_slices: must be at least 1")
        for b in ("train", "val", "test"):
            v = need(f"corpus.budgets.{b}", int, "must be an integer token count")
            if v is not None and v <= 0:
                errs.append(f"corpus.budgets.{b}: must be positive")

        vs = need("tokenizer.vocab_size", int, "must be an integer")
        if vs is not None and vs <= 260:
            errs.append("tokenizer.vocab_size: must exceed 260 (specials + bytes + marker)")

        for f_ in ("n_layers", "n_heads", "n_kv_heads", "d_model", "d_ff", "context_length"):
            v = need(f"model.{f_}", int, "must be an integer")
            if v is not None and v < 1:
                errs.append(f"model.{f_}: must be positive")
        d_model = _get(c, "model.d_model")
        n_heads = _get(c, "model.n_heads")
        n_kv = _get(c, "model.n_kv_heads")
        if all(isinstance(x, int) and x > 0 for x in (d_model, n_heads)):
            if d_model % n_heads != 0:
                errs.append("model.d_model: not divisible by model.n_heads")
        if all(isinstance(x, int) and x > 0 for x in (n_heads, n_kv)):
            if n_heads % n_kv != 0:
                errs.append("model.n_heads: not divisible by model.n_kv_heads")

        tr = _get(c, "training", {})
        if not isinstance(tr, dict):
            errs.append("training: must be a mapping")
            tr = {}
        try:
            TrainConfig(**{k: v for k, v in tr.items() if k in TrainConfig.__dataclass_fields__})
        except Exception as exc:
            errs.append(f"training: {exc}")
        unknown = set(tr) - set(TrainConfig.__dataclass_fields__)
        if unknown:
            errs.append(f"training: unknown fields {sorted(unknown)}")
        epochs = tr.get("epochs")
        if isinstance(epochs, int) and epochs < 1:
            errs.append("training.epochs: must be at least 1")

        for pth in ("evaluation.minimal_pairs", "evaluation.inventory", "attribution.works"):
            v = _get(c, pth)
            if v is not None and not os.path.exists(self._rel(v)):
                errs.append(f"{pth}: file not found: {v}")
        k = _get(c, "evaluation.k")
        if k is not None and (not isinstance(k, int) or k < 1):
            errs.append("evaluation.k: must be a positive integer")

        if _get(c, "attribution") is not None:
            for f_ in ("attribution.endpoint.url", "attribution.endpoint.model"):
                if not _get(c, f_):
                    errs.append(f"{f_}: required when attribution is configured")

        for f_ in ("seeds.split", "seeds.training"):
            v = _get(c, f_)
            if v is not None and not isinstance(v, int):
                errs.append(f"{f_}: must be an integer")
        return errs

    def _rel(self, p: str) -> str:
        if os.path.isabs(p):
            return p
        return os.path.join(os.path.dirname(os.path.abspath(self.path)), p)

    def resolve(self, p: str) -> str:
        return self._rel(p)


def load_config(path: str) -> PipelineConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must hold a mapping at top level")
    return PipelineConfig(raw=raw, path=path)


# -- manifests and locking ---------------------------------------------------


def _sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_obj(obj) -> str:
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    ).hexdigest()


@dataclass
class StageIO:
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)


class Pipeline:
    def __init__(self, config: PipelineConfig):
        self.config = config
        self.out = config.output_dir
        os.makedirs(self.out, exist_ok=True)

    # paths
    def p(self, *parts: str) -> str:
        return os.path.join(self.out, *parts)

    def manifest_path(self, stage: str) -> str:
        return self.p(f"{stage}.manifest.json")

    def _config_hash(self, stage: str) -> str:
        return _hash_obj({"stage": stage, "config": self.config.raw})

    def up_to_date(self, stage: str, io: StageIO) -> bool:
        mp = self.manifest_path(stage)
        if not os.path.exists(mp):
            return False
        try:
            with open(mp, "r", encoding="utf-8") as f:
                m = json.load(f)
        except (OSError, json.JSONDecodeError):
            return False
        if m.get("config_hash") != self._config_hash(stage):
            return False
        for path, digest in m.get("inputs", {}).items():
            if not os.path.exists(path) or _sha256_file(path) != digest:
                return False
        for path, digest in m.get("outputs", {}).items():
            if not os.path.exists(path) or _sha256_file(path) != digest:
                return False
        # the declared inputs must not have changed set-wise either
        return set(m.get("inputs", {})) == set(io.inputs)

    def write_manifest(self, stage: str, io: StageIO, duration: float) -> None:
        manifest = {
            "stage": stage,
            "config_hash": self._config_hash(stage),
            "inputs": {p: _sha256_file(p) for p in sorted(set(io.inputs))},
            "outputs": {p: _sha256_file(p) for p in sorted(set(io.outputs))},
            "duration_s": round(duration, 3),
        }
        with open(self.manifest_path(stage), "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")


class _Lock:
    def __init__(self, out_dir: str):
        self.path = os.path.join(out_dir, ".lock")

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            pid = None
            try:
                with open(self.path) as f:
                    pid = int(f.read().strip() or "0")
            except (OSError, ValueError):
                pass
            if pid and _pid_alive(pid):
                raise StageError(
                    f"output directory is locked by running process {pid} "
                    f"({self.path}); wait for it or remove the lock"
                )
            os.unlink(self.path)  # stale lock from a dead process
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        try:
            os.unlink(self.path)
        except OSError:
            pass
        return False


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


# -- shared loading helpers --------------------------------------------------


def _load_store(pl: Pipeline) -> corpus_mod.CorpusStore:
    path = pl.p("store.jsonl")
    if not os.path.exists(path):
        raise StageError("store.jsonl missing: run the ingest stage first")
    lo, hi = pl.config["corpus.year_range"]
    store = corpus_mod.CorpusStore((lo, hi))
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            d = json.loads(line)
            store.add(corpus_mod.Document(**d))
    return store


def _load_plan(pl: Pipeline) -> dict:
    path = pl.p("plan.json")
    if not os.path.exists(path):
        raise StageError("plan.json missing: run the slice stage first")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _load_splits(pl: Pipeline) -> dict:
    path = pl.p("splits.json")
    if not os.path.exists(path):
        raise StageError("splits.json missing: run the split stage first")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _slice_labels(pl: Pipeline, only: str | None = None) -> list[str]:
    labels = [s["label"] for s in _load_plan(pl)["slices"]]
    if only is not None:
        if only not in labels:
            raise StageError(f"unknown slice label {only!r}; plan has {labels}")
        return [only]
    return labels


def _tokenizer_path(pl: Pipeline, label: str) -> str:
    return pl.p("tokenizers", f"{label}.tok")

def _model_dir(pl: Pipeline, label: str) -> str:
    return pl.p("models", label)


def _load_battery(pl: Pipeline, labels: Sequence[str]):
    """label -> (student model, tokenizer); insertion order = slice order."""
    battery = {}
    for label in labels:
        tok_path = _tokenizer_path(pl, label)
        stu_path = os.path.join(_model_dir(pl, label), "student.ckpt")
        if not os.path.exists(tok_path):
            raise StageError(f"tokenizer for slice {label!r} missing: run tokenize")
        if not os.path.exists(stu_path):
            raise StageError(f"student for slice {label!r} missing: run distill")
        tok = BpeTokenizer.load(tok_path)
        model = ckpt_mod.load_model(stu_path, expected_tokenizer_hash=tok.file_hash)
        battery[label] = (model, tok)
    return battery


def _split_texts(store, splits: dict, label: str, part: str) -> list[str]:
    return [store.get(doc_id).text for doc_id in splits[label][part]]


def _write_csv(path: str, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _sentences_from_texts(texts: Sequence[str], limit: int) -> list[str]:
    out: list[str] = []
    for text in texts:
        for s in re.split(r"(?<=[.!?])\s+", text):
            s = s.strip()
            if s:
                out.append(s)
            if len(out) >= limit:
                return out
    return out


def _list_arg(v) -> list:
    return v if isinstance(v, list) else []


# -- stages ------------------------------------------------------------------


def stage_ingest(pl: Pipeline, only_slice: str | None) -> StageIO:
    cfg = pl.config
    paths = [cfg.resolve(p) for p in cfg["corpus.paths"]]
    lo, hi = cfg["corpus.year_range"]
    schema = cfg.get("corpus.schema")
    store, report = corpus_mod.ingest(paths, (lo, hi), schema)
    if len(store) == 0:
        raise StageError("ingest accepted no documents")
    out_path = pl.p("store.jsonl")
    with open(out_path, "w", encoding="utf-8") as f:
        for doc in store:
            f.write(json.dumps(
                {"id": doc.id, "year": doc.year, "text": doc.text,
                 "title": doc.title, "author": doc.author},
                sort_keys=True) + "\n")
    rep_path = pl.p("ingest_report.json")
    with open(rep_path, "w", encoding="utf-8") as f:
        json.dump(
            {
                "n_read": report.n_read,
                "n_accepted": report.n_accepted,
                "n_rejected": len(report.rejects),
                "rejects": [
                    {"path": r.path, "line": r.line_no, "reason": r.reason}
                    for r in report.rejects
                ],
            },
            f, indent=2, sort_keys=True)
        f.write("\n")
    return StageIO(inputs=paths, outputs=[out_path, rep_path])


def stage_slice(pl: Pipeline, only_slice: str | None) -> StageIO:
    cfg = pl.config
    store = _load_store(pl)
    budgets = corpus_mod.Budgets(
        train=cfg["corpus.budgets.train"],
        val=cfg["corpus.budgets.val"],
        test=cfg["corpus.budgets.test"],
    )
    plan = corpus_mod.plan_slices(store, cfg["corpus.n_slices"], budgets)
    out_path = pl.p("plan.json")
    with open(out_path, "w", encoding="utf-8") as f:
        json.dump(
            {
                "feasible": plan.feasible,
                "budgets": {"train": budgets.train, "val": budgets.val, "test": budgets.test},
                "slices": [
                    {
                        "label": s.label,
                        "start_year": s.start_year,
                        "end_year": s.end_year,
                        "closed": s.closed,
                        "realized_tokens": plan.realized_tokens[s.label],
                    }
                    for s in plan.slices
                ],
                "shortfalls": [
                    {"label": sf.label, "required": sf.required, "available": sf.available}
                    for sf in plan.shortfalls
                ],
                "assignment": plan.assignment,
            },
            f, indent=2, sort_keys=True)
        f.write("\n")
    if not plan.feasible:
        detail = "; ".join(
            f"{sf.label}: {sf.available}/{sf.required}" for sf in plan.shortfalls
        )
        raise StageError(f"slice plan infeasible ({detail}); see {out_path}")
    return StageIO(inputs=[pl.p("store.jsonl")], outputs=[out_path])


def stage_split(pl: Pipeline, only_slice: str | None) -> StageIO:
    cfg = pl.config
    store = _load_store(pl)
    plan_d = _load_plan(pl)
    budgets = corpus_mod.Budgets(**plan_d["budgets"])
    slices = [
        corpus_mod.TimeSlice(
            label=s["label"], start_year=s["start_year"],
            end_year=s["end_year"], closed=s["closed"],
        )
        for s in plan_d["slices"]
    ]
    plan = corpus_mod.SlicePlan(
        slices=slices, budgets=budgets, assignment=plan_d["assignment"],
        realized_tokens={s["label"]: s["realized_tokens"] for s in plan_d["slices"]},
        feasible=plan_d["feasible"],
    )
    seed = cfg.get("seeds.split", 1)
    result = {}
    infeasible = []
    for s in slices:
        ss = corpus_mod.split_slice(store, plan, s.label, seed)
        result[s.label] = {
            "seed": seed,
            "train": list(ss.train),
            "val": list(ss.val),
            "test": list(ss.test),
            "realized": ss.realized,
        }
        if not ss.feasible:
            infeasible.extend(f"{sf.label}: {sf.available}/{sf.required}" for sf in ss.shortfalls)
    out_path = pl.p("splits.json")
    with open(out_path, "w", encoding="utf-8") as f:
        json.dump(result, f, indent=2, sort_keys=True)
        f.write("\n")
    if infeasible:
        raise StageError("split budgets unmet: " + "; ".join(infeasible))
    return StageIO(inputs=[pl.p("store.jsonl"), pl.p("plan.json")], outputs=[out_path])


def stage_tokenize(pl: Pipeline, only_slice: str | None) -> StageIO:
    cfg = pl.config
    store = _load_store(pl)
    splits = _load_splits(pl)
    io = StageIO(inputs=[pl.p("store.jsonl"), pl.p("splits.json")])
    os.makedirs(pl.p("tokenizers"), exist_ok=True)
    for label in _slice_labels(pl, only_slice):
        texts = _split_texts(store, splits, label, "train")
        tok = train_bpe(texts, cfg["tokenizer.vocab_size"])
        path = _tokenizer_path(pl, label)
        tok.save(path)
        io.outputs.append(path)
    return io


def _model_config(cfg: PipelineConfig, vocab_size: int, seed: int) -> ModelConfig:
    return ModelConfig(
        n_layers=cfg["model.n_layers"],
        n_heads=cfg["model.n_heads"],
        n_kv_heads=cfg["model.n_kv_heads"],
        d_model=cfg["model.d_model"],
        d_ff=cfg["model.d_ff"],
        vocab_size=vocab_size,
        context_length=cfg["model.context_length"],
        seed=seed,
    )


def _train_config(cfg: PipelineConfig, seed: int) -> TrainConfig:
    tr = cfg.get("training", {}) or {}
    kwargs = {k: v for k, v in tr.items() if k in TrainConfig.__dataclass_fields__}
    kwargs["seed"] = seed
    return TrainConfig(**kwargs)


def _write_log(path: str, log) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for step, loss in log.steps:
            f.write(json.dumps({"step": step, "loss": loss}) + "\n")
        for ev in log.evals:
            f.write(json.dumps(
                {"eval_step": ev.step, "epoch": ev.epoch, "val_loss": ev.val_loss}) + "\n")
        f.write(json.dumps({"selected_eval": log.selected_eval,
                            "wall_time_s": round(log.wall_time_s, 3)}) + "\n")


def stage_train_teachers(pl: Pipeline, only_slice: str | None) -> StageIO:
    cfg = pl.config
    store = _load_store(pl)
    splits = _load_splits(pl)
    labels = _slice_labels(pl, only_slice)
    base_seed = cfg.get("seeds.training", 100)
    io = StageIO(inputs=[pl.p("store.jsonl"), pl.p("splits.json")])
    all_labels = _slice_labels(pl)
    for label in labels:
        sidx = all_labels.index(label)
        tok = BpeTokenizer.load(_tokenizer_path(pl, label))
        io.inputs.append(_tokenizer_path(pl, label))
        train_ids = [tok.encode(t) for t in _split_texts(store, splits, label, "train")]
        val_ids = [tok.encode(t) for t in _split_texts(store, splits, label, "val")]
        os.makedirs(_model_dir(pl, label), exist_ok=True)
        for t_i in range(2):
            seed = base_seed + 10 * sidx + t_i
            mc = _model_config(cfg, tok.vocab_size, seed)
            tc = _train_config(cfg, seed)
            ck, log = train_teacher(
                mc, tc, train_ids, val_ids, tok.bos_id, tok.eos_id,
                tokenizer_hash=tok.file_hash,
            )
            path = os.path.join(_model_dir(pl, label), f"teacher{t_i}.ckpt")
            ckpt_mod.save_checkpoint(ck, path)
            _write_log(os.path.join(_model_dir(pl, label), f"teacher{t_i}.log.jsonl"), log)
            io.outputs.append(path)
    return io


def stage_distill(pl: Pipeline, only_slice: str | None) -> StageIO:
    cfg = pl.config
    store = _load_store(pl)
    splits = _load_splits(pl)
    labels = _slice_labels(pl, only_slice)
    all_labels = _slice_labels(pl)
    base_seed = cfg.get("seeds.training", 100)
    io = StageIO(inputs=[pl.p("store.jsonl"), pl.p("splits.json")])
    for label in labels:
        sidx = all_labels.index(label)
        tok = BpeTokenizer.load(_tokenizer_path(pl, label))
        mdir = _model_dir(pl, label)
        t_paths = [os.path.join(mdir, f"teacher{i}.ckpt") for i in range(2)]
        for tp in t_paths:
            if not os.path.exists(tp):
                raise StageError(f"{tp} missing: run train-teachers")
        io.inputs.extend(t_paths + [_tokenizer_path(pl, label)])
        teacher_a = ckpt_mod.load_model(t_paths[0], expected_tokenizer_hash=tok.file_hash)
        teacher_b = ckpt_mod.load_model(t_paths[1], expected_tokenizer_hash=tok.file_hash)
        train_ids = [tok.encode(t) for t in _split_texts(store, splits, label, "train")]
        val_ids = [tok.encode(t) for t in _split_texts(store, splits, label, "val")]
        seed = base_seed + 10 * sidx + 5
        mc = _model_config(cfg, tok.vocab_size, seed)
        tc = _train_config(cfg, seed)
        ck, log = distill_student(
            teacher_a, teacher_b, mc, tc, train_ids, val_ids,
            tok.bos_id, tok.eos_id, tokenizer_hash=tok.file_hash,
        )
        path = os.path.join(mdir, "student.ckpt")
        ckpt_mod.save_checkpoint(ck, path)
        _write_log(os.path.join(mdir, "student.log.jsonl"), log)
        io.outputs.append(path)
    return io


def _battery_inputs(pl: Pipeline, labels: Sequence[str]) -> list[str]:
    paths = []
    for label in labels:
        paths.append(_tokenizer_path(pl, label))
        paths.append(os.path.join(_model_dir(pl, label), "student.ckpt"))
    return paths


def stage_eval_ppl(pl: Pipeline, only_slice: str | None) -> StageIO:
    cfg = pl.config
    store = _load_store(pl)
    splits = _load_splits(pl)
    labels = _slice_labels(pl)
    battery = _load_battery(pl, labels)
    test_texts = {lab: _split_texts(store, splits, lab, "test") for lab in labels}
    matrix = cross_time_matrix(battery, test_texts, stride=cfg.get("evaluation.stride"))
    rows = []
    for mi, ml in enumerate(matrix.model_labels):
        for si, sl in enumerate(matrix.slice_labels):
            rows.append((ml, sl, "perplexity", matrix.values[mi][si]))
    out = pl.p("reports", "ppl_matrix.csv")
    _write_csv(out, ("model", "slice", "metric", "value"), rows)
    return StageIO(
        inputs=[pl.p("store.jsonl"), pl.p("splits.json")] + _battery_inputs(pl, labels),
        outputs=[out],
    )


def stage_eval_pairs(pl: Pipeline, only_slice: str | None) -> StageIO:
    cfg = pl.config
    pairs_path = cfg.get("evaluation.minimal_pairs")
    if not pairs_path:
        raise StageError("evaluation.minimal_pairs not configured")
    pairs_path = cfg.resolve(pairs_path)
    pairs = []
    with open(pairs_path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                d = json.loads(line)
                pairs.append(MinimalPair(
                    id=d["id"], good=d["good"], bad=d["bad"],
                    subtask=d.get("subtask", "all")))
    store = _load_store(pl)
    splits = _load_splits(pl)
    labels = _slice_labels(pl)
    battery = _load_battery(pl, labels)

    min_count = cfg.get("evaluation.min_count", 2)
    vocabularies = [
        corpus_mod.word_counts(_split_texts(store, splits, lab, "train"), source=lab)
        for lab in labels
    ]
    kept, report = corpus_mod.filter_in_vocab(pairs, vocabularies, min_count=min_count)
    if not kept:
        raise StageError("no minimal pairs survive the vocabulary filter")
    rows = []
    for lab in labels:
        model, tok = battery[lab]
        rep = minimal_pair_accuracy(model, tok, kept, model_id=lab)
        rows.append((lab, "all", "accuracy", rep.accuracy))
        rows.append((lab, "all", "n", rep.n))
        for sub in sorted(rep.by_subtask):
            acc, n = rep.by_subtask[sub]
            rows.append((lab, sub, "accuracy", acc))
            rows.append((lab, sub, "n", n))
    rows.append(("-", "filter", "retained", report.retained))
    rows.append(("-", "filter", "total", report.total))
    out = pl.p("reports", "minimal_pairs.csv")
    _write_csv(out, ("model", "group", "metric", "value"), rows)
    return StageIO(
        inputs=[pairs_path, pl.p("store.jsonl"), pl.p("splits.json")]
        + _battery_inputs(pl, labels),
        outputs=[out],
    )


def _load_senses(path: str) -> list[SenseRecord]:
    senses = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                d = json.loads(line)
                senses.append(SenseRecord(
                    word=d["word"], sense_id=d["sense_id"], year=d["year"],
                    examples=tuple(d["examples"]),
                    frequency_per_million=d["frequency_per_million"],
                    definition=d.get("definition", "")))
    return senses


def stage_build_cloze(pl: Pipeline, only_slice: str | None) -> StageIO:
    cfg = pl.config
    inv_path = cfg.get("evaluation.inventory")
    if not inv_path:
        raise StageError("evaluation.inventory not configured")
    inv_path = cfg.resolve(inv_path)
    senses = _load_senses(inv_path)
    store = _load_store(pl)
    splits = _load_splits(pl)
    labels = _slice_labels(pl)
    vocabularies = [
        corpus_mod.word_counts(_split_texts(store, splits, lab, "train"), source=lab)
        for lab in labels
    ]
    freq_range = cfg.get("evaluation.freq_range", [1.0, 1000.0])
    tasks, report = build_cloze_set(
        senses, vocabularies,
        tail_fraction=cfg.get("evaluation.tail_fraction", 0.10),
        freq_range=(freq_range[0], freq_range[1]),
        min_count=cfg.get("evaluation.min_count", 2),
    )
    os.makedirs(pl.p("cloze"), exist_ok=True)
    tasks_path = pl.p("cloze", "tasks.jsonl")
    with open(tasks_path, "w", encoding="utf-8") as f:
        for t in tasks:
            f.write(json.dumps(
                {"id": t.id, "prefix": t.prefix, "target_word": t.target_word,
                 "sense_id": t.sense_id, "year": t.year,
                 "frequency_per_million": t.frequency_per_million},
                sort_keys=True) + "\n")
    rep_path = pl.p("cloze", "build_report.json")
    with open(rep_path, "w", encoding="utf-8") as f:
        json.dump(
            {"n_senses": report.n_senses, "n_examples": report.n_examples,
             "n_tasks": report.n_tasks, "rejected": report.rejected},
            f, indent=2, sort_keys=True)
        f.write("\n")
    if not tasks:
        raise StageError(f"no cloze tasks survive filtering; see {rep_path}")
    return StageIO(
        inputs=[inv_path, pl.p("store.jsonl"), pl.p("splits.json")],
        outputs=[tasks_path, rep_path],
    )


def _load_tasks(pl: Pipeline) -> list[ClozeTask]:
    path = pl.p("cloze", "tasks.jsonl")
    if not os.path.exists(path):
        raise StageError("cloze tasks missing: run build-cloze")
    tasks = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                d = json.loads(line)
                tasks.append(ClozeTask(**d))
    return tasks


def stage_eval_cloze(pl: Pipeline, only_slice: str | None) -> StageIO:
    cfg = pl.config
    tasks = _load_tasks(pl)
    labels = _slice_labels(pl)
    battery = _load_battery(pl, labels)
    k = cfg.get("evaluation.k", 100)
    run = rank_cloze(
        battery, tasks, k=k,
        beam_width=cfg.get("evaluation.beam_width"),
        max_word_tokens=cfg.get("evaluation.max_word_tokens", 8),
    )
    rank_rows = [(r.task_id, r.model_id, r.rank, r.k) for r in run.rankings]
    out_ranks = pl.p("reports", "cloze_rankings.csv")
    _write_csv(out_ranks, ("task_id", "model", "rank", "k"), rank_rows)

    tasks_by_id = {t.id: t for t in tasks}
    plan_d = _load_plan(pl)
    bounds = [(s["label"], s["start_year"], s["end_year"]) for s in plan_d["slices"]]
    gf = year_group_fn(bounds)
    rows = []
    for lab in labels:
        mine = [r for r in run.rankings if r.model_id == lab]
        if mine:
            rows.append((lab, "all", "mrr", mrr(mine)))
        acc, omitted = grouped_accuracy(mine, tasks_by_id, gf)
        for g in sorted(acc):
            a, n = acc[g]
            rows.append((lab, g, "top_k_accuracy", a))
            rows.append((lab, g, "n", n))
    rows.append(("-", "run", "failures", len(run.failures)))
    out_metrics = pl.p("reports", "cloze_metrics.csv")
    _write_csv(out_metrics, ("model", "group", "metric", "value"), rows)
    return StageIO(
        inputs=[pl.p("cloze", "tasks.jsonl"), pl.p("plan.json")]
        + _battery_inputs(pl, labels),
        outputs=[out_ranks, out_metrics],
    )


def stage_leakage(pl: Pipeline, only_slice: str | None) -> StageIO:
    cfg = pl.config
    tasks = _load_tasks(pl)
    tasks_by_id = {t.id: t for t in tasks}
    plan_d = _load_plan(pl)
    labels = [s["label"] for s in plan_d["slices"]]
    ends = {s["label"]: s["end_year"] for s in plan_d["slices"]}
    k = cfg.get("evaluation.k", 100)

    ranks_path = pl.p("reports", "cloze_rankings.csv")
    if not os.path.exists(ranks_path):
        raise StageError("cloze rankings missing: run eval-cloze")
    from .evaluation import ClozeRanking

    rankings = []
    with open(ranks_path, "r", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            rankings.append(ClozeRanking(
                task_id=row["task_id"], model_id=row["model"],
                rank=int(row["rank"]), k=int(row["k"])))
    rows = []
    for lab in labels:
        # each model's knowledge horizon is its own slice's end year
        rep = leakage_report(rankings, tasks_by_id, lab, cutoff_year=ends[lab], k=k)
        for metric, value in (
            ("n_future", rep.n_future), ("n_past", rep.n_past),
            ("hits_future", rep.hits_future), ("hits_past", rep.hits_past),
            ("leakage", rep.leakage), ("recall", rep.recall), ("rnl", rep.rnl),
        ):
            rows.append((lab, rep.cutoff_year, metric, value))
    out = pl.p("reports", "leakage.csv")
    _write_csv(out, ("model", "cutoff_year", "metric", "value"), rows)
    return StageIO(
        inputs=[ranks_path, pl.p("cloze", "tasks.jsonl"), pl.p("plan.json")],
        outputs=[out],
    )


def stage_discover(pl: Pipeline, only_slice: str | None) -> StageIO:
    cfg = pl.config
    store = _load_store(pl)
    splits = _load_splits(pl)
    labels = _slice_labels(pl)
    battery = _load_battery(pl, labels)
    baseline = cfg.get("discovery.baseline") or labels[-1]
    limit = cfg.get("discovery.sample_sentences", 400)
    texts = []
    for lab in labels:
        texts.extend(_split_texts(store, splits, lab, "test"))
    sentences = _sentences_from_texts(texts, limit)
    if not sentences:
        raise StageError("no sentences available for discovery")
    common = dict(
        min_occurrences=cfg.get("discovery.min_occurrences", 5),
        top_n=cfg.get("discovery.top_n", 50),
        aggregate=cfg.get("discovery.aggregate", "mean"),
    )
    cands = trajectory_candidates(
        battery, baseline, sentences,
        epsilon=cfg.get("discovery.epsilon", 0.0), **common,
    )
    cumul = cumulative_divergence(battery, baseline, sentences, **common)

    delta_cols = [f"delta_{lab}" for lab in labels]
    header = ["word", "occurrences", "first_last_change", "cumulative", "monotone"] + delta_cols
    out1 = pl.p("reports", "trajectories.csv")
    _write_csv(out1, header, [
        [r.word, r.occurrences, r.first_last_change, r.cumulative, r.monotone]
        + [r.deltas[lab] for lab in labels]
        for r in cands
    ])
    out2 = pl.p("reports", "cumulative.csv")
    _write_csv(out2, header, [
        [r.word, r.occurrences, r.first_last_change, r.cumulative, r.monotone]
        + [r.deltas[lab] for lab in labels]
        for r in cumul
    ])
    outputs = [out1, out2]
    for word in _list_arg(cfg.get("discovery.words")):
        table = occurrence_trajectories(battery, word, sentences)
        path = pl.p("reports", "occurrences", f"{word}.csv")
        _write_csv(
            path,
            ["sentence_index", "position", "context"] + labels + ["sense_label"],
            [
                [row.sentence_index, row.position, row.context]
                + [row.values[lab] for lab in labels] + [row.sense_label]
                for row in table.rows
            ],
        )
        outputs.append(path)
    return StageIO(
        inputs=[pl.p("store.jsonl"), pl.p("splits.json")] + _battery_inputs(pl, labels),
        outputs=outputs,
    )


def stage_attribute(pl: Pipeline, only_slice: str | None) -> StageIO:
    cfg = pl.config
    works_path = cfg.get("attribution.works")
    if not works_path:
        raise StageError("attribution.works not configured")
    works_path = cfg.resolve(works_path)
    url = cfg.get("attribution.endpoint.url")
    model_name = cfg.get("attribution.endpoint.model")
    if not url or not model_name:
        raise StageError("attribution.endpoint.url and .model are required")
    works = []
    with open(works_path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                d = json.loads(line)
                gold = d.get("gold_years") or ([d["gold_year"]] if d.get("gold_year") else [])
                works.append(WorkRef(
                    title=d["title"], author=d["author"],
                    gold_years=tuple(int(y) for y in gold)))
    client = HttpCompletionClient(
        url=url, model=model_name,
        api_key_env=cfg.get("attribution.endpoint.api_key_env"),
        temperature=cfg.get("attribution.endpoint.temperature", 0.0),
    )
    rng = cfg.get("attribution.plausible_range", [1000, 2100])
    cache = cfg.get("attribution.cache")
    atts = attribute_dates(
        works, client, plausible_range=(rng[0], rng[1]),
        cache_path=pl.p(cache) if cache else pl.p("attribution_cache.jsonl"),
        max_in_flight=cfg.get("attribution.max_in_flight", 4),
    )
    os.makedirs(pl.p("reports"), exist_ok=True)
    out = pl.p("reports", "attributions.jsonl")
    with open(out, "w", encoding="utf-8") as f:
        for a in atts:
            f.write(json.dumps(
                {"work_id": a.work_id, "title": a.title, "author": a.author,
                 "predicted_year": a.predicted_year,
                 "gold_years": list(a.gold_years)},
                sort_keys=True) + "\n")
    outputs = [out]
    if any(a.gold_years for a in atts):
        score = evaluate_attribution(
            atts,
            tolerances=cfg.get("attribution.tolerances", [0, 5, 10]),
            dq_delta=cfg.get("attribution.dq_delta"),
        )
        score_path = pl.p("reports", "attribution_score.json")
        with open(score_path, "w", encoding="utf-8") as f:
            json.dump(
                {"n": score.n, "n_predicted": score.n_predicted,
                 "accuracy": {str(t): v for t, v in score.accuracy.items()},
                 "hits": {str(t): v for t, v in score.hits.items()},
                 "disqualified": score.disqualified,
                 "dq_delta": score.dq_delta},
                f, indent=2, sort_keys=True)
            f.write("\n")
        outputs.append(score_path)
    return StageIO(inputs=[works_path], outputs=outputs)


STAGE_FNS: dict[str, Callable[[Pipeline, str | None], StageIO]] = {
    "ingest": stage_ingest,
    "slice": stage_slice,
    "split": stage_split,
    "tokenize": stage_tokenize,
    "train-teachers": stage_train_teachers,
    "distill": stage_distill,
    "eval-ppl": stage_eval_ppl,
    "eval-pairs": stage_eval_pairs,
    "build-cloze": stage_build_cloze,
    "eval-cloze": stage_eval_cloze,
    "leakage": stage_leakage,
    "discover": stage_discover,
    "attribute": stage_attribute,
}


# -- entry points ------------------------------------------------------------


def cmd_run(args) -> int:
    config = load_config(args.config)
    errs = config.validate()
    if errs:
        for e in errs:
            print(f"config error: {e}", file=sys.stderr)
        return 1
    stages = ALL_STAGES if args.stage == "all" else [args.stage]
    pl = Pipeline(config)
    try:
        with _Lock(pl.out):
            for stage in stages:
                fn = STAGE_FNS[stage]
                t0 = time.monotonic()
                # a stage is skipped when its manifest still matches: same
                # config hash, all recorded inputs and outputs hash unchanged
                mp = pl.manifest_path(stage)
                if os.path.exists(mp) and pl.up_to_date(stage, _manifest_io(mp)):
                    print(f"[{stage}] up to date, skipped")
                    continue
                io = fn(pl, args.slice)
                pl.write_manifest(stage, io, time.monotonic() - t0)
                print(f"[{stage}] done in {time.monotonic() - t0:.1f}s")
        return 0
    except (StageError, corpus_mod.CorpusError, AttributionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _manifest_io(manifest_path: str) -> StageIO:
    with open(manifest_path, "r", encoding="utf-8") as f:
        m = json.load(f)
    return StageIO(inputs=list(m.get("inputs", {})), outputs=list(m.get("outputs", {})))


def cmd_validate(args) -> int:
    config = load_config(args.config)
    errs = config.validate()
    if errs:
        for e in errs:
            print(f"config error: {e}")
        print(f"{len(errs)} problem(s) found")
        return 1
    print("config ok")
    return 0


def cmd_decode(args) -> int:
    tok = BpeTokenizer.load(args.tokenizer)
    model = ckpt_mod.load_model(args.checkpoint, expected_tokenizer_hash=tok.file_hash)
    with open(args.prefix_file, "r", encoding="utf-8") as f:
        prefixes = [line.rstrip("\n") for line in f if line.strip()]
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        out.write("prefix_index\trank\tword\tscore\n")
        for i, prefix in enumerate(prefixes):
            result = top_k_single_words(
                model, tok, prefix, k=args.k,
                beam_width=args.beam_width, max_word_tokens=args.max_word_tokens,
            )
            for c in result.completions:
                out.write(f"{i}\t{c.rank}\t{c.word}\t{c.score!r}\n")
    finally:
        if args.out:
            out.close()
    return 0


def cmd_synth(args) -> int:
    from .synthetic import SyntheticSpec, generate

    spec = SyntheticSpec(seed=args.seed, sentences_per_slice=args.sentences)
    data = generate(spec)
    os.makedirs(args.out_dir, exist_ok=True)
    docs_path = os.path.join(args.out_dir, "docs.jsonl")
    with open(docs_path, "w", encoding="utf-8") as f:
        for doc in data.documents:
            f.write(json.dumps(
                {"id": doc.id, "year": doc.year, "text": doc.text}, sort_keys=True) + "\n")
    inv_path = os.path.join(args.out_dir, "inventory.jsonl")
    with open(inv_path, "w", encoding="utf-8") as f:
        for s in data.senses:
            f.write(json.dumps(
                {"word": s.word, "sense_id": s.sense_id, "year": s.year,
                 "examples": list(s.examples),
                 "frequency_per_million": s.frequency_per_million,
                 "definition": s.definition}, sort_keys=True) + "\n")
    pairs_path = os.path.join(args.out_dir, "pairs.jsonl")
    with open(pairs_path, "w", encoding="utf-8") as f:
        for p in data.pairs:
            f.write(json.dumps(
                {"id": p.id, "good": p.good, "bad": p.bad, "subtask": p.subtask},
                sort_keys=True) + "\n")
    print(f"wrote {docs_path}, {inv_path}, {pairs_path}")
    print(f"slices: {data.slice_labels}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="chronolm",
        description="Train and probe per-period language models on a "
                    "date-sliced corpus.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    pr = sub.add_parser("run", help="run one pipeline stage, or all")
    pr.add_argument("stage", choices=STAGES + ["all"])
    pr.add_argument("--config", required=True)
    pr.add_argument("--slice", default=None, help="restrict per-slice stages to one label")
    pr.set_defaults(fn=cmd_run)

    pv = sub.add_parser("validate", help="check a config file, reporting every problem")
    pv.add_argument("--config", required=True)
    pv.set_defaults(fn=cmd_validate)

    pd = sub.add_parser("decode", help="top-k word completions for each prefix in a file")
    pd.add_argument("--checkpoint", required=True)
    pd.add_argument("--tokenizer", required=True)
    pd.add_argument("--prefix-file", required=True)
    pd.add_argument("-k", type=int, default=10)
    pd.add_argument("--beam-width", type=int, default=None)
    pd.add_argument("--max-word-tokens", type=int, default=8)
    pd.add_argument("--out", default=None)
    pd.set_defaults(fn=cmd_decode)

    ps = sub.add_parser("synth", help="generate a synthetic diachronic corpus")
    ps.add_argument("--out-dir", required=True)
    ps.add_argument("--seed", type=int, default=0)
    ps.add_argument("--sentences", type=int, default=2000,
                    help="sentences per slice")
    ps.set_defaults(fn=cmd_synth)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (StageError, corpus_mod.CorpusError, AttributionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
