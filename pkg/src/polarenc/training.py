"""Masking plans, losses, optimizer, schedule, and the training loops.

Pre-training couples two reconstruction objectives: masked-token recovery
(30% of real tokens, 80/10/10 mask/random/keep) and recovery of the 1D
sequence position for tokens whose position embedding is hidden (an
independent 30% draw). Runs are bitwise reproducible for a fixed seed and
thread count: every random draw is keyed by (seed, purpose, step, ...), so
resuming from a checkpoint replays nothing.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data, model as M, tensor as T
from .data import Batch, Document, EncodedDoc, IGNORE_INDEX, Vocab
from .model import ModelConfig, ParameterStore
from .tensor import Tape, Tensor, backward

MASK_TOKEN, RANDOM_TOKEN, KEEP_TOKEN = 0, 1, 2


class TrainingAbort(RuntimeError):
    """Raised when a run hits a non-finite loss or gradient."""


@dataclass
class MaskingPlan:
    mlm_positions: np.ndarray  # int indices into the encoded sequence
    mlm_replacement: np.ndarray  # per-position code: 0 mask, 1 random, 2 keep
    lop_positions: np.ndarray


def make_masking_plan(token_count: int, special_mask: np.ndarray, seed) -> MaskingPlan:
    """Independent 30% draws for token masking and position hiding.

    Special (and any padding) positions are excluded; the number of chosen
    positions is exactly round(0.30 * n_maskable) for each set.
    """
    if token_count < 1:
        raise ValueError("token_count must be >= 1")
    special_mask = np.asarray(special_mask, dtype=bool)[:token_count]
    maskable = np.flatnonzero(~special_mask)
    k = round(0.30 * len(maskable))
    key = seed if isinstance(seed, tuple) else (seed,)
    rng = T.make_rng(*key, "plan")
    if k == 0:
        empty = np.array([], dtype=np.int64)
        return MaskingPlan(empty, empty.copy(), empty.copy())
    mlm = np.sort(rng.choice(maskable, size=k, replace=False))
    lop = np.sort(rng.choice(maskable, size=k, replace=False))
    draws = rng.random(k)
    repl = np.where(draws < 0.8, MASK_TOKEN, np.where(draws < 0.9, RANDOM_TOKEN, KEEP_TOKEN))
    return MaskingPlan(mlm.astype(np.int64), repl.astype(np.int64), lop.astype(np.int64))


def apply_mlm_corruption(
    token_ids: np.ndarray, plan: MaskingPlan, vocab: Vocab, seed
) -> tuple[np.ndarray, np.ndarray]:
    """Corrupted input ids plus reconstruction targets (IGNORE elsewhere)."""
    ids = np.asarray(token_ids, dtype=np.int64).copy()
    targets = np.full(ids.shape, IGNORE_INDEX, dtype=np.int64)
    if len(plan.mlm_positions) == 0:
        return ids, targets
    targets[plan.mlm_positions] = ids[plan.mlm_positions]
    key = seed if isinstance(seed, tuple) else (seed,)
    rng = T.make_rng(*key, "corrupt")
    for pos, code in zip(plan.mlm_positions, plan.mlm_replacement):
        if code == MASK_TOKEN:
            ids[pos] = data.MASK
        elif code == RANDOM_TOKEN:
            ids[pos] = int(rng.integers(vocab.n_special, vocab.size))
    return ids, targets


def apply_lop_masking(
    position_indices: np.ndarray, plan: MaskingPlan, masked_pos_index: int
) -> tuple[np.ndarray, np.ndarray]:
    """Replace chosen position indices by the hidden-position row; targets
    hold the true index there and IGNORE elsewhere."""
    pos = np.asarray(position_indices, dtype=np.int64).copy()
    targets = np.full(pos.shape, IGNORE_INDEX, dtype=np.int64)
    if len(plan.lop_positions):
        targets[plan.lop_positions] = pos[plan.lop_positions]
        pos[plan.lop_positions] = masked_pos_index
    return pos, targets


def build_pretrain_batch(
    items: Sequence[EncodedDoc],
    doc_indices: Sequence[int],
    vocab: Vocab,
    cfg: ModelConfig,
    seed: int,
    step: int,
) -> Batch:
    toks, poss, mlm_ts, lop_ts = [], [], [], []
    for it, idx in zip(items, doc_indices):
        plan = make_masking_plan(it.n, it.special, (seed, "mask", step, idx))
        ids, mlm_t = apply_mlm_corruption(it.token_ids, plan, vocab, (seed, "mask", step, idx))
        pos, lop_t = apply_lop_masking(it.pos_ids, plan, cfg.masked_pos_index)
        toks.append(ids)
        poss.append(pos)
        mlm_ts.append(mlm_t)
        lop_ts.append(lop_t)
    return data.collate(items, token_ids=toks, pos_ids=poss, mlm_targets=mlm_ts, lop_targets=lop_ts)


def pretrain_loss(
    batch: Batch,
    cfg: ModelConfig,
    store: ParameterStore,
    rng: Optional[np.random.Generator] = None,
    train: bool = False,
) -> tuple[Tensor, dict]:
    """Equal-weight sum of the token and position reconstruction losses."""
    hidden = M.encoder_forward(batch, cfg, store, rng=rng, train=train)
    b, n, _ = hidden.shape
    flat = T.reshape(hidden, (b * n, cfg.d_model))
    mlm_logits = M.mlm_head(flat, store, cfg)
    mlm_ce = T.cross_entropy(mlm_logits, batch.mlm_targets.reshape(-1), IGNORE_INDEX)
    lop_logits = M.lop_head(flat, store)
    lop_ce = T.cross_entropy(lop_logits, batch.lop_targets.reshape(-1), IGNORE_INDEX)
    loss = T.add(mlm_ce, lop_ce)
    return loss, {"mlm": mlm_ce.item(), "lop": lop_ce.item(), "loss": loss.item()}


# ---------------------------------------------------------------------------
# optimizer and schedule


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


def init_optimizer(store: ParameterStore, weight_decay: float = 0.01) -> OptimizerState:
    return OptimizerState(
        m={n: np.zeros_like(t.values) for n, t in store.items()},
        v={n: np.zeros_like(t.values) for n, t in store.items()},
        weight_decay=weight_decay,
    )


def clip_gradients(store: ParameterStore, max_norm: float = 1.0) -> float:
    total = 0.0
    for _, t in store.items():
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for _, t in store.items():
            if t.grad is not None:
                t.grad *= scale
    return norm


def adamw_step(store: ParameterStore, state: OptimizerState, lr: float) -> None:
    """Bias-corrected moment update with decoupled weight decay.

    Parameters without a gradient this step are left untouched.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in store.items():
        g = p.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise TrainingAbort(f"non-finite gradient in parameter {name}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p.values
        p.values -= lr * update


@dataclass(frozen=True)
class Schedule:
    target_lr: float
    total_steps: int
    warmup_fraction: float = 0.05

    def __post_init__(self) -> None:
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must be in (0, 1)")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


def lr_at(step: float, schedule: Schedule) -> float:
    """Linear warmup to target_lr, then cosine decay to exactly 0."""
    if step < 0 or step > schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    w = schedule.warmup_fraction * schedule.total_steps
    if step <= w:
        return schedule.target_lr * (step / w)
    phase = (step - w) / (schedule.total_steps - w)
    return schedule.target_lr * 0.5 * (1.0 + math.cos(math.pi * phase))


# ---------------------------------------------------------------------------
# run configs (flat key = value files)


@dataclass
class PretrainConfig:
    seed: int = 0
    total_steps: int = 500
    batch_size: int = 16
    target_lr: float = 1e-4
    warmup_fraction: float = 0.05
    grad_clip: float = 1.0
    weight_decay: float = 0.01
    checkpoint_every: int = 250
    log_every: int = 20
    preset: str = "desk"
    min_freq: int = 1


@dataclass
class FinetuneConfig:
    seed: int = 0
    epochs: int = 30
    batch_size: int = 16
    lr: float = 5e-5
    grad_clip: float = 1.0
    weight_decay: float = 0.01
    preset: str = "desk"


def run_config_to_text(cfg) -> str:
    return "\n".join(f"{f.name} = {getattr(cfg, f.name)}" for f in fields(cfg)) + "\n"


def run_config_from_text(text: str, cls):
    known = {f.name: f.type for f in fields(cls)}
    pytypes = {"int": int, "float": float, "str": str}
    kwargs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or key not in known:
            raise ValueError(f"run config line {lineno}: unknown or malformed entry {line!r}")
        kwargs[key] = pytypes[known[key]](value.strip())
    return cls(**kwargs)


# ---------------------------------------------------------------------------
# checkpoint bundles


@dataclass
class CheckpointBundle:
    store: ParameterStore
    cfg: ModelConfig
    vocab: Optional[Vocab]
    step: int
    manifest: dict
    optimizer: Optional[OptimizerState] = None


def save_training_checkpoint(
    path,
    store: ParameterStore,
    cfg: ModelConfig,
    seed: int,
    step: int,
    vocab: Optional[Vocab] = None,
    optimizer: Optional[OptimizerState] = None,
    extra: Optional[dict] = None,
) -> None:
    arrays = dict(store.as_arrays())
    manifest = {
        "format": "polarenc-checkpoint-v1",
        "config": M.config_to_text(cfg),
        "config_hash": M.config_hash(cfg),
        "seed": seed,
        "step": step,
        "rng": T.RNG_ALGORITHM,
    }
    if vocab is not None:
        manifest["vocab"] = vocab.to_list()
    if optimizer is not None:
        for name in store.names():
            arrays[f"opt.m.{name}"] = optimizer.m[name]
            arrays[f"opt.v.{name}"] = optimizer.v[name]
        manifest["optimizer"] = {
            "step": optimizer.step,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
            "weight_decay": optimizer.weight_decay,
        }
    if extra:
        manifest.update(extra)
    T.save_checkpoint(path, arrays, manifest)


def load_training_checkpoint(path) -> CheckpointBundle:
    arrays, manifest = T.load_checkpoint(path)
    cfg = M.config_from_text(manifest["config"])
    params = {
        name: Tensor(arr, requires_grad=True)
        for name, arr in arrays.items()
        if not name.startswith("opt.")
    }
    store = ParameterStore(params)
    optimizer = None
    if "optimizer" in manifest:
        o = manifest["optimizer"]
        optimizer = OptimizerState(
            m={n: arrays[f"opt.m.{n}"].copy() for n in store.names()},
            v={n: arrays[f"opt.v.{n}"].copy() for n in store.names()},
            step=o["step"], beta1=o["beta1"], beta2=o["beta2"],
            eps=o["eps"], weight_decay=o["weight_decay"],
        )
    vocab = Vocab.from_list(manifest["vocab"]) if "vocab" in manifest else None
    return CheckpointBundle(store, cfg, vocab, manifest.get("step", 0), manifest, optimizer)


# ---------------------------------------------------------------------------
# pre-training loop


@dataclass
class PretrainResult:
    store: ParameterStore
    vocab: Vocab
    cfg: ModelConfig
    metrics: list[dict]
    checkpoint_path: Optional[Path] = None


def _epoch_order(n_docs: int, seed: int, epoch: int) -> np.ndarray:
    return T.make_rng(seed, "order", epoch).permutation(n_docs)


def _batch_indices(n_docs: int, batch_size: int, step: int, seed: int) -> list[int]:
    steps_per_epoch = max(1, math.ceil(n_docs / batch_size))
    epoch = step // steps_per_epoch
    slot = step % steps_per_epoch
    order = _epoch_order(n_docs, seed, epoch)
    lo = slot * batch_size
    return [int(i) for i in order[lo : lo + batch_size]]


def run_pretraining(
    corpus: Sequence[Document],
    cfg: ModelConfig,
    run_cfg: PretrainConfig,
    out_dir: Optional[Path] = None,
    vocab: Optional[Vocab] = None,
    resume_from: Optional[Path] = None,
    manifest_hash: str = "",
) -> PretrainResult:
    """Deterministic pre-training; emits per-step metrics and checkpoints."""
    if not corpus:
        raise ValueError("pre-training corpus is empty")
    if vocab is None:
        vocab = data.build_vocab(corpus, run_cfg.min_freq)
    if cfg.vocab_size != vocab.size:
        raise ValueError(f"config vocab_size {cfg.vocab_size} != vocabulary size {vocab.size}")
    encoded = [data.encode(doc, vocab, cfg) for doc in corpus]

    start_step = 0
    if resume_from is not None:
        bundle = load_training_checkpoint(resume_from)
        if bundle.manifest["config_hash"] != M.config_hash(cfg):
            raise ValueError("checkpoint config does not match the requested config")
        store, opt, start_step = bundle.store, bundle.optimizer, bundle.step
        if opt is None:
            raise ValueError("checkpoint has no optimizer state; cannot resume")
    else:
        store = M.init_params(cfg, run_cfg.seed)
        opt = init_optimizer(store, run_cfg.weight_decay)

    schedule = Schedule(run_cfg.target_lr, run_cfg.total_steps, run_cfg.warmup_fraction)
    metrics: list[dict] = []
    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "metrics.log"
        mode = "a" if resume_from is not None else "w"
        with open(log_path, mode) as fh:
            if mode == "w":
                fh.write(f"# manifest {manifest_hash}\n")

    def save(step: int, name: str) -> Path:
        p = out_dir / name
        save_training_checkpoint(
            p, store, cfg, run_cfg.seed, step, vocab=vocab, optimizer=opt,
            extra={"run_manifest": manifest_hash},
        )
        return p

    t0 = time.monotonic()
    for step in range(start_step, run_cfg.total_steps):
        idxs = _batch_indices(len(encoded), run_cfg.batch_size, step, run_cfg.seed)
        batch = build_pretrain_batch(
            [encoded[i] for i in idxs], idxs, vocab, cfg, run_cfg.seed, step
        )
        rng = T.make_rng(run_cfg.seed, "dropout", step)
        store.zero_grads()
        with Tape() as tape:
            loss, comps = pretrain_loss(batch, cfg, store, rng=rng, train=True)
        if not math.isfinite(comps["loss"]):
            raise TrainingAbort(f"non-finite loss at step {step}: {comps}")
        backward(loss, tape)
        clip_gradients(store, run_cfg.grad_clip)
        lr = lr_at(step + 1, schedule)
        adamw_step(store, opt, lr)
        row = {"step": step + 1, **comps, "lr": lr, "wall": time.monotonic() - t0}
        metrics.append(row)
        if log_path is not None and ((step + 1) % run_cfg.log_every == 0 or step + 1 == run_cfg.total_steps):
            with open(log_path, "a") as fh:
                fh.write(
                    f"step={row['step']} loss={row['loss']:.6f} mlm={row['mlm']:.6f} "
                    f"lop={row['lop']:.6f} lr={row['lr']:.3e} wall={row['wall']:.2f}\n"
                )
        if out_dir is not None and (step + 1) % run_cfg.checkpoint_every == 0 and step + 1 < run_cfg.total_steps:
            save(step + 1, f"checkpoint_step{step + 1:06d}.zip")
    ckpt = save(run_cfg.total_steps, "checkpoint_final.zip") if out_dir is not None else None
    return PretrainResult(store, vocab, cfg, metrics, ckpt)


def evaluate_mlm_loss(
    encoded: Sequence[EncodedDoc], vocab: Vocab, cfg: ModelConfig,
    store: ParameterStore, seed: int, batch_size: int = 16,
) -> float:
    """Deterministic masked-token loss over a corpus (one fixed masking)."""
    total, count = 0.0, 0
    for lo in range(0, len(encoded), batch_size):
        items = encoded[lo : lo + batch_size]
        batch = build_pretrain_batch(items, range(lo, lo + len(items)), vocab, cfg, seed, step=0)
        hidden = M.encoder_forward(batch, cfg, store)
        b, n, _ = hidden.shape
        logits = M.mlm_head(T.reshape(hidden, (b * n, cfg.d_model)), store, cfg)
        targets = batch.mlm_targets.reshape(-1)
        ce = T.cross_entropy(logits, targets, IGNORE_INDEX)
        k = int((targets != IGNORE_INDEX).sum())
        total += ce.item() * k
        count += k
    return total / max(count, 1)


def evaluate_lop_accuracy(
    encoded: Sequence[EncodedDoc], vocab: Vocab, cfg: ModelConfig,
    store: ParameterStore, seed: int, batch_size: int = 16,
) -> float:
    """Fraction of hidden positions whose index is recovered exactly."""
    hit, count = 0, 0
    for lo in range(0, len(encoded), batch_size):
        items = encoded[lo : lo + batch_size]
        batch = build_pretrain_batch(items, range(lo, lo + len(items)), vocab, cfg, seed, step=0)
        hidden = M.encoder_forward(batch, cfg, store)
        logits = M.lop_head(hidden, store).values
        pred = logits.argmax(axis=-1)
        valid = batch.lop_targets != IGNORE_INDEX
        hit += int((pred[valid] == batch.lop_targets[valid]).sum())
        count += int(valid.sum())
    return hit / max(count, 1)


# ---------------------------------------------------------------------------
# fine-tuning


@dataclass
class FinetuneResult:
    store: ParameterStore
    labels: list[str]
    per_epoch: list[tuple[float, float, float]]
    final: tuple[float, float, float]
    seed: int

    @property
    def final_f1(self) -> float:
        return self.final[2]


def label_inventory(docs: Sequence[Document]) -> list[str]:
    tags = {tag for doc in docs for tag in (doc.labels or [])}
    tags.discard("O")
    return ["O"] + sorted(tags)


def predict_tags(
    encoded: Sequence[EncodedDoc], cfg: ModelConfig, store: ParameterStore,
    labels: Sequence[str], batch_size: int = 16,
) -> list[list[str]]:
    out: list[list[str]] = []
    for lo in range(0, len(encoded), batch_size):
        items = encoded[lo : lo + batch_size]
        batch = data.collate(items)
        hidden = M.encoder_forward(batch, cfg, store)
        logits = M.ner_head(hidden, store, cfg).values
        pred = logits.argmax(axis=-1)
        for b, it in enumerate(items):
            if it.n_source_tokens > it.n - 2:
                raise ValueError(f"document {it.doc_id} was truncated; cannot align predictions")
            out.append([labels[pred[b, i + 1]] for i in range(it.n - 2)])
    return out


def run_finetuning(
    dataset: tuple[Sequence[Document], Sequence[Document]],
    pretrained: CheckpointBundle,
    run_cfg: FinetuneConfig,
) -> FinetuneResult:
    """Fixed-learning-rate NER fine-tuning with per-epoch eval F1."""
    train_docs, eval_docs = dataset
    if not train_docs:
        raise ValueError("fine-tuning train split is empty")
    labels = label_inventory(train_docs)
    label_set = set(labels)
    for doc in eval_docs:
        for tag in doc.labels or []:
            if tag not in label_set:
                raise ValueError(f"label {tag!r} in eval document {doc.id} never occurs in train")
    label_to_id = {t: i for i, t in enumerate(labels)}
    cfg, vocab = pretrained.cfg, pretrained.vocab
    if vocab is None:
        raise ValueError("checkpoint carries no vocabulary")
    store = pretrained.store.clone()
    M.add_ner_params(store, cfg, len(labels), run_cfg.seed)
    opt = init_optimizer(store, run_cfg.weight_decay)

    enc_train = [data.encode(d, vocab, cfg, label_to_id) for d in train_docs]
    enc_eval = [data.encode(d, vocab, cfg) for d in eval_docs]
    gold = [list(d.labels) for d in eval_docs]
    ids = [d.id for d in eval_docs]

    per_epoch: list[tuple[float, float, float]] = []
    steps_per_epoch = math.ceil(len(enc_train) / run_cfg.batch_size)
    for epoch in range(run_cfg.epochs):
        order = T.make_rng(run_cfg.seed, "ft_order", epoch).permutation(len(enc_train))
        for slot in range(steps_per_epoch):
            items = [enc_train[int(i)] for i in order[slot * run_cfg.batch_size : (slot + 1) * run_cfg.batch_size]]
            if not items:
                continue
            batch = data.collate(items, with_labels=True)
            rng = T.make_rng(run_cfg.seed, "ft_dropout", epoch, slot)
            store.zero_grads()
            with Tape() as tape:
                hidden = M.encoder_forward(batch, cfg, store, rng=rng, train=True)
                b, n, _ = hidden.shape
                logits = M.ner_head(T.reshape(hidden, (b * n, cfg.d_model)), store, cfg, rng=rng, train=True)
                loss = T.cross_entropy(logits, batch.ner_targets.reshape(-1), IGNORE_INDEX)
            if not math.isfinite(loss.item()):
                raise TrainingAbort(f"non-finite fine-tuning loss at epoch {epoch}")
            backward(loss, tape)
            clip_gradients(store, run_cfg.grad_clip)
            adamw_step(store, opt, run_cfg.lr)
        pred = predict_tags(enc_eval, cfg, store, labels, run_cfg.batch_size)
        per_epoch.append(data.entity_f1(pred, gold, ids))
    return FinetuneResult(store, labels, per_epoch, per_epoch[-1], run_cfg.seed)


# ---------------------------------------------------------------------------
# ablation harness


@dataclass
class AblationTable:
    columns: list[str]
    rows: list[tuple[str, list[float]]]  # (dataset name, f1 per column)

    def with_average(self) -> "AblationTable":
        if any(name == "Avg" for name, _ in self.rows):
            return self
        avg = [float(np.mean([r[c] for _, r in self.rows])) for c in range(len(self.columns))]
        return AblationTable(self.columns, self.rows + [("Avg", avg)])

    def to_text(self) -> str:
        width = max(len(name) for name, _ in self.rows + [("dataset", [])])
        header = " ".join([f"{'dataset':<{width}}"] + [f"{c:>12}" for c in self.columns])
        lines = [header]
        for name, vals in self.rows:
            lines.append(" ".join([f"{name:<{width}}"] + [f"{v * 100:12.2f}" for v in vals]))
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"columns": self.columns, "rows": [(n, v) for n, v in self.rows]}


VARIANTS_2D = (("w 2D-Pos", {"use_abs_2d": True}), ("w/o 2D-Pos", {"use_abs_2d": False}))
VARIANTS_BIAS = (
    ("polar", {"bias_mode": "polar"}),
    ("cartesian", {"bias_mode": "cartesian"}),
    ("none", {"bias_mode": "none"}),
)


def adapt_pretrained(pretrained: CheckpointBundle, cfg: ModelConfig, seed: int) -> CheckpointBundle:
    """Re-key a checkpoint onto a config variant: matching parameters are
    copied, parameters the variant does not have are dropped, and newly
    required ones are freshly initialized."""
    fresh = M.init_params(cfg, seed)
    for name, t in fresh.items():
        if name in pretrained.store and pretrained.store[name].shape == t.shape:
            t.values[...] = pretrained.store[name].values
    return CheckpointBundle(fresh, cfg, pretrained.vocab, 0, dict(pretrained.manifest))


def run_ablation(
    datasets: dict[str, tuple[Sequence[Document], Sequence[Document]]],
    pretrained: CheckpointBundle,
    run_cfg: FinetuneConfig,
    variants: Sequence[tuple[str, dict]] = VARIANTS_2D,
    seeds: Sequence[int] = (0, 1, 2),
) -> AblationTable:
    """Fine-tune one model per (variant, seed) from a shared starting point
    and tabulate mean eval F1 per dataset, plus an Avg row."""
    columns = [name for name, _ in variants]
    rows = []
    for ds_name, dataset in datasets.items():
        vals = []
        for _, overrides in variants:
            cfg = replace(pretrained.cfg, **overrides)
            base = adapt_pretrained(pretrained, cfg, seed=0)
            f1s = [
                run_finetuning(dataset, base, replace(run_cfg, seed=s)).final_f1
                for s in seeds
            ]
            vals.append(float(np.mean(f1s)))
        rows.append((ds_name, vals))
    return AblationTable(columns, rows).with_average()
