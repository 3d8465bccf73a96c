"""End-to-end training: targets, schedule, optimizer, and the step loop.

The optimizer is decoupled-weight-decay Adam (torch's AdamW with its
default betas 0.9/0.999 and eps 1e-8) over two parameter groups, one for
the encoder and one for the scoring head, each with its own base learning
rate. Both follow linear warmup to the base rate, then cosine decay to
zero. Every run is deterministic for a fixed seed on a fixed platform.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import torch

from .data import InputInstance, collect_label_pool
from .errors import ConfigError, InvalidInputError, InvalidStateError, TrainingDivergedError
from .model import InstanceOutput, ModelConfig, RelationClassifier, save_checkpoint
from .prompt import SELF_LABEL, LabelPolicy, regularize_labels
from .representation import PairIndexSet
from .scorer import bce_loss_sum
from .subword import build_vocab

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Desk-scale defaults; ``configs/full_scale.json`` mirrors the large
    training profile (20k steps, 768-dim head space)."""

    encoder_lr: float = 1e-5
    head_lr: float = 1e-4
    warmup_ratio: float = 0.10
    total_steps: int = 1_000
    batch_size: int = 8
    weight_decay: float = 0.01
    seed: int = 0
    threshold: float = 0.5
    max_labels: int = 25
    drop_probability: float = 0.0
    shuffle_labels: bool = True
    pair_window: int | None = None
    vocab_min_word_count: int = 1
    checkpoint_every: int = 0
    log_every: int = 50
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self) -> None:
        if not (0.0 < self.warmup_ratio < 1.0):
            raise ConfigError(f"warmup_ratio must be in (0, 1), got {self.warmup_ratio}")
        if self.encoder_lr <= 0 or self.head_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")

    @property
    def refine(self):
        return self.model.refine

    def label_policy(self, negative_pool: set[str]) -> LabelPolicy:
        return LabelPolicy(
            max_labels=self.max_labels,
            drop_probability=self.drop_probability,
            shuffle=self.shuffle_labels,
            negative_pool=set(negative_pool),
        )

    def to_dict(self) -> dict:
        payload = dataclasses.asdict(self)
        payload["model"] = self.model.to_dict()
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        payload = dict(payload)
        model = payload.pop("model", None)
        cfg = cls(**payload)
        if model is not None:
            cfg.model = ModelConfig.from_dict(model)
        return cfg

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        with Path(path).open("r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def lr_at(step: int, cfg: TrainConfig) -> tuple[float, float]:
    """Learning rates for both groups at a schedule position.

    Linear warmup from zero over ``warmup_ratio * total_steps`` steps,
    then cosine decay to zero at ``total_steps``. Both groups share the
    multiplier.
    """
    if not (0 <= step <= cfg.total_steps):
        raise InvalidInputError(f"step {step} outside [0, {cfg.total_steps}]")
    warmup_steps = cfg.warmup_ratio * cfg.total_steps
    if step <= warmup_steps:
        multiplier = step / warmup_steps
    else:
        progress = (step - warmup_steps) / (cfg.total_steps - warmup_steps)
        multiplier = 0.5 * (1.0 + math.cos(math.pi * progress))
    return cfg.encoder_lr * multiplier, cfg.head_lr * multiplier


def make_optimizer(model: RelationClassifier, cfg: TrainConfig) -> torch.optim.AdamW:
    """AdamW with separate encoder and head parameter groups."""
    return torch.optim.AdamW(
        [
            {"params": model.encoder_parameters(), "lr": cfg.encoder_lr},
            {"params": model.head_parameters(), "lr": cfg.head_lr},
        ],
        weight_decay=cfg.weight_decay,
    )


def instance_gold_labels(instance: InputInstance) -> set[str]:
    """Gold label set for prompting; includes SELF when the instance has
    a multi-mention coreference cluster."""
    gold = instance.gold_labels()
    if instance.clusters and any(len(c) >= 2 for c in instance.clusters):
        gold = gold | {SELF_LABEL}
    return gold


def build_targets(
    instance: InputInstance, labels: list[str], pairs: PairIndexSet
) -> torch.Tensor:
    """Binary target matrix aligned with (pairs x labels).

    A cell is 1 iff the instance's gold relations contain that exact
    (head, tail, label) triple. When SELF is a candidate label, mention
    pairs sharing a gold coreference cluster are marked 1 in both
    directions. Raises InvalidStateError if a gold label is missing from
    ``labels`` (the regularization contract guarantees it survives).
    """
    label_to_col: dict[str, int] = {}
    for t, label in enumerate(labels):
        label_to_col.setdefault(label, t)
    for rel in instance.relations:
        if rel.label not in label_to_col:
            raise InvalidStateError(
                f"gold label {rel.label!r} missing from candidate labels"
            )

    targets = torch.zeros((len(pairs), len(labels)), dtype=torch.float32)
    gold = instance.gold_triples()
    same_cluster: set[tuple[int, int]] = set()
    if SELF_LABEL in label_to_col and instance.clusters:
        for cluster in instance.clusters:
            for u in cluster:
                for v in cluster:
                    if u != v:
                        same_cluster.add((u, v))
    for p, (head, tail) in enumerate(pairs):
        for label, t in label_to_col.items():
            if (head, tail, label) in gold:
                targets[p, t] = 1.0
        if same_cluster and (head, tail) in same_cluster:
            targets[p, label_to_col[SELF_LABEL]] = 1.0
    return targets


@dataclass
class TrainState:
    model: RelationClassifier
    optimizer: torch.optim.Optimizer
    policy: LabelPolicy
    step: int = 0


def batch_loss(
    model: RelationClassifier,
    batch: list[InputInstance],
    labels_per_instance: list[list[str]],
    pair_window: int | None = None,
) -> tuple[torch.Tensor, list[InstanceOutput]]:
    """Mean BCE over every scored cell in the batch."""
    if not batch:
        raise InvalidInputError("batch must be non-empty")
    outputs = model.score_batch(batch, labels_per_instance, pair_window)
    total = None
    cells = 0
    for out in outputs:
        targets = build_targets(out.view, out.labels, out.matrix.pairs)
        part, n = bce_loss_sum(out.matrix, targets)
        total = part if total is None else total + part
        cells += n
    assert total is not None
    loss = total / cells if cells > 0 else total
    return loss, outputs


def train_step(
    batch: list[InputInstance],
    state: TrainState,
    cfg: TrainConfig,
    rng: random.Random,
) -> tuple[TrainState, float]:
    """One optimization step: regularize prompts, forward, backward, update.

    Mutates and returns ``state``. Aborts without updating on a
    non-finite loss.
    """
    if not batch:
        raise InvalidInputError("batch must be non-empty")
    labels_per_instance = [
        regularize_labels(instance_gold_labels(instance), state.policy, rng)
        for instance in batch
    ]
    state.model.train()
    loss, _ = batch_loss(state.model, batch, labels_per_instance, cfg.pair_window)
    if not torch.isfinite(loss):
        raise TrainingDivergedError(
            f"non-finite loss {loss.item()!r} at step {state.step + 1}; "
            f"batch doc_ids={[inst.doc_id for inst in batch]}"
        )
    state.optimizer.zero_grad()
    loss.backward()
    state.step += 1
    encoder_lr, head_lr = lr_at(state.step, cfg)
    state.optimizer.param_groups[0]["lr"] = encoder_lr
    state.optimizer.param_groups[1]["lr"] = head_lr
    state.optimizer.step()
    return state, float(loss.item())


@dataclass
class TrainResult:
    model: RelationClassifier
    losses: list[float]
    out_dir: Path | None
    final_checkpoint: Path | None


def build_model_for_dataset(
    dataset: list[InputInstance],
    cfg: TrainConfig,
    negative_pool: set[str] | None = None,
    vocab_words: Iterable[str] | None = None,
) -> tuple[RelationClassifier, set[str]]:
    """Seeded model construction with a vocabulary covering the dataset.

    ``vocab_words`` extends the subword inventory (like shipping a larger
    pretrained tokenizer); the extra words receive no training signal
    unless they occur in the data.
    """
    pool = set(negative_pool) if negative_pool is not None else collect_label_pool(dataset)
    label_sources = set(pool)
    for instance in dataset:
        label_sources |= instance_gold_labels(instance)
    if vocab_words is not None:
        label_sources |= set(vocab_words)
    vocab = build_vocab(
        (instance.tokens for instance in dataset),
        sorted(label_sources),
        min_word_count=cfg.vocab_min_word_count,
    )
    torch.manual_seed(cfg.seed)
    model_cfg = ModelConfig.from_dict(cfg.model.to_dict())
    model_cfg.encoder.vocab_size = 0  # re-derived from the vocabulary
    model = RelationClassifier(model_cfg, vocab)
    return model, pool


def train(
    dataset: list[InputInstance],
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    negative_pool: set[str] | None = None,
    vocab_words: Iterable[str] | None = None,
) -> TrainResult:
    """Train a fresh model for ``cfg.total_steps`` steps over a dataset.

    Writes, when ``out_dir`` is given: the effective config, a CSV metrics
    log (step, loss, lrs), periodic checkpoints, and ``model.ckpt``.
    """
    if not dataset:
        raise InvalidInputError("training dataset is empty")
    model, pool = build_model_for_dataset(dataset, cfg, negative_pool, vocab_words)
    optimizer = make_optimizer(model, cfg)
    state = TrainState(model=model, optimizer=optimizer, policy=cfg.label_policy(pool))

    order_rng = random.Random(f"{cfg.seed}-order")
    label_rng = random.Random(f"{cfg.seed}-labels")

    out_path: Path | None = None
    metrics_writer = None
    metrics_fh = None
    if out_dir is not None:
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)
        with (out_path / "config.json").open("w", encoding="utf-8") as fh:
            json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        metrics_fh = (out_path / "metrics.csv").open("w", encoding="utf-8", newline="")
        metrics_writer = csv.writer(metrics_fh)
        metrics_writer.writerow(["step", "loss", "encoder_lr", "head_lr"])

    losses: list[float] = []
    order: list[int] = []
    try:
        while state.step < cfg.total_steps:
            while len(order) < cfg.batch_size:
                refill = list(range(len(dataset)))
                order_rng.shuffle(refill)
                order.extend(refill)
            batch = [dataset[i] for i in order[: cfg.batch_size]]
            del order[: cfg.batch_size]

            state, loss = train_step(batch, state, cfg, label_rng)
            losses.append(loss)
            if metrics_writer is not None:
                enc_lr, head_lr = lr_at(state.step, cfg)
                metrics_writer.writerow([state.step, f"{loss:.6f}", enc_lr, head_lr])
            if state.step % max(cfg.log_every, 1) == 0:
                log.info("step %d/%d loss %.4f", state.step, cfg.total_steps, loss)
            if (
                out_path is not None
                and cfg.checkpoint_every > 0
                and state.step % cfg.checkpoint_every == 0
                and state.step < cfg.total_steps
            ):
                save_checkpoint(
                    model,
                    out_path / f"step-{state.step:06d}.ckpt",
                    extra={"step": state.step, "seed": cfg.seed},
                )
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    final_ckpt = None
    if out_path is not None:
        final_ckpt = out_path / "model.ckpt"
        save_checkpoint(
            model,
            final_ckpt,
            extra={"step": state.step, "seed": cfg.seed, "config": cfg.to_dict()},
        )
    return TrainResult(model=model, losses=losses, out_dir=out_path, final_checkpoint=final_ckpt)
