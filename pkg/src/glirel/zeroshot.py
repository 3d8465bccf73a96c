"""Zero-shot splits, macro metrics, repeated experiments, and throughput.

A split holds out ``m`` relation labels: any instance mentioning one goes
to the test side (seen-label triples stripped from its gold), everything
else trains. Metrics are macro precision/recall/F1 over the unseen label
set on exact (head, tail, label) triple matches, with the 0/0 convention
mapped to zero.
"""
from __future__ import annotations

import hashlib
import json
import random
import subprocess
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .data import InputInstance, collect_label_pool
from .errors import InvalidInputError, InvalidStateError
from .model import RelationClassifier
from .scorer import PredictionSet
from .training import TrainConfig, train

Triple = tuple[int, int, str]


@dataclass
class ZeroShotSplit:
    m: int
    seed: int
    unseen_labels: set[str]
    seen_labels: set[str]
    train_instances: list[InputInstance]
    test_instances: list[InputInstance]


def make_split(dataset: Sequence[InputInstance], m: int, seed: int) -> ZeroShotSplit:
    """Hold out ``m`` randomly chosen labels as unseen; deterministic per seed.

    Instances carrying any unseen label are routed to test with their
    seen-label triples removed, so every test gold label is unseen and no
    train instance mentions an unseen label.
    """
    all_labels = sorted(collect_label_pool(dataset))
    if m < 1:
        raise InvalidInputError(f"m must be positive, got {m}")
    if m >= len(all_labels):
        raise InvalidInputError(
            f"m={m} must be smaller than the label inventory ({len(all_labels)})"
        )
    rng = random.Random(seed)
    unseen = set(rng.sample(all_labels, m))
    seen = set(all_labels) - unseen

    train_instances: list[InputInstance] = []
    test_instances: list[InputInstance] = []
    for instance in dataset:
        labels = instance.gold_labels()
        if labels & unseen:
            kept = [rel for rel in instance.relations if rel.label in unseen]
            test_instances.append(
                InputInstance(
                    tokens=list(instance.tokens),
                    entities=list(instance.entities),
                    relations=kept,
                    doc_id=instance.doc_id,
                    clusters=instance.clusters,
                )
            )
        else:
            train_instances.append(instance)

    split = ZeroShotSplit(
        m=m,
        seed=seed,
        unseen_labels=unseen,
        seen_labels=seen,
        train_instances=train_instances,
        test_instances=test_instances,
    )
    validate_split(split)
    return split


def validate_split(split: ZeroShotSplit) -> None:
    """Executable leakage check; raises on any violation."""
    if split.seen_labels & split.unseen_labels:
        raise InvalidStateError("seen and unseen label sets overlap")
    for instance in split.train_instances:
        leaked = instance.gold_labels() & split.unseen_labels
        if leaked:
            raise InvalidStateError(
                f"train instance {instance.doc_id!r} mentions unseen labels {sorted(leaked)}"
            )
    for instance in split.test_instances:
        stray = instance.gold_labels() - split.unseen_labels
        if stray:
            raise InvalidStateError(
                f"test instance {instance.doc_id!r} carries seen labels {sorted(stray)}"
            )


@dataclass
class MacroMetrics:
    precision: float
    recall: float
    f1: float

    def to_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1}


def macro_prf1(
    predictions: Sequence[set[Triple] | PredictionSet],
    golds: Sequence[set[Triple] | InputInstance],
    label_universe: Sequence[str],
) -> MacroMetrics:
    """Macro-averaged P/R/F1 over a label universe, on exact triple matches.

    Per label, 0/0 counts as zero for precision, recall, and F1; labels
    with neither gold nor predicted triples therefore contribute zeros.
    """
    universe = list(dict.fromkeys(label_universe))
    if not universe:
        raise InvalidInputError("label universe must be non-empty")
    if len(predictions) != len(golds):
        raise InvalidInputError(
            f"{len(predictions)} prediction sets for {len(golds)} gold sets"
        )
    tp = {label: 0 for label in universe}
    fp = {label: 0 for label in universe}
    fn = {label: 0 for label in universe}
    for pred, gold in zip(predictions, golds):
        pred_triples = pred.triples() if isinstance(pred, PredictionSet) else set(pred)
        gold_triples = gold.gold_triples() if isinstance(gold, InputInstance) else set(gold)
        for head, tail, label in pred_triples:
            if label not in tp:
                continue
            if (head, tail, label) in gold_triples:
                tp[label] += 1
            else:
                fp[label] += 1
        for head, tail, label in gold_triples:
            if label in tp and (head, tail, label) not in pred_triples:
                fn[label] += 1

    precisions, recalls, f1s = [], [], []
    for label in universe:
        p = tp[label] / (tp[label] + fp[label]) if tp[label] + fp[label] else 0.0
        r = tp[label] / (tp[label] + fn[label]) if tp[label] + fn[label] else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        precisions.append(p)
        recalls.append(r)
        f1s.append(f)
    n = len(universe)
    return MacroMetrics(
        precision=sum(precisions) / n,
        recall=sum(recalls) / n,
        f1=sum(f1s) / n,
    )


def uniform_random_triples(
    instances: Sequence[InputInstance],
    label_universe: Sequence[str],
    rng: random.Random,
) -> list[set[Triple]]:
    """Baseline decoder: a uniformly random label for every ordered pair."""
    universe = sorted(label_universe)
    out: list[set[Triple]] = []
    for instance in instances:
        triples: set[Triple] = set()
        e = len(instance.entities)
        for u in range(e):
            for v in range(e):
                if u != v:
                    triples.add((u, v, rng.choice(universe)))
        out.append(triples)
    return out


@dataclass
class SeedResult:
    seed: int
    metrics: MacroMetrics
    num_train: int
    num_test: int
    unseen_labels: list[str]


@dataclass
class ExperimentResult:
    m: int
    per_seed: list[SeedResult]
    mean: MacroMetrics
    config: TrainConfig
    config_hash: str
    git_revision: str | None

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "config_hash": self.config_hash,
            "git_revision": self.git_revision,
            "mean": self.mean.to_dict(),
            "per_seed": [
                {
                    "seed": row.seed,
                    "num_train": row.num_train,
                    "num_test": row.num_test,
                    "unseen_labels": row.unseen_labels,
                    **row.metrics.to_dict(),
                }
                for row in self.per_seed
            ],
            "config": self.config.to_dict(),
        }

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    def save_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            fh.write("seed,precision,recall,f1\n")
            for row in self.per_seed:
                fh.write(
                    f"{row.seed},{row.metrics.precision:.6f},"
                    f"{row.metrics.recall:.6f},{row.metrics.f1:.6f}\n"
                )
            fh.write(
                f"mean,{self.mean.precision:.6f},{self.mean.recall:.6f},{self.mean.f1:.6f}\n"
            )


def config_hash(cfg: TrainConfig) -> str:
    digest = hashlib.sha256(
        json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    )
    return digest.hexdigest()[:16]


def git_revision() -> str | None:
    try:
        proc = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            capture_output=True,
            text=True,
            timeout=5,
            check=False,
        )
    except OSError:
        return None
    return proc.stdout.strip() or None if proc.returncode == 0 else None


def run_experiment(
    dataset: Sequence[InputInstance],
    m: int,
    num_seeds: int = 5,
    cfg: TrainConfig | None = None,
    force_choice: bool = False,
    negative_pool: Sequence[str] | None = None,
    vocab_words: Sequence[str] | None = None,
) -> ExperimentResult:
    """Train and evaluate one model per random unseen-label selection.

    Each repetition draws its own split (seed ``cfg.seed + i``), trains
    from scratch on the train side, and evaluates on the test side with
    the unseen labels as the only candidates. ``negative_pool`` extends
    the negative-label inventory sampled into training prompts and
    ``vocab_words`` the subword lexicon; both are sanitized against the
    split's unseen labels so nothing about them leaks into training.
    """
    cfg = cfg or TrainConfig()
    rows: list[SeedResult] = []
    for i in range(num_seeds):
        seed = cfg.seed + i
        split = make_split(dataset, m, seed)
        run_cfg = TrainConfig.from_dict(cfg.to_dict())
        run_cfg.seed = seed
        pool = None
        if negative_pool is not None:
            pool = (set(negative_pool) | split.seen_labels) - split.unseen_labels
        result = train(
            split.train_instances, run_cfg, out_dir=None,
            negative_pool=pool, vocab_words=vocab_words,
        )
        candidates = sorted(split.unseen_labels)
        predictions = result.model.predict(
            split.test_instances,
            candidates,
            batch_size=cfg.batch_size,
            threshold=cfg.threshold,
            force_choice=force_choice,
            pair_window=cfg.pair_window,
        )
        metrics = macro_prf1(predictions, split.test_instances, candidates)
        rows.append(
            SeedResult(
                seed=seed,
                metrics=metrics,
                num_train=len(split.train_instances),
                num_test=len(split.test_instances),
                unseen_labels=candidates,
            )
        )

    n = len(rows)
    mean = MacroMetrics(
        precision=sum(r.metrics.precision for r in rows) / n,
        recall=sum(r.metrics.recall for r in rows) / n,
        f1=sum(r.metrics.f1 for r in rows) / n,
    )
    return ExperimentResult(
        m=m,
        per_seed=rows,
        mean=mean,
        config=cfg,
        config_hash=config_hash(cfg),
        git_revision=git_revision(),
    )


@dataclass
class SpeedReport:
    sentences_per_second: float
    forward_pass_count: int
    elapsed_seconds: float
    num_instances: int
    batch_size: int


def speed_benchmark(
    model: RelationClassifier,
    instances: Sequence[InputInstance],
    labels: Sequence[str],
    batch_size: int = 32,
    threshold: float = 0.5,
) -> SpeedReport:
    """Wall-clock inference throughput over an instance set.

    The forward-pass count comes from the encoder's own counter and is
    ceil(instances / batch_size) regardless of how many entity pairs or
    candidate labels each instance carries.
    """
    model.encoder.reset_forward_count()
    start = time.perf_counter()
    model.predict(list(instances), list(labels), batch_size=batch_size, threshold=threshold)
    elapsed = time.perf_counter() - start
    return SpeedReport(
        sentences_per_second=len(instances) / elapsed if elapsed > 0 else float("inf"),
        forward_pass_count=model.encoder.forward_calls,
        elapsed_seconds=elapsed,
        num_instances=len(instances),
        batch_size=batch_size,
    )
