"""Command-line entry point.

Subcommands: train, eval, predict, bench, gen-data, split, validate.
Every subcommand accepts --seed and records its effective configuration
next to whatever artifact it writes. Exit status is 0 only when the
operation completed and its output files parse back cleanly.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .data import collect_label_pool, load_jsonl, save_jsonl, validate_jsonl
from .datagen import (
    DictionaryTagger,
    HttpChatTransport,
    ReplayTransport,
    annotate_corpus,
    benchmark_intersection,
    dataset_no_relation_fraction,
    filter_benchmark_labels,
    load_corpus,
)
from .errors import GlirelError
from .coref import merge_window_predictions, window_document
from .model import load_checkpoint
from .training import TrainConfig, train
from .zeroshot import make_split, run_experiment, speed_benchmark, validate_split

log = logging.getLogger("glirel")


def _write_run_config(out: Path, command: str, args: argparse.Namespace) -> None:
    record = {"command": command, "version": __version__}
    record.update(
        {k: v for k, v in sorted(vars(args).items()) if k != "func" and not k.startswith("_")}
    )
    sidecar = out.with_name(out.name + ".run.json")
    with sidecar.open("w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True, default=str)


def _read_labels(args: argparse.Namespace) -> list[str]:
    if getattr(args, "labels", None):
        labels = [part.strip() for part in args.labels.split(",") if part.strip()]
    elif getattr(args, "labels_file", None):
        with Path(args.labels_file).open("r", encoding="utf-8") as fh:
            labels = [line.strip() for line in fh if line.strip()]
    else:
        raise GlirelError("provide --labels or --labels-file")
    if not labels:
        raise GlirelError("no labels given")
    return labels


def _read_label_set_file(path: str) -> list[str]:
    text = Path(path).read_text(encoding="utf-8").strip()
    if text.startswith("["):
        return [str(x) for x in json.loads(text)]
    return [line.strip() for line in text.splitlines() if line.strip()]


def _load_train_config(args: argparse.Namespace) -> TrainConfig:
    cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "batch_size", None) is not None:
        cfg.batch_size = args.batch_size
    if getattr(args, "threshold", None) is not None:
        cfg.threshold = args.threshold
    if getattr(args, "steps", None) is not None:
        cfg.total_steps = args.steps
    return cfg


def cmd_train(args: argparse.Namespace) -> int:
    dataset = load_jsonl(args.dataset)
    cfg = _load_train_config(args)
    out_dir = Path(args.out)
    result = train(dataset, cfg, out_dir=out_dir)
    _write_run_config(out_dir / "model.ckpt", "train", args)
    load_checkpoint(result.final_checkpoint)  # output must parse back
    print(f"trained {cfg.total_steps} steps; final loss {result.losses[-1]:.4f}")
    print(f"checkpoint: {result.final_checkpoint}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    dataset = load_jsonl(args.dataset)
    cfg = _load_train_config(args)
    result = run_experiment(
        dataset, args.m, num_seeds=args.seeds, cfg=cfg, force_choice=args.force_choice
    )
    out = Path(args.out)
    result.save(out)
    result.save_csv(out.with_suffix(".csv"))
    _write_run_config(out, "eval", args)
    json.loads(out.read_text(encoding="utf-8"))  # output must parse back
    for row in result.per_seed:
        print(
            f"seed {row.seed}: P {row.metrics.precision:.4f} "
            f"R {row.metrics.recall:.4f} F1 {row.metrics.f1:.4f}"
        )
    print(
        f"mean over {len(result.per_seed)} seeds: P {result.mean.precision:.4f} "
        f"R {result.mean.recall:.4f} F1 {result.mean.f1:.4f}"
    )
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    model, _ = load_checkpoint(args.model)
    labels = _read_labels(args)
    instances = load_jsonl(args.input)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", encoding="utf-8") as fh:
        if args.window is not None:
            for doc in instances:
                windowed = window_document(
                    doc, args.window, args.stride if args.stride else max(1, args.window // 2)
                )
                window_preds = model.predict(
                    windowed.windows,
                    labels,
                    batch_size=args.batch_size,
                    threshold=args.threshold,
                    multi_label=args.multi_label,
                    force_choice=args.force_choice,
                    pair_window=args.pair_window,
                )
                merged = merge_window_predictions(window_preds, windowed.mention_maps)
                record = {
                    "doc_id": doc.doc_id,
                    "predictions": [
                        {"head": r.head, "tail": r.tail, "label": r.label, "score": r.score}
                        for r in merged
                    ],
                }
                fh.write(json.dumps(record, ensure_ascii=False) + "\n")
        else:
            predictions = model.predict(
                instances,
                labels,
                batch_size=args.batch_size,
                threshold=args.threshold,
                multi_label=args.multi_label,
                force_choice=args.force_choice,
                pair_window=args.pair_window,
            )
            for instance, preds in zip(instances, predictions):
                fh.write(
                    json.dumps(preds.to_record(instance.doc_id), ensure_ascii=False) + "\n"
                )
    _write_run_config(out, "predict", args)
    with out.open("r", encoding="utf-8") as fh:  # output must parse back
        for line in fh:
            json.loads(line)
    print(f"wrote predictions for {len(instances)} instances to {out}")
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    model, _ = load_checkpoint(args.model)
    instances = load_jsonl(args.dataset)
    labels = (
        _read_labels(args)
        if (args.labels or args.labels_file)
        else sorted(collect_label_pool(instances))
    )
    if not labels:
        raise GlirelError("dataset has no labels; pass --labels")
    report = speed_benchmark(
        model, instances, labels, batch_size=args.batch_size, threshold=args.threshold
    )
    payload = {
        "sentences_per_second": report.sentences_per_second,
        "forward_pass_count": report.forward_pass_count,
        "elapsed_seconds": report.elapsed_seconds,
        "num_instances": report.num_instances,
        "batch_size": report.batch_size,
    }
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        _write_run_config(out, "bench", args)
        json.loads(out.read_text(encoding="utf-8"))
    print(json.dumps(payload, indent=2))
    return 0


def cmd_gen_data(args: argparse.Namespace) -> int:
    records = load_corpus(args.input)
    tagger = None
    if args.gazetteer:
        tagger = DictionaryTagger(_read_label_set_file(args.gazetteer))
    if args.replay:
        transport = ReplayTransport(args.replay)
    elif args.endpoint:
        transport = HttpChatTransport(args.endpoint, args.model_name)
    else:
        raise GlirelError("provide --replay for offline mode or --endpoint for a live run")

    out = Path(args.out)
    audit = Path(args.audit) if args.audit else out.with_suffix(".audit.jsonl")
    instances = annotate_corpus(
        records,
        transport,
        endpoint_url=args.endpoint or "",
        model_name=args.model_name,
        temperature=args.temperature,
        max_retries=args.max_retries,
        rate_limit_per_s=args.rate_limit,
        jobs=args.jobs,
        tagger=tagger,
        audit_path=audit,
    )
    benchmark_sets = [
        _read_label_set_file(path) for path in (args.benchmark_labels or [])
    ]
    if benchmark_sets:
        instances = filter_benchmark_labels(instances, benchmark_sets)
        leftover = benchmark_intersection(instances, benchmark_sets)
        if leftover:
            raise GlirelError(f"benchmark labels survived filtering: {sorted(leftover)}")
    save_jsonl(instances, out)
    _write_run_config(out, "gen-data", args)
    count, problems = validate_jsonl(out)
    if problems:
        raise GlirelError(f"generated dataset failed validation: {problems[:3]}")
    fraction = dataset_no_relation_fraction(audit)
    print(
        f"wrote {count} instances to {out}; audit log {audit}; "
        f"NO RELATION fraction {fraction:.3f}"
    )
    return 0


def cmd_split(args: argparse.Namespace) -> int:
    dataset = load_jsonl(args.dataset)
    split = make_split(dataset, args.m, args.seed if args.seed is not None else 0)
    validate_split(split)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_jsonl(split.train_instances, out_dir / "train.jsonl")
    save_jsonl(split.test_instances, out_dir / "test.jsonl")
    manifest = {
        "m": split.m,
        "seed": split.seed,
        "unseen_labels": sorted(split.unseen_labels),
        "seen_labels": sorted(split.seen_labels),
        "num_train": len(split.train_instances),
        "num_test": len(split.test_instances),
    }
    (out_dir / "split.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    _write_run_config(out_dir / "split.json", "split", args)
    for name in ("train.jsonl", "test.jsonl"):  # outputs must parse back
        _, problems = validate_jsonl(out_dir / name)
        if problems:
            raise GlirelError(f"{name} failed validation: {problems[:3]}")
    print(
        f"split {len(dataset)} instances into {manifest['num_train']} train / "
        f"{manifest['num_test']} test; unseen: {', '.join(manifest['unseen_labels'])}"
    )
    return 0


def cmd_validate(args: argparse.Namespace) -> int:
    count, problems = validate_jsonl(args.dataset)
    for problem in problems:
        print(f"{args.dataset}: {problem}", file=sys.stderr)
    print(f"{args.dataset}: {count} valid instances, {len(problems)} problems")
    return 0 if not problems else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="glirel",
        description="Zero-shot relation classification toolkit",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--seed", type=int, default=None, help="random seed")

    p_train = sub.add_parser("train", help="train a model on a JSONL dataset")
    p_train.add_argument("--dataset", required=True)
    p_train.add_argument("--config", help="TrainConfig JSON file")
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.add_argument("--steps", type=int, default=None)
    p_train.add_argument("--batch-size", type=int, default=None)
    p_train.add_argument("--threshold", type=float, default=None)
    add_common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="repeated zero-shot evaluation")
    p_eval.add_argument("--dataset", required=True)
    p_eval.add_argument("--m", type=int, required=True, help="number of unseen labels")
    p_eval.add_argument("--seeds", type=int, default=5, help="number of repetitions")
    p_eval.add_argument("--config", help="TrainConfig JSON file")
    p_eval.add_argument("--out", required=True, help="results JSON path")
    p_eval.add_argument("--force-choice", action="store_true")
    p_eval.add_argument("--batch-size", type=int, default=None)
    p_eval.add_argument("--threshold", type=float, default=None)
    add_common(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_predict = sub.add_parser("predict", help="predict relations for given labels")
    p_predict.add_argument("--model", required=True, help="checkpoint path")
    p_predict.add_argument("--input", required=True, help="JSONL instances")
    p_predict.add_argument("--labels", help="comma-separated candidate labels")
    p_predict.add_argument("--labels-file", help="file with one label per line")
    p_predict.add_argument("--out", required=True, help="predictions JSONL path")
    p_predict.add_argument("--threshold", type=float, default=0.5)
    p_predict.add_argument("--force-choice", action="store_true")
    p_predict.add_argument("--multi-label", action="store_true")
    p_predict.add_argument("--batch-size", type=int, default=8)
    p_predict.add_argument("--window", type=int, default=None, help="document window tokens")
    p_predict.add_argument("--stride", type=int, default=None, help="document window stride")
    p_predict.add_argument("--pair-window", type=int, default=None)
    add_common(p_predict)
    p_predict.set_defaults(func=cmd_predict)

    p_bench = sub.add_parser("bench", help="inference throughput benchmark")
    p_bench.add_argument("--model", required=True)
    p_bench.add_argument("--dataset", required=True)
    p_bench.add_argument("--labels", help="comma-separated candidate labels")
    p_bench.add_argument("--labels-file")
    p_bench.add_argument("--batch-size", type=int, default=32)
    p_bench.add_argument("--threshold", type=float, default=0.5)
    p_bench.add_argument("--out", help="report JSON path")
    add_common(p_bench)
    p_bench.set_defaults(func=cmd_bench)

    p_gen = sub.add_parser("gen-data", help="annotate a text corpus via an LLM endpoint")
    p_gen.add_argument("--input", required=True, help="corpus JSONL ({text, entities?})")
    p_gen.add_argument("--out", required=True, help="dataset JSONL path")
    p_gen.add_argument("--audit", help="audit log path (default: <out>.audit.jsonl)")
    p_gen.add_argument("--replay", help="recorded-responses file for offline mode")
    p_gen.add_argument("--endpoint", help="chat-completion base URL")
    p_gen.add_argument("--model-name", default="")
    p_gen.add_argument("--temperature", type=float, default=0.0)
    p_gen.add_argument("--max-retries", type=int, default=2)
    p_gen.add_argument("--rate-limit", type=float, default=0.0, help="requests per second")
    p_gen.add_argument("--jobs", type=int, default=1, help="parallel requests")
    p_gen.add_argument(
        "--benchmark-labels",
        action="append",
        help="benchmark label file to filter against (repeatable)",
    )
    p_gen.add_argument("--gazetteer", help="phrase file for the dictionary tagger")
    add_common(p_gen)
    p_gen.set_defaults(func=cmd_gen_data)

    p_split = sub.add_parser("split", help="build a zero-shot train/test split")
    p_split.add_argument("--dataset", required=True)
    p_split.add_argument("--m", type=int, required=True)
    p_split.add_argument("--out", required=True, help="output directory")
    add_common(p_split)
    p_split.set_defaults(func=cmd_split)

    p_validate = sub.add_parser("validate", help="validate a dataset file")
    p_validate.add_argument("--dataset", required=True)
    add_common(p_validate)
    p_validate.set_defaults(func=cmd_validate)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except GlirelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
