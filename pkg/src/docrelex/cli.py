"""Command-line entry point.

Subcommands: ``ingest`` (validate a corpus and dump its relation histogram),
``synth`` (generate a long-tailed synthetic corpus), ``pretrain`` /
``train`` / ``eval`` (the two training stages and metric reporting), and
``stats`` (frequency partitions and augment-set preview).

Settings resolve as: built-in profile < config file < command-line flags.
Every training run writes a manifest (resolved settings, seed, corpus
hashes, argv, timestamp) to its run directory before any compute, and a
line-delimited JSON metrics log while running. Exit codes: 0 success,
1 usage, 2 validation, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import metrics as metrics_mod
from .checkpoint import CheckpointError
from .corpus import (
    Corpus,
    CorpusError,
    ParseError,
    SynthSpec,
    ValidationError,
    Vocabulary,
    generate_synthetic,
    load_docred,
    relation_frequencies,
    save_docred,
    select_augment_set,
)
from .encoder import EncoderConfig
from .model import Model, ModelConfig
from .pipeline import (
    FineTuner,
    Pretrainer,
    TrainConfig,
    load_model,
    median_frequency_threshold,
    predict_corpus,
    save_model_checkpoint,
    transfer_for_finetuning,
)

__all__ = ["main"]

RUN_DIR_ENV = "DOCRELEX_RUN_DIR"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


class UsageError(Exception):
    pass


# ----------------------------------------------------------------------
# configuration profiles and files
# the published protocol values; the encoder itself is always desk-scale
PAPER_PROFILE = {
    "seed": 0,
    "batch_size": 4,
    "epochs": 30,
    "pretrain_epochs": 3,
    "lr_backbone": 5e-5,
    "lr_other": 1e-4,
    "pretrain_lr": 1e-5,
    "warmup_ratio": 0.06,
    "max_grad_norm": 1.0,
    "weight_decay": 0.01,
    "era_p": 0.1,
    "era_alpha": 2,
    "era_threshold": 200,
    "era_relations": None,
    "cl_tau": 0.5,
    "cl_queue_size": 500,
    "cl_momentum": 0.99,
    "cl_proj_dim": None,
    "negative_ratio": None,
    "dim": 64,
    "heads": 4,
    "layers": 4,
    "ffn_dim": 256,
    "max_len": 512,
    "dropout": 0.1,
    "bilinear_k": 64,
}

# tuned for minutes-scale from-scratch runs on synthetic corpora
DESK_PROFILE = {
    **PAPER_PROFILE,
    "epochs": 25,
    "pretrain_epochs": 4,
    "lr_backbone": 1e-3,
    "lr_other": 2e-3,
    "pretrain_lr": 1e-3,
    "era_threshold": None,  # default to the median-frequency cutoff
    "cl_queue_size": 32,
    "dim": 32,
    "heads": 2,
    "layers": 2,
    "ffn_dim": 64,
    "max_len": 256,
    "bilinear_k": 8,
}

PROFILES = {"paper-defaults": PAPER_PROFILE, "desk": DESK_PROFILE}


def _parse_value(raw: str):
    text = raw.strip()
    lowered = text.lower()
    if lowered in ("none", "null"):
        return None
    if lowered == "true":
        return True
    if lowered == "false":
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def load_config_file(path: str | Path) -> dict:
    """Flat ``key = value`` pairs; '#' starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = body.split("=", 1)
        values[key.strip()] = _parse_value(raw)
    return values


_TRAIN_KEYS = {
    "seed", "batch_size", "epochs", "pretrain_epochs", "lr_backbone",
    "lr_other", "pretrain_lr", "warmup_ratio", "max_grad_norm",
    "weight_decay", "era_p", "era_alpha", "era_threshold", "era_relations",
    "cl_tau", "cl_queue_size", "cl_momentum", "cl_proj_dim",
    "negative_ratio",
}
_MODEL_KEYS = {"dim", "heads", "layers", "ffn_dim", "max_len", "dropout", "bilinear_k"}


def resolve_settings(args: argparse.Namespace) -> dict:
    """profile < config file < explicit command-line flags."""
    profile = getattr(args, "profile", None) or "desk"
    if profile not in PROFILES:
        raise UsageError(f"unknown profile {profile!r}")
    settings = dict(PROFILES[profile])
    settings["profile"] = profile
    config_path = getattr(args, "config", None)
    if config_path:
        for key, value in load_config_file(config_path).items():
            if key not in _TRAIN_KEYS | _MODEL_KEYS:
                raise UsageError(f"unknown configuration key {key!r}")
            settings[key] = value
    for key in _TRAIN_KEYS | _MODEL_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            settings[key] = flag
    if getattr(args, "no_era", False):
        settings["use_era"] = False
    if isinstance(settings.get("era_relations"), str):
        settings["era_relations"] = tuple(
            s for s in settings["era_relations"].split(",") if s
        )
    return settings


def build_train_config(settings: dict, use_era: bool, use_cl: bool) -> TrainConfig:
    rels = settings.get("era_relations")
    return TrainConfig(
        seed=settings["seed"],
        batch_size=settings["batch_size"],
        epochs=settings["epochs"],
        pretrain_epochs=settings["pretrain_epochs"],
        lr_backbone=settings["lr_backbone"],
        lr_other=settings["lr_other"],
        pretrain_lr=settings["pretrain_lr"],
        warmup_ratio=settings["warmup_ratio"],
        max_grad_norm=settings["max_grad_norm"],
        weight_decay=settings["weight_decay"],
        use_era=use_era,
        use_cl=use_cl,
        era_drop_prob=settings["era_p"],
        era_num_augments=settings["era_alpha"],
        era_threshold=settings["era_threshold"],
        era_relations=tuple(rels) if rels else None,
        cl_tau=settings["cl_tau"],
        cl_queue_size=settings["cl_queue_size"],
        cl_momentum=settings["cl_momentum"],
        negative_ratio=settings["negative_ratio"],
    )


def build_model(settings: dict, vocab_size: int, relations, seed: int) -> Model:
    encoder = EncoderConfig(
        vocab_size=vocab_size,
        dim=settings["dim"],
        heads=settings["heads"],
        layers=settings["layers"],
        ffn_dim=settings["ffn_dim"],
        max_len=settings["max_len"],
        dropout=settings["dropout"],
    )
    config = ModelConfig(
        encoder=encoder,
        bilinear_groups=settings["bilinear_k"],
        proj_dim=settings["cl_proj_dim"],
    )
    return Model(config, relations, seed=seed)


# ----------------------------------------------------------------------
# run directories, manifests, logs
def _file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def make_run_dir(args: argparse.Namespace, subcommand: str, seed: int) -> Path:
    root = Path(
        getattr(args, "run_dir", None)
        or os.environ.get(RUN_DIR_ENV)
        or "runs"
    )
    name = getattr(args, "name", None) or f"{subcommand}-seed{seed}"
    candidate = root / name
    counter = 1
    while candidate.exists():
        counter += 1
        candidate = root / f"{name}-{counter}"
    candidate.mkdir(parents=True)
    return candidate


def write_manifest(run_dir: Path, subcommand: str, settings: dict,
                   corpus_paths: dict[str, str], artifacts: dict[str, str]) -> None:
    manifest = {
        "subcommand": subcommand,
        "command_line": sys.argv,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "seed": settings.get("seed"),
        "settings": {
            k: (list(v) if isinstance(v, tuple) else v) for k, v in settings.items()
        },
        "corpus_hashes": {k: _file_sha256(p) for k, p in corpus_paths.items()},
        "corpus_paths": corpus_paths,
        "artifacts": artifacts,
        "run_dir": str(run_dir),
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))


class MetricsLog:
    def __init__(self, path: Path):
        self.path = path
        self._fh = open(path, "w")

    def __call__(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


# ----------------------------------------------------------------------
# subcommands
def cmd_ingest(args) -> int:
    records_path = Path(args.corpus)
    try:
        records = json.loads(records_path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{records_path}: invalid JSON at line {exc.lineno}: {exc.msg}")
    if not isinstance(records, list):
        raise ParseError(f"{records_path}: expected a JSON array of documents")

    documents = []
    failures = []
    for i, record in enumerate(records):
        try:
            doc = corpus_mod._parse_record(record, i)
            doc.validate()
            documents.append(doc)
        except CorpusError as exc:
            title = record.get("title", f"record {i}") if isinstance(record, dict) else f"record {i}"
            failures.append((title, str(exc)))
    if failures:
        print(f"{len(failures)} invalid documents:", file=sys.stderr)
        for title, message in failures:
            print(f"  {title}: {message}", file=sys.stderr)
        return EXIT_VALIDATION

    observed = sorted({r for d in documents for p in d.labels for r in p.relations})
    corpus = Corpus(documents, corpus_mod.RelationScheme(tuple(observed)))
    freqs = relation_frequencies(corpus)
    n_entities = sum(len(d.entities) for d in documents)
    n_mentions = sum(len(e.mentions) for d in documents for e in d.entities)
    total = sum(freqs.values())

    print(f"documents: {len(documents)}")
    print(f"relations: {len(observed)}")
    print(f"entities: {n_entities}")
    print(f"mentions: {n_mentions}")
    print(f"triples: {total}")
    ranked = sorted(freqs.items(), key=lambda kv: (-kv[1], kv[0]))
    if total:
        top7 = sum(count for _, count in ranked[:7])
        print(f"top-7 coverage: {100.0 * top7 / total:.2f}%")

    out = Path(args.histogram) if args.histogram else records_path.with_suffix(".histogram.csv")
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "relation", "count"])
        for rank, (rid, count) in enumerate(ranked, 1):
            writer.writerow([rank, rid, count])
    print(f"histogram written to {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = SynthSpec(
        num_documents=args.docs,
        num_relations=args.relations,
        zipf_exponent=args.zipf,
        entities_per_doc=args.entities,
        vocab_size=args.vocab_size,
        pairs_per_doc=args.pairs,
    )
    corpus = generate_synthetic(spec, seed=args.seed or 0)
    scheme_out = args.scheme_out or str(Path(args.out).with_suffix(".scheme.json"))
    save_docred(corpus, args.out, scheme_out)
    freqs = relation_frequencies(corpus)
    print(f"wrote {len(corpus)} documents to {args.out}")
    print(f"relation frequencies: {json.dumps(dict(sorted(freqs.items())))}")
    return EXIT_OK


def cmd_stats(args) -> int:
    corpus = load_docred(args.corpus, args.scheme)
    freqs = relation_frequencies(corpus)
    relations = corpus.scheme.ids
    threshold = args.era_threshold
    if threshold is None:
        threshold = median_frequency_threshold(freqs, relations)
    augment = select_augment_set(freqs, threshold, relations=relations)
    print(f"documents: {len(corpus)}")
    print(f"relations: {len(relations)}")
    print(f"triples: {sum(freqs.values())}")
    print(f"augment threshold: {threshold}")
    print(f"augment set ({len(augment)}): {', '.join(sorted(augment))}")
    for rid in sorted(relations, key=lambda r: (-freqs.get(r, 0), r)):
        tag = "tail" if rid in augment else "head"
        print(f"  {rid}\t{freqs.get(rid, 0)}\t{tag}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    settings = resolve_settings(args)
    corpus = load_docred(args.corpus, args.scheme)
    config = build_train_config(settings, use_era=not args.no_era, use_cl=True)
    run_dir = make_run_dir(args, "pretrain", config.seed)
    artifacts = {
        "checkpoint": str(run_dir / "pretrained.ckpt"),
        "metrics_log": str(run_dir / "metrics.jsonl"),
    }
    write_manifest(run_dir, "pretrain", settings, {"corpus": str(args.corpus)}, artifacts)
    log = MetricsLog(Path(artifacts["metrics_log"]))
    try:
        vocab = Vocabulary.from_corpus(corpus)
        model = build_model(settings, len(vocab), corpus.scheme.ids, config.seed)
        trainer = Pretrainer(corpus, vocab, config, model, on_record=log)
        trainer.train()
        trainer.save(artifacts["checkpoint"])
    finally:
        log.close()
    print(f"pretraining complete; checkpoint at {artifacts['checkpoint']}")
    print(f"run directory: {run_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.no_cl and args.init_from:
        raise UsageError("--no-cl contradicts --init-from (a contrastive checkpoint)")
    if args.era_relations is not None and args.era_threshold is not None:
        raise UsageError("--era-relations and --era-threshold are mutually exclusive")
    settings = resolve_settings(args)
    corpus = load_docred(args.corpus, args.scheme)
    dev = load_docred(args.dev, args.scheme) if args.dev else None
    use_cl = args.init_from is not None
    config = build_train_config(settings, use_era=not args.no_era, use_cl=use_cl)

    run_dir = make_run_dir(args, "train", config.seed)
    artifacts = {
        "checkpoint": str(run_dir / "final.ckpt"),
        "best_checkpoint": str(run_dir / "best.ckpt"),
        "metrics_log": str(run_dir / "metrics.jsonl"),
    }
    corpus_paths = {"corpus": str(args.corpus)}
    if args.dev:
        corpus_paths["dev"] = str(args.dev)
    if args.init_from:
        corpus_paths["init_from"] = str(args.init_from)
    write_manifest(run_dir, "train", settings, corpus_paths, artifacts)

    log = MetricsLog(Path(artifacts["metrics_log"]))
    try:
        if args.init_from:
            pretrained, vocab, _ = load_model(args.init_from)
            model = transfer_for_finetuning(pretrained, seed=config.seed)
        else:
            vocab = Vocabulary.from_corpus(corpus)
            model = build_model(settings, len(vocab), corpus.scheme.ids, config.seed)
        trainer = FineTuner(corpus, vocab, config, model, dev_corpus=dev, on_record=log)
        trainer.train()
        trainer.save(artifacts["checkpoint"])
        if trainer.best_params is not None:
            save_model_checkpoint(artifacts["best_checkpoint"], trainer.best_model(), vocab)
            print(f"best dev micro F1: {trainer.best_metric:.4f}")
    finally:
        log.close()
    print(f"training complete; checkpoint at {artifacts['checkpoint']}")
    print(f"run directory: {run_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, vocab, _ = load_model(args.checkpoint)
    corpus = load_docred(args.corpus, args.scheme)
    train_freqs = {}
    train_facts = None
    if args.train_corpus:
        train_corpus = load_docred(args.train_corpus, args.scheme)
        train_freqs = relation_frequencies(train_corpus)
        train_facts = metrics_mod.train_fact_surfaces(train_corpus)

    pred = predict_corpus(model, corpus, vocab)
    gold = metrics_mod.gold_triples(corpus)
    report = metrics_mod.evaluate(
        pred, gold, corpus, train_freqs, train_facts,
        relations=model.relations,
        absent_as_zero=args.absent_as_zero,
    )
    payload = report.to_json()
    print(json.dumps({k: v for k, v in payload.items() if k != "per_relation"}, indent=2))

    out_dir = Path(args.out_dir) if args.out_dir else Path(args.checkpoint).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(payload, indent=2))
    with open(out_dir / "per_relation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["relation", "precision", "recall", "f1", "support"])
        for rid, row in sorted(report.per_relation.items()):
            writer.writerow([rid, row["precision"], row["recall"], row["f1"], row["support"]])
    if report.clusters is not None:
        with open(out_dir / "clusters.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["cluster", "f1"])
            for i, value in enumerate(report.clusters, 1):
                writer.writerow([i, "" if value is None else value])
    print(f"reports written to {out_dir}")
    return EXIT_OK


# ----------------------------------------------------------------------
def _add_common_training_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="flat key=value configuration file")
    sub.add_argument("--profile", choices=sorted(PROFILES),
                     help="base profile (default: desk)")
    sub.add_argument("--run-dir", help=f"run directory root (or ${RUN_DIR_ENV})")
    sub.add_argument("--name", help="run directory name")
    sub.add_argument("--seed", type=int)
    sub.add_argument("--batch-size", type=int, dest="batch_size")
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--pretrain-epochs", type=int, dest="pretrain_epochs")
    sub.add_argument("--lr-backbone", type=float, dest="lr_backbone")
    sub.add_argument("--lr-other", type=float, dest="lr_other")
    sub.add_argument("--pretrain-lr", type=float, dest="pretrain_lr")
    sub.add_argument("--warmup-ratio", type=float, dest="warmup_ratio")
    sub.add_argument("--max-grad-norm", type=float, dest="max_grad_norm")
    sub.add_argument("--weight-decay", type=float, dest="weight_decay")
    sub.add_argument("--negative-ratio", type=float, dest="negative_ratio")
    sub.add_argument("--no-era", action="store_true",
                     help="disable relation-representation augmentation")
    sub.add_argument("--era-p", type=float, dest="era_p",
                     help="coordinate drop probability of the augmentation mask")
    sub.add_argument("--era-alpha", type=int, dest="era_alpha",
                     help="augmented copies per qualifying pair")
    sub.add_argument("--era-threshold", type=int, dest="era_threshold",
                     help="frequency cutoff selecting the augment set")
    sub.add_argument("--era-relations", dest="era_relations",
                     help="comma-separated explicit augment set")
    sub.add_argument("--cl-tau", type=float, dest="cl_tau")
    sub.add_argument("--cl-queue-size", type=int, dest="cl_queue_size")
    sub.add_argument("--cl-momentum", type=float, dest="cl_momentum")
    sub.add_argument("--cl-proj-dim", type=int, dest="cl_proj_dim")
    for key in sorted(_MODEL_KEYS):
        sub.add_argument(f"--{key.replace('_', '-')}", type=float if key == "dropout" else int,
                         dest=key)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="docrelex",
        description="Desk-scale document-level relation extraction",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("ingest", help="validate a corpus and report statistics")
    p.add_argument("corpus")
    p.add_argument("--histogram", help="output CSV path for the frequency histogram")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic long-tailed corpus")
    p.add_argument("--docs", type=int, required=True)
    p.add_argument("--relations", type=int, default=8)
    p.add_argument("--zipf", type=float, default=1.2)
    p.add_argument("--entities", type=int, default=5)
    p.add_argument("--vocab-size", type=int, default=120, dest="vocab_size")
    p.add_argument("--pairs", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--scheme-out", dest="scheme_out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="relation frequencies and augment-set preview")
    p.add_argument("corpus")
    p.add_argument("--scheme")
    p.add_argument("--era-threshold", type=int, dest="era_threshold")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("pretrain", help="contrastive pretraining stage")
    p.add_argument("corpus")
    p.add_argument("--scheme")
    _add_common_training_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="fine-tuning stage")
    p.add_argument("corpus")
    p.add_argument("--scheme")
    p.add_argument("--dev", help="development corpus for best-checkpoint selection")
    p.add_argument("--init-from", dest="init_from",
                   help="pretraining checkpoint to start from")
    p.add_argument("--no-cl", action="store_true",
                   help="assert that no contrastive pretraining is used")
    _add_common_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    p.add_argument("checkpoint")
    p.add_argument("corpus")
    p.add_argument("--scheme")
    p.add_argument("--train-corpus", dest="train_corpus",
                   help="training corpus for frequency and shared-fact statistics")
    p.add_argument("--absent-as-zero", action="store_true", dest="absent_as_zero",
                   help="count relations missing from pred+gold as F1=0 in macros")
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=cmd_eval)

    return parser


class _Parser(argparse.ArgumentParser):
    """argparse exits with its own codes; route usage failures through ours."""

    def error(self, message):
        raise UsageError(message)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, ValidationError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (CorpusError, CheckpointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
