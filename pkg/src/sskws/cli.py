"""Command-line entry point.

Subcommands: ingest, split, train, pretrain, finetune, evaluate, segment,
synth-corpus. Training tasks are driven by a JSON config file; the
SSKWS_DETERMINISTIC env var ("1"/"0") overrides the config's deterministic
flag.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .config import load_config, validate_paths
from .data import Manifest, SplitSpec, ingest_speech_commands, load_classes, save_classes, segment_corpus, split_label_deficient
from .synth import synth_corpus
from .train import run_evaluate, run_finetune, run_pretrain, run_supervised

log = logging.getLogger("sskws")


def _cmd_ingest(args) -> int:
    manifests = ingest_speech_commands(args.data_root)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_classes(manifests["train"].class_map, out / "classes.txt")
    for name, manifest in manifests.items():
        manifest.save(out / f"{name}.csv")
        print(f"{name}: {len(manifest)} rows -> {out / (name + '.csv')}")
    return 0


def _cmd_split(args) -> int:
    classes = load_classes(args.classes) if args.classes else {}
    train = Manifest.load(args.train, classes)
    spec = SplitSpec(fraction_pretrain=args.fraction, seed=args.seed, stratified=not args.global_random)
    pretrain, labelled = split_label_deficient(train, spec)
    out = Path(args.out) if args.out else Path(args.train).parent
    out.mkdir(parents=True, exist_ok=True)
    pretrain.save(out / "pretrain.csv")
    labelled.save(out / "labelled.csv")
    print(f"pretrain: {len(pretrain)} rows -> {out / 'pretrain.csv'}")
    print(f"labelled: {len(labelled)} rows -> {out / 'labelled.csv'}")
    return 0


def _cmd_segment(args) -> int:
    manifest = segment_corpus(args.data_root, args.clip_len)
    manifest.save(args.out)
    print(f"{len(manifest)} segments -> {args.out}")
    return 0


def _load_task_config(args, task: str):
    cfg = load_config(args.config)
    if cfg.task != task:
        log.warning("config task %r overridden to %r by the subcommand", cfg.task, task)
        cfg = dataclasses.replace(cfg, task=task)
    validate_paths(cfg)
    return cfg


def _cmd_train(args) -> int:
    cfg = _load_task_config(args, "train")
    info = run_supervised(cfg)
    print(f"best val accuracy {info['best_val_accuracy']:.4f}; checkpoints in {Path(cfg.out_dir)}")
    return 0


def _cmd_pretrain(args) -> int:
    cfg = _load_task_config(args, "pretrain")
    info = run_pretrain(cfg, resume_from=args.resume)
    print(f"pretraining done; checkpoint {info['last_checkpoint']}")
    return 0


def _cmd_finetune(args) -> int:
    cfg = _load_task_config(args, "finetune")
    info = run_finetune(cfg, args.from_ckpt)
    print(f"best val accuracy {info['best_val_accuracy']:.4f}; checkpoints in {Path(cfg.out_dir)}")
    return 0


def _cmd_evaluate(args) -> int:
    info = run_evaluate(
        args.from_ckpt,
        args.manifest,
        data_root=args.data_root,
        classes_file=args.classes,
        report_path=args.report,
    )
    print(f"accuracy {info['accuracy']:.4f} over {sum(c for c, _ in info['per_class'].values())} clips")
    print(f"per-class report -> {info['report']}")
    return 0


def _cmd_synth_corpus(args) -> int:
    root = synth_corpus(
        args.out,
        n_keywords=args.n_keywords,
        train_per_class=args.train_per_class,
        val_per_class=args.val_per_class,
        test_per_class=args.test_per_class,
        seed=args.seed,
        snr_low=args.snr_low,
        snr_high=args.snr_high,
    )
    print(f"synthetic corpus -> {root}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sskws", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="build train/validation/test manifests from a corpus tree")
    p.add_argument("--data-root", required=True)
    p.add_argument("--out", required=True, help="directory for manifests and classes.txt")
    p.set_defaults(fn=_cmd_ingest)

    p = sub.add_parser("split", help="split a train manifest into unlabelled pretrain + labelled parts")
    p.add_argument("--train", required=True, help="train manifest CSV")
    p.add_argument("--classes", default="", help="classes.txt matching the manifest")
    p.add_argument("--fraction", type=float, default=0.8)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", default="", help="output directory (default: next to the manifest)")
    p.add_argument("--global-random", action="store_true", help="disable per-keyword stratification")
    p.set_defaults(fn=_cmd_split)

    p = sub.add_parser("segment", help="cut long-form WAVs into 1 s unlabelled segments")
    p.add_argument("--data-root", required=True)
    p.add_argument("--out", required=True, help="output manifest CSV")
    p.add_argument("--clip-len", type=float, default=1.0)
    p.set_defaults(fn=_cmd_segment)

    p = sub.add_parser("train", help="supervised baseline training")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("pretrain", help="student-teacher masked pretraining")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None, help="pretraining checkpoint to continue from")
    p.set_defaults(fn=_cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised fine-tuning from a pretraining checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--from", dest="from_ckpt", required=True, help="pretraining checkpoint")
    p.set_defaults(fn=_cmd_finetune)

    p = sub.add_parser("evaluate", help="accuracy + per-class report for a supervised checkpoint")
    p.add_argument("--from", dest="from_ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--data-root", default=None)
    p.add_argument("--classes", default=None)
    p.add_argument("--report", default=None)
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("synth-corpus", help="generate the synthetic desk-scale keyword corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-keywords", type=int, default=5)
    p.add_argument("--train-per-class", type=int, default=1050)
    p.add_argument("--val-per-class", type=int, default=60)
    p.add_argument("--test-per-class", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--snr-low", type=float, default=5.0)
    p.add_argument("--snr-high", type=float, default=20.0)
    p.set_defaults(fn=_cmd_synth_corpus)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
