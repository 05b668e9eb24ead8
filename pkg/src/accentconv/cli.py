"""Command-line surface: preprocess, train, convert, evaluate.

Every invocation resolves its configuration (file < ACCENTCONV_* environment
variables < --set overrides), creates or reuses a run directory named by
timestamp and config hash, and writes the effective config there. Commands
exit nonzero on any error.
"""

import argparse
import json
import sys
import time
from pathlib import Path

import torch

from .checkpoint import load_checkpoint, read_meta
from .config import Config, load_config, save_config
from .data import load_manifest
from .features import Lexicon
from .inference import convert_file
from .model import AccentConverter
from .preprocess import preprocess_corpus, resolve_cache_dir
from .training import (StageData, build_stage_datasets,
                       check_stage_prerequisite, run_stage)

STAGE_CURVES = {1: ("total", "mel"), 2: ("total",), 3: ("total", "emb", "mel_star")}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="accentconv",
        description="Reference-free accent conversion: preprocessing, "
                    "three-stage training, conversion, and WER evaluation.")
    parser.add_argument("--config", help="YAML configuration file")
    parser.add_argument("--seed", type=int, help="override training.seed")
    parser.add_argument("--run-dir", help="output directory "
                        "(default: runs/<timestamp>-<confighash>)")
    parser.add_argument("--set", action="append", default=[], metavar="K=V",
                        help="config override, e.g. --set model.hidden_dim=64")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="extract features into the cache")
    p.add_argument("--corpus", help="corpus root (default: data.corpus_root)")

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--init", help="checkpoint to start from")
    p.add_argument("--allow-skip-stage2", action="store_true",
                   help="let stage 3 start from a stage-1 checkpoint "
                        "(the no-pretraining ablation)")
    p.add_argument("--max-steps", type=int,
                   help="override the stage's step budget")

    p = sub.add_parser("convert", help="convert one utterance to a mel")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="wav or ACFT feature file")
    p.add_argument("--speaker", type=int, required=True, help="speaker id")
    p.add_argument("--features", choices=("mel", "pretrained"), default="mel")
    p.add_argument("--out", required=True, help="output mel path (.acft)")
    p.add_argument("--vocoder", default="", help="vocoder adapter command")
    p.add_argument("--copy-prosody", action="store_true",
                   help="copy source pitch/energy instead of predicting")

    p = sub.add_parser("evaluate", help="corpus WER through the adapters")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", help="JSONL manifest "
                   "(default: <cache>/test.jsonl)")
    p.add_argument("--accent", choices=("native", "accented", "all"),
                   default="all", help="restrict to one accent group")
    p.add_argument("--asr", help="ASR adapter command (default eval.asr_cmd)")
    p.add_argument("--vocoder", help="vocoder adapter command "
                   "(default eval.vocoder_cmd)")
    p.add_argument("--no-figures", action="store_true")
    return parser


def resolve_run_dir(arg, cfg: Config) -> Path:
    if arg:
        run_dir = Path(arg)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run_dir = Path("runs") / f"{stamp}-{cfg.digest()}"
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run_dir / "config.yaml")
    return run_dir


def _load_split(cache: Path, name: str):
    path = cache / f"{name}.jsonl"
    if not path.exists():
        raise FileNotFoundError(
            f"{path} not found: run `accentconv preprocess` first")
    return load_manifest(path)


def cmd_preprocess(cfg: Config, args, run_dir: Path) -> int:
    result = preprocess_corpus(cfg, corpus_root=args.corpus)
    summary = {
        "manifest": str(result.manifest_path),
        "splits": {k: str(v) for k, v in result.split_paths.items()},
        "processed": result.n_processed,
        "skipped": result.n_skipped,
    }
    (run_dir / "preprocess.json").write_text(json.dumps(summary, indent=2),
                                             encoding="utf-8")
    print(json.dumps(summary))
    return 0


def cmd_train(cfg: Config, args, run_dir: Path) -> int:
    if args.allow_skip_stage2:
        cfg.training.use_stage2 = False
    cache = resolve_cache_dir(cfg)
    train_records = _load_split(cache, "train")
    val_records = _load_split(cache, "val")
    all_records = load_manifest(cache / "manifest.jsonl")

    lexicon = Lexicon.load(cfg.features.lexicon_path)
    n_speakers = max(r.speaker_id for r in all_records) + 1
    model_cfg = cfg.resolved_model(lexicon.n_phones, n_speakers)

    if args.init:
        model, _, meta = load_checkpoint(args.init)
        lineage = list(meta.get("lineage", []))
    else:
        torch.manual_seed(cfg.training.seed)
        model = AccentConverter(model_cfg)
        meta, lineage = None, []
    check_stage_prerequisite(cfg, args.stage, meta)

    datasets = build_stage_datasets(cfg, train_records, val_records)
    stage_cfg = cfg.training.stage_config(args.stage)
    data = datasets.get(stage_cfg.dataset) or StageData([], [])
    result = run_stage(model, cfg, args.stage, data, run_dir,
                       lineage=lineage, max_steps=args.max_steps)

    from . import plotting
    plotting.save_loss_curves(result.log_path,
                              run_dir / "figures" / f"stage{args.stage}_loss.png",
                              components=STAGE_CURVES[args.stage])
    print(json.dumps({
        "stage": result.stage,
        "steps": result.steps,
        "best_val_total": result.best_val,
        "best": str(result.best_path),
        "last": str(result.last_path),
        "log": str(result.log_path),
    }))
    return 0


def cmd_convert(cfg: Config, args, run_dir: Path) -> int:
    info = convert_file(args.checkpoint, args.input, args.speaker,
                        args.features, args.out, vocoder_cmd=args.vocoder,
                        copy_prosody=args.copy_prosody)
    print(json.dumps(info))
    return 0


def cmd_evaluate(cfg: Config, args, run_dir: Path) -> int:
    from .evaluation import evaluate_corpus
    if args.manifest:
        records = load_manifest(args.manifest)
    else:
        records = _load_split(resolve_cache_dir(cfg), "test")
    if args.accent != "all":
        records = [r for r in records if r.accent_tag == args.accent]
    meta = read_meta(args.checkpoint)
    out_dir = run_dir / "eval"
    report = evaluate_corpus(records, args.checkpoint, cfg, out_dir,
                             asr_cmd=args.asr, vocoder_cmd=args.vocoder,
                             make_figures=not args.no_figures)
    print(json.dumps({
        "report": str(out_dir / "report.json"),
        "corpus_wer": report["corpus_wer"],
        "n_scored": report["n_scored"],
        "n_failures": len(report["failures"]),
        "checkpoint_stage": meta["stage"],
    }))
    return 0


COMMANDS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "convert": cmd_convert,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, overrides=args.set)
        if args.seed is not None:
            cfg.training.seed = args.seed
        run_dir = resolve_run_dir(args.run_dir, cfg)
        return COMMANDS[args.command](cfg, args, run_dir)
    except Exception as exc:  # operator surface: report and exit nonzero
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry_point() -> None:
    sys.exit(main())
