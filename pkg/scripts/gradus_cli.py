#!/usr/bin/env python3
"""
Gradus QR v1.0 - Command Line Interface
=======================================

Scoring, partitioning, training, ensembling, evaluation and the experiment
drivers over one run directory.

Usage: python scripts/gradus_cli.py <command> [options]
Exit codes: 0 success, 1 toolkit error (JSON on stderr), 2 usage error
"""

import argparse
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src.analytics.executive_reporting.report_generator import generate_report  # noqa: E402
from src.analytics.predictive_models.ensemble import (  # noqa: E402
    ENSEMBLE_MODES,
    EnsembleBundle,
    EnsembleRewriter,
    load_bundle,
    sad_train,
    saf_train,
    save_bundle,
)
from src.analytics.predictive_models.training import (  # noqa: E402
    ModelRewriter,
    evaluate,
    pretrain_base,
    train_private,
    train_shared,
)
from src.core.corpus import (  # noqa: E402
    UtteranceRecord,
    load_corpus,
    partition,
    save_corpus,
    scheme_by_name,
    score_corpus,
)
from src.core.exceptions import ConfigError, GradusError  # noqa: E402
from src.core.experiment_engine import (  # noqa: E402
    ExperimentEngine,
    PipelineConfig,
    difficulty_measure_analysis,
    seed_sweep,
)
from src.core.seqmodel import (  # noqa: E402
    AdaptedModel,
    load_adapters,
    load_base,
    save_adapters,
    save_base,
    vocabulary_from_records,
)
from src.data_processing.extractors.corpus_converter import convert_file  # noqa: E402
from src.data_processing.generators.synthetic_corpus import SyntheticSpec, write_synthetic  # noqa: E402
from src.utils.config import Config, resolve_run_dir, setup_logging  # noqa: E402
from src.utils.data_loader import ScoreFileLoader, read_json, write_json, write_jsonl  # noqa: E402


def _emit(payload) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True, default=str))


def _pipeline_config(args) -> PipelineConfig:
    overrides = {
        "seed": getattr(args, "seed", None),
        "scheme": getattr(args, "scheme", None),
        "epochs": getattr(args, "epochs", None),
        "learning_rate": getattr(args, "lr", None),
        "beam_width": getattr(args, "beam", None),
        "workers": getattr(args, "workers", None),
        "gamma": getattr(args, "gamma", None),
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if getattr(args, "config", None):
        return PipelineConfig.from_file(args.config, **overrides)
    return PipelineConfig(**overrides)


def _labeled(records: Sequence[UtteranceRecord], cfg: PipelineConfig, use_gold: bool = False) -> List[UtteranceRecord]:
    """Records carrying their class, computed from the scheme unless gold labels are requested"""
    if use_gold:
        missing = [r.record_id for r in records if r.class_label is None]
        if missing:
            raise ConfigError(f"{len(missing)} records have no gold class", first=missing[0])
        return list(records)
    part = partition(records, score_corpus(records, cfg.apply_pronoun_rule), scheme_by_name(cfg.scheme))
    return [r.with_label(part.assignments[r.record_id]) for r in records]


def _load_splits(data_dir) -> Dict[str, List[UtteranceRecord]]:
    data_dir = Path(data_dir)
    splits = {}
    for split in ("train", "valid", "test"):
        path = data_dir / f"{split}.jsonl"
        splits[split] = load_corpus(path) if path.exists() else []
    if not splits["train"]:
        raise ConfigError(f"no training split in {data_dir}", path=str(data_dir))
    return splits


def _update_run_metadata(run_dir: Path, cfg: PipelineConfig, **extra) -> None:
    path = run_dir / Config.CONFIG_DIR / "run.json"
    metadata = read_json(path) if path.exists() else {}
    metadata.update({"layout_version": Config.RUN_LAYOUT_VERSION, "seed": cfg.seed, "scheme": cfg.scheme,
                     "labels": list(scheme_by_name(cfg.scheme).labels), "pipeline": cfg.to_dict()})
    metadata.update(extra)
    write_json(path, metadata)


def _base(run_dir: Path, cfg: PipelineConfig, train: Sequence[UtteranceRecord]):
    """Load the run's frozen base, pretraining one on ``train`` when absent"""
    path = run_dir / Config.CHECKPOINT_DIR / "base.ckpt"
    if path.exists():
        return load_base(path)
    vocab = vocabulary_from_records(train, cfg.vocab_max_size)
    vocab.save(run_dir / Config.VOCAB_FILE)
    base = pretrain_base(train, vocab, cfg.model_config(len(vocab)), cfg.pretrain_config(),
                         event_log=run_dir / Config.LOGS_DIR / "train_events.jsonl")
    save_base(base, vocab, path)
    _update_run_metadata(run_dir, cfg, model=base.config.to_dict())
    return base, vocab


def _bundle(run_dir: Path, labels: Optional[List[str]] = None) -> EnsembleBundle:
    bundle_dir = run_dir / "bundle"
    if (bundle_dir / Config.MANIFEST_FILE).exists():
        return load_bundle(bundle_dir)
    base, vocab = load_base(run_dir / Config.CHECKPOINT_DIR / "base.ckpt")
    if labels is None:
        labels = read_json(run_dir / Config.CONFIG_DIR / "run.json")["labels"]
    private = [load_adapters(run_dir / Config.CHECKPOINT_DIR / f"private_{label}.ckpt", base) for label in labels]
    return EnsembleBundle(base, vocab, private)


# Commands
def cmd_score(args) -> None:
    records = load_corpus(args.input)
    scores = score_corpus(records, apply_pronoun_rule=not args.no_pronoun_rule)
    write_jsonl(args.output, ({"record_id": r.record_id, "z": z} for r, z in zip(records, scores)))
    _emit({"records": len(records), "output": args.output})


def cmd_partition(args) -> None:
    scheme = scheme_by_name(args.scheme)
    records = load_corpus(args.input)
    part = partition(records, score_corpus(records, apply_pronoun_rule=not args.no_pronoun_rule), scheme)
    if args.output:
        save_corpus((r.with_label(part.assignments[r.record_id]) for r in records), args.output)
    _emit({"scheme": scheme.name, "labels": list(part.labels), "sizes": part.sizes(),
           "proportions": part.proportions()})


def cmd_train(args) -> None:
    cfg = _pipeline_config(args)
    run_dir = resolve_run_dir(args.run)
    train = load_corpus(args.train)
    valid = load_corpus(args.valid) if args.valid else []
    base, vocab = _base(run_dir, cfg, train)
    train_cfg = cfg.adapter_config(mode=args.mode)
    event_log = run_dir / Config.LOGS_DIR / "train_events.jsonl"

    if args.class_label:
        train_l = [r for r in _labeled(train, cfg, args.gold) if r.class_label == args.class_label]
        valid_l = [r for r in _labeled(valid, cfg, args.gold) if r.class_label == args.class_label]
        trained = train_private(train_l, base, vocab, train_cfg, args.class_label, valid_l, event_log=event_log)
        name = f"private_{args.class_label}"
    else:
        trained = train_shared(train, base, vocab, train_cfg, valid, event_log=event_log)
        name = "shared"

    if args.mode == "adapter_only":
        path = run_dir / Config.CHECKPOINT_DIR / f"{name}.ckpt"
        fingerprint = save_adapters(trained.adapters, base, path)
    else:
        path = run_dir / Config.CHECKPOINT_DIR / f"{name}_full.ckpt"
        fingerprint = save_base(trained.base, vocab, path)
    _emit({"model": name, "checkpoint": str(path), "fingerprint": fingerprint,
           "best_epoch": trained.best_epoch, "best_bleu": trained.best_bleu})


def cmd_fuse(args) -> None:
    cfg = _pipeline_config(args)
    run_dir = resolve_run_dir(args.run)
    labels = args.labels.split(",") if args.labels else None
    bundle = _bundle(run_dir, labels)
    train = _labeled(load_corpus(args.train), cfg, args.gold)
    saf_train(bundle, train, cfg.adapter_config(epochs=cfg.classifier_epochs, learning_rate=cfg.classifier_lr))
    bundle.mode = "saf"
    manifest = save_bundle(bundle, run_dir / "bundle", base_path=run_dir / Config.CHECKPOINT_DIR / "base.ckpt")
    _emit({"bundle": str(manifest), "labels": list(bundle.labels)})


def cmd_distill(args) -> None:
    cfg = _pipeline_config(args)
    run_dir = resolve_run_dir(args.run)
    labels = args.labels.split(",") if args.labels else None
    bundle = _bundle(run_dir, labels)
    train = _labeled(load_corpus(args.train), cfg, args.gold)
    valid = _labeled(load_corpus(args.valid), cfg, args.gold) if args.valid else []
    sad_train(bundle, train, cfg.adapter_config(), valid,
              event_log=run_dir / Config.LOGS_DIR / "train_events.jsonl")
    bundle.mode = "sad"
    manifest = save_bundle(bundle, run_dir / "bundle", base_path=run_dir / Config.CHECKPOINT_DIR / "base.ckpt")
    _emit({"bundle": str(manifest), "gamma": cfg.gamma})


def cmd_eval(args) -> None:
    cfg = _pipeline_config(args)
    run_dir = resolve_run_dir(args.run)
    records = load_corpus(args.test)
    scheme = scheme_by_name(cfg.scheme)
    test_part = partition(records, score_corpus(records, cfg.apply_pronoun_rule), scheme)
    test = [r.with_label(test_part.assignments[r.record_id]) for r in records]
    if args.gold:
        test = _labeled(records, cfg, use_gold=True)

    if args.system in ENSEMBLE_MODES:
        rewriter = EnsembleRewriter(_bundle(run_dir), args.system, cfg.beam_width, cfg.max_decode_len)
    else:
        base, vocab = load_base(run_dir / Config.CHECKPOINT_DIR / "base.ckpt")
        name = "shared" if args.system == "S" else f"private_{args.system[2:]}" if args.system.startswith("P-") else None
        if name is None:
            raise ConfigError(f"unknown system '{args.system}'", system=args.system)
        adapters = load_adapters(run_dir / Config.CHECKPOINT_DIR / f"{name}.ckpt", base)
        rewriter = ModelRewriter(AdaptedModel(base, adapters), vocab, cfg.beam_width, cfg.max_decode_len)

    report = evaluate(rewriter, test, test_part, workers=cfg.workers, system=args.system)
    ScoreFileLoader(run_dir / Config.SCORES_DIR / "systems").write(args.system, report.records)
    _emit(report.to_dict())


def cmd_report(args) -> None:
    path = generate_report(resolve_run_dir(args.run))
    _emit({"report": str(path)})


def cmd_synth(args) -> None:
    spec = SyntheticSpec(seed=args.seed, counts={"train": args.train_count, "valid": args.valid_count,
                                                 "test": args.test_count})
    paths = write_synthetic(spec, args.output)
    _emit({split: str(path) for split, path in paths.items()})


def cmd_convert(args, source: str) -> None:
    _emit(convert_file(source, args.input, args.output))


def cmd_run(args) -> None:
    splits = _load_splits(args.data)
    engine = ExperimentEngine(resolve_run_dir(args.run), _pipeline_config(args))
    report = engine.run_pipeline(splits["train"], splits["valid"], splits["test"])
    _emit({"systems": sorted(report.per_class), "stages_run": engine.stats["stages_run"],
           "stages_skipped": engine.stats["stages_skipped"]})


def cmd_heatmap(args) -> None:
    splits = _load_splits(args.data)
    cfg = _pipeline_config(args)
    if args.from_scratch:
        cfg = cfg.with_overrides(heatmap_from_scratch=True)
    run_dir = resolve_run_dir(args.run)
    result = ExperimentEngine(run_dir, cfg).heatmap_experiment(splits["train"], splits["valid"], splits["test"], args.k)
    generate_report(run_dir)
    _emit({"labels": result.labels, "matrix": result.matrix, "diagonal_wins": result.diagonal_wins()})


def cmd_gamma_sweep(args) -> None:
    splits = _load_splits(args.data)
    gammas = [float(g) for g in args.gammas.split(",") if g.strip()]
    run_dir = resolve_run_dir(args.run)
    curve = ExperimentEngine(run_dir, _pipeline_config(args)).gamma_sweep(
        splits["train"], splits["valid"], splits["test"], gammas)
    generate_report(run_dir)
    _emit(curve)


def cmd_seed_sweep(args) -> None:
    splits = _load_splits(args.data)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    summary = seed_sweep(resolve_run_dir(args.run), splits["train"], splits["valid"], splits["test"], seeds,
                         _pipeline_config(args))
    _emit(summary.to_dict("records"))


def cmd_analyze(args) -> None:
    run_dir = resolve_run_dir(args.run)
    records = load_corpus(args.test)
    rows = ScoreFileLoader(run_dir / Config.SCORES_DIR / "systems").read(args.system)
    table = difficulty_measure_analysis(records, {row["record_id"]: row["bleu"] for row in rows})
    out = run_dir / Config.REPORT_DIR / "difficulty_measures.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(out, index=False)
    _emit(table.to_dict("records"))


def _add_run(p, required: bool = True) -> None:
    p.add_argument('--run', required=required, help=f'Run directory (relative names resolve under ${Config.RUN_ROOT_ENV})')


def _add_pipeline(p) -> None:
    p.add_argument('--config', help='Flat key = value pipeline config file')
    p.add_argument('--seed', type=int, help='Run seed')
    p.add_argument('--scheme', help='Partition scheme (default, left_closed, ten_bin, eleven_class, equal_width:k)')
    p.add_argument('--epochs', type=int, help='Adapter training epochs')
    p.add_argument('--lr', type=float, help='Adapter learning rate')
    p.add_argument('--beam', type=int, help='Test beam width')
    p.add_argument('--workers', type=int, help='Decoding threads')
    p.add_argument('--gamma', type=float, help='Distillation weight in [0, 1]')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradus", description="Gradus QR v1.0 - Rewriting Difficulty Toolkit")
    parser.add_argument('--verbose', action='store_true', help='Enable verbose logging')
    parser.add_argument('--log-dir', help='Also write logs to this directory')
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("score", help="Difficulty score per record")
    p.add_argument('--in', dest="input", required=True)
    p.add_argument('--out', dest="output", required=True)
    p.add_argument('--no-pronoun-rule', action='store_true')
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("partition", help="Class labels and proportions")
    p.add_argument('--in', dest="input", required=True)
    p.add_argument('--out', dest="output", help='Write the labeled corpus here')
    p.add_argument('--scheme', default="default")
    p.add_argument('--no-pronoun-rule', action='store_true')
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("train", help="Train the shared model or one private model")
    _add_run(p)
    _add_pipeline(p)
    p.add_argument('--train', required=True)
    p.add_argument('--valid')
    p.add_argument('--class', dest="class_label", help='Train the private model of this class')
    p.add_argument('--mode', choices=("adapter_only", "finetune_all"), default="adapter_only")
    p.add_argument('--gold', action='store_true', help='Use class labels stored in the corpus')
    p.set_defaults(func=cmd_train)

    for name, func, help_text in (("fuse", cmd_fuse, "Train the fusion classifier"),
                                  ("distill", cmd_distill, "Distill private models into a student")):
        p = sub.add_parser(name, help=help_text)
        _add_run(p)
        _add_pipeline(p)
        p.add_argument('--train', required=True)
        p.add_argument('--valid')
        p.add_argument('--labels', help='Comma-separated private model classes')
        p.add_argument('--gold', action='store_true')
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="Score one system on a test corpus")
    _add_run(p)
    _add_pipeline(p)
    p.add_argument('--test', required=True)
    p.add_argument('--system', required=True, help=f'S, P-<class> or one of {", ".join(ENSEMBLE_MODES)}')
    p.add_argument('--gold', action='store_true')
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="Rebuild the run report from score files")
    _add_run(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", help="Write a synthetic train/valid/test corpus")
    p.add_argument('--out', dest="output", required=True)
    p.add_argument('--seed', type=int, default=17)
    p.add_argument('--train-count', type=int, default=600)
    p.add_argument('--valid-count', type=int, default=100)
    p.add_argument('--test-count', type=int, default=200)
    p.set_defaults(func=cmd_synth)

    for source in ("canard", "qrecc"):
        p = sub.add_parser(f"convert-{source}", help=f"Convert the {source.upper()} release")
        p.add_argument('--in', dest="input", required=True)
        p.add_argument('--out', dest="output", required=True)
        p.set_defaults(func=lambda args, s=source: cmd_convert(args, s))

    for name, func, help_text in (("run", cmd_run, "Full pipeline"),
                                  ("heatmap", cmd_heatmap, "Train-class x test-class BLEU"),
                                  ("gamma-sweep", cmd_gamma_sweep, "BLEU against distillation weight"),
                                  ("seed-sweep", cmd_seed_sweep, "Pipeline repeated over seeds")):
        p = sub.add_parser(name, help=help_text)
        _add_run(p)
        _add_pipeline(p)
        p.add_argument('--data', required=True, help='Directory with train/valid/test.jsonl')
        p.set_defaults(func=func)
        if name == "heatmap":
            p.add_argument('--k', type=int, default=3)
            p.add_argument('--from-scratch', action='store_true')
        elif name == "gamma-sweep":
            p.add_argument('--gammas', required=True, help='Comma-separated values in [0, 1]')
        elif name == "seed-sweep":
            p.add_argument('--seeds', required=True, help='Comma-separated seeds')

    p = sub.add_parser("analyze", help="Compare difficulty measures by tercile")
    _add_run(p)
    p.add_argument('--test', required=True)
    p.add_argument('--system', default="S")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point; argparse exits with 2 on usage errors"""
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(Path(args.log_dir) if args.log_dir else None, verbose=args.verbose)

    try:
        args.func(args)
    except GradusError as e:
        print(json.dumps(e.to_dict(), sort_keys=True, default=str), file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}, sort_keys=True), file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print(json.dumps({"error": "Interrupted", "message": "interrupted by user"}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
