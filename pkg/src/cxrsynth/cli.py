"""Command line entry point.

Exit codes: 0 success, 1 validation/usage error, 2 runtime failure,
3 evaluation protocol violation.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_PROTOCOL = 0, 1, 2, 3

log = logging.getLogger("cxrsynth")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _label_rule(value: str) -> dict:
    p = Path(value)
    text = p.read_text() if p.is_file() else value
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"--label-rule is neither a JSON file nor JSON text: {exc}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cxrsynth", description="Minority-class synthesis and sensitivity benchmarking.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="run the whole pipeline from a JSON config")
    p.add_argument("config")

    p = sub.add_parser("make-toy", help="write a procedural blob/ring corpus")
    p.add_argument("out")
    p.add_argument("--negatives", type=int, default=300)
    p.add_argument("--positives", type=int, default=60)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--negative-kind", choices=["blob", "square"], default="blob")

    p = sub.add_parser("ingest", help="scan a class-per-subdirectory tree into a manifest")
    p.add_argument("--root", required=True)
    p.add_argument("--label-rule", required=True, help="JSON text or file: {subdir: {label, source_domain}}")
    p.add_argument("--patient-regex", default=None)
    p.add_argument("--task", default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("split", help="patient-level train/test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--fraction", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--unit", choices=["patient", "image"], default="patient")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("balance", help="undersample the majority class")
    p.add_argument("--manifest", required=True)
    p.add_argument("--target", type=int, default=None, help="default: minority count")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-gan", help="train the translation model")
    p.add_argument("--domain-a", required=True)
    p.add_argument("--domain-b", required=True)
    p.add_argument("--config", default=None, help="take gan settings from a run config")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lambda-cycle", type=float)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--mode", choices=["log", "least_squares"])
    p.add_argument("--image-size", type=int)
    p.add_argument("--base-width", type=int)
    p.add_argument("--residual-blocks", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path")

    p = sub.add_parser("synthesize", help="translate majority images into synthetic positives")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--majority", required=True)
    p.add_argument("--name", default="G1")
    p.add_argument("--task", default=None)
    p.add_argument("--direction", choices=["AtoB", "BtoA"], default="AtoB")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-clf", help="train one classifier configuration")
    p.add_argument("--train", required=True, help="real training manifest")
    p.add_argument("--g1", default=None, help="exported synthetic set directory")
    p.add_argument("--g2", default=None)
    p.add_argument("--backbone", choices=["vgg16", "resnet50", "densenet", "custom"], default="custom")
    real = p.add_mutually_exclusive_group()
    real.add_argument("--include-real", dest="include_real", action="store_true", default=True)
    real.add_argument("--only-synthetic", dest="include_real", action="store_false")
    p.add_argument("--include-g1", action="store_true")
    p.add_argument("--include-g2", action="store_true")
    p.add_argument("--learning-rate", type=float, default=0.001)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--min-delta", type=float, default=1e-4)
    p.add_argument("--max-epochs", type=int, default=100)
    p.add_argument("--image-size", type=int, default=256)
    p.add_argument("--pretrained", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default="")
    p.add_argument("--out", required=True, help="run directory")

    p = sub.add_parser("evaluate", help="evaluate a classifier on the held-out test set")
    p.add_argument("--model", required=True, help="classifier.pt")
    p.add_argument("--test", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True, help="run directory for metrics.json")

    p = sub.add_parser("compare", help="tabulate several metrics.json files")
    p.add_argument("metrics", nargs="+")
    p.add_argument("--out", required=True)

    p = sub.add_parser("embed", help="2-D UMAP embedding of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", default=None)
    p.add_argument("--source", choices=["raw_pixels", "classifier_features"], default="classifier_features")
    p.add_argument("--image-size", type=int, default=256)
    p.add_argument("--n-neighbors", type=int, default=15)
    p.add_argument("--min-dist", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output .png path")
    return parser


# ---------------------------------------------------------------------------
# command implementations; imports are deferred so --help stays fast


def cmd_run(args) -> int:
    from .config import load_run_config
    from .pipeline import run_pipeline

    cfg = load_run_config(args.config)
    result = run_pipeline(cfg)
    print(f"ran: {', '.join(result.ran) or '-'}")
    print(f"skipped: {', '.join(result.skipped) or '-'}")
    comparison = result.output_root / "comparison.txt"
    if comparison.exists():
        print(comparison.read_text(), end="")
    print(f"index: {result.run_manifest}")
    return EXIT_OK


def cmd_make_toy(args) -> int:
    from .toy import write_toy_corpus

    write_toy_corpus(
        args.out, args.negatives, args.positives, args.size, args.seed, negative_kind=args.negative_kind
    )
    print(args.out)
    return EXIT_OK


def cmd_ingest(args) -> int:
    from .data_core import ingest_directory, save_manifest

    manifest, failures = ingest_directory(args.root, _label_rule(args.label_rule), args.task, args.patient_regex)
    save_manifest(manifest, args.out)
    for rel, reason in failures:
        print(f"unreadable: {rel}: {reason}", file=sys.stderr)
    print(f"{len(manifest)} records -> {args.out}")
    return EXIT_OK


def cmd_split(args) -> int:
    from .data_core import SplitSpec, load_manifest, patient_level_split, save_manifest

    m = load_manifest(args.manifest)
    try:
        spec = SplitSpec(args.fraction, args.seed, args.unit)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    train, test = patient_level_split(m, spec)
    out = Path(args.out_dir)
    save_manifest(train, out / "train.jsonl")
    save_manifest(test, out / "test.jsonl")
    print(f"train {len(train)} / test {len(test)} -> {out}")
    return EXIT_OK


def cmd_balance(args) -> int:
    from .data_core import load_manifest, save_manifest, undersample_majority

    m = load_manifest(args.manifest)
    target = args.target if args.target is not None else min(m.count("positive"), m.count("negative"))
    save_manifest(undersample_majority(m, target, args.seed), args.out)
    return EXIT_OK


def cmd_train_gan(args) -> int:
    from .config import load_run_config
    from .data_core import load_manifest
    from .pipeline import device_from_env
    from .translation import GanHyperparams, export_loss_history, save_checkpoint, train_translation

    hp = load_run_config(args.config).gan if args.config else GanHyperparams()
    overrides = {
        "total_steps": args.steps,
        "batch_size": args.batch_size,
        "lambda_cycle": args.lambda_cycle,
        "learning_rate": args.learning_rate,
        "adversarial_mode": args.mode,
        "image_size": args.image_size,
        "seed": args.seed,
    }
    hp = replace(hp, **{k: v for k, v in overrides.items() if v is not None})
    gen_over = {"base_width": args.base_width, "residual_blocks": args.residual_blocks}
    hp = replace(hp, generator=replace(hp.generator, **{k: v for k, v in gen_over.items() if v is not None}))
    out = Path(args.out)
    model = train_translation(
        load_manifest(args.domain_a),
        load_manifest(args.domain_b),
        hp,
        checkpoint_every=args.checkpoint_every,
        checkpoint_dir=out.parent / "checkpoints",
        device=device_from_env(),
    )
    save_checkpoint(model, out)
    export_loss_history(model.loss_history, out.with_name("loss_history.csv"))
    print(f"{model.step_count} steps -> {out}")
    return EXIT_OK


def cmd_synthesize(args) -> int:
    from .data_core import load_manifest
    from .synthesis import export_dataset, preprocess_manifest, synthesize_minority
    from .translation import load_checkpoint

    model = load_checkpoint(args.checkpoint)
    majority = load_manifest(args.majority)
    task = args.task or majority.task_name
    synth = synthesize_minority(
        model, preprocess_manifest(majority, model.hyperparams.image_size), args.direction, args.name, task
    )
    export_dataset(synth, args.out)
    print(f"{len(synth)} synthetic images -> {args.out}")
    return EXIT_OK


def cmd_train_clf(args) -> int:
    from .classifier import TrainingConfig, assemble_training_set, build_classifier, save_classifier, train_classifier
    from .data_core import compute_skew, load_manifest, save_manifest
    from .pipeline import device_from_env
    from .synthesis import load_synthetic_set

    try:
        cfg = TrainingConfig(
            backbone=args.backbone,
            include_real=args.include_real,
            include_G1=args.include_g1,
            include_G2=args.include_g2,
            learning_rate=args.learning_rate,
            batch_size=args.batch_size,
            early_stop_patience=args.patience,
            early_stop_min_delta=args.min_delta,
            max_epochs=args.max_epochs,
            image_size=args.image_size,
            pretrained=args.pretrained,
            seed=args.seed,
            name=args.name,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if (args.include_g1 and not args.g1) or (args.include_g2 and not args.g2):
        raise UsageError("--include-g1/--include-g2 need the matching --g1/--g2 directory")
    g1 = load_synthetic_set(args.g1) if args.g1 else None
    g2 = load_synthetic_set(args.g2) if args.g2 else None
    train_set = assemble_training_set(load_manifest(args.train), g1, g2, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    save_manifest(train_set, out / "train_manifest.jsonl")
    clf = train_classifier(build_classifier(cfg), train_set, cfg, device=device_from_env())
    with (out / "curve.csv").open("w") as f:
        f.write("epoch,loss\n")
        f.writelines(f"{i},{v!r}\n" for i, v in enumerate(clf.curve, start=1))
    save_classifier(clf, out / "classifier.pt")
    print(f"{cfg.config_id}: skew {compute_skew(train_set).skew:.2f}, stopped at epoch {clf.stopped_epoch}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .classifier import load_classifier
    from .data_core import load_manifest
    from .evaluation import check_test_protocol, evaluate

    test = load_manifest(args.test)
    check_test_protocol(test)
    report = evaluate(load_classifier(args.model), test, args.threshold)
    report.write(args.out)
    print(f"{report.config_id}: SEN {report.sensitivity:.2f}%  FN {report.FN}")
    return EXIT_OK


def cmd_compare(args) -> int:
    from .data_core import compute_skew, load_manifest
    from .evaluation import EvalReport, comparison_report

    reports, skews = [], []
    for m in args.metrics:
        run_dir = Path(m) if Path(m).is_dir() else Path(m).parent
        reports.append(EvalReport.read(run_dir))
        train_manifest = run_dir / "train_manifest.jsonl"
        skews.append(compute_skew(load_manifest(train_manifest)) if train_manifest.exists() else None)
    table = comparison_report(reports, skews)
    table.write(args.out)
    print(table.to_text(), end="")
    return EXIT_OK


def cmd_embed(args) -> int:
    from .classifier import load_classifier
    from .data_core import load_manifest
    from .embedding import EmbeddingParams, compute_embedding, export_embedding_plot, extract_features, sample_tags

    m = load_manifest(args.manifest)
    model = load_classifier(args.model) if args.model else None
    feats = extract_features(m, args.source, model, args.image_size)
    params = EmbeddingParams(args.n_neighbors, args.min_dist, args.seed)
    result = compute_embedding(feats, params, m.sample_ids, sample_tags(m), args.source)
    png, csv_path = export_embedding_plot(result, args.out)
    print(f"{png}\n{csv_path}")
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "make-toy": cmd_make_toy,
    "ingest": cmd_ingest,
    "split": cmd_split,
    "balance": cmd_balance,
    "train-gan": cmd_train_gan,
    "synthesize": cmd_synthesize,
    "train-clf": cmd_train_clf,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "embed": cmd_embed,
}


def main(argv: list[str] | None = None) -> int:
    from .config import ConfigError
    from .data_core import ManifestError
    from .evaluation import ProtocolViolation

    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ProtocolViolation as exc:
        print(f"protocol violation: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except Exception as exc:
        from .pipeline import StageError

        if isinstance(exc, StageError) and isinstance(exc.cause, ProtocolViolation):
            print(f"protocol violation in stage {exc.stage}: {exc.cause}", file=sys.stderr)
            return EXIT_PROTOCOL
        if isinstance(exc, (ManifestError, FileNotFoundError)) and not isinstance(exc, StageError):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_VALIDATION
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
