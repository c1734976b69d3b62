"""End-to-end orchestration of a :class:`RunConfig` with digest-keyed stage
caching.

Output tree under ``output_root``::

    manifests/{all,train,test,gan_A,gan_B}.jsonl
    gan/{checkpoint.pt,loss_history.csv}
    synthetic/G1/{images/,manifest.jsonl,provenance.json}
    classifiers/<config>/{config.json,curve.csv,classifier.pt,train_manifest.jsonl,
                          metrics.json,confidences.csv}
    comparison.{csv,txt}
    embedding/<config>.{png,csv}
    stages/<stage>.json        cache keys
    run_manifest.json          index of every artifact
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .classifier import (
    assemble_training_set,
    build_classifier,
    load_classifier,
    save_classifier,
    train_classifier,
)
from .config import STAGES, RunConfig
from .data_core import (
    compute_skew,
    ingest_directory,
    load_manifest,
    patient_level_split,
    save_manifest,
    undersample_majority,
)
from .embedding import EmbeddingParams, compute_embedding, export_embedding_plot, extract_features, sample_tags
from .evaluation import EvalReport, check_test_protocol, comparison_report, evaluate
from .synthesis import export_dataset, load_synthetic_set, preprocess_manifest, synthesize_minority
from .translation import export_loss_history, load_checkpoint, save_checkpoint, train_translation

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _key(payload) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()


def safe_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._+-]+", "_", name)


def device_from_env() -> str:
    dev = os.environ.get("RUN_DEVICE", "cpu")
    if dev.startswith("cuda") and not torch.cuda.is_available():
        raise RuntimeError(f"RUN_DEVICE={dev} requested but CUDA is unavailable")
    return dev


@dataclass
class StageCache:
    root: Path
    ran: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    def _file(self, stage: str) -> Path:
        return self.root / "stages" / f"{safe_name(stage)}.json"

    def fresh(self, stage: str, key: str, outputs: list[Path]) -> bool:
        f = self._file(stage)
        if not f.is_file():
            return False
        try:
            stored = json.loads(f.read_text())
        except json.JSONDecodeError:
            return False
        ok = stored.get("key") == key and all(Path(p).exists() for p in outputs)
        if ok:
            self.skipped.append(stage)
            log.info("stage %s: up to date, skipped", stage)
        return ok

    def done(self, stage: str, key: str, outputs: list[Path]) -> None:
        f = self._file(stage)
        f.parent.mkdir(parents=True, exist_ok=True)
        rel = [os.path.relpath(p, self.root) for p in outputs]
        f.write_text(json.dumps({"stage": stage, "key": key, "outputs": rel}, indent=2) + "\n")
        self.ran.append(stage)


@dataclass
class PipelineResult:
    output_root: Path
    ran: list[str]
    skipped: list[str]
    reports: list[EvalReport]
    test_digest: str
    run_manifest: Path


def run_pipeline(cfg: RunConfig) -> PipelineResult:
    out = cfg.output_root
    out.mkdir(parents=True, exist_ok=True)
    cache = StageCache(out)
    device = device_from_env()
    stage = "ingest"
    try:
        # ingest
        all_path = out / "manifests" / "all.jsonl"
        listing = sorted(
            (p.relative_to(cfg.dataset_root).as_posix(), p.stat().st_size)
            for p in cfg.dataset_root.rglob("*")
            if p.is_file()
        )
        key = _key(["ingest", str(cfg.dataset_root), cfg.label_rule, cfg.patient_regex, listing])
        if not cache.fresh(stage, key, [all_path]):
            manifest, failures = ingest_directory(
                cfg.dataset_root, cfg.label_rule, task_name=cfg.task_name, patient_id_from=cfg.patient_regex
            )
            save_manifest(manifest, all_path)
            (out / "manifests" / "ingest_failures.json").write_text(json.dumps(failures, indent=2) + "\n")
            cache.done(stage, key, [all_path])
        everything = load_manifest(all_path, cfg.task_name)

        # split
        stage = "split"
        train_path, test_path = out / "manifests" / "train.jsonl", out / "manifests" / "test.jsonl"
        key = _key([stage, everything.content_digest, cfg.split.train_fraction, cfg.split.seed, cfg.split.unit])
        if not cache.fresh(stage, key, [train_path, test_path]):
            train, test = patient_level_split(everything, cfg.split)
            save_manifest(train, train_path)
            save_manifest(test, test_path)
            cache.done(stage, key, [train_path, test_path])
        train = load_manifest(train_path, f"{cfg.task_name}:train")
        test = load_manifest(test_path, f"{cfg.task_name}:test")
        check_test_protocol(test)

        # balance
        stage = "balance"
        a_path, b_path = out / "manifests" / "gan_A.jsonl", out / "manifests" / "gan_B.jsonl"
        key = _key([stage, train.content_digest, cfg.stage_seed(stage)])
        if not cache.fresh(stage, key, [a_path, b_path]):
            n_pos = train.count("positive")
            balanced = undersample_majority(train, n_pos, cfg.stage_seed(stage), label="negative")
            save_manifest(balanced.filter(label="negative"), a_path)
            save_manifest(balanced.filter(label="positive"), b_path)
            cache.done(stage, key, [a_path, b_path])
        domain_A, domain_B = load_manifest(a_path), load_manifest(b_path)

        # train-gan
        stage = "train-gan"
        ckpt = out / "gan" / "checkpoint.pt"
        history_csv = out / "gan" / "loss_history.csv"
        key = _key([stage, domain_A.content_digest, domain_B.content_digest, cfg.gan.to_dict()])
        if not cache.fresh(stage, key, [ckpt, history_csv]):
            model = train_translation(
                domain_A,
                domain_B,
                cfg.gan,
                checkpoint_every=cfg.checkpoint_every,
                checkpoint_dir=out / "gan" / "checkpoints",
                device=device,
            )
            save_checkpoint(model, ckpt)
            export_loss_history(model.loss_history, history_csv)
            cache.done(stage, key, [ckpt, history_csv])
        model = load_checkpoint(ckpt)

        # synthesize
        stage = "synthesize"
        g1_dir = out / "synthetic" / "G1"
        majority = train.filter(label="negative", provenance="real")
        key = _key([stage, model.digest(), majority.content_digest, cfg.gan_direction])
        if not cache.fresh(stage, key, [g1_dir / "manifest.jsonl"]):
            synth = synthesize_minority(
                model,
                preprocess_manifest(majority, cfg.gan.image_size),
                cfg.gan_direction,
                name="G1",
                source_task=cfg.task_name,
            )
            export_dataset(synth, g1_dir, extra={"hyperparams": cfg.gan.to_dict(), "task": cfg.task_name})
            cache.done(stage, key, [g1_dir / "manifest.jsonl"])
        g1 = load_synthetic_set(g1_dir)
        g2 = load_synthetic_set(cfg.secondary_synthetic) if cfg.secondary_synthetic else None

        # train-clf + evaluate
        reports: list[EvalReport] = []
        skews = []
        trained = {}
        for clf_cfg in cfg.classifiers:
            run_dir = out / "classifiers" / safe_name(clf_cfg.config_id)
            train_set = assemble_training_set(train, g1, g2, clf_cfg)
            skews.append(compute_skew(train_set))
            stage = f"train-clf:{clf_cfg.config_id}"
            clf_path = run_dir / "classifier.pt"
            key = _key(["train-clf", train_set.content_digest, clf_cfg.to_dict()])
            if not cache.fresh(stage, key, [clf_path]):
                run_dir.mkdir(parents=True, exist_ok=True)
                (run_dir / "config.json").write_text(json.dumps(clf_cfg.to_dict(), indent=2, sort_keys=True) + "\n")
                save_manifest(train_set, run_dir / "train_manifest.jsonl")
                clf = train_classifier(build_classifier(clf_cfg), train_set, clf_cfg, device=device)
                with (run_dir / "curve.csv").open("w", newline="") as f:
                    w = csv.writer(f, lineterminator="\n")
                    w.writerow(["epoch", "loss"])
                    w.writerows((i, repr(v)) for i, v in enumerate(clf.curve, start=1))
                save_classifier(clf, clf_path)
                cache.done(stage, key, [clf_path])
            clf = load_classifier(clf_path)
            trained[clf_cfg.config_id] = clf

            stage = f"evaluate:{clf_cfg.config_id}"
            key = _key(["evaluate", sha256_file(clf_path), test.content_digest, cfg.threshold])
            if not cache.fresh(stage, key, [run_dir / "metrics.json"]):
                report = evaluate(clf, test, cfg.threshold)
                report.write(run_dir)
                cache.done(stage, key, [run_dir / "metrics.json"])
            reports.append(EvalReport.read(run_dir))

        # compare
        stage = "compare"
        if reports:
            key = _key([stage, [r.metrics() for r in reports], [s.skew for s in skews]])
            if not cache.fresh(stage, key, [out / "comparison.csv"]):
                table = comparison_report(reports, skews)
                table.write(out)
                cache.done(stage, key, [out / "comparison.csv"])

        # embed
        stage = "embed"
        emb = cfg.embedding
        if emb.get("enabled", True) and cfg.classifiers:
            source = emb.get("feature_source", "classifier_features")
            params = EmbeddingParams(emb.get("n_neighbors", 15), emb.get("min_dist", 0.1), cfg.stage_seed(stage))
            vgg = [c.config_id for c in cfg.classifiers if c.backbone == "vgg16"]
            chosen = emb.get("classifier") or (vgg or [cfg.classifiers[0].config_id])[0]
            if chosen not in trained:
                raise ValueError(f"embedding classifier {chosen!r} is not among the configured classifiers")
            for clf_cfg in cfg.classifiers:
                samples = assemble_training_set(train, g1, g2, clf_cfg)
                png = out / "embedding" / f"{safe_name(clf_cfg.config_id)}.png"
                key = _key(
                    [stage, samples.content_digest, source, chosen, sha256_file(out / "classifiers" / safe_name(chosen) / "classifier.pt"), params.__dict__]
                )
                sub = f"embed:{clf_cfg.config_id}"
                if len(samples) <= params.n_neighbors or cache.fresh(sub, key, [png]):
                    continue
                feats = extract_features(samples, source, trained[chosen], image_size=cfg.image_size)
                result = compute_embedding(feats, params, samples.sample_ids, sample_tags(samples), source)
                export_embedding_plot(result, png, title=clf_cfg.config_id)
                cache.done(sub, key, [png])

        stage = "index"
        index = write_run_manifest(cfg, cache)
    except StageError:
        raise
    except Exception as exc:
        if hasattr(exc, "snapshot"):
            (out / "failure_snapshot.json").write_text(json.dumps(exc.snapshot, indent=2, default=str) + "\n")
        raise StageError(stage, exc) from exc

    return PipelineResult(out, cache.ran, cache.skipped, reports, test.content_digest, index)


def write_run_manifest(cfg: RunConfig, cache: StageCache) -> Path:
    out = cfg.output_root
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "run_manifest.json")
    index = {
        "task_name": cfg.task_name,
        "seed": cfg.seed,
        "stage_seeds": {s: cfg.stage_seed(s) for s in STAGES},
        "config": cfg.raw,
        "stages_run": cache.ran,
        "stages_skipped": cache.skipped,
        "artifacts": [{"path": p.relative_to(out).as_posix(), "sha256": sha256_file(p)} for p in files],
    }
    path = out / "run_manifest.json"
    path.write_text(json.dumps(index, indent=2, sort_keys=True, default=str) + "\n")
    return path
