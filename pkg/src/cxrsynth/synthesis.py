"""Bulk translation of majority-class images into a synthetic minority set."""
from __future__ import annotations

import json
import shutil
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data_core import (
    DatasetManifest,
    Record,
    load_pixels,
    resize_pixels,
    save_manifest,
    write_png,
)
from .translation import TranslationModel, translate

TARGET_DOMAIN = {"normal": "covid", "pneumonia": "covid", "toy_a": "toy_b"}


@dataclass(frozen=True)
class SyntheticSet:
    name: str
    source_task: str
    model_digest: str
    manifest: DatasetManifest
    sources: tuple[tuple[str, str], ...] = ()  # (synthetic id, source id)

    def __len__(self) -> int:
        return len(self.manifest)


def synthetic_id(source_id: str, task: str) -> str:
    return f"{source_id.replace('/', '_')}__synth_{task}"


def synthesize_minority(
    model: TranslationModel,
    majority: DatasetManifest,
    direction: str = "AtoB",
    name: str = "G1",
    source_task: str | None = None,
    chunk: int = 16,
) -> SyntheticSet:
    """Translate every record of ``majority`` into a positive synthetic record.

    Sources must already be at the model resolution. Output records carry
    their pixels in memory until :func:`export_dataset` writes them.
    """
    task = source_task or majority.task_name
    size = model.hyperparams.image_size
    records: list[Record] = []
    sources: list[tuple[str, str]] = []
    src = list(majority.records)
    for start in range(0, len(src), chunk):
        part = src[start : start + chunk]
        batch = []
        for rec in part:
            px = load_pixels(majority, rec)
            if px.shape[:2] != (size, size):
                raise ValueError(
                    f"{rec.sample_id}: resolution {px.shape[:2]} does not match model resolution {size}; "
                    "preprocess the manifest first"
                )
            batch.append(px)
        out = translate(model, np.stack(batch), direction)
        for rec, img in zip(part, out):
            sid = synthetic_id(rec.sample_id, task)
            records.append(
                Record(
                    path=f"images/{sid}.png",
                    sample_id=sid,
                    label="positive",
                    provenance="synthetic",
                    source_domain=TARGET_DOMAIN.get(rec.source_domain, "covid"),
                    patient_id=None,
                    pixels=img,
                )
            )
            sources.append((sid, rec.sample_id))
    manifest = DatasetManifest(f"{name}_{task}", tuple(records), None)
    return SyntheticSet(name, task, model.digest(), manifest, tuple(sources))


def preprocess_manifest(manifest: DatasetManifest, size: int) -> DatasetManifest:
    """Attach resized pixels to every record (in memory)."""
    recs = [replace(r, pixels=resize_pixels(load_pixels(manifest, r), size)) for r in manifest.records]
    return manifest.with_records(recs)


def export_dataset(synth: SyntheticSet, out_dir: str | Path, extra: dict | None = None) -> Path:
    """Write ``images/*.png``, ``manifest.jsonl`` and ``provenance.json``.

    Files are staged in a sibling temporary directory and moved into place
    only when everything has been written; a failure leaves no partial tree.
    """
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}-", dir=out_dir.parent))
    try:
        (staging / "images").mkdir()
        for rec in synth.manifest.records:
            pixels = load_pixels(synth.manifest, rec)
            write_png(pixels, staging / rec.path)
        on_disk = synth.manifest.with_records(replace(r, pixels=None) for r in synth.manifest.records)
        on_disk = replace(on_disk, root=staging)
        save_manifest(on_disk, staging / "manifest.jsonl")
        provenance = {
            "name": synth.name,
            "source_task": synth.source_task,
            "model_digest": synth.model_digest,
            "count": len(synth),
            "manifest_digest": on_disk.content_digest,
            "sources": [list(s) for s in synth.sources],
        }
        if extra:
            provenance.update(extra)
        (staging / "provenance.json").write_text(json.dumps(provenance, indent=2, sort_keys=True) + "\n")
        if out_dir.exists():
            shutil.rmtree(out_dir)
        staging.rename(out_dir)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    return out_dir


def load_synthetic_set(path: str | Path) -> SyntheticSet:
    from .data_core import load_manifest

    path = Path(path)
    meta = json.loads((path / "provenance.json").read_text())
    manifest = load_manifest(path / "manifest.jsonl", task_name=f"{meta['name']}_{meta['source_task']}")
    return SyntheticSet(
        meta["name"],
        meta["source_task"],
        meta["model_digest"],
        manifest,
        tuple(tuple(s) for s in meta.get("sources", [])),
    )
