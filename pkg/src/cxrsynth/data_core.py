"""Image records, manifests, patient-level splitting, skew accounting and
preprocessing.

A :class:`DatasetManifest` is an immutable, sorted list of :class:`Record`
entries plus the directory their paths are relative to. Pixels are read
lazily from disk unless a record carries them in memory (synthetic images
before export).
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import warnings
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

LABELS = ("negative", "positive")
PROVENANCES = ("real", "synthetic")
SOURCE_DOMAINS = ("normal", "pneumonia", "covid", "toy_a", "toy_b")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
DEFAULT_SIZE = 256


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ImageSample:
    sample_id: str
    pixels: np.ndarray  # H x W x C, float32 in [0, 1]
    label: str
    provenance: str = "real"
    source_domain: str = "normal"
    patient_id: str | None = None

    def __post_init__(self):
        _check_enum("label", self.label, LABELS)
        _check_enum("provenance", self.provenance, PROVENANCES)
        _check_enum("source_domain", self.source_domain, SOURCE_DOMAINS)
        if self.provenance == "synthetic" and self.label != "positive":
            raise ValueError("synthetic samples must be labeled positive")
        if self.pixels.ndim != 3:
            raise ValueError(f"pixels must be H x W x C, got shape {self.pixels.shape}")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")


@dataclass(frozen=True)
class Record:
    path: str
    sample_id: str
    label: str
    provenance: str = "real"
    source_domain: str = "normal"
    patient_id: str | None = None
    # in-memory image (H x W x C); not serialized, not part of equality
    pixels: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        _check_enum("label", self.label, LABELS)
        _check_enum("provenance", self.provenance, PROVENANCES)
        _check_enum("source_domain", self.source_domain, SOURCE_DOMAINS)
        if self.provenance == "synthetic" and self.label != "positive":
            raise ManifestError(f"{self.sample_id}: synthetic records must be positive")

    def to_json(self) -> str:
        payload = {
            "path": self.path,
            "sample_id": self.sample_id,
            "patient_id": self.patient_id,
            "label": self.label,
            "provenance": self.provenance,
            "source_domain": self.source_domain,
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "Record":
        d = json.loads(line)
        return cls(
            path=d["path"],
            sample_id=d["sample_id"],
            patient_id=d.get("patient_id"),
            label=d["label"],
            provenance=d.get("provenance", "real"),
            source_domain=d.get("source_domain", "normal"),
        )


def _check_enum(name, value, allowed):
    if value not in allowed:
        raise ValueError(f"{name} must be one of {allowed}, got {value!r}")


def _digest(records: Sequence[Record]) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(r.to_json().encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


@dataclass(frozen=True)
class DatasetManifest:
    task_name: str
    records: tuple[Record, ...]
    root: Path | None = None
    content_digest: str = ""

    def __post_init__(self):
        records = tuple(sorted(self.records, key=lambda r: r.sample_id))
        counts = Counter(r.sample_id for r in records)
        dupes = sorted(i for i, n in counts.items() if n > 1)
        if dupes:
            raise ManifestError(f"duplicate sample_id(s): {', '.join(dupes)}")
        object.__setattr__(self, "records", records)
        object.__setattr__(self, "content_digest", _digest(records))
        if self.root is not None:
            object.__setattr__(self, "root", Path(self.root))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def sample_ids(self) -> list[str]:
        return [r.sample_id for r in self.records]

    def count(self, label: str) -> int:
        return sum(1 for r in self.records if r.label == label)

    def filter(self, **criteria) -> "DatasetManifest":
        """Keep records whose attributes equal every given value."""
        kept = [r for r in self.records if all(getattr(r, k) == v for k, v in criteria.items())]
        return replace(self, records=tuple(kept))

    def with_records(self, records: Iterable[Record]) -> "DatasetManifest":
        return replace(self, records=tuple(records))

    def resolve(self, record: Record) -> Path:
        if self.root is None:
            return Path(record.path)
        return self.root / record.path

    def to_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.records)


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> DatasetManifest:
    """Write ``manifest`` as JSON lines with paths relative to the file's
    directory. Returns the manifest as it will be read back."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rebased = _rebase(manifest, path.parent.resolve())
    path.write_text(rebased.to_jsonl(), encoding="utf-8")
    return rebased


def load_manifest(path: str | os.PathLike, task_name: str | None = None) -> DatasetManifest:
    path = Path(path)
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    records = [Record.from_json(ln) for ln in lines]
    return DatasetManifest(
        task_name=task_name or path.stem,
        records=tuple(records),
        root=path.parent.resolve(),
    )


def _rebase(manifest: DatasetManifest, new_root: Path) -> DatasetManifest:
    if manifest.root is None or Path(manifest.root).resolve() == new_root:
        return replace(manifest, root=new_root)
    old_root = Path(manifest.root).resolve()
    records = [
        replace(r, path=Path(os.path.relpath(old_root / r.path, new_root)).as_posix())
        for r in manifest.records
    ]
    return DatasetManifest(manifest.task_name, tuple(records), new_root)


# ---------------------------------------------------------------------------
# image IO


def read_image(path: str | os.PathLike) -> np.ndarray:
    """Decode an 8/16-bit grayscale or RGB file to H x W x 1 float32 in [0, 1].

    RGB inputs are reduced to luminance; radiographs are single channel.
    """
    with Image.open(path) as im:
        im.load()
        mode = im.mode
        if mode in ("I;16", "I;16B", "I;16L"):
            arr = np.asarray(im, dtype=np.float64) / 65535.0
        elif mode == "I":
            raw = np.asarray(im, dtype=np.float64)
            scale = 65535.0 if raw.max(initial=0) > 255 else 255.0
            arr = raw / scale
        elif mode in ("L", "P", "1"):
            arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
        elif mode == "LA":
            arr = np.asarray(im.getchannel("L"), dtype=np.float64) / 255.0
        elif mode in ("RGB", "RGBA", "CMYK", "YCbCr"):
            arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
        else:
            raise ValueError(f"unsupported image mode {mode!r}")
    return np.clip(arr, 0.0, 1.0).astype(np.float32)[:, :, None]


def quantize(pixels: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint8 with round-half-up."""
    return np.floor(np.clip(pixels, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_png(pixels: np.ndarray, path: str | os.PathLike) -> None:
    arr = quantize(pixels)
    if arr.ndim == 3:
        arr = arr[:, :, 0] if arr.shape[2] == 1 else arr
    Image.fromarray(arr).save(path, format="PNG", optimize=False, compress_level=6)


def load_pixels(manifest: DatasetManifest, record: Record) -> np.ndarray:
    if record.pixels is not None:
        return record.pixels
    return read_image(manifest.resolve(record))


def load_sample(manifest: DatasetManifest, record: Record) -> ImageSample:
    return ImageSample(
        sample_id=record.sample_id,
        pixels=load_pixels(manifest, record),
        label=record.label,
        provenance=record.provenance,
        source_domain=record.source_domain,
        patient_id=record.patient_id,
    )


def load_array(manifest: DatasetManifest, size: int = DEFAULT_SIZE) -> np.ndarray:
    """Stack preprocessed images of every record into N x size x size x 1."""
    out = np.empty((len(manifest), size, size, 1), dtype=np.float32)
    for i, rec in enumerate(manifest.records):
        out[i] = resize_pixels(load_pixels(manifest, rec), size)
    return out


# ---------------------------------------------------------------------------
# operations


@dataclass(frozen=True)
class LabelRule:
    label: str
    source_domain: str


def ingest_directory(
    root: str | os.PathLike,
    label_rule: Mapping[str, LabelRule | tuple[str, str] | Mapping[str, str]],
    task_name: str | None = None,
    patient_id_from: Callable[[Path], str | None] | str | None = None,
) -> tuple[DatasetManifest, list[tuple[str, str]]]:
    """Scan ``root/<subdir>/**`` for images, one subdirectory per class.

    ``label_rule`` maps a subdirectory name to its (label, source_domain).
    ``patient_id_from`` is a callable on the relative path, or a regex with a
    ``patient`` named group matched against the file name.

    Returns the manifest and a list of ``(relative_path, reason)`` for files
    that could not be decoded.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root does not exist: {root}")
    rules = {k: _as_rule(v) for k, v in label_rule.items()}
    patient_fn = _patient_fn(patient_id_from)

    records: list[Record] = []
    failures: list[tuple[str, str]] = []
    for subdir, rule in sorted(rules.items()):
        base = root / subdir
        if not base.is_dir():
            continue
        for path in sorted(p for p in base.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES):
            rel = path.relative_to(root).as_posix()
            try:
                with Image.open(path) as im:
                    im.load()
                    if im.width == 0 or im.height == 0:
                        raise ValueError("zero-area image")
            except (OSError, UnidentifiedImageError, ValueError, SyntaxError) as exc:
                failures.append((rel, f"{type(exc).__name__}: {exc}"))
                continue
            records.append(
                Record(
                    path=rel,
                    sample_id=str(Path(rel).with_suffix("")),
                    patient_id=patient_fn(Path(rel)),
                    label=rule.label,
                    provenance="real",
                    source_domain=rule.source_domain,
                )
            )
    if not records and not failures:
        raise ManifestError(f"no images found under {root}")
    if failures:
        log.warning("%d file(s) under %s could not be decoded", len(failures), root)
    return DatasetManifest(task_name or root.name, tuple(records), root.resolve()), failures


def _as_rule(v) -> LabelRule:
    if isinstance(v, LabelRule):
        return v
    if isinstance(v, Mapping):
        return LabelRule(v["label"], v["source_domain"])
    label, domain = v
    return LabelRule(label, domain)


def _patient_fn(spec) -> Callable[[Path], str | None]:
    if spec is None:
        return lambda p: None
    if callable(spec):
        return spec
    pattern = re.compile(spec)

    def from_regex(p: Path) -> str | None:
        m = pattern.search(p.name)
        return m.group("patient") if m else None

    return from_regex


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0
    unit: str = "patient"

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie strictly between 0 and 1")
        _check_enum("unit", self.unit, ("patient", "image"))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def patient_level_split(
    manifest: DatasetManifest, spec: SplitSpec
) -> tuple[DatasetManifest, DatasetManifest]:
    """Split so that no patient contributes to both sides.

    Units (patients, or images when falling back) are stratified by label:
    the overall train count is ``round(fraction * units)`` (ties to train)
    and is shared among labels by largest remainder.
    """
    unit = spec.unit
    if unit == "patient" and any(r.patient_id is None for r in manifest.records):
        msg = (
            f"manifest {manifest.task_name!r} has records without patient_id; "
            "falling back to an image-level split"
        )
        warnings.warn(msg, stacklevel=2)
        log.warning(msg)
        unit = "image"

    groups: dict[str, list[Record]] = {}
    for r in manifest.records:
        key = r.patient_id if unit == "patient" else r.sample_id
        groups.setdefault(key, []).append(r)
    if len(groups) < 2:
        raise ManifestError("cannot split: fewer than two patients/images")

    by_label: dict[str, list[str]] = {}
    for key in sorted(groups):
        label = "positive" if any(r.label == "positive" for r in groups[key]) else "negative"
        by_label.setdefault(label, []).append(key)

    total = len(groups)
    n_train = min(max(_round_half_up(spec.train_fraction * total), 1), total - 1)
    quotas = _allocate(n_train, {k: len(v) for k, v in by_label.items()}, spec.train_fraction)

    rng = np.random.default_rng(spec.seed)
    train_keys: set[str] = set()
    for label in sorted(by_label):
        keys = list(by_label[label])
        order = rng.permutation(len(keys))
        train_keys.update(keys[i] for i in order[: quotas[label]])

    train = [r for k, rs in groups.items() if k in train_keys for r in rs]
    test = [r for k, rs in groups.items() if k not in train_keys for r in rs]
    return manifest.with_records(train), manifest.with_records(test)


def _allocate(n_train: int, sizes: Mapping[str, int], fraction: float) -> dict[str, int]:
    ideal = {k: fraction * n for k, n in sizes.items()}
    quota = {k: min(int(math.floor(v)), sizes[k]) for k, v in ideal.items()}
    remaining = n_train - sum(quota.values())
    order = sorted(sizes, key=lambda k: (-(ideal[k] - math.floor(ideal[k])), k))
    while remaining > 0:
        progressed = False
        for k in order:
            if remaining and quota[k] < sizes[k]:
                quota[k] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            break
    while remaining < 0:
        for k in reversed(order):
            if remaining and quota[k] > 0:
                quota[k] -= 1
                remaining += 1
    return quota


@dataclass(frozen=True)
class SkewReport:
    negatives: int
    positives: int
    skew: float


def skew_ratio(negatives: int, positives: int) -> float:
    if positives <= 0:
        raise ValueError("undefined skew: no positive examples")
    return negatives / positives


def compute_skew(manifest: DatasetManifest) -> SkewReport:
    neg, pos = manifest.count("negative"), manifest.count("positive")
    return SkewReport(neg, pos, skew_ratio(neg, pos))


def resize_pixels(pixels: np.ndarray, size: int = DEFAULT_SIZE) -> np.ndarray:
    """Bilinear (antialiased) resize of H x W x C to size x size x C, clipped to [0, 1]."""
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    h, w = pixels.shape[:2]
    if h == 0 or w == 0:
        raise ValueError("cannot preprocess a zero-area image")
    if (h, w) == (size, size):
        out = pixels.astype(np.float32, copy=True)
    else:
        t = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float32)).permute(2, 0, 1)[None]
        t = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False, antialias=True)
        out = t[0].permute(1, 2, 0).numpy()
    return np.clip(out, 0.0, 1.0)


def preprocess(sample: ImageSample, size: int = DEFAULT_SIZE) -> ImageSample:
    return replace(sample, pixels=resize_pixels(sample.pixels, size))


def undersample_majority(
    manifest: DatasetManifest, target_count: int, seed: int, label: str | None = None
) -> DatasetManifest:
    """Keep ``target_count`` uniformly chosen records of the majority label."""
    if label is None:
        label = max(LABELS, key=lambda lb: (manifest.count(lb), lb == "negative"))
    majority = [r for r in manifest.records if r.label == label]
    if target_count > len(majority):
        raise ManifestError(
            f"target_count {target_count} exceeds the {len(majority)} available {label} records"
        )
    if target_count < 0:
        raise ManifestError("target_count must be non-negative")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(majority), size=target_count, replace=False)
    keep = {majority[i].sample_id for i in chosen}
    kept = [r for r in manifest.records if r.label != label or r.sample_id in keep]
    return manifest.with_records(kept)


def merge_manifests(
    parts: Sequence[DatasetManifest], task_name: str | None = None
) -> DatasetManifest:
    if not parts:
        raise ManifestError("nothing to merge")
    seen: dict[str, str] = {}
    for part in parts:
        for r in part.records:
            if r.sample_id in seen:
                raise ManifestError(
                    f"sample_id collision: {r.sample_id!r} in {seen[r.sample_id]!r} and {part.task_name!r}"
                )
            seen[r.sample_id] = part.task_name

    on_disk = [Path(p.root).resolve() for p in parts if p.root is not None and len(p)]
    root = None
    if on_disk:
        root = on_disk[0] if len(set(on_disk)) == 1 else Path(os.path.commonpath(on_disk))
    records: list[Record] = []
    for part in parts:
        if part.root is not None and root is not None and len(part):
            part = _rebase(part, root)
        records.extend(part.records)
    return DatasetManifest(task_name or parts[0].task_name, tuple(records), root)
