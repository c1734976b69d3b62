"""Feature extraction and seeded 2-D UMAP embeddings for separability plots."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .classifier import TrainedClassifier, extract_gap_features
from .data_core import DatasetManifest, load_array

FEATURE_SOURCES = ("raw_pixels", "classifier_features")


@dataclass(frozen=True)
class EmbeddingParams:
    n_neighbors: int = 15
    min_dist: float = 0.1
    seed: int = 0


@dataclass
class EmbeddingResult:
    coordinates: np.ndarray  # N x 2
    labels: list[str]
    sample_ids: list[str]
    params: EmbeddingParams
    feature_source: str


def extract_features(
    samples: DatasetManifest,
    source: str = "classifier_features",
    model: TrainedClassifier | None = None,
    image_size: int = 256,
) -> np.ndarray:
    if source not in FEATURE_SOURCES:
        raise ValueError(f"source must be one of {FEATURE_SOURCES}")
    if source == "classifier_features":
        if model is None:
            raise ValueError("classifier_features requires a trained model")
        return extract_gap_features(model, load_array(samples, model.config.image_size))
    images = load_array(samples, image_size)
    return images.reshape(len(images), -1)


def sample_tags(samples: DatasetManifest) -> list[str]:
    """Legend tag per record: ``<label>/<provenance>``."""
    return [f"{r.label}/{r.provenance}" for r in samples.records]


def compute_embedding(
    features: np.ndarray,
    params: EmbeddingParams = EmbeddingParams(),
    sample_ids: Sequence[str] | None = None,
    labels: Sequence[str] | None = None,
    feature_source: str = "classifier_features",
) -> EmbeddingResult:
    """Run UMAP on rows canonicalized by ``sample_ids`` (input order when
    absent); coordinates are returned in input order."""
    features = np.asarray(features, dtype=np.float64)
    n = len(features)
    if n <= params.n_neighbors:
        raise ValueError(f"need more than n_neighbors={params.n_neighbors} samples, got {n}")
    ids = list(sample_ids) if sample_ids is not None else [f"{i:08d}" for i in range(n)]
    order = np.argsort(np.asarray(ids, dtype=object), kind="stable")
    os.environ.setdefault("NUMBA_NUM_THREADS", "1")
    import umap

    reducer = umap.UMAP(
        n_components=2,
        n_neighbors=params.n_neighbors,
        min_dist=params.min_dist,
        random_state=params.seed,
        transform_seed=params.seed,
        n_jobs=1,
    )
    emb = reducer.fit_transform(features[order])
    coords = np.empty_like(emb, dtype=np.float64)
    coords[order] = emb
    if not np.all(np.isfinite(coords)):
        raise FloatingPointError("embedding produced non-finite coordinates")
    return EmbeddingResult(
        coordinates=coords,
        labels=list(labels) if labels is not None else [""] * n,
        sample_ids=ids,
        params=params,
        feature_source=feature_source,
    )


def export_embedding_plot(result: EmbeddingResult, out_path: str | Path, title: str = "") -> tuple[Path, Path]:
    """Scatter PNG colored by label plus ``<stem>.csv`` of (sample_id, x, y, label)."""
    if len(result.coordinates) == 0:
        raise ValueError("empty embedding")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    csv_path = out_path.with_suffix(".csv")
    with csv_path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sample_id", "x", "y", "label"])
        for sid, (x, y), lab in zip(result.sample_ids, result.coordinates, result.labels):
            w.writerow([sid, repr(float(x)), repr(float(y)), lab])

    fig, ax = plt.subplots(figsize=(6, 6), dpi=100)
    for i, tag in enumerate(sorted(set(result.labels))):
        mask = np.array([lab == tag for lab in result.labels])
        ax.scatter(
            result.coordinates[mask, 0], result.coordinates[mask, 1], s=6, label=tag or "unlabeled", color=f"C{i}"
        )
    ax.set_xticks([])
    ax.set_yticks([])
    ax.legend(loc="best", markerscale=2, fontsize=8)
    if title:
        ax.set_title(title)
    fig.savefig(out_path, format="png", metadata={"Software": None})
    plt.close(fig)
    return out_path, csv_path
