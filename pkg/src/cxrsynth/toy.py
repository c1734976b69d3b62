"""Procedural toy corpora for desk-scale runs.

Domain ``toy_a`` images hold a filled Gaussian blob (or a filled square for a
second task), ``toy_b`` images a thin ring; all sit on a dim noisy
background. Sizes and positions are random.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .data_core import write_png


def _grid(size: int):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    return yy, xx


def blob_image(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    yy, xx = _grid(size)
    cy, cx = rng.uniform(0.3, 0.7, 2) * size
    sigma = rng.uniform(0.08, 0.14) * size
    img = 0.9 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    return _finish(img, rng)


def ring_image(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    yy, xx = _grid(size)
    cy, cx = rng.uniform(0.3, 0.7, 2) * size
    radius = rng.uniform(0.15, 0.25) * size
    width = 0.035 * size
    r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    img = 0.9 * np.exp(-((r - radius) ** 2) / (2 * width**2))
    return _finish(img, rng)


def square_image(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    yy, xx = _grid(size)
    cy, cx = rng.uniform(0.3, 0.7, 2) * size
    half = rng.uniform(0.08, 0.15) * size
    img = 0.8 * ((np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)).astype(np.float32)
    return _finish(img, rng)


def _finish(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    img = img + 0.1 + rng.normal(0.0, 0.02, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)[:, :, None]


def make_domain(kind: str, n: int, size: int = 64, seed: int = 0) -> np.ndarray:
    """N x size x size x 1 array of ``blob``, ``ring`` or ``square`` images."""
    draw = {"blob": blob_image, "ring": ring_image, "square": square_image}[kind]
    rng = np.random.default_rng(seed)
    if n == 0:
        return np.zeros((0, size, size, 1), np.float32)
    return np.stack([draw(rng, size) for _ in range(n)])


def planted_region_images(n: int, positive: bool, size: int = 64, seed: int = 0) -> np.ndarray:
    """Noise images; positives carry a bright square at a random location."""
    rng = np.random.default_rng(seed)
    out = rng.uniform(0.0, 0.4, (n, size, size, 1)).astype(np.float32)
    if positive:
        side = size // 4
        for img in out:
            y, x = rng.integers(0, size - side, 2)
            img[y : y + side, x : x + side] = rng.uniform(0.85, 1.0)
    return out


def write_toy_corpus(
    root: str | Path,
    n_negative: int = 300,
    n_positive: int = 60,
    size: int = 64,
    seed: int = 0,
    images_per_patient: int = 2,
    negative_kind: str = "blob",
    positive_kind: str = "ring",
) -> Path:
    """Write ``root/toy_a`` (negatives) and ``root/toy_b`` (positives) as PNGs
    named ``p<patient>_<k>.png`` so patient ids parse with
    ``(?P<patient>p\\d+)_``."""
    root = Path(root)
    for sub, kind, n, offset in (
        ("toy_a", negative_kind, n_negative, 0),
        ("toy_b", positive_kind, n_positive, 1),
    ):
        d = root / sub
        d.mkdir(parents=True, exist_ok=True)
        images = make_domain(kind, n, size, seed * 2 + offset)
        for i, img in enumerate(images):
            patient = i // images_per_patient
            write_png(img, d / f"p{offset}{patient:05d}_{i % images_per_patient}.png")
    return root


TOY_LABEL_RULE = {
    "toy_a": {"label": "negative", "source_domain": "toy_a"},
    "toy_b": {"label": "positive", "source_domain": "toy_b"},
}
TOY_PATIENT_REGEX = r"(?P<patient>p\d+)_"
