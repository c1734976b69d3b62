"""Alternating adversarial training of the two-generator translation model."""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from ..data_core import DatasetManifest, load_array
from .losses import (
    GanLossBundle,
    adversarial_value,
    cycle_loss,
    discriminator_loss,
    generator_adversarial_loss,
    total_loss,
)
from .models import (
    DiscriminatorSpec,
    GeneratorSpec,
    build_discriminator,
    build_generator,
    parameter_count,
)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cxrsynth-translation"
CHECKPOINT_VERSION = 1
DIRECTIONS = ("AtoB", "BtoA")


@dataclass(frozen=True)
class GanHyperparams:
    lambda_cycle: float = 10.0
    learning_rate: float = 2e-4
    beta1: float = 0.5
    batch_size: int = 1
    total_steps: int = 1000
    adversarial_mode: str = "least_squares"
    image_pool_size: int = 50
    seed: int = 0
    image_size: int = 256
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    discriminator: DiscriminatorSpec = field(default_factory=DiscriminatorSpec)

    def __post_init__(self):
        if self.lambda_cycle < 0:
            raise ValueError("lambda_cycle must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if self.adversarial_mode not in ("log", "least_squares"):
            raise ValueError(f"unknown adversarial_mode {self.adversarial_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GanHyperparams":
        d = dict(d)
        if isinstance(d.get("generator"), dict):
            d["generator"] = GeneratorSpec(**d["generator"])
        if isinstance(d.get("discriminator"), dict):
            d["discriminator"] = DiscriminatorSpec(**d["discriminator"])
        return cls(**d)


@dataclass
class TranslationModel:
    G_AtoB: nn.Module
    G_BtoA: nn.Module
    D_A: nn.Module
    D_B: nn.Module
    hyperparams: GanHyperparams
    step_count: int = 0
    loss_history: list[GanLossBundle] = field(default_factory=list)

    def networks(self) -> dict[str, nn.Module]:
        return {"G_AtoB": self.G_AtoB, "G_BtoA": self.G_BtoA, "D_A": self.D_A, "D_B": self.D_B}

    def digest(self) -> str:
        """SHA-256 over every parameter and buffer of the four networks."""
        h = hashlib.sha256()
        for name, net in self.networks().items():
            for key, tensor in sorted(net.state_dict().items()):
                h.update(f"{name}.{key}".encode())
                h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


class ImagePool:
    """Buffer of past generator outputs; half of each query is swapped for
    stored images once the pool is full."""

    def __init__(self, size: int, rng: np.random.Generator):
        self.size = size
        self.rng = rng
        self.images: list[torch.Tensor] = []

    def query(self, batch: torch.Tensor) -> torch.Tensor:
        if self.size == 0:
            return batch
        out = []
        for img in batch.detach():
            img = img.unsqueeze(0)
            if len(self.images) < self.size:
                self.images.append(img.clone())
                out.append(img)
            elif self.rng.random() > 0.5:
                idx = int(self.rng.integers(self.size))
                out.append(self.images[idx].clone())
                self.images[idx] = img.clone()
            else:
                out.append(img)
        return torch.cat(out, 0)


def init_model(hp: GanHyperparams) -> TranslationModel:
    g = hp.generator
    d = hp.discriminator
    if g.input_channels != d.input_channels:
        raise ValueError("generator and discriminator channel counts differ")
    return TranslationModel(
        G_AtoB=build_generator(g, hp.seed),
        G_BtoA=build_generator(g, hp.seed + 1),
        D_A=build_discriminator(d, hp.seed + 2),
        D_B=build_discriminator(d, hp.seed + 3),
        hyperparams=hp,
    )


def to_internal(images: np.ndarray) -> torch.Tensor:
    """N x H x W x C in [0, 1] to N x C x H x W in [-1, 1]."""
    t = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
    return t.permute(0, 3, 1, 2) * 2.0 - 1.0


def from_internal(t: torch.Tensor) -> np.ndarray:
    return ((t.detach().permute(0, 2, 3, 1) + 1.0) / 2.0).clamp(0.0, 1.0).numpy()


def _as_tensor(domain, size: int) -> torch.Tensor:
    if isinstance(domain, DatasetManifest):
        if len(domain) == 0:
            raise ValueError(f"domain {domain.task_name!r} is empty")
        arr = load_array(domain, size)
    else:
        arr = np.asarray(domain, dtype=np.float32)
        if len(arr) == 0:
            raise ValueError("domain is empty")
    return to_internal(arr)


def train_translation(
    domain_A: DatasetManifest | np.ndarray,
    domain_B: DatasetManifest | np.ndarray,
    hp: GanHyperparams,
    checkpoint_every: int = 0,
    checkpoint_dir: str | Path | None = None,
    log_every: int = 100,
    model: TranslationModel | None = None,
    device: str | torch.device = "cpu",
) -> TranslationModel:
    """Fit both generators and both discriminators on unpaired collections.

    Each step first updates the generators against the current
    discriminators (adversarial + lambda * cycle), then updates each
    discriminator on a real batch and a pooled batch of generated images.
    The recorded :class:`GanLossBundle` holds the objective value as written
    (discriminator form of each adversarial term) for the pre-update state.

    ``domain_A``/``domain_B`` are manifests (resized to ``hp.image_size``) or
    N x H x W x C arrays in [0, 1]. Passing ``model`` resumes training.
    """
    torch.manual_seed(hp.seed)
    real_A = _as_tensor(domain_A, hp.image_size)
    real_B = _as_tensor(domain_B, hp.image_size)
    channels = hp.generator.input_channels
    if real_A.shape[1] != channels or real_B.shape[1] != channels:
        raise ValueError(f"model expects {channels} channel(s)")

    model = model or init_model(hp)
    device = torch.device(device)
    for net in model.networks().values():
        net.to(device)
    real_A, real_B = real_A.to(device), real_B.to(device)
    rng = np.random.default_rng(hp.seed)
    pool_A = ImagePool(hp.image_pool_size, np.random.default_rng(hp.seed + 11))
    pool_B = ImagePool(hp.image_pool_size, np.random.default_rng(hp.seed + 12))
    gens = [model.G_AtoB, model.G_BtoA]
    opt_G = torch.optim.Adam(
        [p for g in gens for p in g.parameters()], lr=hp.learning_rate, betas=(hp.beta1, 0.999)
    )
    opt_D = torch.optim.Adam(
        list(model.D_A.parameters()) + list(model.D_B.parameters()),
        lr=hp.learning_rate,
        betas=(hp.beta1, 0.999),
    )
    mode = hp.adversarial_mode
    for net in model.networks().values():
        net.train()

    start = model.step_count
    for step in range(start, hp.total_steps):
        a = real_A[torch.as_tensor(rng.integers(len(real_A), size=hp.batch_size), device=device)]
        b = real_B[torch.as_tensor(rng.integers(len(real_B), size=hp.batch_size), device=device)]

        # generators
        for p in list(model.D_A.parameters()) + list(model.D_B.parameters()):
            p.requires_grad_(False)
        fake_B = model.G_AtoB(a)
        fake_A = model.G_BtoA(b)
        rec_A = model.G_BtoA(fake_B)
        rec_B = model.G_AtoB(fake_A)
        score_fake_B = model.D_B(fake_B)
        score_fake_A = model.D_A(fake_A)
        cyc = cycle_loss(a, rec_A, b, rec_B)
        g_loss = (
            generator_adversarial_loss(score_fake_B, mode)
            + generator_adversarial_loss(score_fake_A, mode)
            + hp.lambda_cycle * cyc
        )
        with torch.no_grad():
            adv_ab = adversarial_value(model.D_B(b), score_fake_B, mode)
            adv_ba = adversarial_value(model.D_A(a), score_fake_A, mode)
        bundle = total_loss(adv_ab, adv_ba, cyc, hp.lambda_cycle)
        if not all(math.isfinite(v) for v in (bundle.total, float(g_loss.detach()))):
            snapshot = {"step": step, "bundle": asdict(bundle), "generator_loss": float(g_loss.detach())}
            raise TrainingDivergedError(f"non-finite loss at step {step}", snapshot)
        opt_G.zero_grad(set_to_none=True)
        g_loss.backward()
        opt_G.step()
        for p in list(model.D_A.parameters()) + list(model.D_B.parameters()):
            p.requires_grad_(True)

        # discriminators
        pooled_B = pool_B.query(fake_B)
        pooled_A = pool_A.query(fake_A)
        d_loss = discriminator_loss(model.D_B(b), model.D_B(pooled_B.detach()), mode) + discriminator_loss(
            model.D_A(a), model.D_A(pooled_A.detach()), mode
        )
        if not math.isfinite(float(d_loss.detach())):
            raise TrainingDivergedError(
                f"non-finite discriminator loss at step {step}",
                {"step": step, "bundle": asdict(bundle), "discriminator_loss": float(d_loss.detach())},
            )
        opt_D.zero_grad(set_to_none=True)
        d_loss.backward()
        opt_D.step()

        model.loss_history.append(bundle)
        model.step_count = step + 1
        if log_every and model.step_count % log_every == 0:
            log.info(
                "step %d  adv_AtoB %.4f  adv_BtoA %.4f  cycle %.4f  total %.4f",
                model.step_count, bundle.adv_AtoB, bundle.adv_BtoA, bundle.cycle, bundle.total,
            )
        if checkpoint_every and checkpoint_dir and model.step_count % checkpoint_every == 0:
            save_checkpoint(model, Path(checkpoint_dir) / f"step_{model.step_count:06d}.pt")

    for net in model.networks().values():
        net.eval()
        net.to("cpu")
    return model


@torch.no_grad()
def translate(
    model: TranslationModel, batch: np.ndarray, direction: str = "AtoB", chunk: int = 16
) -> np.ndarray:
    """Map N x H x W x C images in [0, 1] through one generator."""
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    batch = np.asarray(batch, dtype=np.float32)
    if batch.ndim != 4:
        raise ValueError(f"expected N x H x W x C, got shape {batch.shape}")
    channels = model.hyperparams.generator.input_channels
    if batch.shape[3] != channels:
        raise ValueError(f"model expects {channels} channel(s), got {batch.shape[3]}")
    gen = model.G_AtoB if direction == "AtoB" else model.G_BtoA
    device = next(gen.parameters()).device
    was_training = gen.training
    gen.eval()
    out = [
        from_internal(gen(to_internal(batch[i : i + chunk]).to(device)).cpu())
        for i in range(0, len(batch), chunk)
    ]
    gen.train(was_training)
    if not out:
        return batch.copy()
    return np.concatenate(out, 0)


def round_trip_error(model: TranslationModel, batch: np.ndarray, direction: str = "AtoB") -> float:
    back = "BtoA" if direction == "AtoB" else "AtoB"
    recon = translate(model, translate(model, batch, direction), back)
    return float(np.abs(recon - batch).mean())


# ---------------------------------------------------------------------------
# persistence


def save_checkpoint(model: TranslationModel, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "hyperparams": model.hyperparams.to_dict(),
        "step_count": model.step_count,
        "loss_history": [asdict(b) for b in model.loss_history],
        "networks": {k: v.state_dict() for k, v in model.networks().items()},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> TranslationModel:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a translation checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    hp = GanHyperparams.from_dict(payload["hyperparams"])
    model = init_model(hp)
    for name, net in model.networks().items():
        net.load_state_dict(payload["networks"][name])
        net.eval()
    model.step_count = payload["step_count"]
    model.loss_history = [GanLossBundle(**b) for b in payload["loss_history"]]
    return model


def export_loss_history(history: Sequence[GanLossBundle], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "adv_AtoB", "adv_BtoA", "cycle", "total"])
        for i, b in enumerate(history, start=1):
            w.writerow([i, repr(b.adv_AtoB), repr(b.adv_BtoA), repr(b.cycle), repr(b.total)])
    return path


def parameter_counts(model: TranslationModel) -> dict[str, int]:
    return {k: parameter_count(v) for k, v in model.networks().items()}
