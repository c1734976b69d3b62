"""Adversarial and cycle-consistency objectives.

Sign convention: :func:`adversarial_loss` returns the value the discriminator
maximizes. In ``log`` mode that is ``E[log D(real)] + E[log(1 - D(fake))]``
with expectations taken over the batch and the score grid; in
``least_squares`` mode it is ``-(E[(D(real) - 1)^2] + E[D(fake)^2])``. Both
peak at 0 for a perfect discriminator.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

EPS = 1e-7
MODES = ("log", "least_squares")


@dataclass(frozen=True)
class GanLossBundle:
    adv_AtoB: float
    adv_BtoA: float
    cycle: float
    total: float

    def recomputed_total(self, lambda_cycle: float) -> float:
        return self.adv_AtoB + self.adv_BtoA + lambda_cycle * self.cycle


def _clamp(scores: torch.Tensor) -> torch.Tensor:
    return scores.clamp(EPS, 1.0 - EPS)


def adversarial_value(
    real_scores: torch.Tensor, fake_scores: torch.Tensor, mode: str = "log"
) -> torch.Tensor:
    """Discriminator objective from precomputed score grids."""
    if real_scores.numel() == 0 or fake_scores.numel() == 0:
        raise ValueError("adversarial loss needs non-empty batches")
    if mode == "log":
        return torch.log(_clamp(real_scores)).mean() + torch.log(1.0 - _clamp(fake_scores)).mean()
    if mode == "least_squares":
        return -(((real_scores - 1.0) ** 2).mean() + (fake_scores**2).mean())
    raise ValueError(f"unknown adversarial mode {mode!r}")


def adversarial_loss(
    discriminator: Callable[[torch.Tensor], torch.Tensor],
    real_batch: torch.Tensor,
    translated_batch: torch.Tensor,
    mode: str = "log",
) -> torch.Tensor:
    """Adversarial term for one direction (target-domain discriminator,
    real target images, generator outputs)."""
    if len(real_batch) == 0 or len(translated_batch) == 0:
        raise ValueError("adversarial loss needs non-empty batches")
    if real_batch.shape[1:] != translated_batch.shape[1:]:
        raise ValueError(
            f"real and translated batches differ in shape: {tuple(real_batch.shape)} vs {tuple(translated_batch.shape)}"
        )
    return adversarial_value(discriminator(real_batch), discriminator(translated_batch), mode)


def generator_adversarial_loss(fake_scores: torch.Tensor, mode: str = "log") -> torch.Tensor:
    """What a generator minimizes; non-saturating in log mode."""
    if mode == "log":
        return -torch.log(_clamp(fake_scores)).mean()
    if mode == "least_squares":
        return ((fake_scores - 1.0) ** 2).mean()
    raise ValueError(f"unknown adversarial mode {mode!r}")


def discriminator_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor, mode: str = "log") -> torch.Tensor:
    """What a discriminator minimizes: the negated objective, halved in
    least-squares mode."""
    value = adversarial_value(real_scores, fake_scores, mode)
    return -0.5 * value if mode == "least_squares" else -value


def cycle_loss(
    a_batch: torch.Tensor,
    a_reconstructed: torch.Tensor,
    b_batch: torch.Tensor,
    b_reconstructed: torch.Tensor,
) -> torch.Tensor:
    """Per-pixel mean absolute reconstruction error, summed over both directions."""
    if a_batch.shape != a_reconstructed.shape:
        raise ValueError(f"A pair shape mismatch: {tuple(a_batch.shape)} vs {tuple(a_reconstructed.shape)}")
    if b_batch.shape != b_reconstructed.shape:
        raise ValueError(f"B pair shape mismatch: {tuple(b_batch.shape)} vs {tuple(b_reconstructed.shape)}")
    return (a_reconstructed - a_batch).abs().mean() + (b_reconstructed - b_batch).abs().mean()


def _scalar(v) -> float:
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


def total_loss(adv_AtoB, adv_BtoA, cycle, lambda_cycle: float = 10.0) -> GanLossBundle:
    adv_AtoB, adv_BtoA, cycle = (_scalar(v) for v in (adv_AtoB, adv_BtoA, cycle))
    return GanLossBundle(
        adv_AtoB=adv_AtoB,
        adv_BtoA=adv_BtoA,
        cycle=cycle,
        total=adv_AtoB + adv_BtoA + lambda_cycle * cycle,
    )
