"""Generator and discriminator builders.

Generators are fully convolutional encoder / residual / decoder stacks with a
tanh output; discriminators are patch scorers emitting a grid of sigmoid
realness scores.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


@dataclass(frozen=True)
class GeneratorSpec:
    input_channels: int = 1
    base_width: int = 64
    residual_blocks: int = 9
    downsamplings: int = 2
    output_activation: str = "tanh"

    def __post_init__(self):
        if self.residual_blocks < 1:
            raise ValueError("residual_blocks must be >= 1")
        if self.input_channels < 1 or self.base_width < 1 or self.downsamplings < 0:
            raise ValueError("invalid generator spec")
        if self.output_activation != "tanh":
            raise ValueError("only tanh output is supported")


@dataclass(frozen=True)
class DiscriminatorSpec:
    input_channels: int = 1
    base_width: int = 64
    layers: int = 4

    def __post_init__(self):
        if self.layers < 1 or self.input_channels < 1 or self.base_width < 1:
            raise ValueError("invalid discriminator spec")

    @property
    def receptive_field(self) -> int:
        """Input pixels seen by one output score (70 for the 4-layer default)."""
        strides = [2] + [2 if i < self.layers - 1 else 1 for i in range(1, self.layers)] + [1]
        rf = 1
        for s in reversed(strides):
            rf = (rf - 1) * s + 4
        return rf


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(width, width, 3),
            nn.InstanceNorm2d(width),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(width, width, 3),
            nn.InstanceNorm2d(width),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        c, w = spec.input_channels, spec.base_width
        layers: list[nn.Module] = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(c, w, 7),
            nn.InstanceNorm2d(w),
            nn.ReLU(inplace=True),
        ]
        for _ in range(spec.downsamplings):
            layers += [nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.InstanceNorm2d(2 * w), nn.ReLU(inplace=True)]
            w *= 2
        layers += [ResidualBlock(w) for _ in range(spec.residual_blocks)]
        for _ in range(spec.downsamplings):
            layers += [
                nn.ConvTranspose2d(w, w // 2, 3, stride=2, padding=1, output_padding=1),
                nn.InstanceNorm2d(w // 2),
                nn.ReLU(inplace=True),
            ]
            w //= 2
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(w, c, 7), nn.Tanh()]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class Discriminator(nn.Module):
    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        layers: list[nn.Module] = [nn.Conv2d(spec.input_channels, w, 4, stride=2, padding=1), nn.LeakyReLU(0.2, True)]
        prev = w
        for i in range(1, spec.layers):
            nxt = w * min(2**i, 8)
            stride = 2 if i < spec.layers - 1 else 1
            layers += [
                nn.Conv2d(prev, nxt, 4, stride=stride, padding=1),
                nn.InstanceNorm2d(nxt),
                nn.LeakyReLU(0.2, True),
            ]
            prev = nxt
        layers += [nn.Conv2d(prev, 1, 4, stride=1, padding=1), nn.Sigmoid()]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


def _init_weights(module: nn.Module, gen: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * 0.02)
                if m.bias is not None:
                    m.bias.zero_()


def build_generator(spec: GeneratorSpec, seed: int) -> Generator:
    net = Generator(spec)
    _init_weights(net, torch.Generator().manual_seed(seed))
    return net


def build_discriminator(spec: DiscriminatorSpec, seed: int) -> Discriminator:
    net = Discriminator(spec)
    _init_weights(net, torch.Generator().manual_seed(seed))
    return net


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
