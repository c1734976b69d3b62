"""Transfer-learning classifiers (backbone -> GAP -> two-unit softmax) and
assembly of the real / synthetic training configurations."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data_core import DatasetManifest, load_array, merge_manifests
from .synthesis import SyntheticSet

log = logging.getLogger(__name__)

BACKBONES = ("vgg16", "resnet50", "densenet", "custom")
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# name -> factory(feature_dim) -> nn.Module mapping pooled features to 2 logits.
# Populated by extensions (e.g. a bagging-tree head); none ship by default.
HEAD_REGISTRY: dict[str, Callable[[int], nn.Module]] = {}


def register_head(name: str, factory: Callable[[int], nn.Module]) -> None:
    HEAD_REGISTRY[name] = factory


@dataclass(frozen=True)
class TrainingConfig:
    backbone: str = "custom"
    include_real: bool = True
    include_G1: bool = False
    include_G2: bool = False
    learning_rate: float = 0.001
    batch_size: int = 16
    early_stop_patience: int = 10
    early_stop_min_delta: float = 1e-4
    max_epochs: int = 100
    seed: int = 0
    pretrained: bool = False
    densenet_depth: int = 121
    custom_widths: tuple[int, ...] = (16, 32, 64, 128)
    head: str | None = None
    image_size: int = 256
    name: str = ""

    def __post_init__(self):
        if not (self.include_real or self.include_G1 or self.include_G2):
            raise ValueError("at least one of include_real / include_G1 / include_G2 must be set")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; choose from {BACKBONES}")
        object.__setattr__(self, "custom_widths", tuple(self.custom_widths))

    @property
    def config_id(self) -> str:
        if self.name:
            return self.name
        if not self.include_real:
            return f"{self.backbone}:only_synthetic"
        parts = ["real"] + [g for g, on in (("G1", self.include_G1), ("G2", self.include_G2)) if on]
        return f"{self.backbone}:" + "+".join(parts)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["custom_widths"] = list(self.custom_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        d = dict(d)
        if "custom_widths" in d:
            d["custom_widths"] = tuple(d["custom_widths"])
        return cls(**d)


class InputAdapter(nn.Module):
    """Grayscale -> 3 channels, plus ImageNet normalization for pretrained
    backbones."""

    def __init__(self, normalize: bool):
        super().__init__()
        self.normalize = normalize
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))

    def forward(self, x):
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        if self.normalize:
            x = (x - self.mean) / self.std
        return x


def _custom_backbone(widths) -> tuple[nn.Module, int]:
    layers: list[nn.Module] = []
    prev = 3
    for w in widths:
        layers += [
            nn.Conv2d(prev, w, 3, padding=1, bias=False),
            nn.BatchNorm2d(w),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
        ]
        prev = w
    return nn.Sequential(*layers), prev


def _backbone(config: TrainingConfig, load_weights: bool) -> tuple[nn.Module, int]:
    import torchvision.models as tvm

    name = config.backbone
    pretrained = config.pretrained and load_weights
    if name == "custom":
        return _custom_backbone(config.custom_widths)
    if name == "vgg16":
        net = tvm.vgg16(weights=tvm.VGG16_Weights.IMAGENET1K_V1 if pretrained else None)
        return net.features, 512
    if name == "resnet50":
        net = tvm.resnet50(weights=tvm.ResNet50_Weights.IMAGENET1K_V1 if pretrained else None)
        return nn.Sequential(*list(net.children())[:-2]), 2048
    builders = {121: "densenet121", 161: "densenet161", 169: "densenet169", 201: "densenet201"}
    if config.densenet_depth not in builders:
        raise ValueError(f"densenet depth must be one of {sorted(builders)}")
    fn = getattr(tvm, builders[config.densenet_depth])
    weights = "DEFAULT" if pretrained else None
    net = fn(weights=weights)
    return nn.Sequential(net.features, nn.ReLU(inplace=True)), net.classifier.in_features


class Classifier(nn.Module):
    def __init__(self, backbone: nn.Module, feature_dim: int, head: nn.Module, normalize: bool):
        super().__init__()
        self.adapter = InputAdapter(normalize)
        self.backbone = backbone
        self.gap = nn.AdaptiveAvgPool2d(1)
        self.head = head
        self.feature_dim = feature_dim

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """GAP outputs, N x feature_dim."""
        return torch.flatten(self.gap(self.backbone(self.adapter(x))), 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


def softmax_pair(logits: torch.Tensor) -> torch.Tensor:
    return torch.softmax(logits, dim=-1)


def build_classifier(config: TrainingConfig, load_weights: bool = True) -> Classifier:
    """``load_weights=False`` skips fetching ImageNet weights (used when a
    checkpoint will overwrite them)."""
    torch.manual_seed(config.seed)
    backbone, dim = _backbone(config, load_weights)
    if config.head is None:
        head = nn.Linear(dim, 2)
    elif config.head in HEAD_REGISTRY:
        head = HEAD_REGISTRY[config.head](dim)
    else:
        raise ValueError(f"no head registered under {config.head!r}")
    model = Classifier(backbone, dim, head, normalize=config.pretrained)
    for p in model.parameters():
        p.requires_grad_(True)
    return model


def assemble_training_set(
    real: DatasetManifest,
    g1: SyntheticSet | None,
    g2: SyntheticSet | None,
    config: TrainingConfig,
) -> DatasetManifest:
    """Real negatives always; real positives only with ``include_real``;
    each requested synthetic set added as extra positives."""
    if config.include_G1 and g1 is None:
        raise ValueError("include_G1 is set but no G1 synthetic set was given")
    if config.include_G2 and g2 is None:
        raise ValueError("include_G2 is set but no G2 synthetic set was given")
    real = real.filter(provenance="real")
    parts = [real if config.include_real else real.filter(label="negative")]
    if config.include_G1:
        parts.append(g1.manifest)
    if config.include_G2:
        parts.append(g2.manifest)
    return merge_manifests(parts, task_name=f"{real.task_name}:{config.config_id}")


@dataclass
class TrainedClassifier:
    model: Classifier
    config: TrainingConfig
    curve: list[float] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0

    @property
    def backbone(self) -> str:
        return self.config.backbone


class ClassifierDivergedError(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


def _to_tensor(images: np.ndarray) -> torch.Tensor:
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4:
        raise ValueError(f"expected N x H x W x C images, got shape {images.shape}")
    if images.shape[3] not in (1, 3):
        raise ValueError(f"expected 1 or 3 channels, got {images.shape[3]}")
    return torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2)


def train_classifier(
    model: Classifier,
    train_set: DatasetManifest | tuple[np.ndarray, np.ndarray],
    config: TrainingConfig,
    optimizer: str = "adadelta",
    device: str | torch.device = "cpu",
) -> TrainedClassifier:
    """Minimize cross-entropy over the two softmax units until the epoch
    loss fails to improve by ``early_stop_min_delta`` for
    ``early_stop_patience`` consecutive epochs (or ``max_epochs``).

    ``train_set`` is a manifest or an ``(images, labels)`` pair with labels
    in {0, 1}. Shuffles every epoch from the run seed.
    """
    if isinstance(train_set, DatasetManifest):
        if len(train_set) == 0:
            raise ValueError("training set is empty")
        images = load_array(train_set, config.image_size)
        labels = np.array([1 if r.label == "positive" else 0 for r in train_set.records])
    else:
        images, labels = train_set
        labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("training set must contain both classes")

    torch.manual_seed(config.seed)
    device = torch.device(device)
    model.to(device)
    x_all = _to_tensor(images)
    y_all = torch.as_tensor(labels, dtype=torch.long)
    if optimizer == "adadelta":
        opt = torch.optim.Adadelta(model.parameters(), lr=config.learning_rate)
    elif optimizer == "adam":
        opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    else:
        raise ValueError(f"unknown optimizer {optimizer!r}")
    gen = torch.Generator().manual_seed(config.seed)

    curve: list[float] = []
    best = math.inf
    best_epoch = 0
    stale = 0
    epoch = 0
    model.train()
    for epoch in range(1, config.max_epochs + 1):
        order = torch.randperm(len(x_all), generator=gen)
        total = 0.0
        for i in range(0, len(order), config.batch_size):
            idx = order[i : i + config.batch_size]
            logits = model(x_all[idx].to(device))
            loss = F.cross_entropy(logits, y_all[idx].to(device))
            if not torch.isfinite(loss):
                raise ClassifierDivergedError(
                    f"non-finite loss in epoch {epoch}", {"epoch": epoch, "batch_start": i, "curve": list(curve)}
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        epoch_loss = total / len(x_all)
        curve.append(epoch_loss)
        log.info("%s epoch %d loss %.6f", config.config_id, epoch, epoch_loss)
        if epoch_loss < best - config.early_stop_min_delta:
            best, best_epoch, stale = epoch_loss, epoch, 0
        else:
            stale += 1
            if stale > config.early_stop_patience:
                break
    model.eval()
    model.to("cpu")
    return TrainedClassifier(model, config, curve, stopped_epoch=epoch, best_epoch=best_epoch)


@torch.no_grad()
def predict_proba(model: TrainedClassifier | Classifier, batch: np.ndarray, chunk: int = 64) -> np.ndarray:
    """N x 2 rows of (negative, positive) probabilities, input order kept."""
    net = model.model if isinstance(model, TrainedClassifier) else model
    x = _to_tensor(batch)
    device = next(net.parameters()).device
    was_training = net.training
    net.eval()
    rows = [softmax_pair(net(x[i : i + chunk].to(device))).double().cpu() for i in range(0, len(x), chunk)]
    net.train(was_training)
    if not rows:
        return np.zeros((0, 2))
    p = torch.cat(rows).numpy()
    return p / p.sum(axis=1, keepdims=True)


@torch.no_grad()
def extract_gap_features(model: TrainedClassifier | Classifier, batch: np.ndarray, chunk: int = 64) -> np.ndarray:
    net = model.model if isinstance(model, TrainedClassifier) else model
    x = _to_tensor(batch)
    device = next(net.parameters()).device
    net.eval()
    out = [net.features(x[i : i + chunk].to(device)).cpu() for i in range(0, len(x), chunk)]
    if not out:
        return np.zeros((0, net.feature_dim), np.float32)
    return torch.cat(out).numpy()


def save_classifier(clf: TrainedClassifier, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": "cxrsynth-classifier",
            "version": 1,
            "config": clf.config.to_dict(),
            "curve": clf.curve,
            "stopped_epoch": clf.stopped_epoch,
            "best_epoch": clf.best_epoch,
            "state": clf.model.state_dict(),
        },
        path,
    )
    return path


def load_classifier(path: str | Path) -> TrainedClassifier:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if payload.get("format") != "cxrsynth-classifier":
        raise ValueError(f"{path} is not a classifier checkpoint")
    config = TrainingConfig.from_dict(payload["config"])
    model = build_classifier(config, load_weights=False)
    model.load_state_dict(payload["state"])
    model.eval()
    return TrainedClassifier(model, config, payload["curve"], payload["stopped_epoch"], payload["best_epoch"])
