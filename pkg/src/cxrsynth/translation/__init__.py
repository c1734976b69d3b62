from .losses import (
    GanLossBundle,
    adversarial_loss,
    adversarial_value,
    cycle_loss,
    discriminator_loss,
    generator_adversarial_loss,
    total_loss,
)
from .models import DiscriminatorSpec, GeneratorSpec, build_discriminator, build_generator
from .training import (
    GanHyperparams,
    TrainingDivergedError,
    TranslationModel,
    export_loss_history,
    init_model,
    load_checkpoint,
    round_trip_error,
    save_checkpoint,
    train_translation,
    translate,
)

__all__ = [
    "DiscriminatorSpec",
    "GanHyperparams",
    "GanLossBundle",
    "GeneratorSpec",
    "TrainingDivergedError",
    "TranslationModel",
    "adversarial_loss",
    "adversarial_value",
    "build_discriminator",
    "build_generator",
    "cycle_loss",
    "discriminator_loss",
    "export_loss_history",
    "generator_adversarial_loss",
    "init_model",
    "load_checkpoint",
    "round_trip_error",
    "save_checkpoint",
    "total_loss",
    "train_translation",
    "translate",
]
