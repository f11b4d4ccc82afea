"""Ensemble distillation: soft-target training with an adversarial logit discriminator."""

from .data import (
    ArrayDataset,
    CropParams,
    DatasetSpec,
    augment_train,
    cifar10,
    normalize,
    synthetic_dataset,
    synthetic_multilabel,
    synthetic_pair,
    transform_eval,
)
from .discriminator import (
    AdversarialRegularizer,
    Discriminator,
    DiscriminatorSpec,
    build_discriminator,
)
from .ensemble import (
    EnsembleSpec,
    Preprocessing,
    TeacherEnsemble,
    TeacherRef,
    ensemble_predict,
    supervision_stats,
)
from .errors import (
    ConfigurationError,
    NumericalError,
    NumericalOverflowError,
    PackageError,
    ShapeError,
)
from .losses import bce_loss, ce_loss, hard_label_ce, kl_loss, multilabel_sigmoid_ce
from .nets import (
    ARCHITECTURES,
    CAPACITY_TIERS,
    DeskResNet,
    ModelSpec,
    build_model,
    middle_conv_layer,
    tier_for_arch,
)
from .trainer import (
    CheckpointBundle,
    DistillConfig,
    DistillResult,
    MetricsRecord,
    PretrainConfig,
    distill,
    evaluate,
    lr_at,
    pretrain_hard,
)
from .transfer import TransferConfig, TransferResult, transfer_run

__version__ = "0.1.0"

__all__ = [
    "ARCHITECTURES",
    "AdversarialRegularizer",
    "ArrayDataset",
    "CAPACITY_TIERS",
    "CheckpointBundle",
    "ConfigurationError",
    "CropParams",
    "DatasetSpec",
    "DeskResNet",
    "Discriminator",
    "DiscriminatorSpec",
    "DistillConfig",
    "DistillResult",
    "EnsembleSpec",
    "MetricsRecord",
    "ModelSpec",
    "NumericalError",
    "NumericalOverflowError",
    "PackageError",
    "Preprocessing",
    "PretrainConfig",
    "ShapeError",
    "TeacherEnsemble",
    "TeacherRef",
    "TransferConfig",
    "TransferResult",
    "augment_train",
    "bce_loss",
    "build_discriminator",
    "build_model",
    "ce_loss",
    "cifar10",
    "distill",
    "ensemble_predict",
    "evaluate",
    "hard_label_ce",
    "kl_loss",
    "lr_at",
    "middle_conv_layer",
    "multilabel_sigmoid_ce",
    "normalize",
    "pretrain_hard",
    "supervision_stats",
    "synthetic_dataset",
    "synthetic_multilabel",
    "synthetic_pair",
    "tier_for_arch",
    "transfer_run",
    "transform_eval",
]
