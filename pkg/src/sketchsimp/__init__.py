"""Adversarial-augmentation training for sketch simplification.

A simplification network is trained jointly with a discriminator on a mix
of supervised rough/clean pairs and unpaired rough-only / clean-only data;
the same framework trains the inverse pencil-drawing model.
"""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainingConfig, desk_preset, load_config
from .data import (AugmentationConfig, DatasetPools, SyntheticSketchSpec,
                   generate_synthetic, load_dataset)
from .losses import Regime
from .netcore import (NetworkSpec, SpecNet, build_discriminator,
                      build_simplification_network, fold_batchnorm,
                      pad_to_multiple)
from .trainer import compare_regimes, pretrain_supervised, train
from .inference import (InferenceOptions, SingleImageOptConfig,
                        midtone_fraction, pencil_generate, simplify,
                        single_image_optimize)

__all__ = [
    "AugmentationConfig", "Checkpoint", "DatasetPools", "InferenceOptions",
    "NetworkSpec", "Regime", "SingleImageOptConfig", "SpecNet",
    "SyntheticSketchSpec", "TrainingConfig", "build_discriminator",
    "build_simplification_network", "compare_regimes", "desk_preset",
    "fold_batchnorm", "generate_synthetic", "load_checkpoint", "load_config",
    "load_dataset", "midtone_fraction", "pad_to_multiple", "pencil_generate",
    "pretrain_supervised", "save_checkpoint", "simplify",
    "single_image_optimize", "train",
]

__version__ = "0.1.0"
