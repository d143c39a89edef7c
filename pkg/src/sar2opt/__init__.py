"""Reciprocal SAR <-> optical image translation GAN on a small numpy autodiff core."""

from .data import ImagePair, synth_dataset
from .metrics import FeatureExtractor, MetricReport, evaluate_pairs, frechet_distance
from .networks import DiscriminatorConfig, TranslatorConfig
from .tensor import Node, backward, grad_check
from .training import ModelConfig, ReciprocalModel, TrainConfig, build_model, train_step

__version__ = "0.1.0"

__all__ = [
    "DiscriminatorConfig",
    "FeatureExtractor",
    "ImagePair",
    "MetricReport",
    "ModelConfig",
    "Node",
    "ReciprocalModel",
    "TrainConfig",
    "TranslatorConfig",
    "backward",
    "build_model",
    "evaluate_pairs",
    "frechet_distance",
    "grad_check",
    "synth_dataset",
    "train_step",
]
