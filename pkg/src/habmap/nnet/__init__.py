"""Numpy convolutional network engine for center-pixel classification."""

from .augment import augment, center_crop, gaussian_blur, hflip, random_augment_batch, vflip
from .functional import AdamState, NumericalError, adam_step, cross_entropy, cross_entropy_grad, softmax
from .network import (
    Network,
    NetworkConfig,
    NetworkError,
    load_network,
    network_from_bytes,
    network_to_bytes,
    save_network,
    transfer,
)
from .train import TrainConfig, TrainLog, predict_logits, predict_proba, train

__all__ = [
    "AdamState",
    "Network",
    "NetworkConfig",
    "NetworkError",
    "NumericalError",
    "TrainConfig",
    "TrainLog",
    "adam_step",
    "augment",
    "center_crop",
    "cross_entropy",
    "cross_entropy_grad",
    "gaussian_blur",
    "hflip",
    "load_network",
    "network_from_bytes",
    "network_to_bytes",
    "predict_logits",
    "predict_proba",
    "random_augment_batch",
    "save_network",
    "softmax",
    "train",
    "transfer",
    "vflip",
]
