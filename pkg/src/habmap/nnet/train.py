"""Mini-batch training, batched inference and transfer helpers."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .augment import center_crop, random_augment_batch
from .functional import AdamState, NumericalError, adam_step, as_target_matrix, cross_entropy_grad, softmax
from .network import Network

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 128
    lr: float = 1e-4
    augment_ops: tuple[str, ...] = ("hflip", "vflip", "blur")
    input_size: int = 19
    crop_min: int = 3
    freeze_conv: bool = False
    seed: int = 0


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)

    def add(self, epoch, train_loss, val_weighted_f1=None):
        self.epochs.append(
            {"epoch": epoch, "train_loss": train_loss, "val_weighted_f1": val_weighted_f1}
        )

    @property
    def losses(self) -> list[float]:
        return [e["train_loss"] for e in self.epochs]


def fit_input(X, size: int) -> np.ndarray:
    """Center-crop patches to ``size`` when they are larger."""
    X = np.asarray(X)
    return center_crop(X, size) if X.shape[-1] > size else X


def predict_logits(net: Network, X, batch_size: int = 256, input_size: int | None = None) -> np.ndarray:
    X = np.asarray(X)
    if input_size is not None:
        X = fit_input(X, input_size)
    out = [net.forward(X[i : i + batch_size], train=False) for i in range(0, len(X), batch_size)]
    if not out:
        return np.zeros((0, net.config.n_classes))
    return np.concatenate(out).astype(np.float64)


def predict_proba(net: Network, X, batch_size: int = 256, input_size: int | None = None) -> np.ndarray:
    return softmax(predict_logits(net, X, batch_size, input_size))


def sgd_step(net: Network, X, T, state: AdamState, lr: float) -> float:
    """One forward/backward/Adam step on a batch with target matrix ``T``."""
    # overflow shows up as a non-finite loss, reported below
    with np.errstate(over="ignore", invalid="ignore"):
        logits = net.forward(X, train=True)
        loss, grad = cross_entropy_grad(logits, T)
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite training loss {loss}")
    net.zero_grad()
    net.backward(grad)
    adam_step(net.trainable_parameters(), net.gradients(), state, lr)
    return loss


def run_epochs(
    net: Network,
    batches: Callable[[int, np.random.Generator], Iterator[tuple[np.ndarray, np.ndarray]]],
    config: TrainConfig,
    evaluate: Callable[[Network], float] | None = None,
) -> TrainLog:
    """Shared optimizer loop. ``batches(epoch, rng)`` yields ``(X, T)`` pairs."""
    net.set_conv_trainable(not config.freeze_conv)
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    history = TrainLog()
    for epoch in range(config.epochs):
        losses, sizes = [], []
        for X, T in batches(epoch, rng):
            if config.augment_ops:
                X = random_augment_batch(
                    X, config.augment_ops, rng, config.crop_min, config.input_size
                )
            try:
                losses.append(sgd_step(net, X, T, state, config.lr))
            except NumericalError as e:
                raise NumericalError(f"training diverged in epoch {epoch}: {e}") from None
            sizes.append(len(X))
        mean_loss = float(np.average(losses, weights=sizes))
        val = evaluate(net) if evaluate is not None else None
        history.add(epoch, mean_loss, val)
        log.debug("epoch %d loss %.5f val %s", epoch, mean_loss, val)
    return history


def _shuffled_batches(X, T, batch_size, rng):
    perm = rng.permutation(len(X))
    for i in range(0, len(X), batch_size):
        idx = perm[i : i + batch_size]
        yield X[idx], T[idx]


def train(
    net: Network,
    X,
    y,
    config: TrainConfig,
    X_val=None,
    y_val=None,
) -> TrainLog:
    """Train ``net`` in place on patches ``X`` with hard or soft targets ``y``.

    Logs the mean training loss of every epoch, plus the weighted F1 on
    the validation set when one is given.
    """
    X = fit_input(X, config.input_size)
    if len(X) == 0:
        raise ValueError("training set is empty")
    T = as_target_matrix(y, net.config.n_classes)

    def batches(epoch, rng):
        return _shuffled_batches(X, T, config.batch_size, rng)

    evaluate = None
    if X_val is not None and len(X_val):
        from ..metrics import confusion_matrix, precision_recall_f1

        def evaluate(n):
            pred = predict_proba(n, X_val, input_size=config.input_size).argmax(axis=1)
            cm = confusion_matrix(y_val, pred, n.config.n_classes)
            return precision_recall_f1(cm, "weighted").f1

    return run_epochs(net, batches, config, evaluate)
