"""Invariant information clustering and Noisy Student distillation."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .inference import tta_predict_batch
from .nnet.augment import random_augment_batch
from .nnet.functional import AdamState, NumericalError, adam_step, as_target_matrix, softmax
from .nnet.network import Network, transfer
from .nnet.train import TrainConfig, TrainLog, _shuffled_batches, fit_input, run_epochs, train

CLAMP = 1e-12
PSEUDO_MAGIC = b"PSLB"


class SSLError(ValueError):
    pass


# --------------------------------------------------------------------- IIC


def _check_rows(z, name):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise SSLError(f"{name} must be (B, C)")
    if (z < -1e-12).any() or not np.allclose(z.sum(axis=1), 1.0, atol=1e-6):
        raise SSLError(f"rows of {name} must be probability vectors")
    return z


def iic_joint(z, z_prime) -> np.ndarray:
    """Symmetrized joint distribution of cluster assignments over a batch."""
    z = _check_rows(z, "z")
    zp = _check_rows(z_prime, "z_prime")
    if z.shape != zp.shape:
        raise SSLError(f"shape mismatch {z.shape} vs {zp.shape}")
    P = z.T @ zp / len(z)
    return (P + P.T) / 2.0


def iic_loss_grad(z, z_prime):
    """Negated mutual information and its gradients w.r.t. ``z`` and ``z_prime``."""
    z = _check_rows(z, "z")
    zp = _check_rows(z_prime, "z_prime")
    S = iic_joint(z, zp)
    live = S > CLAMP
    Sc = np.where(live, S, CLAMP)
    r = Sc.sum(axis=1)
    c = Sc.sum(axis=0)
    logs = np.log(Sc) - np.log(r)[:, None] - np.log(c)[None, :]
    loss = float(-(Sc * logs).sum())
    # d loss / d Sc_ij = -log Sc_ij + log r_i + log c_j + 1
    G = np.where(live, -logs + 1.0, 0.0)
    dP = (G + G.T) / 2.0
    B = len(z)
    return loss, zp @ dP.T / B, z @ dP / B


def iic_loss(z, z_prime) -> float:
    return iic_loss_grad(z, z_prime)[0]


def _softmax_backward(s, ds):
    return s * (ds - (ds * s).sum(axis=1, keepdims=True))


@dataclass
class IICConfig:
    n_clusters: int = 44
    epochs: int = 50
    augment_ops: tuple[str, ...] = ("hflip", "vflip", "blur")
    batch_size: int = 128
    lr: float = 1e-4
    input_size: int = 19

    def __post_init__(self):
        if self.n_clusters < 2:
            raise SSLError("IIC needs at least 2 clusters")


def iic_pretrain(net: Network, X, config: IICConfig, seed: int = 0) -> tuple[Network, list[float]]:
    """Train ``net`` (head sized to the cluster count) to maximize the MI
    between its outputs on each patch and on an augmented view of it.

    Both views go through the network as one batch. Returns the network
    (trained in place) and the per-epoch mean loss.
    """
    if net.config.n_classes != config.n_clusters:
        raise SSLError(
            f"network head has {net.config.n_classes} outputs, config asks for {config.n_clusters} clusters"
        )
    X = fit_input(np.asarray(X), config.input_size)
    if len(X) == 0:
        raise SSLError("IIC needs at least one patch")
    net.set_conv_trainable(True)
    rng = np.random.default_rng(seed)
    state = AdamState()
    history = []
    for epoch in range(config.epochs):
        perm = rng.permutation(len(X))
        losses = []
        for i in range(0, len(X), config.batch_size):
            x = X[perm[i : i + config.batch_size]]
            if len(x) < 2:
                continue
            xp = random_augment_batch(x, config.augment_ops, rng)
            B = len(x)
            logits = net.forward(np.concatenate([x, xp]), train=True).astype(np.float64)
            s = softmax(logits)
            loss, dz, dzp = iic_loss_grad(s[:B], s[B:])
            if not np.isfinite(loss):
                raise NumericalError(f"IIC loss diverged in epoch {epoch}")
            net.zero_grad()
            net.backward(_softmax_backward(s, np.concatenate([dz, dzp])))
            adam_step(net.trainable_parameters(), net.gradients(), state, config.lr)
            losses.append(loss)
        history.append(float(np.mean(losses)) if losses else float("nan"))
    return net, history


def cluster_assignments(net: Network, X, input_size: int | None = None) -> np.ndarray:
    from .nnet.train import predict_logits

    return predict_logits(net, X, input_size=input_size).argmax(axis=1)


# ------------------------------------------------------------ Noisy Student


@dataclass
class PseudoLabelSet:
    ids: tuple[str, ...]
    probs: np.ndarray  # (N, K)
    teacher_hash: str

    def to_bytes(self) -> bytes:
        N, K = self.probs.shape
        parts = [PSEUDO_MAGIC, struct.pack("<HII", 1, N, K), bytes.fromhex(self.teacher_hash)]
        for i in self.ids:
            enc = i.encode("utf-8")
            parts.append(struct.pack("<H", len(enc)) + enc)
        parts.append(self.probs.astype("<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "PseudoLabelSet":
        if buf[:4] != PSEUDO_MAGIC:
            raise SSLError("not a pseudo-label file")
        _, N, K = struct.unpack_from("<HII", buf, 4)
        off = 14
        h = buf[off : off + 32].hex()
        off += 32
        ids = []
        for _ in range(N):
            (n,) = struct.unpack_from("<H", buf, off)
            off += 2
            ids.append(buf[off : off + n].decode("utf-8"))
            off += n
        probs = np.frombuffer(buf, dtype="<f4", count=N * K, offset=off).reshape(N, K).astype(np.float64)
        return cls(tuple(ids), probs, h)

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path):
        return cls.from_bytes(Path(path).read_bytes())


def pseudo_label(
    teacher: Network,
    X_unlabeled,
    tta_rounds: int = 1,
    ops=("hflip", "vflip", "blur"),
    seed: int = 0,
    input_size: int | None = 19,
    ids=None,
) -> PseudoLabelSet:
    """Soft teacher distributions for unlabeled patches (no filtering)."""
    X = np.asarray(X_unlabeled)
    if X.ndim != 4 or X.shape[1] != teacher.config.in_channels:
        raise SSLError(
            f"unlabeled patches must be (N, {teacher.config.in_channels}, S, S), got {X.shape}"
        )
    ops = ops if tta_rounds > 1 else ()
    probs = tta_predict_batch(teacher, X, max(1, tta_rounds), ops, seed, input_size)
    ids = tuple(ids) if ids is not None else tuple(str(i) for i in range(len(X)))
    return PseudoLabelSet(ids, probs, teacher.digest())


def noisy_student_train(
    teacher: Network,
    X_labeled,
    y_labeled,
    X_unlabeled,
    config: TrainConfig,
    pretrained: Network | None = None,
    tta_rounds: int = 1,
    student_seed: int = 0,
    pseudo: PseudoLabelSet | None = None,
) -> tuple[Network, TrainLog]:
    """Train a fresh student on labeled (hard) and pseudo-labeled (soft)
    batches, interleaved 1:1, all passed through the augmentation noise.

    With ``pretrained`` the student starts from that network's
    convolutional stack (frozen when ``config.freeze_conv``).
    """
    X_l = fit_input(np.asarray(X_labeled), config.input_size)
    if len(X_l) == 0:
        raise SSLError("labeled set is empty")
    K = teacher.config.n_classes
    if pretrained is not None:
        student = transfer(pretrained, K, config.freeze_conv, seed=student_seed)
    else:
        student = Network(teacher.config, seed=student_seed)

    X_u = np.asarray(X_unlabeled) if X_unlabeled is not None else np.zeros((0,))
    if X_u.size == 0 or len(X_u) == 0:
        return student, train(student, X_l, y_labeled, config)

    if pseudo is None:
        pseudo = pseudo_label(teacher, X_u, tta_rounds, seed=config.seed, input_size=config.input_size)
    X_u = fit_input(X_u, config.input_size)
    T_l = as_target_matrix(y_labeled, K)
    T_u = as_target_matrix(pseudo.probs / pseudo.probs.sum(axis=1, keepdims=True), K)

    def batches(epoch, rng):
        unl = _shuffled_batches(X_u, T_u, config.batch_size, rng)
        for lab in _shuffled_batches(X_l, T_l, config.batch_size, rng):
            yield lab
            nxt = next(unl, None)
            if nxt is None:
                unl = _shuffled_batches(X_u, T_u, config.batch_size, rng)
                nxt = next(unl)
            yield nxt

    history = run_epochs(student, batches, config)
    return student, history
