"""Residual center-pixel classifier and its binary file format."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .layers import (
    BatchNorm2d,
    Conv2d,
    GlobalAvgPool,
    Linear,
    ReLU,
    ResidualBlock,
    Sequential,
)

MAGIC = b"NNET"
FORMAT_VERSION = 1


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    n_classes: int
    in_channels: int = 14
    stage_widths: tuple[int, ...] = (32, 64, 128)
    blocks_per_stage: int = 1
    downsample: bool = True
    precision: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        if self.n_classes < 2:
            raise NetworkError("n_classes must be >= 2")
        if not self.stage_widths or min(self.stage_widths) <= 0:
            raise NetworkError("stage widths must be positive")
        if self.in_channels < 1 or self.blocks_per_stage < 1:
            raise NetworkError("in_channels and blocks_per_stage must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise NetworkError(f"unknown precision {self.precision!r}")

    @property
    def dtype(self):
        return np.dtype(self.precision)


class Network:
    """Stem conv, residual stages, global average pooling, linear head.

    ``forward`` takes ``(B, C, S, S)`` batches with odd ``S >= 3``; thanks
    to the global pooling ``S`` may change from batch to batch.
    """

    def __init__(self, config: NetworkConfig, seed: int = 0, zero_head: bool = False):
        self.config = config
        rng = np.random.default_rng(seed)
        dt = config.dtype
        w0 = config.stage_widths[0]
        layers = [
            ("stem", Sequential(
                ("conv", Conv2d(config.in_channels, w0, 3, 1, rng, dt)),
                ("bn", BatchNorm2d(w0, dtype=dt)),
                ("relu", ReLU()),
            ))
        ]
        prev = w0
        for s, width in enumerate(config.stage_widths):
            for b in range(config.blocks_per_stage):
                stride = 2 if (config.downsample and s > 0 and b == 0) else 1
                layers.append((f"stage{s}.block{b}", ResidualBlock(prev, width, stride, rng, dt)))
                prev = width
        layers.append(("pool", GlobalAvgPool()))
        self.body = Sequential(*layers)
        self.head = Linear(prev, config.n_classes, rng, dt, zero=zero_head)

    # ---------------------------------------------------------- parameters

    def named_layers(self):
        yield from self.body.named_layers()
        yield "head", self.head

    def named_parameters(self):
        """``(name, layer, key)`` triples in declaration order."""
        for lname, layer in self.named_layers():
            for key in layer.params:
                yield f"{lname}.{key}", layer, key

    def parameters(self) -> dict[str, np.ndarray]:
        return {n: l.params[k] for n, l, k in self.named_parameters()}

    def trainable_parameters(self) -> dict[str, np.ndarray]:
        return {n: l.params[k] for n, l, k in self.named_parameters() if l.trainable}

    def gradients(self) -> dict[str, np.ndarray]:
        return {n: l.grads[k] for n, l, k in self.named_parameters() if l.trainable}

    def buffers(self) -> dict[str, np.ndarray]:
        return {
            f"{n}.{k}": v for n, l in self.named_layers() for k, v in l.buffers.items()
        }

    def set_conv_trainable(self, flag: bool) -> None:
        for _, layer in self.body.named_layers():
            layer.trainable = flag

    @property
    def conv_frozen(self) -> bool:
        return not any(l.trainable for _, l in self.body.named_layers() if l.params)

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    # ------------------------------------------------------------- compute

    def _check_input(self, x):
        x = np.asarray(x)
        if x.ndim != 4:
            raise NetworkError(f"expected (B, C, S, S) input, got shape {x.shape}")
        B, C, H, W = x.shape
        if C != self.config.in_channels:
            raise NetworkError(f"expected {self.config.in_channels} channels, got {C}")
        if H != W or H < 3 or H % 2 == 0:
            raise NetworkError(f"spatial size must be square, odd and >= 3, got {H}x{W}")
        return np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=self.config.dtype)

    def features(self, x, train: bool = False) -> np.ndarray:
        return self.body.forward(self._check_input(x), train)

    def forward(self, x, train: bool = False) -> np.ndarray:
        """Logits ``(B, n_classes)``. ``train`` selects batch statistics."""
        return self.head.forward(self.features(x, train), train)

    __call__ = forward

    def zero_grad(self):
        for _, layer in self.named_layers():
            layer.zero_grad()

    def backward(self, dlogits) -> None:
        """Accumulate parameter gradients for the last ``forward`` call."""
        dlogits = np.asarray(dlogits, dtype=self.config.dtype)
        need_body = not self.conv_frozen
        dfeat = self.head.backward(dlogits, need_body)
        if need_body:
            self.body.backward(dfeat, need_input_grad=False)

    # ----------------------------------------------------------- utilities

    def copy(self) -> "Network":
        return network_from_bytes(network_to_bytes(self))

    def digest(self) -> str:
        return hashlib.sha256(network_to_bytes(self)).hexdigest()


def transfer(net: Network, n_new_classes: int, freeze_conv: bool, seed: int = 0) -> Network:
    """Copy ``net`` with a freshly initialized head of ``n_new_classes``."""
    if n_new_classes < 2:
        raise NetworkError("n_new_classes must be >= 2")
    cfg = NetworkConfig(**{**asdict(net.config), "n_classes": n_new_classes})
    new = Network(cfg, seed=seed)
    src = dict(net.body.named_layers())
    for name, layer in new.body.named_layers():
        for k in layer.params:
            layer.params[k][...] = src[name].params[k]
        for k in layer.buffers:
            layer.buffers[k][...] = src[name].buffers[k]
    new.set_conv_trainable(not freeze_conv)
    return new


# --------------------------------------------------------------------- I/O


def _pack_tensor(name: str, arr: np.ndarray, flag: int) -> bytes:
    enc = name.encode("utf-8")
    head = struct.pack("<H", len(enc)) + enc + struct.pack("<BB", flag, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def network_to_bytes(net: Network) -> bytes:
    cfg = json.dumps(asdict(net.config), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(cfg)), cfg]
    params = list(net.named_parameters())
    bufs = net.buffers()
    parts.append(struct.pack("<II", len(params), len(bufs)))
    for name, layer, key in params:
        parts.append(_pack_tensor(name, layer.params[key], int(layer.trainable)))
    for name, arr in bufs.items():
        parts.append(_pack_tensor(name, arr, 0))
    return b"".join(parts)


def _unpack_tensor(buf, off):
    (n,) = struct.unpack_from("<H", buf, off)
    off += 2
    name = buf[off : off + n].decode("utf-8")
    off += n
    flag, ndim = struct.unpack_from("<BB", buf, off)
    off += 2
    shape = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape)
    return name, flag, arr, off + 4 * count


def network_from_bytes(buf: bytes) -> Network:
    if buf[:4] != MAGIC:
        raise NetworkError("not a network file (bad magic)")
    version, clen = struct.unpack_from("<HI", buf, 4)
    if version != FORMAT_VERSION:
        raise NetworkError(f"unsupported network version {version}")
    off = 10
    cfg = json.loads(buf[off : off + clen].decode("utf-8"))
    off += clen
    net = Network(NetworkConfig(**cfg))
    n_params, n_bufs = struct.unpack_from("<II", buf, off)
    off += 8
    layers = dict(net.named_layers())
    for i in range(n_params + n_bufs):
        name, flag, arr, off = _unpack_tensor(buf, off)
        lname, key = name.rsplit(".", 1)
        layer = layers[lname]
        store = layer.params if i < n_params else layer.buffers
        if store[key].shape != arr.shape:
            raise NetworkError(f"shape mismatch for {name}")
        store[key][...] = arr
        if i < n_params:
            layer.trainable = bool(flag)
    return net


def save_network(path, net: Network) -> None:
    Path(path).write_bytes(network_to_bytes(net))


def load_network(path) -> Network:
    return network_from_bytes(Path(path).read_bytes())
