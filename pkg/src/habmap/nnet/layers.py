"""Layers with hand-written backward passes.

Activations are kept channels-last, ``(B, H, W, C)``, so convolutions
reduce to a single matrix product over im2col windows.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Layer:
    """Base layer: ``params``/``grads`` dicts plus optional ``buffers``."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.trainable = True

    def forward(self, x, train: bool):
        raise NotImplementedError

    def backward(self, dout, need_input_grad: bool = True):
        raise NotImplementedError

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)


def _fold_edge_pad(d, p):
    """Adjoint of ``np.pad(mode='edge')`` on axes 1 and 2."""
    if p == 0:
        return d
    d = d.copy()
    d[:, p] += d[:, :p].sum(axis=1)
    d[:, -p - 1] += d[:, -p:].sum(axis=1)
    d = d[:, p:-p]
    d[:, :, p] += d[:, :, :p].sum(axis=2)
    d[:, :, -p - 1] += d[:, :, -p:].sum(axis=2)
    return d[:, :, p:-p]


class Conv2d(Layer):
    """Square convolution with edge-replicating padding and no bias.

    Edge padding keeps a constant input constant, so globally pooled
    features of a flat field do not depend on the input size.
    """

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.k, self.stride, self.pad = kernel, stride, kernel // 2
        fan_in = in_ch * kernel * kernel
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_ch, in_ch, kernel, kernel))
        self.params["weight"] = w.astype(dtype)

    def forward(self, x, train):
        k, s, p = self.k, self.stride, self.pad
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)), mode="edge") if p else x
        win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s]
        B, Ho, Wo = win.shape[:3]
        cols = win.reshape(B * Ho * Wo, -1)
        w = self.params["weight"]
        out = cols @ w.reshape(w.shape[0], -1).T
        self._cache = (xp.shape, cols, (B, Ho, Wo))
        return out.reshape(B, Ho, Wo, w.shape[0])

    def backward(self, dout, need_input_grad=True):
        xp_shape, cols, (B, Ho, Wo) = self._cache
        w = self.params["weight"]
        O, C, k, _ = w.shape
        d2 = dout.reshape(-1, O)
        if self.trainable:
            self.grads["weight"] = (d2.T @ cols).reshape(w.shape)
        if not need_input_grad:
            return None
        dcols = (d2 @ w.reshape(O, -1)).reshape(B, Ho, Wo, C, k, k)
        dxp = np.zeros(xp_shape, dtype=dout.dtype)
        s = self.stride
        for i in range(k):
            for j in range(k):
                dxp[:, i : i + s * Ho : s, j : j + s * Wo : s, :] += dcols[..., i, j]
        return _fold_edge_pad(dxp, self.pad)


class BatchNorm2d(Layer):
    """Per-channel normalization.

    Uses batch statistics only when training *and* trainable; a frozen
    layer always runs on its running statistics.
    """

    def __init__(self, ch, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.params["gamma"] = np.ones(ch, dtype=dtype)
        self.params["beta"] = np.zeros(ch, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(ch, dtype=dtype)
        self.buffers["running_var"] = np.ones(ch, dtype=dtype)

    def forward(self, x, train):
        g, b = self.params["gamma"], self.params["beta"]
        if train and self.trainable:
            mu = x.mean(axis=(0, 1, 2))
            var = x.var(axis=(0, 1, 2))
            n = x.size // x.shape[-1]
            m = self.momentum
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm[...] = (1 - m) * rm + m * mu
            rv[...] = (1 - m) * rv + m * var * (n / max(n - 1, 1))
            batch_stats = True
        else:
            mu, var = self.buffers["running_mean"], self.buffers["running_var"]
            batch_stats = False
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        self._cache = (xhat, inv, batch_stats)
        return xhat * g + b

    def backward(self, dout, need_input_grad=True):
        xhat, inv, batch_stats = self._cache
        g = self.params["gamma"]
        if self.trainable:
            self.grads["gamma"] = (dout * xhat).sum(axis=(0, 1, 2))
            self.grads["beta"] = dout.sum(axis=(0, 1, 2))
        if not need_input_grad:
            return None
        dxhat = dout * g
        if not batch_stats:
            return dxhat * inv
        n = dout.size // dout.shape[-1]
        return (inv / n) * (
            n * dxhat
            - dxhat.sum(axis=(0, 1, 2))
            - xhat * (dxhat * xhat).sum(axis=(0, 1, 2))
        )


class ReLU(Layer):
    def forward(self, x, train):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout, need_input_grad=True):
        return dout * self._mask


class GlobalAvgPool(Layer):
    """Adaptive average pooling to 1x1: any spatial size in, (B, C) out."""

    def forward(self, x, train):
        self._shape = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, dout, need_input_grad=True):
        B, H, W, C = self._shape
        return np.broadcast_to(dout[:, None, None, :] / (H * W), self._shape).copy()


class Linear(Layer):
    def __init__(self, d_in, d_out, rng=None, dtype=np.float32, zero=False):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        if zero:
            w = np.zeros((d_out, d_in))
        else:
            w = rng.normal(0.0, np.sqrt(1.0 / d_in), (d_out, d_in))
        self.params["weight"] = w.astype(dtype)
        self.params["bias"] = np.zeros(d_out, dtype=dtype)

    def forward(self, x, train):
        self._x = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, dout, need_input_grad=True):
        if self.trainable:
            self.grads["weight"] = dout.T @ self._x
            self.grads["bias"] = dout.sum(axis=0)
        if not need_input_grad:
            return None
        return dout @ self.params["weight"]


class Sequential(Layer):
    """Runs sublayers in order; exposes their params under dotted names."""

    def __init__(self, *layers: tuple[str, Layer]):
        super().__init__()
        self.layers = list(layers)

    def named_layers(self):
        for name, layer in self.layers:
            if isinstance(layer, Sequential):
                for sub, l2 in layer.named_layers():
                    yield f"{name}.{sub}", l2
            else:
                yield name, layer

    def forward(self, x, train):
        for _, layer in self.layers:
            x = layer.forward(x, train)
        return x

    def any_trainable(self):
        return any(l.trainable and l.params for _, l in self.named_layers())

    def backward(self, dout, need_input_grad=True):
        for i in range(len(self.layers) - 1, -1, -1):
            name, layer = self.layers[i]
            below = need_input_grad or any(
                _has_trainable(l) for _, l in self.layers[:i]
            )
            dout = layer.backward(dout, below)
            if not below:
                return None
        return dout


def _has_trainable(layer: Layer) -> bool:
    if isinstance(layer, Sequential):
        return layer.any_trainable()
    return layer.trainable and bool(layer.params)


class ResidualBlock(Sequential):
    """conv-bn-relu-conv-bn plus shortcut, then relu.

    A projection shortcut (1x1 conv + bn) is used when the stride or the
    width changes.
    """

    def __init__(self, in_ch, out_ch, stride=1, rng=None, dtype=np.float32):
        main = Sequential(
            ("conv1", Conv2d(in_ch, out_ch, 3, stride, rng, dtype)),
            ("bn1", BatchNorm2d(out_ch, dtype=dtype)),
            ("relu1", ReLU()),
            ("conv2", Conv2d(out_ch, out_ch, 3, 1, rng, dtype)),
            ("bn2", BatchNorm2d(out_ch, dtype=dtype)),
        )
        layers = [("main", main)]
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = Sequential(
                ("conv", Conv2d(in_ch, out_ch, 1, stride, rng, dtype)),
                ("bn", BatchNorm2d(out_ch, dtype=dtype)),
            )
            layers.append(("shortcut", self.shortcut))
        super().__init__(*layers)
        self.main = main
        self.relu = ReLU()

    def forward(self, x, train):
        sc = self.shortcut.forward(x, train) if self.shortcut else x
        return self.relu.forward(self.main.forward(x, train) + sc, train)

    def backward(self, dout, need_input_grad=True):
        d = self.relu.backward(dout)
        dx = self.main.backward(d, need_input_grad)
        if self.shortcut is not None:
            dsc = self.shortcut.backward(d, need_input_grad)
        else:
            dsc = d
        if not need_input_grad:
            return None
        return dx + dsc
