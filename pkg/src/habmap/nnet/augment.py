"""Patch augmentations that keep the center pixel in place.

Patches are ``(C, S, S)`` arrays, batches ``(B, C, S, S)``. Valid op
names: ``hflip``, ``vflip``, ``blur``, ``crop``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Collection

import numpy as np

OPS = ("hflip", "vflip", "blur", "crop")
BLUR_SIGMA = (0.1, 2.0)


class AugmentError(ValueError):
    pass


def _check_ops(ops):
    unknown = set(ops) - set(OPS)
    if unknown:
        raise AugmentError(f"unknown augmentation ops: {sorted(unknown)}")


def hflip(x):
    return x[..., ::-1].copy()


def vflip(x):
    return x[..., ::-1, :].copy()


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, math.ceil(3 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(x, sigma: float) -> np.ndarray:
    """Separable per-channel Gaussian blur over the two trailing axes.

    Borders are mirrored (edge sample repeated), so a constant patch is
    left unchanged.
    """
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    x64 = np.asarray(x, dtype=np.float64)
    nd = x64.ndim
    pad = [(0, 0)] * (nd - 2) + [(r, r), (0, 0)]
    xp = np.pad(x64, pad, mode="symmetric")
    win = np.lib.stride_tricks.sliding_window_view(xp, len(k), axis=nd - 2)
    y = win @ k
    pad = [(0, 0)] * (nd - 1) + [(r, r)]
    yp = np.pad(y, pad, mode="symmetric")
    win = np.lib.stride_tricks.sliding_window_view(yp, len(k), axis=nd - 1)
    return (win @ k).astype(np.asarray(x).dtype)


def center_crop(x, side: int) -> np.ndarray:
    S = x.shape[-1]
    if side % 2 == 0 or side < 1:
        raise AugmentError(f"crop side must be odd and >= 1, got {side}")
    if side > S:
        raise AugmentError(f"crop side {side} exceeds patch side {S}")
    o = (S - side) // 2
    return x[..., o : o + side, o : o + side]


def crop_sizes(crop_min: int, crop_max: int) -> np.ndarray:
    if crop_min % 2 == 0 or crop_max % 2 == 0:
        raise AugmentError("crop bounds must be odd")
    if crop_max < crop_min:
        raise AugmentError(f"crop max {crop_max} < crop min {crop_min}")
    return np.arange(crop_min, crop_max + 1, 2)


def augment(
    patch,
    ops: Collection[str],
    rng: np.random.Generator,
    crop_min: int = 3,
    crop_max: int | None = None,
    sigma_range: tuple[float, float] = BLUR_SIGMA,
) -> np.ndarray:
    """Apply every op in ``ops`` once; random parameters come from ``rng``."""
    _check_ops(ops)
    x = np.asarray(patch)
    if x.shape[-1] != x.shape[-2] or x.shape[-1] % 2 == 0:
        raise AugmentError(f"patch must be square with odd side, got {x.shape[-2:]}")
    if "crop" in ops:
        hi = x.shape[-1] if crop_max is None else min(crop_max, x.shape[-1])
        x = center_crop(x, int(rng.choice(crop_sizes(crop_min, hi))))
    if "hflip" in ops:
        x = hflip(x)
    if "vflip" in ops:
        x = vflip(x)
    if "blur" in ops:
        x = gaussian_blur(x, rng.uniform(*sigma_range))
    return np.array(x)


@dataclass
class AugmentPlan:
    """Per-sample augmentation decisions for one batch.

    ``blur_sigma`` is NaN where no blur is applied; ``crop`` is one side
    for the whole batch (``None`` for no crop).
    """

    hflip: np.ndarray
    vflip: np.ndarray
    blur_sigma: np.ndarray
    crop: int | None = None


def draw_plan(
    n: int,
    ops: Collection[str],
    rng: np.random.Generator,
    side: int | None = None,
    crop_min: int = 3,
    crop_max: int | None = None,
    sigma_range: tuple[float, float] = BLUR_SIGMA,
    p: float = 0.5,
) -> AugmentPlan:
    """Draw flips and blur per sample with probability ``p``."""
    _check_ops(ops)
    crop = None
    if "crop" in ops:
        if side is None:
            raise AugmentError("crop needs the patch side")
        hi = side if crop_max is None else min(crop_max, side)
        crop = int(rng.choice(crop_sizes(crop_min, hi)))
    no = np.zeros(n, dtype=bool)
    hf = rng.random(n) < p if "hflip" in ops else no
    vf = rng.random(n) < p if "vflip" in ops else no
    if "blur" in ops:
        sel = rng.random(n) < p
        sig = rng.uniform(*sigma_range, size=n)
        sigma = np.where(sel, sig, np.nan)
    else:
        sigma = np.full(n, np.nan)
    return AugmentPlan(hf, vf, sigma, crop)


def apply_plan(batch, plan: AugmentPlan) -> np.ndarray:
    x = np.asarray(batch)
    if plan.crop is not None:
        x = center_crop(x, plan.crop)
    x = np.array(x)
    if plan.hflip.any():
        x[plan.hflip] = x[plan.hflip][..., ::-1]
    if plan.vflip.any():
        x[plan.vflip] = x[plan.vflip][..., ::-1, :]
    for i in np.flatnonzero(~np.isnan(plan.blur_sigma)):
        x[i] = gaussian_blur(x[i], plan.blur_sigma[i])
    return x


def random_augment_batch(
    batch,
    ops: Collection[str],
    rng: np.random.Generator,
    crop_min: int = 3,
    crop_max: int | None = None,
    sigma_range: tuple[float, float] = BLUR_SIGMA,
    p: float = 0.5,
) -> np.ndarray:
    """Training-time noise for a ``(B, C, S, S)`` batch.

    Flips and blur are applied per sample with probability ``p``; a crop
    side is drawn once per batch so the batch stays rectangular.
    """
    x = np.asarray(batch)
    plan = draw_plan(len(x), ops, rng, x.shape[-1], crop_min, crop_max, sigma_range, p)
    return apply_plan(x, plan)
