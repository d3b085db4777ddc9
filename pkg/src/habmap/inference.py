"""Test-time augmentation, RF+CNN ensembling and full-raster mapping."""

from __future__ import annotations

import copy
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .forest import RandomForestModel
from .nnet.augment import AugmentPlan, apply_plan, draw_plan
from .nnet.functional import softmax
from .nnet.network import Network
from .nnet.train import fit_input, predict_logits
from .raster import GeoTransform, RasterStack, write_raster

UNCLASSIFIED = 255
DEFAULT_TTA_OPS = ("hflip", "vflip", "blur")


class InferenceError(ValueError):
    pass


@dataclass(frozen=True)
class EnsembleConfig:
    alpha: float = 0.5
    tta_rounds: int = 5
    tta_ops: tuple[str, ...] = DEFAULT_TTA_OPS
    input_size: int = 19

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise InferenceError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.tta_rounds < 1:
            raise InferenceError("tta_rounds must be >= 1")


def _tta_with_plans(net: Network, X, plans: Sequence[AugmentPlan], input_size) -> np.ndarray:
    acc = None
    for plan in plans:
        p = softmax(predict_logits(net, apply_plan(X, plan), input_size=None))
        acc = p if acc is None else acc + p
    return acc / len(plans)


def tta_predict_batch(
    net: Network,
    X,
    rounds: int = 5,
    ops: Sequence[str] = DEFAULT_TTA_OPS,
    seed: int = 0,
    input_size: int | None = None,
) -> np.ndarray:
    """Mean softmax over ``rounds`` independently augmented copies, ``(N, K)``."""
    if rounds < 1:
        raise InferenceError("rounds must be >= 1")
    X = np.asarray(X)
    if input_size is not None:
        X = fit_input(X, input_size)
    rng = np.random.default_rng(seed)
    plans = [draw_plan(len(X), ops, rng, X.shape[-1]) for _ in range(rounds)]
    return _tta_with_plans(net, X, plans, input_size)


def tta_predict(net, patch, rounds=5, ops=DEFAULT_TTA_OPS, seed=0, input_size=None) -> np.ndarray:
    values = getattr(patch, "values", patch)
    return tta_predict_batch(net, np.asarray(values)[None], rounds, ops, seed, input_size)[0]


def ensemble_combine(y_rf, y_cnn, alpha: float) -> np.ndarray:
    """Convex combination ``alpha * y_rf + (1 - alpha) * y_cnn``."""
    y_rf = np.asarray(y_rf, dtype=np.float64)
    y_cnn = np.asarray(y_cnn, dtype=np.float64)
    if y_rf.shape != y_cnn.shape:
        raise InferenceError(f"class count mismatch: {y_rf.shape} vs {y_cnn.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise InferenceError(f"alpha must be in [0, 1], got {alpha}")
    return alpha * y_rf + (1.0 - alpha) * y_cnn


def ensemble_predict(
    rf: RandomForestModel,
    net: Network,
    pixel_features,
    patch,
    config: EnsembleConfig = EnsembleConfig(),
    seed: int = 0,
) -> np.ndarray:
    if rf.n_classes != net.config.n_classes:
        raise InferenceError(
            f"class count mismatch: forest {rf.n_classes}, network {net.config.n_classes}"
        )
    y_rf = rf.predict_proba(np.asarray(pixel_features))
    y_cnn = tta_predict(net, patch, config.tta_rounds, config.tta_ops, seed, config.input_size)
    return ensemble_combine(y_rf, y_cnn, config.alpha)


def ensemble_predict_batch(rf, net, features, X, config: EnsembleConfig = EnsembleConfig(), seed=0):
    y_rf = rf.predict_proba(features)
    y_cnn = tta_predict_batch(net, X, config.tta_rounds, config.tta_ops, seed, config.input_size)
    return ensemble_combine(y_rf, y_cnn, config.alpha)


# ------------------------------------------------------------------ mapping


@dataclass
class ClassificationMaps:
    class_map: np.ndarray  # (H, W) int, UNCLASSIFIED where the center was nodata
    probabilities: np.ndarray  # (K, H, W) float32, nodata where unclassified
    max_confidence: np.ndarray  # (H, W) float32
    geotransform: GeoTransform
    nodata: float = -9999.0

    @property
    def n_classes(self) -> int:
        return self.probabilities.shape[0]

    @property
    def classified(self) -> np.ndarray:
        return self.class_map != UNCLASSIFIED


def class_heatmap(maps: ClassificationMaps, class_index: int) -> np.ndarray:
    if not 0 <= class_index < maps.n_classes:
        raise InferenceError(f"class index {class_index} outside [0, {maps.n_classes})")
    return maps.probabilities[class_index].copy()


@dataclass
class MapModels:
    rf: RandomForestModel | None = None
    net: Network | None = None
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    tta: bool = True

    @property
    def n_classes(self) -> int:
        if self.rf is not None and self.net is not None and self.rf.n_classes != self.net.config.n_classes:
            raise InferenceError("forest and network disagree on the class count")
        return self.rf.n_classes if self.rf is not None else self.net.config.n_classes


def _map_rows(models, net, padded, valid, rows, cols, half, plans, n_classes):
    """Predict output rows ``rows``; one batch per output row."""
    out = np.zeros((len(rows), len(cols), n_classes))
    for i, (oi, r) in enumerate(rows):
        X = None
        if net is not None:
            win = np.lib.stride_tricks.sliding_window_view(
                padded[:, r : r + 2 * half + 1, :], (2 * half + 1,) * 2, axis=(1, 2)
            )[:, 0, cols]  # (C, n, S, S)
            X = np.ascontiguousarray(win.transpose(1, 0, 2, 3))
        feats = padded[:, r + half, cols + half].T
        if net is not None:
            row_plans = [
                AugmentPlan(p.hflip[oi], p.vflip[oi], p.blur_sigma[oi], p.crop) for p in plans
            ]
            y_cnn = _tta_with_plans(net, X, row_plans, None)
        if models.rf is not None and net is not None:
            out[i] = ensemble_combine(models.rf.predict_proba(feats), y_cnn, models.ensemble.alpha)
        elif models.rf is not None:
            out[i] = models.rf.predict_proba(feats)
        else:
            out[i] = y_cnn
    return out


def classify_map(
    models: MapModels,
    raster: RasterStack,
    patch_size: int = 49,
    stride: int = 1,
    seed: int = 0,
    workers: int = 1,
    tile_rows: int | None = None,
) -> ClassificationMaps:
    """Classify every ``stride``-th pixel of a standardized raster.

    Borders are reflect-padded. The raster is processed in row-band
    tiles (``tile_rows`` output rows each, optionally on ``workers``
    threads); since every output row is predicted as its own batch and
    all randomness is drawn up front for the whole grid, the result does
    not depend on the tiling.
    """
    if models.rf is None and models.net is None:
        raise InferenceError("no model configured for map production")
    if patch_size < 1 or patch_size % 2 == 0:
        raise InferenceError(f"patch size must be odd, got {patch_size}")
    if stride < 1:
        raise InferenceError("stride must be >= 1")
    K = models.n_classes
    net = models.net
    size = patch_size
    if net is not None:
        size = min(patch_size, models.ensemble.input_size)
    half = size // 2

    data = np.where(raster.mask, raster.data, 0.0).astype(np.float32)
    padded = np.pad(data, ((0, 0), (half, half), (half, half)), mode="reflect")
    valid = raster.pixel_valid()
    out_rows = np.arange(0, raster.height, stride)
    out_cols = np.arange(0, raster.width, stride)
    Ho, Wo = len(out_rows), len(out_cols)

    plans = []
    if net is not None:
        rounds = models.ensemble.tta_rounds if models.tta else 1
        ops = models.ensemble.tta_ops if models.tta else ()
        rng = np.random.default_rng(seed)
        for _ in range(rounds):
            p = draw_plan(Ho * Wo, ops, rng, size)
            plans.append(
                AugmentPlan(
                    p.hflip.reshape(Ho, Wo), p.vflip.reshape(Ho, Wo), p.blur_sigma.reshape(Ho, Wo), p.crop
                )
            )

    band = tile_rows or Ho
    tiles = [list(enumerate(out_rows))[i : i + band] for i in range(0, Ho, band)]

    def run(tile, tile_net):
        return _map_rows(models, tile_net, padded, valid, tile, out_cols, half, plans, K)

    if workers > 1 and len(tiles) > 1:
        # layers cache activations, so each worker needs its own network copy
        nets = [copy.deepcopy(net) if net is not None else None for _ in tiles]
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, tiles, nets))
    else:
        parts = [run(t, net) for t in tiles]
    probs = np.concatenate(parts, axis=0).astype(np.float32)  # (Ho, Wo, K)

    classified = valid[np.ix_(out_rows, out_cols)]
    class_map = np.argmax(probs, axis=2).astype(np.int32)
    conf = np.take_along_axis(probs, class_map[..., None], axis=2)[..., 0]
    nodata = np.float32(raster.nodata)
    class_map[~classified] = UNCLASSIFIED
    conf = np.where(classified, conf, nodata).astype(np.float32)
    probs = np.where(classified[..., None], probs, nodata).transpose(2, 0, 1)
    gt = raster.geotransform
    out_gt = GeoTransform(
        gt.origin_x, gt.origin_y, gt.pixel_size_x * stride, gt.pixel_size_y * stride
    )
    return ClassificationMaps(class_map, np.ascontiguousarray(probs), conf, out_gt, float(nodata))


def write_maps(outdir, maps: ClassificationMaps, class_codes: Sequence[str]) -> dict[str, Path]:
    """Write class map, probability stack and confidence as MSRS rasters."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {
        "class_map": outdir / "class_map.msrs",
        "probabilities": outdir / "probabilities.msrs",
        "max_confidence": outdir / "max_confidence.msrs",
        "classes": outdir / "classes.txt",
    }
    gt, nd = maps.geotransform, maps.nodata
    write_raster(
        paths["class_map"],
        RasterStack(maps.class_map.astype(np.float32)[None], gt, nd, ("class",)),
    )
    write_raster(
        paths["probabilities"],
        RasterStack(maps.probabilities, gt, nd, tuple(f"p_{c}" for c in class_codes)),
    )
    write_raster(
        paths["max_confidence"], RasterStack(maps.max_confidence[None], gt, nd, ("max_confidence",))
    )
    lines = [f"{i}\t{c}" for i, c in enumerate(class_codes)] + [f"{UNCLASSIFIED}\tunclassified"]
    paths["classes"].write_text("\n".join(lines) + "\n")
    return paths
