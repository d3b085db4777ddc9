"""Synthetic benchmark rasters with known class layout.

The generated scene contains spectrally separable classes plus one
*context pair*: two classes built from the same two spectral states, one
arranged in horizontal stripes and one in vertical stripes. Their
per-pixel value distributions are identical, so only a model that looks
at the neighborhood can tell them apart.

Fine annotations live in the upper study area; a disjoint lower strip
holds a denser set of coarse-taxonomy points for pretraining.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_erosion, gaussian_filter
from scipy.spatial import cKDTree

from .dataset import AnnotationPoint, Taxonomy, min_distance_sample, write_annotations
from .raster import GeoTransform, RasterStack, ndvi, ndvi_aggregates, write_raster

CONTEXT_PAIR = (0, 1)


@dataclass
class SynthConfig:
    height: int = 768
    width: int = 768
    pretrain_rows: int = 256
    channels: int = 14
    n_classes: int = 8
    n_regions: int = 160
    largest_class: int = 400
    imbalance: float = 472.0
    stripe_width: int = 2
    class_separation: float = 1.0
    noise: float = 0.6
    drift: float = 0.3
    pixel_size: float = 10.0
    boundary_margin: int = 2
    pretrain_min_dist: float = 80.0
    pretrain_points: int = 1500
    ndvi_steps: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 3:
            raise ValueError("need the context pair plus at least one spectral class")
        if self.channels < 4:
            raise ValueError("need at least one spectral channel plus three NDVI channels")


def class_counts(n_classes: int, largest: int, imbalance: float) -> np.ndarray:
    """Long-tailed per-class annotation counts.

    The two context-pair classes share the largest count; the rest decay
    geometrically down to ``largest / imbalance`` (at least 1).
    """
    counts = np.empty(n_classes, dtype=np.int64)
    counts[:2] = largest
    tail = n_classes - 2
    for i in range(tail):
        frac = (i + 1) / tail
        counts[2 + i] = max(1, int(round(largest * imbalance ** (-frac))))
    return counts


def coarse_mapping(n_classes: int, n_kept: int | None = None) -> np.ndarray:
    """Fine class -> coarse class.

    The ``n_kept`` most frequent classes (the low indices, default half)
    keep a coarse class of their own; the rare tail is pooled pairwise,
    so a tail coarse label covers two fine ones.
    """
    kept = max(2, (n_classes + 1) // 2) if n_kept is None else max(2, min(n_kept, n_classes))
    m = np.empty(n_classes, dtype=np.int64)
    m[:kept] = np.arange(kept)
    for k in range(kept, n_classes):
        m[k] = kept + (k - kept) // 2
    return m


@dataclass
class SyntheticBenchmark:
    config: SynthConfig
    raster: RasterStack
    labels: np.ndarray  # (H, W) true fine class per pixel
    taxonomy: Taxonomy
    coarse_taxonomy: Taxonomy
    coarse_of: np.ndarray
    points: list[AnnotationPoint]
    coarse_points: list[AnnotationPoint]
    context_pair: tuple[int, int] = CONTEXT_PAIR

    def write(self, outdir) -> dict[str, Path]:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        paths = {
            "raster": outdir / "raster.msrs",
            "labels": outdir / "labels.msrs",
            "annotations": outdir / "annotations.csv",
            "coarse_annotations": outdir / "coarse_annotations.csv",
            "taxonomy": outdir / "taxonomy.json",
            "coarse_taxonomy": outdir / "coarse_taxonomy.json",
            "meta": outdir / "synth.json",
        }
        write_raster(paths["raster"], self.raster)
        write_raster(
            paths["labels"],
            RasterStack(self.labels.astype(np.float32)[None], self.raster.geotransform, -1.0, ("class",)),
        )
        write_annotations(paths["annotations"], self.points)
        write_annotations(paths["coarse_annotations"], self.coarse_points)
        paths["taxonomy"].write_text(self.taxonomy.to_json())
        paths["coarse_taxonomy"].write_text(self.coarse_taxonomy.to_json())
        meta = {
            "config": asdict(self.config),
            "context_pair": list(self.context_pair),
            "coarse_of": self.coarse_of.tolist(),
        }
        paths["meta"].write_text(json.dumps(meta, indent=1, sort_keys=True))
        return paths


def _states(cfg: SynthConfig, rng) -> tuple[np.ndarray, np.ndarray]:
    """Spectral mean vectors and vegetation levels for the spectral states.

    States 0 and 1 are the two stripe states shared by the context pair;
    state ``k`` for ``k >= 2`` is spectral class ``k``.
    """
    n_spec = cfg.channels - 3
    means = rng.normal(0.0, cfg.class_separation, size=(cfg.n_classes, n_spec))
    veg = rng.uniform(0.05, 0.95, size=cfg.n_classes)
    return means, veg


def _stripe_state(kind: str, rows, cols, width: int) -> np.ndarray:
    idx = rows if kind == "horizontal" else cols
    return (idx // width) % 2


def context_texture(kind: str, shape: tuple[int, int], width: int = 2) -> np.ndarray:
    """Binary stripe-state canvas for one of the context-pair classes."""
    rows, cols = np.indices(shape)
    return _stripe_state(kind, rows, cols, width)


def _pixel_values(state_idx, means, veg, cfg, rng):
    """Per-pixel channel values for an array of spectral state indices."""
    shape = state_idx.shape
    spec = means[state_idx] + rng.normal(0.0, cfg.noise, size=shape + (means.shape[1],))
    spec = np.moveaxis(spec, -1, 0)
    # seasonal NIR/red series -> NDVI aggregates
    v = veg[state_idx]
    series = []
    for t in range(cfg.ndvi_steps):
        season = math.sin(math.pi * (t + 0.5) / cfg.ndvi_steps)
        nir = 0.25 + 0.5 * v * season + rng.normal(0.0, 0.04 * cfg.noise, size=shape)
        red = 0.12 + 0.08 * (1.0 - v) + rng.normal(0.0, 0.02 * cfg.noise, size=shape)
        series.append(ndvi(np.clip(nir, 0, None), np.clip(red, 0, None)))
    return spec.astype(np.float32), series


def generate(cfg: SynthConfig | None = None) -> SyntheticBenchmark:
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(cfg.seed)
    H = cfg.height + cfg.pretrain_rows
    W = cfg.width
    K = cfg.n_classes

    # region layout: Voronoi cells, each class guaranteed some cells
    seeds = np.column_stack([rng.uniform(0, H, cfg.n_regions), rng.uniform(0, W, cfg.n_regions)])
    region_class = np.concatenate(
        [np.arange(K), rng.integers(0, K, cfg.n_regions - K)]
    )
    rng.shuffle(region_class)
    rows, cols = np.indices((H, W))
    _, nearest = cKDTree(seeds).query(np.column_stack([rows.ravel() + 0.5, cols.ravel() + 0.5]))
    labels = region_class[nearest].reshape(H, W)

    means, veg = _states(cfg, rng)
    # spectral state per pixel: the context pair maps onto stripe states 0/1
    state = labels.copy()
    horiz = context_texture("horizontal", (H, W), cfg.stripe_width)
    vert = context_texture("vertical", (H, W), cfg.stripe_width)
    state[labels == 0] = horiz[labels == 0]
    state[labels == 1] = vert[labels == 1]

    spec, series = _pixel_values(state, means, veg, cfg, rng)
    drift = gaussian_filter(rng.normal(0.0, 1.0, size=(H, W)), 12.0)
    if cfg.drift > 0:
        # smooth within-class variation on the spectral classes only; on
        # the context pair it would differ by region and leak the label
        drift *= cfg.drift / max(drift.std(), 1e-9)
        drift[labels < 2] = 0.0
        spec = spec + drift[None].astype(np.float32)

    gt = GeoTransform(0.0, H * cfg.pixel_size, cfg.pixel_size, cfg.pixel_size)
    ndvi_rasters = [RasterStack(s[None], gt, -9999.0, ("ndvi",)) for s in series]
    amp, tot, mx = ndvi_aggregates(ndvi_rasters)
    data = np.concatenate([spec, amp.data, tot.data, mx.data])
    names = tuple(f"ch{i + 1:02d}" for i in range(cfg.channels - 3)) + (
        "ndvi_amplitude",
        "ndvi_sum",
        "ndvi_max",
    )
    raster = RasterStack(data, gt, -9999.0, names)

    taxonomy = Taxonomy("synthetic", tuple(f"S{k:02d}" for k in range(K)))
    coarse_of = coarse_mapping(K)
    n_coarse = int(coarse_of.max()) + 1
    coarse_tax = Taxonomy("synthetic-coarse", tuple(f"C{k:02d}" for k in range(n_coarse)))

    # fine annotations: study area only, away from region boundaries
    counts = class_counts(K, cfg.largest_class, cfg.imbalance)
    points = []
    study = np.zeros((H, W), dtype=bool)
    study[: cfg.height] = True
    for k in range(K):
        inner = binary_erosion(labels == k, iterations=cfg.boundary_margin) & study
        cand = np.flatnonzero(inner)
        if len(cand) == 0:
            cand = np.flatnonzero((labels == k) & study)
        if len(cand) == 0:
            continue
        pick = rng.choice(cand, size=min(counts[k], len(cand)), replace=False)
        for j in pick:
            r, c = divmod(int(j), W)
            x, y = gt.pixel_center(r, c)
            points.append((x, y, taxonomy.codes[k]))
    order = rng.permutation(len(points))
    fine = [AnnotationPoint(f"p{i:05d}", *points[j]) for i, j in enumerate(order)]

    # coarse pretraining points in the lower strip
    coarse = []
    if cfg.pretrain_rows > 0 and cfg.pretrain_points > 0:
        top = gt.origin_y - cfg.height * cfg.pixel_size
        extent = (0.0, gt.origin_y - H * cfg.pixel_size, W * cfg.pixel_size, top - cfg.pixel_size * 16)
        xy = min_distance_sample(extent, cfg.pretrain_points, cfg.pretrain_min_dist, cfg.seed + 1, 2000)
        for i, (x, y) in enumerate(xy):
            r = int((gt.origin_y - y) // cfg.pixel_size)
            c = int(x // cfg.pixel_size)
            coarse.append(AnnotationPoint(f"c{i:05d}", x, y, coarse_tax.codes[coarse_of[labels[r, c]]]))

    return SyntheticBenchmark(cfg, raster, labels, taxonomy, coarse_tax, coarse_of, fine, coarse)


# ----------------------------------------------------------- small corpora


def two_texture_raster(
    height: int = 64,
    width: int = 64,
    channels: int = 3,
    boundary_col: int | None = None,
    seed: int = 0,
    noise: float = 0.3,
) -> tuple[RasterStack, np.ndarray]:
    """Left half horizontal stripes, right half vertical stripes.

    Both textures use the same two spectral states, so the boundary is
    only visible through spatial context. Returns the raster (already in
    standardized units) and the (H, W) truth.
    """
    rng = np.random.default_rng(seed)
    b = width // 2 if boundary_col is None else boundary_col
    truth = np.zeros((height, width), dtype=np.int64)
    truth[:, b:] = 1
    rows, cols = np.indices((height, width))
    state = np.where(truth == 0, _stripe_state("horizontal", rows, cols, 2), _stripe_state("vertical", rows, cols, 2))
    levels = np.stack([np.full(channels, -1.0), np.full(channels, 1.0)])
    data = np.moveaxis(levels[state], -1, 0) + rng.normal(0.0, noise, size=(channels, height, width))
    gt = GeoTransform(0.0, height * 10.0, 10.0, 10.0)
    return RasterStack(data.astype(np.float32), gt, -9999.0, standardized=True), truth


def two_texture_patches(
    n: int, size: int = 9, channels: int = 3, seed: int = 0, noise: float = 0.3
) -> tuple[np.ndarray, np.ndarray]:
    """Balanced corpus of ``(n, channels, size, size)`` stripe patches.

    Texture 0: horizontal stripes; texture 1: vertical stripes. The
    stripe phase is random per patch but always puts the center pixel on
    the same state, so the center carries no texture information.
    """
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    rng.shuffle(y)
    rows, cols = np.indices((size, size))
    c = size // 2
    phases = [d for d in range(4) if _stripe_state("horizontal", c + d, 0, 2) == 0]
    X = np.empty((n, channels, size, size), dtype=np.float32)
    for i in range(n):
        dr, dc = rng.choice(phases, size=2)
        kind = "horizontal" if y[i] == 0 else "vertical"
        s = _stripe_state(kind, rows + dr, cols + dc, 2)
        X[i] = (2.0 * s - 1.0)[None] + rng.normal(0.0, noise, size=(channels, size, size))
    return X, y
