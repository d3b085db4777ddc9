"""Raster data model, standardization, NDVI products and patch extraction.

Rasters are stored channel-major as ``(C, H, W)`` float32 arrays with a
north-up geotransform. The on-disk container ("MSRS") is a small
little-endian binary format, see :func:`write_raster`.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

STD_FLOOR = 1e-6
MAGIC = b"MSRS"
FORMAT_VERSION = 1


class RasterError(ValueError):
    """Raised for malformed rasters or invalid raster operations."""


@dataclass(frozen=True)
class GeoTransform:
    origin_x: float
    origin_y: float
    pixel_size_x: float
    pixel_size_y: float

    def __post_init__(self):
        if not (self.pixel_size_x > 0 and self.pixel_size_y > 0):
            raise RasterError("pixel sizes must be strictly positive")

    def pixel_center(self, row: int, col: int) -> tuple[float, float]:
        x = self.origin_x + (col + 0.5) * self.pixel_size_x
        y = self.origin_y - (row + 0.5) * self.pixel_size_y
        return x, y


def world_to_pixel(gt: GeoTransform, x: float, y: float) -> tuple[int, int]:
    """Map world coordinates to the ``(row, col)`` of the containing cell.

    No bounds checking is done; callers decide what out-of-raster means.
    """
    col = math.floor((x - gt.origin_x) / gt.pixel_size_x)
    row = math.floor((gt.origin_y - y) / gt.pixel_size_y)
    return row, col


@dataclass(frozen=True, eq=False)
class RasterStack:
    """Multi-channel raster.

    ``mask`` marks observed samples. When omitted it is derived from the
    nodata sentinel (NaN sentinels are matched with ``isnan``).
    """

    data: np.ndarray
    geotransform: GeoTransform
    nodata: float = -9999.0
    channel_names: tuple[str, ...] = ()
    standardized: bool = False
    mask: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3 or data.shape[0] < 1:
            raise RasterError(f"raster data must be (C, H, W), got shape {data.shape}")
        object.__setattr__(self, "data", data)
        names = tuple(self.channel_names) or tuple(f"band{i + 1}" for i in range(data.shape[0]))
        if len(names) != data.shape[0]:
            raise RasterError(
                f"{len(names)} channel names given for {data.shape[0]} channels"
            )
        object.__setattr__(self, "channel_names", names)
        if self.mask is None:
            if math.isnan(self.nodata):
                mask = ~np.isnan(data)
            else:
                mask = (data != np.float32(self.nodata)) & np.isfinite(data)
        else:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != data.shape:
                raise RasterError("mask shape must match data shape")
        object.__setattr__(self, "mask", mask)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def pixel_valid(self) -> np.ndarray:
        """(H, W) boolean: every channel observed."""
        return self.mask.all(axis=0)

    def pixel_features(self, row: int, col: int) -> np.ndarray:
        return self.data[:, row, col].copy()


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    def __len__(self):
        return len(self.mean)


@dataclass(frozen=True, eq=False)
class Patch:
    values: np.ndarray
    center_class: int | None = None
    source_point: str | None = None
    nodata_fraction: float = 0.0

    @property
    def size(self) -> int:
        return self.values.shape[-1]


def compute_channel_stats(raster: RasterStack) -> ChannelStats:
    """Population mean/std per channel over observed samples."""
    means, stds = [], []
    for c in range(raster.channels):
        vals = raster.data[c][raster.mask[c]].astype(np.float64)
        if vals.size == 0:
            raise RasterError(
                f"channel {c} ({raster.channel_names[c]!r}) contains no valid samples"
            )
        means.append(vals.mean())
        stds.append(max(vals.std(), STD_FLOOR))
    return ChannelStats(np.array(means), np.array(stds))


def standardize(raster: RasterStack, stats: ChannelStats) -> RasterStack:
    if len(stats) != raster.channels:
        raise RasterError(
            f"stats cover {len(stats)} channels but raster has {raster.channels}"
        )
    mean = np.asarray(stats.mean, dtype=np.float64)[:, None, None]
    std = np.asarray(stats.std, dtype=np.float64)[:, None, None]
    out = (raster.data.astype(np.float64) - mean) / std
    out = np.where(raster.mask, out, 0.0).astype(np.float32)
    return replace(raster, data=out, standardized=True, mask=raster.mask.copy())


def ndvi(nir, red):
    """Normalized difference vegetation index; 0 where nir+red vanishes.

    Works on scalars and arrays alike.
    """
    nir = np.asarray(nir, dtype=np.float64)
    red = np.asarray(red, dtype=np.float64)
    denom = nir + red
    small = np.abs(denom) < 1e-9
    out = np.where(small, 0.0, (nir - red) / np.where(small, 1.0, denom))
    return float(out) if out.ndim == 0 else out


def ndvi_aggregates(
    series: Sequence[RasterStack],
) -> tuple[RasterStack, RasterStack, RasterStack]:
    """Seasonal amplitude, sum and maximum of single-channel NDVI rasters.

    Nodata at a time step excludes that step for that pixel only; pixels
    without any valid step are nodata in all three outputs.
    """
    if len(series) == 0:
        raise RasterError("NDVI series is empty")
    first = series[0]
    for r in series:
        if r.data.shape != first.data.shape:
            raise RasterError(
                f"shape mismatch in NDVI series: {r.data.shape} vs {first.data.shape}"
            )
    stack = np.stack([r.data[0].astype(np.float64) for r in series])
    valid = np.stack([r.mask[0] for r in series])
    any_valid = valid.any(axis=0)

    hi = np.where(valid, stack, -np.inf).max(axis=0)
    lo = np.where(valid, stack, np.inf).min(axis=0)
    total = np.where(valid, stack, 0.0).sum(axis=0)

    nodata = first.nodata
    outputs = []
    for name, arr in (("ndvi_amplitude", hi - lo), ("ndvi_sum", total), ("ndvi_max", hi)):
        arr = np.where(any_valid, arr, nodata).astype(np.float32)
        outputs.append(
            RasterStack(
                arr[None],
                first.geotransform,
                nodata,
                (name,),
                mask=any_valid[None].copy(),
            )
        )
    return tuple(outputs)


def extract_patch(
    raster: RasterStack,
    row: int,
    col: int,
    size: int,
    center_class: int | None = None,
    source_point: str | None = None,
) -> Patch:
    """Cut a ``(C, size, size)`` window centered on ``(row, col)``.

    Samples outside the raster or unobserved are filled with 0 and
    counted into ``nodata_fraction``.
    """
    if size < 1 or size % 2 == 0:
        raise RasterError(f"patch size must be odd and >= 1, got {size}")
    if not (0 <= row < raster.height and 0 <= col < raster.width):
        raise RasterError(f"patch center ({row}, {col}) outside raster")
    if not raster.mask[:, row, col].all():
        raise RasterError(f"patch center ({row}, {col}) is nodata")

    half = size // 2
    C = raster.channels
    values = np.zeros((C, size, size), dtype=np.float32)
    valid = np.zeros((C, size, size), dtype=bool)
    r0, r1 = max(row - half, 0), min(row + half + 1, raster.height)
    c0, c1 = max(col - half, 0), min(col + half + 1, raster.width)
    pr0, pc0 = r0 - (row - half), c0 - (col - half)
    win = (slice(None), slice(pr0, pr0 + r1 - r0), slice(pc0, pc0 + c1 - c0))
    src = (slice(None), slice(r0, r1), slice(c0, c1))
    valid[win] = raster.mask[src]
    values[win] = np.where(raster.mask[src], raster.data[src], 0.0)
    frac = 1.0 - valid.sum() / valid.size
    return Patch(values, center_class, source_point, float(frac))


# --------------------------------------------------------------------- I/O


def raster_to_bytes(raster: RasterStack) -> bytes:
    C, H, W = raster.data.shape
    gt = raster.geotransform
    parts = [
        MAGIC,
        struct.pack("<HHII", FORMAT_VERSION, C, H, W),
        struct.pack("<4d", gt.origin_x, gt.origin_y, gt.pixel_size_x, gt.pixel_size_y),
        struct.pack("<f", raster.nodata),
    ]
    for name in raster.channel_names:
        enc = name.encode("utf-8")
        parts.append(struct.pack("<H", len(enc)) + enc)
    data = np.where(raster.mask, raster.data, np.float32(raster.nodata))
    parts.append(data.astype("<f4").tobytes())
    return b"".join(parts)


def raster_from_bytes(buf: bytes) -> RasterStack:
    if buf[:4] != MAGIC:
        raise RasterError("not an MSRS raster container (bad magic)")
    version, C, H, W = struct.unpack_from("<HHII", buf, 4)
    if version != FORMAT_VERSION:
        raise RasterError(f"unsupported MSRS version {version}")
    off = 4 + 12
    ox, oy, px, py = struct.unpack_from("<4d", buf, off)
    off += 32
    (nodata,) = struct.unpack_from("<f", buf, off)
    off += 4
    names = []
    for _ in range(C):
        (n,) = struct.unpack_from("<H", buf, off)
        off += 2
        names.append(buf[off : off + n].decode("utf-8"))
        off += n
    count = C * H * W
    if len(buf) - off != 4 * count:
        raise RasterError(
            f"MSRS payload holds {len(buf) - off} bytes, expected {4 * count}"
        )
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(C, H, W)
    return RasterStack(data.astype(np.float32), GeoTransform(ox, oy, px, py), nodata, tuple(names))


def write_raster(path, raster: RasterStack) -> None:
    Path(path).write_bytes(raster_to_bytes(raster))


def read_raster(path, standardized: bool = False) -> RasterStack:
    """Read an MSRS container.

    With ``standardized=True`` nodata samples are zero-filled and the
    result is flagged as standardized (as written by the ingest stage).
    """
    r = raster_from_bytes(Path(path).read_bytes())
    if standardized:
        data = np.where(r.mask, r.data, 0.0).astype(np.float32)
        r = replace(r, data=data, standardized=True, mask=r.mask)
    return r


def read_text_matrix(path) -> np.ndarray:
    """One channel per file, whitespace-separated rows."""
    rows = [line.split() for line in Path(path).read_text().splitlines() if line.strip()]
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        raise RasterError(f"{path}: ragged rows (widths {sorted(widths)})")
    return np.array(rows, dtype=np.float32)


def import_text_channels(
    paths: Sequence,
    geotransform: GeoTransform,
    nodata: float = -9999.0,
    channel_names: Sequence[str] | None = None,
) -> RasterStack:
    mats = [read_text_matrix(p) for p in paths]
    shapes = {m.shape for m in mats}
    if len(shapes) != 1:
        raise RasterError(f"channel files disagree on shape: {sorted(shapes)}")
    names = tuple(channel_names) if channel_names else tuple(Path(p).stem for p in paths)
    return RasterStack(np.stack(mats), geotransform, nodata, names)
