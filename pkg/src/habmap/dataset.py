"""Annotations, taxonomies and overlap-aware train/test splitting.

Splits never let a training patch share a pixel with a test patch:
every non-test point whose patch overlaps a test patch is dropped from
training. Test points are never dropped.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .raster import GeoTransform, world_to_pixel

RNG_ALGORITHM = "numpy.PCG64"


class DatasetError(ValueError):
    pass


class SplitError(DatasetError):
    pass


@dataclass(frozen=True)
class AnnotationPoint:
    id: str
    x: float
    y: float
    class_code: str


@dataclass(frozen=True)
class Taxonomy:
    name: str
    codes: tuple[str, ...]
    names: tuple[str, ...] = ()
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        codes = tuple(str(c) for c in self.codes)
        if len(set(codes)) != len(codes):
            raise DatasetError(f"taxonomy {self.name!r} has duplicate codes")
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "index", {c: i for i, c in enumerate(codes)})

    def __len__(self):
        return len(self.codes)

    def __contains__(self, code):
        return code in self.index

    def to_json(self) -> str:
        return json.dumps({"name": self.name, "codes": list(self.codes), "names": list(self.names)})

    @classmethod
    def from_json(cls, text: str) -> "Taxonomy":
        d = json.loads(text)
        return cls(d["name"], tuple(d["codes"]), tuple(d.get("names", ())))


# Natura2000 habitat classes and their sample counts in the reference field
# dataset (2036 points, heavily long-tailed).
NATURA2000_TABLE = (
    ("3110", "Oligotrophic waters containing very few minerals of sandy plains", 28),
    ("3160", "Natural dystrophic lakes and ponds", 1),
    ("3220", "Alpine rivers and the herbaceous vegetation along their banks", 4),
    ("4060", "Alpine and Boreal heaths", 472),
    ("4080", "Sub-Arctic Salix spp. scrub", 9),
    ("6150", "Siliceous alpine and boreal grasslands", 121),
    ("6270", "Fennoscandian lowland species-rich dry to mesic grasslands", 1),
    ("6430", "Hydrophilous tall herb fringe communities", 13),
    ("6450", "Northern boreal alluvial meadows", 46),
    ("7140", "Transition mires and quaking bogs", 165),
    ("7160", "Fennoscandian mineral-rich springs and springfens", 104),
    ("7220", "Petrifying springs with tufa formation", 8),
    ("7230", "Alkaline fens", 26),
    ("7240", "Alpine pioneer formations of the Caricion bicoloris-atrofuscae", 2),
    ("7310", "Aapa mires", 27),
    ("7320", "Palsa mires", 17),
    ("8110", "Siliceous scree of the montane to snow levels", 7),
    ("8210", "Calcareous rocky slopes with chasmophytic vegetation", 2),
    ("8220", "Siliceous rocky slopes with chasmophytic vegetation", 64),
    ("9010", "Western Taiga", 271),
    ("9040", "Nordic subalpine/subarctic forests with Betula pubescens", 453),
    ("9050", "Fennoscandian herb-rich forests with Picea abies", 58),
    ("9080", "Fennoscandian deciduous swamp woods", 12),
    ("91D0", "Bog woodland", 19),
    ("91E0", "Alluvial forests with Alnus glutinosa and Fraxinus excelsior", 106),
)

NATURA2000 = Taxonomy(
    "natura2000",
    tuple(r[0] for r in NATURA2000_TABLE),
    tuple(r[1] for r in NATURA2000_TABLE),
)


def write_natura_reference(path, seed: int = 0, extent=(0.0, 0.0, 100_000.0, 100_000.0)) -> None:
    """Write an annotation CSV with the reference Natura2000 class profile.

    Coordinates are uniform random placeholders; only the class counts
    carry information.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for code, _, count in NATURA2000_TABLE:
        for _ in range(count):
            x = rng.uniform(extent[0], extent[2])
            y = rng.uniform(extent[1], extent[3])
            rows.append((code, x, y))
    order = rng.permutation(len(rows))
    points = [
        AnnotationPoint(f"n{i:05d}", rows[j][1], rows[j][2], rows[j][0])
        for i, j in enumerate(order)
    ]
    write_annotations(path, points)


# ----------------------------------------------------------------- file I/O


@dataclass
class LoadReport:
    rejected: list = field(default_factory=list)  # (row number, reason)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "reason"])
            w.writerows(self.rejected)


def load_annotations(path, taxonomy: Taxonomy, report: LoadReport | None = None) -> list[AnnotationPoint]:
    """Read ``id,x,y,class_code`` rows.

    Rows whose class code is not in ``taxonomy`` are skipped and listed in
    ``report``. Malformed rows and duplicate ids raise :class:`DatasetError`.
    """
    report = report if report is not None else LoadReport()
    points: list[AnnotationPoint] = []
    seen: set[str] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return points
        if [h.strip() for h in header] != ["id", "x", "y", "class_code"]:
            raise DatasetError(f"{path}: expected header id,x,y,class_code, got {header}")
        for rowno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise DatasetError(f"{path}:{rowno}: expected 4 columns, got {len(row)}")
            pid, xs, ys, code = (c.strip() for c in row)
            try:
                x, y = float(xs), float(ys)
            except ValueError:
                raise DatasetError(f"{path}:{rowno}: non-numeric coordinates") from None
            if not (math.isfinite(x) and math.isfinite(y)):
                raise DatasetError(f"{path}:{rowno}: non-finite coordinates")
            if pid in seen:
                raise DatasetError(f"{path}:{rowno}: duplicate id {pid!r}")
            seen.add(pid)
            if code not in taxonomy:
                report.rejected.append((rowno, f"unknown class code {code!r}"))
                continue
            points.append(AnnotationPoint(pid, x, y, code))
    return points


def write_annotations(path, points: Iterable[AnnotationPoint]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "x", "y", "class_code"])
        for p in points:
            w.writerow([p.id, repr(float(p.x)), repr(float(p.y)), p.class_code])


def class_histogram(points: Sequence[AnnotationPoint], taxonomy: Taxonomy) -> np.ndarray:
    counts = np.zeros(len(taxonomy), dtype=np.int64)
    for p in points:
        counts[taxonomy.index[p.class_code]] += 1
    return counts


# ------------------------------------------------------------------ overlap


def _grid(pixel_size: float, grid: GeoTransform | None) -> GeoTransform:
    return grid if grid is not None else GeoTransform(0.0, 0.0, pixel_size, pixel_size)


def patches_overlap(
    p1: AnnotationPoint,
    p2: AnnotationPoint,
    patch_size: int,
    pixel_size: float,
    grid: GeoTransform | None = None,
) -> bool:
    """True when the two square patches share at least one pixel."""
    gt = _grid(pixel_size, grid)
    r1, c1 = world_to_pixel(gt, p1.x, p1.y)
    r2, c2 = world_to_pixel(gt, p2.x, p2.y)
    return max(abs(r1 - r2), abs(c1 - c2)) <= patch_size - 1


def _pixel_coords(points, pixel_size, grid) -> np.ndarray:
    gt = _grid(pixel_size, grid)
    return np.array([world_to_pixel(gt, p.x, p.y) for p in points], dtype=np.int64).reshape(-1, 2)


def _overlaps_any(cand: np.ndarray, ref: np.ndarray, patch_size: int) -> np.ndarray:
    """For each candidate cell, whether its patch overlaps any reference patch."""
    out = np.zeros(len(cand), dtype=bool)
    if len(ref) == 0 or len(cand) == 0:
        return out
    # Bucket reference cells by patch-sized blocks; only neighboring blocks can overlap.
    buckets: dict[tuple[int, int], list[int]] = {}
    keys = ref // patch_size
    for i, k in enumerate(map(tuple, keys)):
        buckets.setdefault(k, []).append(i)
    bucket_arrays = {k: ref[v] for k, v in buckets.items()}
    for i, (r, c) in enumerate(cand):
        br, bc = r // patch_size, c // patch_size
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                arr = bucket_arrays.get((br + dr, bc + dc))
                if arr is None:
                    continue
                d = np.maximum(np.abs(arr[:, 0] - r), np.abs(arr[:, 1] - c))
                if (d <= patch_size - 1).any():
                    out[i] = True
                    break
            if out[i]:
                break
    return out


# ------------------------------------------------------------------- splits


@dataclass(frozen=True)
class SplitResult:
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    dropped_ids: tuple[str, ...]
    seed: int
    patch_size: int
    pixel_size: float
    fold: int | None = None
    rng: str = RNG_ALGORITHM

    def to_text(self) -> str:
        d = {
            "rng": self.rng,
            "seed": self.seed,
            "fold": self.fold,
            "patch_size": self.patch_size,
            "pixel_size": self.pixel_size,
            "train_ids": list(self.train_ids),
            "test_ids": list(self.test_ids),
            "dropped_ids": list(self.dropped_ids),
        }
        return json.dumps(d, indent=1) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SplitResult":
        d = json.loads(text)
        return cls(
            tuple(d["train_ids"]),
            tuple(d["test_ids"]),
            tuple(d["dropped_ids"]),
            d["seed"],
            d["patch_size"],
            d["pixel_size"],
            d.get("fold"),
            d.get("rng", RNG_ALGORITHM),
        )


def _check_split_args(patch_size, pixel_size):
    if patch_size < 1 or patch_size % 2 == 0:
        raise DatasetError(f"patch size must be odd and >= 1, got {patch_size}")
    if not pixel_size > 0:
        raise DatasetError("pixel size must be positive")


def _build_split(points, test_idx, patch_size, pixel_size, grid, seed, fold) -> SplitResult:
    coords = _pixel_coords(points, pixel_size, grid)
    is_test = np.zeros(len(points), dtype=bool)
    is_test[test_idx] = True
    rest = np.flatnonzero(~is_test)
    dropped_mask = _overlaps_any(coords[rest], coords[is_test], patch_size)
    train = rest[~dropped_mask]
    dropped = rest[dropped_mask]
    if len(train) == 0:
        raise SplitError(
            "every non-test point overlaps a test patch; no training data remains"
        )
    ids = [p.id for p in points]
    return SplitResult(
        tuple(ids[i] for i in train),
        tuple(ids[i] for i in np.sort(np.asarray(test_idx))),
        tuple(ids[i] for i in dropped),
        seed,
        patch_size,
        pixel_size,
        fold,
    )


def random_test_split(
    points: Sequence[AnnotationPoint],
    test_fraction: float,
    patch_size: int,
    pixel_size: float,
    seed: int,
    grid: GeoTransform | None = None,
) -> SplitResult:
    if not 0 < test_fraction < 1:
        raise DatasetError(f"test fraction must be in (0, 1), got {test_fraction}")
    _check_split_args(patch_size, pixel_size)
    n = len(points)
    n_test = int(math.floor(test_fraction * n + 0.5))
    if n_test == 0:
        raise SplitError(f"test fraction {test_fraction} of {n} points selects nothing")
    rng = np.random.default_rng(seed)
    test_idx = rng.permutation(n)[:n_test]
    return _build_split(points, test_idx, patch_size, pixel_size, grid, seed, None)


def fold_seed(seed: int, fold: int) -> int:
    """Per-fold sub-seed, a pure function of (seed, fold index)."""
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def kfold_split(
    points: Sequence[AnnotationPoint],
    k: int,
    patch_size: int,
    pixel_size: float,
    seed: int,
    grid: GeoTransform | None = None,
) -> list[SplitResult]:
    """K folds whose test sets partition ``points``."""
    if k < 2:
        raise DatasetError(f"k must be >= 2, got {k}")
    if len(points) < k:
        raise DatasetError(f"{len(points)} points cannot fill {k} folds")
    _check_split_args(patch_size, pixel_size)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(points))
    chunks = np.array_split(perm, k)
    return [
        _build_split(points, chunk, patch_size, pixel_size, grid, seed, i)
        for i, chunk in enumerate(chunks)
    ]


# ------------------------------------------------------------------ sampling


def min_distance_sample(
    extent: tuple[float, float, float, float],
    n: int,
    min_dist: float,
    seed: int,
    max_attempts: int = 10_000,
) -> np.ndarray:
    """Uniform points in ``(xmin, ymin, xmax, ymax)`` at least ``min_dist`` apart.

    Rejection sampling over a hash grid of ``min_dist`` cells. Raises
    after ``max_attempts`` consecutive rejections.
    """
    if n < 1:
        raise DatasetError("n must be >= 1")
    if min_dist < 0:
        raise DatasetError("min_dist must be >= 0")
    xmin, ymin, xmax, ymax = extent
    if not (xmax > xmin and ymax > ymin):
        raise DatasetError(f"degenerate extent {extent}")
    rng = np.random.default_rng(seed)
    out: list[tuple[float, float]] = []
    grid: dict[tuple[int, int], list[int]] = {}
    # any cell >= min_dist keeps the 3x3 neighbour check exact; the floor
    # keeps grid indices finite for tiny distances
    cell = max(min_dist, max(xmax - xmin, ymax - ymin) * 1e-6)
    d2 = min_dist * min_dist
    rejections = 0
    while len(out) < n:
        x = rng.uniform(xmin, xmax)
        y = rng.uniform(ymin, ymax)
        gx, gy = int(math.floor((x - xmin) / cell)), int(math.floor((y - ymin) / cell))
        ok = True
        if min_dist > 0:
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    for j in grid.get((gx + dx, gy + dy), ()):
                        px, py = out[j]
                        if (px - x) ** 2 + (py - y) ** 2 < d2:
                            ok = False
                            break
                    if not ok:
                        break
                if not ok:
                    break
        if ok:
            grid.setdefault((gx, gy), []).append(len(out))
            out.append((x, y))
            rejections = 0
        else:
            rejections += 1
            if rejections >= max_attempts:
                raise DatasetError(
                    f"placed {len(out)} of {n} points before {max_attempts} consecutive "
                    f"rejections; extent too small for min_dist={min_dist}"
                )
    return np.array(out)


def points_by_id(points: Sequence[AnnotationPoint]) -> dict[str, AnnotationPoint]:
    return {p.id: p for p in points}
