"""Labeled patch archives extracted around annotation points."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import AnnotationPoint, Taxonomy
from .raster import RasterError, RasterStack, extract_patch, world_to_pixel

MAGIC = b"PTCH"


@dataclass
class PatchArchive:
    ids: list[str]
    patches: np.ndarray  # (N, C, S, S) float32
    features: np.ndarray  # (N, C) center-pixel values
    labels: np.ndarray  # (N,) class indices
    taxonomy: Taxonomy
    nodata_fraction: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.nodata_fraction is None:
            self.nodata_fraction = np.zeros(len(self.ids))

    def __len__(self):
        return len(self.ids)

    def subset(self, ids: Sequence[str]) -> "PatchArchive":
        pos = {i: n for n, i in enumerate(self.ids)}
        idx = np.array([pos[i] for i in ids if i in pos], dtype=np.int64)
        return PatchArchive(
            [self.ids[i] for i in idx],
            self.patches[idx],
            self.features[idx],
            self.labels[idx],
            self.taxonomy,
            self.nodata_fraction[idx],
        )

    def to_bytes(self) -> bytes:
        header = json.dumps(
            {
                "ids": self.ids,
                "taxonomy": json.loads(self.taxonomy.to_json()),
                "shape": list(self.patches.shape),
            },
            sort_keys=True,
        ).encode("utf-8")
        return b"".join(
            [
                MAGIC,
                struct.pack("<I", len(header)),
                header,
                self.patches.astype("<f4").tobytes(),
                self.features.astype("<f4").tobytes(),
                self.labels.astype("<i4").tobytes(),
                self.nodata_fraction.astype("<f4").tobytes(),
            ]
        )

    @classmethod
    def from_bytes(cls, buf: bytes) -> "PatchArchive":
        if buf[:4] != MAGIC:
            raise ValueError("not a patch archive")
        (n,) = struct.unpack_from("<I", buf, 4)
        head = json.loads(buf[8 : 8 + n])
        off = 8 + n
        shape = tuple(head["shape"])
        N, C = shape[0], shape[1]
        cnt = int(np.prod(shape))
        patches = np.frombuffer(buf, "<f4", cnt, off).reshape(shape).astype(np.float32)
        off += 4 * cnt
        feats = np.frombuffer(buf, "<f4", N * C, off).reshape(N, C).astype(np.float32)
        off += 4 * N * C
        labels = np.frombuffer(buf, "<i4", N, off).astype(np.int64)
        off += 4 * N
        frac = np.frombuffer(buf, "<f4", N, off).astype(np.float64)
        tax = Taxonomy.from_json(json.dumps(head["taxonomy"]))
        return cls(list(head["ids"]), patches, feats, labels, tax, frac)

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path):
        return cls.from_bytes(Path(path).read_bytes())


def build_archive(
    raster: RasterStack,
    points: Sequence[AnnotationPoint],
    taxonomy: Taxonomy,
    patch_size: int,
    max_nodata_fraction: float = 0.5,
) -> tuple[PatchArchive, list[tuple[str, str]]]:
    """Extract one patch per point; returns the archive and ``(id, reason)`` skips."""
    ids, patches, feats, labels, fracs, skipped = [], [], [], [], [], []
    for p in points:
        row, col = world_to_pixel(raster.geotransform, p.x, p.y)
        try:
            patch = extract_patch(raster, row, col, patch_size)
        except RasterError as e:
            skipped.append((p.id, str(e)))
            continue
        if patch.nodata_fraction > max_nodata_fraction:
            skipped.append((p.id, f"nodata fraction {patch.nodata_fraction:.3f} above limit"))
            continue
        ids.append(p.id)
        patches.append(patch.values)
        feats.append(raster.data[:, row, col])
        labels.append(taxonomy.index[p.class_code])
        fracs.append(patch.nodata_fraction)
    C = raster.channels
    archive = PatchArchive(
        ids,
        np.array(patches, dtype=np.float32).reshape(len(ids), C, patch_size, patch_size),
        np.array(feats, dtype=np.float32).reshape(len(ids), C),
        np.array(labels, dtype=np.int64),
        taxonomy,
        np.array(fracs, dtype=np.float64),
    )
    return archive, skipped
