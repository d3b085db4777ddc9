"""Stage orchestration over a work directory.

Layout of a work directory::

    manifest.json            run manifest, one entry per executed stage
    data/                    standardized raster, stats, points, patch archives
    splits/fold{i}.json      overlap-aware k-fold splits
    models/                  forests, networks, pseudo labels
    <eval dir>/              metric reports, tables, curves, figures
    maps/<model>/            classification rasters and renders

Every stage declares its outputs up front and refuses to replace an
existing file unless ``force`` is set.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .archive import PatchArchive, build_archive
from .dataset import (
    NATURA2000,
    AnnotationPoint,
    LoadReport,
    SplitResult,
    Taxonomy,
    kfold_split,
    load_annotations,
    write_annotations,
)
from .forest import RandomForestModel, fit_forest, load_forest, save_forest
from .inference import (
    DEFAULT_TTA_OPS,
    EnsembleConfig,
    MapModels,
    classify_map,
    ensemble_combine,
    tta_predict_batch,
    write_maps,
)
from .metrics import MetricsReport, crossfold_aggregate, evaluate, write_curve_csv
from .nnet.network import Network, NetworkConfig, load_network, save_network, transfer
from .nnet.train import TrainConfig, train
from .raster import (
    GeoTransform,
    RasterStack,
    compute_channel_stats,
    import_text_channels,
    read_raster,
    standardize,
    write_raster,
)
from .ssl import IICConfig, iic_pretrain, noisy_student_train, pseudo_label

PRETRAINING = ("none", "unsupervised", "coarse")


class UsageError(Exception):
    """Bad arguments, or a stage run before its prerequisites."""


class DataError(Exception):
    """Inputs that cannot be read or used."""


# ------------------------------------------------------------------ config


@dataclass
class RunConfig:
    # inputs
    raster: tuple[str, ...] = ()
    annotations: str = ""
    taxonomy: str = "natura2000"
    coarse_annotations: str = ""
    coarse_taxonomy: str = ""
    origin_x: float = 0.0
    origin_y: float = 0.0
    pixel_size: float = 10.0
    # model attributes
    pretraining: str = "none"
    freeze_conv: bool = False
    crop_augment: bool = False
    semi_supervised: bool = False
    # hyperparameters
    epochs: int = 500
    pretrain_epochs: int = 50
    batch_size: int = 128
    lr: float = 1e-4
    patch_size: int = 49
    crop_min: int = 3
    crop_max: int = 19
    tta_rounds: int = 5
    ensemble_alpha: float = 0.5
    n_trees: int = 100
    max_depth: int = 0
    k_folds: int = 5
    test_fraction: float = 0.2
    iic_clusters: int = 44
    stage_widths: tuple[int, ...] = (32, 64, 128)
    label_fraction: float = 1.0
    max_nodata_fraction: float = 0.5
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.pretraining not in PRETRAINING:
            raise UsageError(f"pretraining must be one of {PRETRAINING}, got {self.pretraining!r}")
        if self.freeze_conv and self.pretraining == "none":
            raise UsageError("freeze_conv needs a pretrained network (pretraining is 'none')")
        if self.patch_size < 3 or self.patch_size % 2 == 0:
            raise UsageError(f"patch_size must be odd and >= 3, got {self.patch_size}")
        if self.crop_max % 2 == 0 or self.crop_min % 2 == 0 or self.crop_min > self.crop_max:
            raise UsageError("crop_min and crop_max must be odd with crop_min <= crop_max")
        if not 0.0 <= self.ensemble_alpha <= 1.0:
            raise UsageError("ensemble_alpha must be in [0, 1]")
        if not 0.0 < self.label_fraction <= 1.0:
            raise UsageError("label_fraction must be in (0, 1]")
        for name in ("epochs", "pretrain_epochs", "batch_size", "tta_rounds", "n_trees", "k_folds"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be >= 1")

    @property
    def input_size(self) -> int:
        return min(self.crop_max, self.patch_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["raster"] = list(self.raster)
        d["stage_widths"] = list(self.stage_widths)
        return d

    def to_text(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, value):
    default = getattr(RunConfig, name, None)
    if name in ("raster",):
        if isinstance(value, str):
            return tuple(v.strip() for v in value.split(",") if v.strip())
        return tuple(value)
    if name == "stage_widths":
        if isinstance(value, str):
            return tuple(int(v) for v in value.split(",") if v.strip())
        return tuple(int(v) for v in value)
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        s = str(value).strip().lower()
        if s in ("1", "true", "yes", "on", "+"):
            return True
        if s in ("0", "false", "no", "off", "-"):
            return False
        raise UsageError(f"{name}: expected a boolean, got {value!r}")
    if isinstance(default, int):
        try:
            return int(value)
        except ValueError:
            raise UsageError(f"{name}: expected an integer, got {value!r}") from None
    if isinstance(default, float):
        try:
            return float(value)
        except ValueError:
            raise UsageError(f"{name}: expected a number, got {value!r}") from None
    return str(value)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise UsageError(f"{source}:{n}: unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


def make_config(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    values = {}
    for src in (file_values or {}, overrides or {}):
        for k, v in src.items():
            if v is not None:
                values[k] = _coerce(k, v)
    return RunConfig(**values)


def load_config(path, overrides: dict | None = None) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file {p} not found")
    return make_config(parse_config_text(p.read_text(), str(p)), overrides)


# -------------------------------------------------------- model attributes


@dataclass(frozen=True)
class ModelAttributes:
    pretraining: str = "none"
    freeze_conv: bool = False
    crop_augment: bool = False
    semi_supervised: bool = False

    @property
    def slug(self) -> str:
        base = {"none": "base", "coarse": "pt", "unsupervised": "upt"}[self.pretraining]
        name = "ns" if self.semi_supervised and self.pretraining == "coarse" else base
        if self.semi_supervised and self.pretraining != "coarse":
            name = f"ns-{base}"
        if self.crop_augment:
            name += "-crop"
        if self.pretraining != "none" and not self.freeze_conv:
            name += "-no-freeze"
        return name

    @property
    def teacher(self) -> "ModelAttributes":
        return ModelAttributes(self.pretraining, self.freeze_conv, self.crop_augment, False)

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "ModelAttributes":
        return cls(cfg.pretraining, cfg.freeze_conv, cfg.crop_augment, cfg.semi_supervised)


def _row(name, pre, freeze, crop, ssl):
    return name, ModelAttributes(pre, freeze, crop, ssl)


# The trained-model grid: display name -> attributes.
MODEL_GRID = dict(
    [
        _row("Base", "none", False, False, False),
        _row("Base crop", "none", False, True, False),
        _row("NS", "coarse", True, False, True),
        _row("NS crop", "coarse", True, True, True),
        _row("NS crop no freeze", "coarse", False, True, True),
        _row("NS no freeze", "coarse", False, False, True),
        _row("PT", "coarse", True, False, False),
        _row("PT crop", "coarse", True, True, False),
        _row("PT crop no freeze", "coarse", False, True, False),
        _row("PT no freeze", "coarse", False, False, False),
        _row("UPT", "unsupervised", True, False, False),
    ]
)
RF_BASELINE = "rf"


def resolve_attributes(name: str) -> ModelAttributes:
    """Look up a grid row by display name or slug (case-insensitive)."""
    key = name.strip().lower().replace("_", "-")
    for display, attrs in MODEL_GRID.items():
        if key in (display.lower(), display.lower().replace(" ", "-"), attrs.slug):
            return attrs
    known = ", ".join(a.slug for a in MODEL_GRID.values())
    raise UsageError(f"unknown model row {name!r}; known rows: {known}")


# ---------------------------------------------------------------- manifest


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def stage_seed(seed: int, *keys) -> int:
    """Sub-seed derived from the run seed and stage-specific keys."""
    ints = [seed] + [k if isinstance(k, int) else zlib.crc32(str(k).encode()) for k in keys]
    return int(np.random.SeedSequence(ints).generate_state(1)[0])


class Stage:
    """Context for one stage run: claims outputs and records hashes."""

    def __init__(self, ws: "Workspace", name: str, cfg: RunConfig, force: bool, extra=None):
        self.ws, self.name, self.cfg, self.force = ws, name, cfg, force
        self.extra = extra or {}
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []

    def need(self, path, stage_hint: str) -> Path:
        p = Path(path)
        if not p.exists():
            raise UsageError(f"{self.name}: missing {self.ws.rel(p)}; run `{stage_hint}` first")
        self.inputs.append(p)
        return p

    def claim(self, path) -> Path:
        p = Path(path)
        if p.exists() and not self.force:
            raise UsageError(
                f"{self.name}: {self.ws.rel(p)} already exists; pass --force to overwrite"
            )
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(p)
        return p

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            return False
        entry = {
            "stage": self.name,
            "tool": "habmap",
            "version": __version__,
            "config": self.cfg.to_dict(),
            "args": self.extra,
            "inputs": {self.ws.rel(p): sha256_file(p) for p in self.inputs if p.is_file()},
            "outputs": {self.ws.rel(p): sha256_file(p) for p in self.outputs if p.is_file()},
            "seconds": round(time.perf_counter() - self.t0, 3),
        }
        self.ws.append_manifest(entry)
        return False


class Workspace:
    def __init__(self, root):
        self.root = Path(root)

    def rel(self, p) -> str:
        p = Path(p)
        try:
            return p.resolve().relative_to(self.root.resolve()).as_posix()
        except ValueError:
            return str(p)

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    def manifest(self) -> dict:
        if self.manifest_path.exists():
            return json.loads(self.manifest_path.read_text())
        return {"tool": "habmap", "stages": []}

    def append_manifest(self, entry: dict) -> None:
        m = self.manifest()
        m["stages"].append(entry)
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path.write_text(json.dumps(m, indent=1, sort_keys=True) + "\n")

    def output_hashes(self) -> dict[str, str]:
        """Latest recorded hash of every output file."""
        out = {}
        for e in self.manifest()["stages"]:
            out.update(e["outputs"])
        return out

    def stage(self, name, cfg, force=False, extra=None) -> Stage:
        return Stage(self, name, cfg, force, extra)

    # paths
    def data(self, name) -> Path:
        return self.root / "data" / name

    def split_path(self, fold: int) -> Path:
        return self.root / "splits" / f"fold{fold}.json"

    def rf_path(self, fold: int) -> Path:
        return self.root / "models" / f"rf_fold{fold}.rfor"

    def pretrain_path(self, mode: str) -> Path:
        return self.root / "models" / f"pretrain_{mode}.nnet"

    def cnn_path(self, slug: str, fold: int) -> Path:
        return self.root / "models" / f"{slug}_fold{fold}.nnet"

    def pseudo_path(self, slug: str, fold: int) -> Path:
        return self.root / "models" / f"{slug}_fold{fold}.pslb"

    def folds(self) -> list[int]:
        found = sorted(int(p.stem[4:]) for p in (self.root / "splits").glob("fold*.json"))
        if not found:
            raise UsageError("no splits found; run `split` first")
        return found

    def load_split(self, fold: int) -> SplitResult:
        p = self.split_path(fold)
        if not p.exists():
            raise UsageError(f"missing split for fold {fold}; run `split` first")
        return SplitResult.from_text(p.read_text())

    def load_archive(self, name: str = "patches") -> PatchArchive:
        p = self.data(f"{name}.ptch")
        if not p.exists():
            hint = "ingest" if name == "patches" else "ingest --coarse-annotations"
            raise UsageError(f"missing {self.rel(p)}; run `{hint}` first")
        return PatchArchive.load(p)


# ------------------------------------------------------------------ stages


def _load_taxonomy(spec: str) -> Taxonomy:
    if spec.lower() == "natura2000":
        return NATURA2000
    p = Path(spec)
    if not p.is_file():
        raise DataError(f"taxonomy file {spec} not found (or use 'natura2000')")
    try:
        return Taxonomy.from_json(p.read_text())
    except (ValueError, KeyError) as e:
        raise DataError(f"{spec}: invalid taxonomy file ({e})") from None


def _read_input_raster(cfg: RunConfig) -> RasterStack:
    paths = [Path(p) for p in cfg.raster]
    for p in paths:
        if not p.is_file():
            raise DataError(f"raster file {p} not found")
    if len(paths) == 1 and paths[0].suffix.lower() == ".msrs":
        return read_raster(paths[0])
    gt = GeoTransform(cfg.origin_x, cfg.origin_y, cfg.pixel_size, cfg.pixel_size)
    return import_text_channels(paths, gt)


def _write_skips(path, rows):
    with open(path, "w") as fh:
        fh.write("id,reason\n")
        for i, reason in rows:
            fh.write(f"{i},\"{reason}\"\n")


def _ingest_points(st, ws, raster, annotations, taxonomy_spec, name):
    tax = _load_taxonomy(taxonomy_spec)
    src = Path(annotations)
    if not src.is_file():
        raise DataError(f"annotation file {src} not found")
    st.inputs.append(src)
    report = LoadReport()
    points = load_annotations(src, tax, report)
    archive, skipped = build_archive(raster, points, tax, st.cfg.patch_size, st.cfg.max_nodata_fraction)
    if len(archive) == 0:
        raise DataError(f"{src}: no annotation point yields a usable patch")
    kept = set(archive.ids)
    archive.save(st.claim(ws.data(f"{name}.ptch")))
    write_annotations(st.claim(ws.data(f"{name}_points.csv")), [p for p in points if p.id in kept])
    report.write_csv(st.claim(ws.data(f"{name}_rejected.csv")))
    _write_skips(st.claim(ws.data(f"{name}_skipped.csv")), skipped)
    return archive, report, skipped


def run_ingest(ws: Workspace, cfg: RunConfig, force=False) -> dict:
    if not cfg.raster:
        raise UsageError("ingest needs at least one raster (config key 'raster' or --raster)")
    if not cfg.annotations:
        raise UsageError("ingest needs an annotation file (config key 'annotations')")
    with ws.stage("ingest", cfg, force) as st:
        raw = _read_input_raster(cfg)
        st.inputs.extend(Path(p) for p in cfg.raster)
        stats = compute_channel_stats(raw)
        std = standardize(raw, stats)
        write_raster(st.claim(ws.data("raster.msrs")), std)
        gt = std.geotransform
        meta = {
            "channel_names": list(raw.channel_names),
            "mean": [float(v) for v in stats.mean],
            "std": [float(v) for v in stats.std],
            "geotransform": [gt.origin_x, gt.origin_y, gt.pixel_size_x, gt.pixel_size_y],
            "shape": [raw.channels, raw.height, raw.width],
            "patch_size": cfg.patch_size,
        }
        st.claim(ws.data("stats.json")).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
        fine, rep, skipped = _ingest_points(st, ws, std, cfg.annotations, cfg.taxonomy, "patches")
        summary = {"patches": len(fine), "rejected": len(rep.rejected), "skipped": len(skipped)}
        if cfg.coarse_annotations:
            if not cfg.coarse_taxonomy:
                raise UsageError("coarse_annotations needs coarse_taxonomy")
            coarse, crep, cskip = _ingest_points(
                st, ws, std, cfg.coarse_annotations, cfg.coarse_taxonomy, "coarse"
            )
            summary.update(
                coarse_patches=len(coarse), coarse_rejected=len(crep.rejected), coarse_skipped=len(cskip)
            )
    return summary


def _grid(ws: Workspace) -> GeoTransform:
    p = ws.data("stats.json")
    if not p.exists():
        raise UsageError("missing data/stats.json; run `ingest` first")
    return GeoTransform(*json.loads(p.read_text())["geotransform"])


def _points(ws: Workspace, name="patches") -> list[AnnotationPoint]:
    p = ws.data(f"{name}_points.csv")
    if not p.exists():
        raise UsageError(f"missing {ws.rel(p)}; run `ingest` first")
    archive_tax = ws.load_archive(name).taxonomy
    return load_annotations(p, archive_tax)


def run_split(ws: Workspace, cfg: RunConfig, force=False) -> list[SplitResult]:
    with ws.stage("split", cfg, force) as st:
        gt = _grid(ws)
        st.need(ws.data("patches_points.csv"), "ingest")
        points = _points(ws)
        splits = kfold_split(points, cfg.k_folds, cfg.patch_size, gt.pixel_size_x, cfg.seed, gt)
        for s in splits:
            st.claim(ws.split_path(s.fold)).write_text(s.to_text())
    return splits


def _train_ids(ws: Workspace, cfg: RunConfig, fold: int) -> list[str]:
    ids = list(ws.load_split(fold).train_ids)
    if cfg.label_fraction < 1.0:
        rng = np.random.default_rng(stage_seed(cfg.seed, "labels", fold))
        n = max(1, int(math.ceil(cfg.label_fraction * len(ids))))
        keep = np.sort(rng.permutation(len(ids))[:n])
        ids = [ids[i] for i in keep]
    return ids


def _fold_list(ws, fold):
    return ws.folds() if fold is None else [fold]


def fit_rf_archive(archive: PatchArchive, cfg: RunConfig, seed: int) -> RandomForestModel:
    return fit_forest(
        archive.features.astype(np.float64),
        archive.labels,
        len(archive.taxonomy),
        n_trees=cfg.n_trees,
        seed=seed,
        max_depth=cfg.max_depth or None,
    )


def run_train_rf(ws: Workspace, cfg: RunConfig, fold=None, force=False) -> list[Path]:
    archive = ws.load_archive()
    out = []
    for f in _fold_list(ws, fold):
        with ws.stage("train-rf", cfg, force, {"fold": f}) as st:
            st.need(ws.split_path(f), "split")
            st.need(ws.data("patches.ptch"), "ingest")
            path = st.claim(ws.rf_path(f))
            train_set = archive.subset(_train_ids(ws, cfg, f))
            save_forest(path, fit_rf_archive(train_set, cfg, stage_seed(cfg.seed, "rf", f)))
            out.append(path)
    return out


def network_config(cfg: RunConfig, n_classes: int, channels: int) -> NetworkConfig:
    return NetworkConfig(n_classes=n_classes, in_channels=channels, stage_widths=tuple(cfg.stage_widths))


def train_config(cfg: RunConfig, attrs: ModelAttributes, seed: int, epochs=None) -> TrainConfig:
    ops = DEFAULT_TTA_OPS + (("crop",) if attrs.crop_augment else ())
    return TrainConfig(
        epochs=epochs or cfg.epochs,
        batch_size=cfg.batch_size,
        lr=cfg.lr,
        augment_ops=ops,
        input_size=cfg.input_size,
        crop_min=cfg.crop_min,
        freeze_conv=attrs.freeze_conv,
        seed=seed,
    )


def run_pretrain(ws: Workspace, cfg: RunConfig, mode: str, force=False) -> Path:
    if mode not in ("iic", "coarse"):
        raise UsageError(f"pretrain mode must be 'iic' or 'coarse', got {mode!r}")
    key = "unsupervised" if mode == "iic" else "coarse"
    with ws.stage("pretrain", cfg, force, {"mode": mode}) as st:
        st.need(ws.data("coarse.ptch"), "ingest --coarse-annotations")
        corpus = ws.load_archive("coarse")
        path = st.claim(ws.pretrain_path(key))
        C = corpus.patches.shape[1]
        seed = stage_seed(cfg.seed, "pretrain", mode)
        if mode == "coarse":
            net = Network(network_config(cfg, len(corpus.taxonomy), C), seed=seed)
            tc = train_config(cfg, ModelAttributes(), seed, epochs=cfg.pretrain_epochs)
            train(net, corpus.patches, corpus.labels, tc)
        else:
            net = Network(network_config(cfg, cfg.iic_clusters, C), seed=seed)
            ic = IICConfig(
                n_clusters=cfg.iic_clusters,
                epochs=cfg.pretrain_epochs,
                batch_size=cfg.batch_size,
                lr=cfg.lr,
                input_size=cfg.input_size,
            )
            iic_pretrain(net, corpus.patches, ic, seed=seed)
        save_network(path, net)
    return path


def _initial_network(ws, cfg, attrs, n_classes, channels, seed, st) -> tuple[Network, Network | None]:
    if attrs.pretraining == "none":
        return Network(network_config(cfg, n_classes, channels), seed=seed), None
    mode = "iic" if attrs.pretraining == "unsupervised" else "coarse"
    pre = load_network(st.need(ws.pretrain_path(attrs.pretraining), f"pretrain --mode {mode}"))
    if pre.config.in_channels != channels:
        raise DataError(
            f"pretrained network expects {pre.config.in_channels} channels, data has {channels}"
        )
    return transfer(pre, n_classes, attrs.freeze_conv, seed=seed), pre


def run_train_cnn(ws: Workspace, cfg: RunConfig, fold=None, force=False) -> list[Path]:
    attrs = ModelAttributes.from_config(cfg).teacher
    archive = ws.load_archive()
    K = len(archive.taxonomy)
    out = []
    for f in _fold_list(ws, fold):
        with ws.stage("train-cnn", cfg, force, {"fold": f, "model": attrs.slug}) as st:
            st.need(ws.split_path(f), "split")
            path = st.claim(ws.cnn_path(attrs.slug, f))
            seed = stage_seed(cfg.seed, "cnn", attrs.slug, f)
            net, _ = _initial_network(ws, cfg, attrs, K, archive.patches.shape[1], seed, st)
            tr = archive.subset(_train_ids(ws, cfg, f))
            train(net, tr.patches, tr.labels, train_config(cfg, attrs, seed))
            save_network(path, net)
            out.append(path)
    return out


def run_distill(ws: Workspace, cfg: RunConfig, fold=None, force=False) -> list[Path]:
    attrs = ModelAttributes.from_config(cfg)
    attrs = ModelAttributes(attrs.pretraining, attrs.freeze_conv, attrs.crop_augment, True)
    teacher_slug = attrs.teacher.slug
    archive = ws.load_archive()
    out = []
    for f in _fold_list(ws, fold):
        with ws.stage("distill", cfg, force, {"fold": f, "model": attrs.slug, "teacher": teacher_slug}) as st:
            teacher_path = st.need(ws.cnn_path(teacher_slug, f), f"train-cnn ({teacher_slug})")
            st.need(ws.data("coarse.ptch"), "ingest --coarse-annotations")
            unlabeled = ws.load_archive("coarse")
            path = st.claim(ws.cnn_path(attrs.slug, f))
            pseudo_out = st.claim(ws.pseudo_path(attrs.slug, f))
            teacher = load_network(teacher_path)
            seed = stage_seed(cfg.seed, "distill", attrs.slug, f)
            pretrained = None
            if attrs.pretraining != "none":
                _, pretrained = _initial_network(
                    ws, cfg, attrs, teacher.config.n_classes, teacher.config.in_channels, seed, st
                )
            pseudo = pseudo_label(teacher, unlabeled.patches, 1, seed=seed, input_size=cfg.input_size,
                                  ids=unlabeled.ids)
            pseudo.save(pseudo_out)
            tr = archive.subset(_train_ids(ws, cfg, f))
            student, _ = noisy_student_train(
                teacher,
                tr.patches,
                tr.labels,
                unlabeled.patches,
                train_config(cfg, attrs, seed),
                pretrained=pretrained,
                student_seed=seed,
                pseudo=pseudo,
            )
            save_network(path, student)
            out.append(path)
    return out


# --------------------------------------------------------------- evaluate


TABLE_METRICS = (
    ("precision_weighted", "Prec. weighted"),
    ("recall_weighted", "Rec. weighted/Acc"),
    ("f1_weighted", "F1 weighted"),
    ("precision_macro", "Prec. macro"),
    ("recall_macro", "Rec. macro"),
    ("f1_macro", "F1 macro"),
    ("top3_accuracy", "Top-3 acc"),
    ("top5_accuracy", "Top-5 acc"),
    ("ap_macro", "AP macro"),
    ("roc_auc_macro", "ROC-AUC macro"),
)


@dataclass
class FoldPredictions:
    fold: int
    y_true: np.ndarray
    rf: np.ndarray
    cnn: dict = field(default_factory=dict)  # slug -> probabilities


def predict_fold(ws: Workspace, cfg: RunConfig, archive: PatchArchive, fold: int, slugs: Sequence[str]):
    test = archive.subset(ws.load_split(fold).test_ids)
    rf = load_forest(ws.rf_path(fold))
    preds = FoldPredictions(fold, test.labels, rf.predict_proba(test.features.astype(np.float64)))
    for slug in slugs:
        net = load_network(ws.cnn_path(slug, fold))
        preds.cnn[slug] = tta_predict_batch(
            net,
            test.patches,
            cfg.tta_rounds,
            DEFAULT_TTA_OPS,
            stage_seed(cfg.seed, "tta", slug, fold),
            cfg.input_size,
        )
    return preds


def available_models(ws: Workspace) -> list[str]:
    folds = ws.folds()
    slugs = sorted({p.stem.rsplit("_fold", 1)[0] for p in (ws.root / "models").glob("*_fold*.nnet")})
    return [s for s in slugs if all(ws.cnn_path(s, f).exists() for f in folds)]


def _fmt(mean, std):
    return f"{mean:.3f}", f"{std:.3f}"


def run_evaluate(ws: Workspace, cfg: RunConfig, models=None, out_name="eval", force=False) -> dict:
    from . import plotting

    archive = ws.load_archive()
    folds = ws.folds()
    if len(folds) < 2:
        raise UsageError("evaluation aggregates over folds; split with k >= 2")
    slugs = list(models) if models else available_models(ws)
    outdir = ws.root / out_name
    with ws.stage("evaluate", cfg, force, {"models": slugs, "out": out_name}) as st:
        for f in folds:
            st.need(ws.rf_path(f), "train-rf")
            for s in slugs:
                hint = "distill" if s.startswith("ns") else "train-cnn"
                st.need(ws.cnn_path(s, f), f"{hint} ({s})")
        K = len(archive.taxonomy)
        reports: dict[str, list[MetricsReport]] = {"rf": []}
        pooled: dict[str, list] = {"rf": []}
        for s in slugs:
            for v in ("cnn", "ensemble"):
                reports[f"{s}/{v}"] = []
                pooled[f"{s}/{v}"] = []
        y_all = []
        for f in folds:
            preds = predict_fold(ws, cfg, archive, f, slugs)
            y_all.append(preds.y_true)
            rows = {"rf": preds.rf}
            for s in slugs:
                rows[f"{s}/cnn"] = preds.cnn[s]
                rows[f"{s}/ensemble"] = ensemble_combine(preds.rf, preds.cnn[s], cfg.ensemble_alpha)
            for key, P in rows.items():
                rep = evaluate(P, preds.y_true, K)
                reports[key].append(rep)
                pooled[key].append(P)
                base = outdir / key / f"fold{f}"
                st.claim(base / "report.json").write_text(rep.to_json() + "\n")
                write_curve_csv(st.claim(base / "pr_micro.csv"), rep.curves["micro_pr"])
                write_curve_csv(st.claim(base / "roc_micro.csv"), rep.curves["micro_roc"])
        y_all = np.concatenate(y_all)
        aggregates = {}
        for key, reps in reports.items():
            agg = crossfold_aggregate(reps)
            aggregates[key] = agg
            st.claim(outdir / key / "aggregate.json").write_text(
                json.dumps(agg.to_dict(), indent=1, sort_keys=True) + "\n"
            )
            P = np.concatenate(pooled[key])
            rep = evaluate(P, y_all, K)
            tag = key.replace("/", "_")
            plotting.plot_pr_roc(rep, st.claim(outdir / "figures" / f"{tag}_curves.svg"), title=key)
            plotting.plot_confusion(
                rep, archive.taxonomy.codes, st.claim(outdir / "figures" / f"{tag}_confusion.svg"), title=key
            )
        fold_f1 = {k: [r.averaged["weighted"]["f1"] for r in v] for k, v in reports.items()}
        plotting.plot_fold_scores(fold_f1, folds, st.claim(outdir / "figures" / "fold_f1_weighted.svg"))
        table = comparison_table(aggregates)
        st.claim(outdir / "comparison.csv").write_text(table)
        st.claim(outdir / "fold_f1_weighted.csv").write_text(
            "model,predictor," + ",".join(f"fold{f}" for f in folds) + "\n"
            + "".join(
                f"{_split_key(k)[0]},{_split_key(k)[1]}," + ",".join(f"{x:.6f}" for x in v) + "\n"
                for k, v in fold_f1.items()
            )
        )
    return {"reports": reports, "aggregates": aggregates, "fold_f1": fold_f1, "table": table}


def _split_key(key):
    if key == "rf":
        return "RF", "rf"
    slug, variant = key.split("/")
    display = next((d for d, a in MODEL_GRID.items() if a.slug == slug), slug)
    return display, variant


def comparison_table(aggregates: dict) -> str:
    """One row per (model, predictor); mean and population std per metric."""
    head = ["model", "predictor"]
    for key, _ in TABLE_METRICS:
        head += [f"{key}_mean", f"{key}_std"]
    lines = [",".join(head)]
    for key, agg in aggregates.items():
        model, variant = _split_key(key)
        row = [f'"{model}"', variant]
        for m, _ in TABLE_METRICS:
            row += list(_fmt(agg.mean.get(m, float("nan")), agg.std.get(m, float("nan"))))
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------- mapping


def run_predict_map(
    ws: Workspace,
    cfg: RunConfig,
    model: str,
    fold: int = 0,
    ensemble: bool = True,
    stride: int = 1,
    window: tuple[int, int, int, int] | None = None,
    tile_rows: int | None = None,
    force=False,
) -> dict:
    from . import plotting

    with ws.stage("predict-map", cfg, force, {"model": model, "fold": fold, "window": window}) as st:
        raster = read_raster(st.need(ws.data("raster.msrs"), "ingest"), standardized=True)
        if window is not None:
            r0, c0, h, w = window
            if r0 < 0 or c0 < 0 or h < 1 or w < 1 or r0 + h > raster.height or c0 + w > raster.width:
                raise UsageError(f"window {window} lies outside the {raster.height}x{raster.width} raster")
            gt = raster.geotransform
            raster = RasterStack(
                raster.data[:, r0 : r0 + h, c0 : c0 + w],
                GeoTransform(gt.origin_x + c0 * gt.pixel_size_x, gt.origin_y - r0 * gt.pixel_size_y,
                             gt.pixel_size_x, gt.pixel_size_y),
                raster.nodata,
                raster.channel_names,
                standardized=True,
                mask=raster.mask[:, r0 : r0 + h, c0 : c0 + w],
            )
        tax = ws.load_archive().taxonomy
        rf = net = None
        if model == RF_BASELINE or ensemble:
            rf = load_forest(st.need(ws.rf_path(fold), "train-rf"))
        if model != RF_BASELINE:
            net = load_network(st.need(ws.cnn_path(model, fold), f"train-cnn ({model})"))
        ens = EnsembleConfig(cfg.ensemble_alpha, cfg.tta_rounds, DEFAULT_TTA_OPS, cfg.input_size)
        maps = classify_map(
            MapModels(rf, net, ens),
            raster,
            patch_size=cfg.patch_size,
            stride=stride,
            seed=stage_seed(cfg.seed, "map", model, fold),
            workers=cfg.workers,
            tile_rows=tile_rows,
        )
        outdir = ws.root / "maps" / (model + ("" if model == RF_BASELINE or not ensemble else "-ensemble"))
        for name in ("class_map.msrs", "probabilities.msrs", "max_confidence.msrs", "classes.txt"):
            st.claim(outdir / name)
        paths = write_maps(outdir, maps, tax.codes)
        paths["class_png"] = st.claim(outdir / "class_map.png")
        paths["confidence_png"] = st.claim(outdir / "max_confidence.png")
        plotting.plot_class_map(maps, tax.codes, paths["class_png"])
        plotting.plot_confidence(maps, paths["confidence_png"])
    return {"maps": maps, "paths": paths}


# ---------------------------------------------------------------- pipeline


def run_pipeline(ws: Workspace, cfg: RunConfig, row: str, force=False) -> dict:
    """All stages for one model row; stages whose outputs exist are reused."""
    attrs = resolve_attributes(row)
    cfg = make_config(
        cfg.to_dict(),
        {
            "pretraining": attrs.pretraining,
            "freeze_conv": attrs.freeze_conv,
            "crop_augment": attrs.crop_augment,
            "semi_supervised": attrs.semi_supervised,
        },
    )
    done = []
    if force or not ws.data("patches.ptch").exists():
        run_ingest(ws, cfg, force)
        done.append("ingest")
    if force or not ws.split_path(0).exists():
        run_split(ws, cfg, force)
        done.append("split")
    folds = ws.folds()

    def missing(path_of):
        return [f for f in folds if force or not path_of(f).exists()]

    for f in missing(ws.rf_path):
        run_train_rf(ws, cfg, f, force)
        done.append(f"train-rf:{f}")
    if attrs.pretraining != "none" and (force or not ws.pretrain_path(attrs.pretraining).exists()):
        run_pretrain(ws, cfg, "iic" if attrs.pretraining == "unsupervised" else "coarse", force)
        done.append("pretrain")
    teacher = attrs.teacher.slug
    for f in missing(lambda f: ws.cnn_path(teacher, f)):
        run_train_cnn(ws, cfg, f, force)
        done.append(f"train-cnn:{f}")
    if attrs.semi_supervised:
        for f in missing(lambda f: ws.cnn_path(attrs.slug, f)):
            run_distill(ws, cfg, f, force)
            done.append(f"distill:{f}")
    result = run_evaluate(ws, cfg, [attrs.slug], out_name=f"eval-{attrs.slug}", force=force)
    result["stages"] = done
    result["slug"] = attrs.slug
    return result
