"""Command-line interface.

Every command works on a work directory (``--work``). Settings come from
a ``key = value`` config file (``--config``, or the file named by
``HABMAP_CONFIG``), then ``--set key=value`` pairs, then the dedicated
flags of each command.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

from . import __version__
from .nnet.functional import NumericalError
from .pipeline import (
    MODEL_GRID,
    RF_BASELINE,
    DataError,
    RunConfig,
    UsageError,
    Workspace,
    load_config,
    make_config,
    parse_config_text,
    run_distill,
    run_evaluate,
    run_ingest,
    run_pipeline,
    run_predict_map,
    run_pretrain,
    run_split,
    run_train_cnn,
    run_train_rf,
)

CONFIG_ENV = "HABMAP_CONFIG"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

# Settings for the synthetic benchmark that keep a full run on one CPU
# within minutes.
DESK_CONFIG = {
    "taxonomy": "taxonomy.json",
    "coarse_taxonomy": "coarse_taxonomy.json",
    "annotations": "annotations.csv",
    "coarse_annotations": "coarse_annotations.csv",
    "raster": "raster.msrs",
    "patch_size": 15,
    "crop_max": 15,
    "epochs": 40,
    "pretrain_epochs": 15,
    "batch_size": 64,
    "lr": 3e-3,
    "stage_widths": "8,16,32",
    "iic_clusters": 8,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, work=True):
    if work:
        p.add_argument("--work", required=True, type=Path, help="work directory")
    p.add_argument("--config", type=Path, help=f"config file (default: ${CONFIG_ENV})")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")


def _fold(p):
    p.add_argument("--fold", type=int, help="only this fold (default: all)")


def _attr_flags(p):
    p.add_argument("--pretrained", choices=("none", "unsupervised", "coarse"), dest="pretraining")
    p.add_argument("--freeze-conv", action="store_true", default=None)
    p.add_argument("--crop-augment", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="habmap", description="Habitat mapping with RF and CNN ensembles.")
    parser.add_argument("--version", action="version", version=f"habmap {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="standardize rasters and extract labeled patches")
    _common(p)
    p.add_argument("--raster", nargs="+", help="one .msrs container or one text matrix per channel")
    p.add_argument("--annotations")
    p.add_argument("--taxonomy", help="taxonomy JSON file or 'natura2000'")
    p.add_argument("--coarse-annotations")
    p.add_argument("--coarse-taxonomy")
    p.add_argument("--patch-size", type=int)

    p = sub.add_parser("split", help="overlap-aware k-fold split")
    _common(p)
    p.add_argument("--k", type=int, dest="k_folds")

    p = sub.add_parser("synth", help="generate the synthetic benchmark")
    _common(p, work=False)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--n-classes", type=int)
    p.add_argument("--imbalance", type=float)
    p.add_argument("--largest-class", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--pretrain-rows", type=int)
    p.add_argument("--pretrain-points", type=int)
    p.add_argument("--pretrain-min-dist", type=float)

    p = sub.add_parser("train-rf", help="fit the random forest per fold")
    _common(p)
    _fold(p)
    p.add_argument("--trees", type=int, dest="n_trees")

    p = sub.add_parser("pretrain", help="pretrain a network on the coarse corpus")
    _common(p)
    p.add_argument("--mode", choices=("iic", "coarse"), required=True)
    p.add_argument("--epochs", type=int, dest="pretrain_epochs")

    p = sub.add_parser("train-cnn", help="train the CNN per fold")
    _common(p)
    _fold(p)
    _attr_flags(p)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("distill", help="Noisy Student training from a trained teacher")
    _common(p)
    _fold(p)
    _attr_flags(p)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("evaluate", help="cross-validated metrics for RF, CNNs and ensembles")
    _common(p)
    p.add_argument("--tta", type=int, dest="tta_rounds")
    p.add_argument("--ensemble-alpha", type=float)
    p.add_argument("--models", nargs="+", help="model names (default: all trained)")
    p.add_argument("--out", default="eval", help="output subdirectory")

    p = sub.add_parser("predict-map", help="classify every pixel of the raster")
    _common(p)
    p.add_argument("--model", required=True, help=f"model name, or '{RF_BASELINE}'")
    p.add_argument("--fold", type=int, default=0, help="use the models of this fold")
    p.add_argument("--no-ensemble", action="store_true", help="CNN only")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--window", type=int, nargs=4, metavar=("ROW", "COL", "H", "W"))
    p.add_argument("--tile-rows", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--tta", type=int, dest="tta_rounds")
    p.add_argument("--ensemble-alpha", type=float)

    p = sub.add_parser("pipeline", help="run every stage for one model row")
    _common(p)
    rows = ", ".join(MODEL_GRID)
    p.add_argument("--attributes", required=True, help=f"model row: {rows}")
    return parser


_CONFIG_KEYS = {f.name for f in fields(RunConfig)}


def resolve_config(args, env=None) -> RunConfig:
    env = os.environ if env is None else env
    values = {}
    path = args.config or (Path(env[CONFIG_ENV]) if env.get(CONFIG_ENV) else None)
    if path is not None:
        if not path.is_file():
            raise UsageError(f"config file {path} not found")
        values.update(parse_config_text(path.read_text(), str(path)))
        base = path.parent
        for key in ("annotations", "coarse_annotations", "taxonomy", "coarse_taxonomy"):
            v = values.get(key)
            if v and v.lower() != "natura2000" and not Path(v).is_absolute():
                values[key] = str(base / v)
        if values.get("raster"):
            values["raster"] = tuple(
                p if Path(p).is_absolute() else str(base / p) for p in values["raster"]
            )
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        values.update(parse_config_text(f"{k} = {v}", "--set"))
    flags = {k: v for k, v in vars(args).items() if k in _CONFIG_KEYS and v is not None}
    return make_config(values, flags)


def _print(obj):
    print(json.dumps(obj, indent=1, sort_keys=True, default=str))


def _cmd_synth(args, cfg):
    from .synth import SynthConfig, generate

    overrides = {
        k: getattr(args, k)
        for k in (
            "height", "width", "channels", "n_classes", "imbalance", "largest_class", "noise",
            "pretrain_rows", "pretrain_points", "pretrain_min_dist",
        )
        if getattr(args, k) is not None
    }
    if args.seed is not None:
        overrides["seed"] = args.seed
    scfg = SynthConfig(**overrides)
    ws = Workspace(args.out)
    with ws.stage("synth", cfg, args.force, {"synth": overrides}) as st:
        names = ("raster.msrs", "labels.msrs", "annotations.csv", "coarse_annotations.csv",
                 "taxonomy.json", "coarse_taxonomy.json", "synth.json", "habmap.cfg")
        for n in names:
            st.claim(args.out / n)
        bench = generate(scfg)
        bench.write(args.out)
        desk = dict(DESK_CONFIG, seed=scfg.seed)
        (args.out / "habmap.cfg").write_text(
            "# desk-scale settings for the synthetic benchmark\n"
            + "".join(f"{k} = {v}\n" for k, v in desk.items())
        )
    _print({"out": str(args.out), "points": len(bench.points), "coarse_points": len(bench.coarse_points)})


def dispatch(args) -> int:
    cfg = resolve_config(args)
    if args.command == "synth":
        _cmd_synth(args, cfg)
        return EXIT_OK
    ws = Workspace(args.work)
    if args.command == "ingest":
        _print(run_ingest(ws, cfg, args.force))
    elif args.command == "split":
        splits = run_split(ws, cfg, args.force)
        _print([{"fold": s.fold, "train": len(s.train_ids), "test": len(s.test_ids),
                 "dropped": len(s.dropped_ids)} for s in splits])
    elif args.command == "train-rf":
        _print([str(p) for p in run_train_rf(ws, cfg, args.fold, args.force)])
    elif args.command == "pretrain":
        _print(str(run_pretrain(ws, cfg, args.mode, args.force)))
    elif args.command == "train-cnn":
        _print([str(p) for p in run_train_cnn(ws, cfg, args.fold, args.force)])
    elif args.command == "distill":
        _print([str(p) for p in run_distill(ws, cfg, args.fold, args.force)])
    elif args.command == "evaluate":
        res = run_evaluate(ws, cfg, args.models, args.out, args.force)
        print(res["table"], end="")
    elif args.command == "predict-map":
        res = run_predict_map(
            ws, cfg, args.model, args.fold, not args.no_ensemble, args.stride,
            tuple(args.window) if args.window else None, args.tile_rows, args.force,
        )
        _print({k: str(v) for k, v in res["paths"].items()})
    elif args.command == "pipeline":
        res = run_pipeline(ws, cfg, args.attributes, args.force)
        print(res["table"], end="")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return dispatch(args)
    except UsageError as e:
        print(f"habmap: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"habmap: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, ValueError, OSError) as e:
        print(f"habmap: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
