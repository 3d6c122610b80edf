"""Command-line entry point: ``wsigraph <command> [options]``.

Exit status is 0 on success, 1 on usage or validation errors and 2 on
I/O or file-format errors.  Each command writes a run manifest next to its
primary output.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__, io_formats
from .errors import FormatError, ValidationError, WsiGraphError
from .graph import patient_graph_from_patches
from .records import FeatureMatrix
from .survival import DEFAULT_HORIZON_MONTHS
from .tiling import (DEFAULT_PATCH_SIZE, DEFAULT_TISSUE_THRESHOLD, DEFAULT_TOY_DIM,
                     align_external_features, extract_features, load_image, tile_image)

log = logging.getLogger("wsigraph")


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _grid(text: str):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like WxH, got {text!r}") from None
    return w, h


def _dims(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"layer dims must be comma-separated ints: {text!r}") from None


def _add_train_flags(p):
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--layer-dims", type=_dims, default=None,
                   help="input,h1,h2,h3,h4 (overrides --hidden)")
    p.add_argument("--horizon", type=float, default=DEFAULT_HORIZON_MONTHS,
                   help="months for horizon labels (AUC)")
    p.add_argument("--model", choices=("gcn", "linear"), default="gcn")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wsigraph", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=Path, help="JSON file with flag defaults")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = cmd("tile", "cut an image into patches")
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--wsi-id", default=None, help="defaults to the image file stem")
    p.add_argument("--patch-size", type=int, default=DEFAULT_PATCH_SIZE)
    p.add_argument("--tissue-threshold", type=float, default=DEFAULT_TISSUE_THRESHOLD)
    p.add_argument("--out", type=Path, required=True, help="patches.csv")

    p = cmd("features", "toy features per patch, or align external features")
    p.add_argument("--patches", type=Path, required=True)
    p.add_argument("--image", type=Path, help="raster for a single-slide patches file")
    p.add_argument("--image-dir", type=Path, help="directory of <wsi_id>.png/.ppm rasters")
    p.add_argument("--patch-size", type=int, default=DEFAULT_PATCH_SIZE)
    p.add_argument("--dim", type=int, default=DEFAULT_TOY_DIM)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--external", type=Path, help="GFX1 or feature-CSV file to align")
    p.add_argument("--index", type=Path, help="wsi_id,patch_id per row of a GFX1 --external")
    p.add_argument("--out", type=Path, required=True, help="features.gfx or features.csv")

    p = cmd("graph", "build patient graphs from patches")
    p.add_argument("--patches", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="directory; one subdir per patient")

    p = cmd("train", "train on a whole dataset")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, default=Path("model.json"))
    _add_train_flags(p)

    p = cmd("evaluate", "score a dataset with a trained model")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model-file", type=Path, required=True)
    p.add_argument("--horizon", type=float, default=DEFAULT_HORIZON_MONTHS)
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = cmd("cv", "k-fold cross-validation")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out", type=Path, default=Path("results.json"))
    p.add_argument("--permute-labels", action="store_true",
                   help="shuffle (event, time) across patients as a null control")
    p.add_argument("--parallel-folds", type=int, default=1)
    _add_train_flags(p)

    p = cmd("synth", "write a synthetic dataset")
    p.add_argument("--patients", type=int, default=200)
    p.add_argument("--grid", type=_grid, default=(4, 4))
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--censor", type=float, default=0.2)
    p.add_argument("--out", type=Path, required=True)

    p = cmd("roc", "ROC curve of risks against horizon labels")
    p.add_argument("--risks", type=Path, required=True, help="patient_id,risk CSV")
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--horizon", type=float, default=DEFAULT_HORIZON_MONTHS)
    p.add_argument("--out", type=Path, required=True, help="roc.csv (roc.json written alongside)")
    return parser


def _subparser(parser, name) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def parse_args(argv: List[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    try:
        overrides = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{args.config}: invalid JSON ({exc})") from None
    if not isinstance(overrides, dict):
        raise ValidationError(f"{args.config}: expected a JSON object")
    sp = _subparser(parser, args.command)
    known = {a.dest for a in sp._actions}
    defaults = {}
    for key, value in overrides.items():
        dest = key.lstrip("-").replace("-", "_")
        if dest not in known or dest in ("config", "help"):
            raise ValidationError(f"{args.config}: unknown option {key!r} for {args.command}")
        action = next(a for a in sp._actions if a.dest == dest)
        if isinstance(value, str) and action.type is not None:
            value = action.type(value)
        elif dest == "grid" and isinstance(value, list):
            value = tuple(value)
        defaults[dest] = value
    sp.set_defaults(**defaults)
    # a fresh parse lets explicit command-line flags win over the file
    return parser.parse_args(argv)


# -- commands ------------------------------------------------------------

def _train_config(args):
    from .trainer import TrainConfig

    return TrainConfig(epochs=args.epochs, learning_rate=args.learning_rate,
                       weight_decay=args.weight_decay, seed=args.seed,
                       horizon_months=args.horizon, hidden=args.hidden,
                       layer_dims=args.layer_dims, model=args.model)


def _cmd_tile(args) -> Dict:
    image = load_image(args.image)
    wsi_id = args.wsi_id or args.image.stem
    patches = tile_image(image, args.patch_size, args.tissue_threshold, wsi_id)
    io_formats.write_patches(patches, args.out)
    log.info("%s: kept %d patches", wsi_id, len(patches))
    return {"inputs": [str(args.image)], "outputs": [str(args.out)], "n_patches": len(patches)}


def _find_image(directory: Path, wsi_id: str) -> Path:
    for ext in (".png", ".ppm"):
        cand = directory / f"{wsi_id}{ext}"
        if cand.exists():
            return cand
    raise FileNotFoundError(f"no image for slide {wsi_id!r} in {directory}")


def _cmd_features(args) -> Dict:
    patches = io_formats.read_patches(args.patches)
    inputs = [str(args.patches)]
    if args.external is not None:
        matrix = io_formats.read_features(args.external)
        index = io_formats.read_index(args.index) if args.index is not None else None
        out = align_external_features(patches, matrix, index)
        inputs.append(str(args.external))
    else:
        if (args.image is None) == (args.image_dir is None):
            raise ValidationError("give exactly one of --image, --image-dir or --external")
        by_wsi: Dict[str, list] = {}
        for p in patches:
            by_wsi.setdefault(p.wsi_id, []).append(p)
        if args.image is not None and len(by_wsi) > 1:
            raise ValidationError("--image covers one slide; use --image-dir for several")
        blocks, keys = [], []
        for wsi, plist in by_wsi.items():
            path = args.image if args.image is not None else _find_image(args.image_dir, wsi)
            inputs.append(str(path))
            fm = extract_features(load_image(path), plist, args.dim, args.patch_size, args.workers)
            blocks.append(fm.values)
            keys.extend(fm.row_keys)
        # restore patches.csv row order
        row = {k: i for i, k in enumerate(keys)}
        values = np.vstack(blocks)[[row[p.key] for p in patches]]
        out = FeatureMatrix(values, [p.key for p in patches])
    if args.out.suffix.lower() == ".csv":
        io_formats.write_feature_csv(out, args.out)
    else:
        io_formats.write_features(out, args.out)
    return {"inputs": inputs, "outputs": [str(args.out)], "n_nodes": out.n_nodes, "dim": out.dim}


def _cmd_graph(args) -> Dict:
    patches = io_formats.read_patches(args.patches)
    manifest = io_formats.read_manifest(args.manifest)
    by_wsi: Dict[str, list] = {}
    for p in patches:
        by_wsi.setdefault(p.wsi_id, []).append(p)
    args.out.mkdir(parents=True, exist_ok=True)
    summary = {}
    for pid, wsi_ids in manifest.items():
        g = patient_graph_from_patches(pid, wsi_ids, by_wsi)
        io_formats.write_graph(g, args.out / pid)
        summary[pid] = {"n_nodes": g.n_nodes, "n_edges": g.n_edges}
    return {"inputs": [str(args.patches), str(args.manifest)], "outputs": [str(args.out)],
            "graphs": summary}


def _save_model(params, path, seed):
    from .trainer import LinearParams

    if isinstance(params, LinearParams):
        obj = {"format_version": io_formats.MODEL_FORMAT_VERSION, "kind": "linear",
               "layer_dims": params.layer_dims, "weights": [], "biases": [],
               "head_weight": params.weight.tolist(), "head_bias": params.bias, "seed": seed}
        io_formats.write_json(obj, path)
    else:
        io_formats.write_model(params, path, seed)


def _load_model(path):
    from .trainer import LinearParams

    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(obj, dict) and obj.get("kind") == "linear":
        return LinearParams(np.array(obj["head_weight"], dtype=np.float64), float(obj["head_bias"]))
    return io_formats.model_from_dict(obj)[0]


def _cmd_train(args) -> Dict:
    from .trainer import load_dataset, train

    config = _train_config(args)
    dataset = load_dataset(args.data)
    params, history = train(dataset, config)
    _save_model(params, args.out, args.seed)
    return {"inputs": [str(args.data)], "outputs": [str(args.out)], "loss_history": history}


def _cmd_evaluate(args) -> Dict:
    from .trainer import evaluate, horizon_roc, load_dataset

    dataset = load_dataset(args.data)
    params = _load_model(args.model_file)
    ev = evaluate(params, dataset, args.horizon)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    io_formats.write_risks(list(ev.risks), list(ev.risks.values()), out / "risks.csv")
    curve = horizon_roc(list(ev.risks.values()), [s.record for s in dataset], args.horizon)
    io_formats.write_roc(curve, out / "roc.csv", out / "roc.json")
    io_formats.write_json({"c_index": ev.c_index, "auc": ev.auc, "n_patients": len(dataset),
                           "horizon_months": args.horizon}, out / "evaluation.json")
    return {"inputs": [str(args.data), str(args.model_file)], "outputs": [str(out)],
            "c_index": ev.c_index, "auc": ev.auc}


def _cmd_cv(args) -> Dict:
    from .trainer import cross_validate, load_dataset, permute_labels

    config = _train_config(args)
    dataset = load_dataset(args.data)
    if args.permute_labels:
        dataset = permute_labels(dataset, args.seed)
    results = cross_validate(dataset, config, args.k, args.seed, args.parallel_folds)
    results["permuted_labels"] = bool(args.permute_labels)
    io_formats.write_json(results, args.out)
    log.info("mean test C-index %.4f over %d folds", results["mean_c_index"], args.k)
    return {"inputs": [str(args.data)], "outputs": [str(args.out)],
            "mean_c_index": results["mean_c_index"]}


def _cmd_synth(args) -> Dict:
    from .synthetic import generate_synthetic

    cohort = generate_synthetic(args.patients, args.grid, args.dim, args.seed, args.censor, args.out)
    return {"inputs": [], "outputs": [str(args.out)], "planted_c_index": cohort.planted_c_index}


def _cmd_roc(args) -> Dict:
    from .trainer import horizon_roc

    risks = io_formats.read_risks(args.risks)
    records = {r.patient_id: r for r in io_formats.read_labels(args.labels)}
    missing = [pid for pid in risks if pid not in records]
    if missing:
        raise ValidationError(f"no label for patient {missing[0]!r}")
    curve = horizon_roc(list(risks.values()), [records[p] for p in risks], args.horizon)
    json_path = args.out.with_suffix(".json")
    io_formats.write_roc(curve, args.out, json_path)
    return {"inputs": [str(args.risks), str(args.labels)],
            "outputs": [str(args.out), str(json_path)], "auc": curve.auc}


COMMANDS = {
    "tile": _cmd_tile, "features": _cmd_features, "graph": _cmd_graph, "train": _cmd_train,
    "evaluate": _cmd_evaluate, "cv": _cmd_cv, "synth": _cmd_synth, "roc": _cmd_roc,
}


def _manifest_path(out: Path) -> Path:
    if out.is_dir():
        return out / "run_manifest.json"
    return out.with_name(out.name + ".manifest.json")


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, tuple):
        return list(v)
    return v


def run_cli(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)

    started = time.time()
    try:
        if args.command == "features" and args.dim < 1:
            raise ValidationError("--dim must be positive")
        info = COMMANDS[args.command](args)
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (WsiGraphError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    manifest = {
        "command": args.command,
        "argv": argv,
        "config": {k: _jsonable(v) for k, v in sorted(vars(args).items())},
        "seed": args.seed,
        "tool_version": __version__,
        "started_at": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "duration_seconds": round(time.time() - started, 3),
        **{k: _jsonable(v) for k, v in info.items()},
    }
    try:
        io_formats.write_json(manifest, _manifest_path(args.out))
    except OSError as exc:
        print(f"error: could not write run manifest: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
