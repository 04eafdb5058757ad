"""Command-line entry point.

Exit codes: 0 success, 2 usage, 3 I/O, 4 pipeline-stage failure.
Every subcommand accepts ``--config file.json`` whose keys are the flag
names (dashes or underscores); flags given on the command line win.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import codec, evaluation, model as cnn, render, retrieval
from .errors import (CheckpointError, ManifestError, NetpbmError, PipelineStageError,
                     Watermark3DError)
from .netpbm import read_pnm, to_float, to_uint16, write_pnm

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_PIPELINE = 0, 2, 3, 4

log = logging.getLogger("watermark3d")


class UsageError(Exception):
    pass


def _matrix_size(text):
    try:
        m = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid integer {text!r}") from None
    if m < 2:
        raise argparse.ArgumentTypeError(f"matrix size m must be >= 2 (got {m})")
    return m


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1 (got {v})")
    return v


def _int_list(text):
    if isinstance(text, list):
        return [int(v) for v in text]
    return [int(v) for v in str(text).replace(",", " ").split()]


# -- subcommands -------------------------------------------------------------

def cmd_encode(args):
    spec = codec.PlateSpec(bump_shape=args.bump_shape)
    M = codec.generate_matrix(args.m, args.seed)
    layout = codec.LandmarkLayout.for_plate(args.m, spec)
    hf = codec.rasterize_plate(M, spec, layout, args.resolution)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "matrix.txt"), "w") as fh:
        fh.write(M.to_text())
    codec.save_heightfield(os.path.join(args.out, "heightfield.pgm"), hf, spec)
    with open(os.path.join(args.out, "plate.stl"), "wb") as fh:
        fh.write(codec.export_stl(hf, spec, step=args.stl_step))
    print(f"wrote matrix.txt, heightfield.pgm, plate.stl to {args.out}")


def cmd_dataset(args):
    recs = render.generate_dataset(args.out, args.count, args.m, args.seed,
                                   images_per_object=args.images_per_object,
                                   natural_per_object=args.natural_per_object,
                                   sigma=args.sigma)
    print(f"wrote {len(recs)} records to {os.path.join(args.out, 'manifest.jsonl')}")


def _train_config(args):
    base = cnn.full_config() if args.scale == "full" else cnn.desk_config()
    fields = {
        "epochs": args.epochs, "lr": args.lr, "lr_after_drop": args.lr_after_drop,
        "drop_after_epoch": args.drop_after_epoch, "batch_size": args.batch_size,
        "crop_size": args.crop_size, "crops_per_image": args.crops_per_image,
        "sigma": args.sigma, "seed": args.seed,
    }
    return replace(base, **{k: v for k, v in fields.items() if v is not None})


def _load_manifest(path):
    try:
        return render.read_manifest(path)
    except FileNotFoundError as exc:
        raise ManifestError(f"manifest not found: {path}") from exc


def cmd_train(args):
    cfg = _train_config(args)
    if args.checkpoint_every:
        cfg = replace(cfg, checkpoint_every=args.checkpoint_every,
                      checkpoint_dir=os.path.dirname(os.path.abspath(args.out)))
    records = _load_manifest(args.manifest)
    start, adam = 1, None
    if args.resume:
        net, adam, last = cnn.load_checkpoint(args.resume)
        start = last + 1
    else:
        net = cnn.Cnn3dwModel(channels=cfg.channels, kernels=cfg.kernels, seed=cfg.seed)
    result = cnn.train(net, records, cfg, start_epoch=start, adam=adam)
    cnn.save_checkpoint(net, args.out, adam=result.adam, epoch=cfg.epochs)
    for k, loss in enumerate(result.losses, start):
        print(f"epoch {k} loss {loss:.6f}")


def _load_model(path):
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    return cnn.load_checkpoint(path)[0]


def _read_image(path):
    img = to_float(read_pnm(path))
    if img.ndim != 3:
        raise NetpbmError(f"{path}: expected a colour (P6) image")
    return img


def cmd_infer(args):
    net = _load_model(args.checkpoint)
    img = _read_image(args.image)
    try:
        conf = cnn.forward(net, img)
    except Exception as exc:
        raise PipelineStageError("forward", exc) from exc
    write_pnm(args.out, to_uint16(conf), 65535)
    print(f"wrote {conf.shape[1]}x{conf.shape[0]} confidence map to {args.out}")


def _retrieval_config(args):
    return retrieval.RetrievalConfig(m=args.m, side=args.side, beta=args.beta)


def _write_debug(debug_dir, diag):
    os.makedirs(debug_dir, exist_ok=True)
    if diag.confidence_map is not None:
        write_pnm(os.path.join(debug_dir, "confidence.pgm"), to_uint16(diag.confidence_map), 65535)
    if diag.registered is not None:
        write_pnm(os.path.join(debug_dir, "registered.pgm"), to_uint16(diag.registered), 65535)
    if diag.binary is not None:
        write_pnm(os.path.join(debug_dir, "binary.pgm"), diag.binary.astype(np.uint8) * np.uint8(255))
    info = {
        "landmarks": None if diag.landmarks is None else np.asarray(diag.landmarks.points).tolist(),
        "homography": None if diag.homography is None else np.asarray(diag.homography).ravel().tolist(),
        "threshold": diag.threshold,
        "centroids": None if diag.centroids is None else [list(map(float, c)) for c in diag.centroids],
        "component_count": None if diag.components is None else len(diag.components),
        "matrix": None if diag.matrix is None else diag.matrix.to_text().split(),
    }
    with open(os.path.join(debug_dir, "diagnostics.json"), "w") as fh:
        json.dump(info, fh, indent=2, sort_keys=True)


def cmd_retrieve(args):
    net = _load_model(args.checkpoint)
    img = _read_image(args.image)
    cfg = _retrieval_config(args)
    diag = retrieval.Diagnostics()
    try:
        try:
            conf = cnn.forward(net, img)
        except Exception as exc:
            raise PipelineStageError("forward", exc) from exc
        M, _ = retrieval.decode_confidence_map(conf, img, cfg, diag)
    finally:
        if args.debug_dir:
            _write_debug(args.debug_dir, diag)
    sys.stdout.write(M.to_text())


def _read_matrix(path):
    with open(path) as fh:
        return codec.InformationMatrix.from_text(fh.read())


def cmd_eval(args):
    names = sorted(n for n in os.listdir(args.truth) if n.endswith(".txt"))
    if not names:
        raise UsageError(f"no .txt matrices in {args.truth}")
    report = evaluation.ExperimentReport("eval", config={"truth": args.truth,
                                                         "decoded": args.decoded})
    all_counts = []
    for name in names:
        c = evaluation.score(_read_matrix(os.path.join(args.truth, name)),
                             _read_matrix(os.path.join(args.decoded, name)))
        all_counts.append(c)
        report.rows.append(evaluation.ReportRow(
            name, "image", 1, {k: getattr(c, k) for k in evaluation.RATES}))
    report.rows.append(evaluation.ReportRow("all", "Average", len(names),
                                            evaluation.mean_rates(all_counts)))
    if args.out:
        report.write(args.out)
    sys.stdout.write(report.to_csv())


def cmd_experiment(args):
    records = _load_manifest(args.manifest)
    exp_cfg = evaluation.ExperimentConfig(train=_train_config(args),
                                          retrieval=_retrieval_config(args),
                                          model_seed=args.seed)
    kind = args.kind
    if kind == "cv5":
        report = evaluation.run_cross_validation(records, exp_cfg, folds=args.folds,
                                                 fold_indices=args.fold_indices)
    elif kind in ("holdout", "crossmat"):
        train_objs = args.train_objects or list(evaluation.DEV_OBJECTS)
        test_objs = args.test_objects or list(evaluation.POST_OBJECTS)
        base = _load_model(args.base_checkpoint) if args.base_checkpoint else None
        report = evaluation.run_holdout(records, train_objs, test_objs, exp_cfg,
                                        cross_material=kind == "crossmat", model=base)
    else:
        base = _load_model(args.base_checkpoint) if args.base_checkpoint else None
        report = evaluation.run_active_learning(
            records, args.train_objects or list(evaluation.DEV_OBJECTS),
            args.hard_pool or list(evaluation.HARD_POOL_OBJECTS),
            args.test_objects or list(evaluation.HARD_TEST_OBJECTS), exp_cfg, base_model=base)
    paths = report.write(args.out, kind)
    sys.stdout.write(report.to_text())
    print(f"report written to {paths['csv']}")


# -- parser ------------------------------------------------------------------

def _add_train_flags(p):
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-after-drop", type=float)
    p.add_argument("--drop-after-epoch", type=int)
    p.add_argument("--batch-size", type=_positive_int)
    p.add_argument("--crop-size", type=_positive_int)
    p.add_argument("--crops-per-image", type=_positive_int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--scale", choices=("desk", "full"), default="desk",
                   help="desk: quarter-width network and short schedule; full: full-size network and long schedule")


def _add_retrieval_flags(p):
    p.add_argument("--m", type=_matrix_size, default=10)
    p.add_argument("--side", type=_positive_int, default=retrieval.DEFAULT_SIDE)
    p.add_argument("--beta", type=float, default=retrieval.DEFAULT_BETA)


def build_parser():
    parser = argparse.ArgumentParser(prog="watermark3d",
                                     description="Bump-grid watermarks for 3D printed objects.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file with default values for the flags")
        p.set_defaults(func=func)
        return p

    p = add("encode", cmd_encode, "write a random matrix, its heightfield and an STL plate")
    p.add_argument("--m", type=_matrix_size, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=float, default=2.5, help="samples per mm")
    p.add_argument("--stl-step", type=_positive_int, default=1)
    p.add_argument("--bump-shape", choices=codec.BUMP_SHAPES, default="hemisphere")

    p = add("dataset", cmd_dataset, "render a synthetic photo dataset")
    p.add_argument("--count", type=_positive_int, required=True)
    p.add_argument("--m", type=_matrix_size, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--images-per-object", type=_positive_int, default=15)
    p.add_argument("--natural-per-object", type=int, default=10)
    p.add_argument("--sigma", type=float, default=render.DEFAULT_SIGMA)

    p = add("train", cmd_train, "train the confidence-map network")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--checkpoint-every", type=int, default=0)
    _add_train_flags(p)

    p = add("infer", cmd_infer, "write the confidence map of one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)

    p = add("retrieve", cmd_retrieve, "decode the matrix from one photo")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--debug-dir")
    _add_retrieval_flags(p)

    p = add("eval", cmd_eval, "score decoded matrices against the truth")
    p.add_argument("--truth", required=True, help="directory of truth matrices (*.txt)")
    p.add_argument("--decoded", required=True, help="directory with the same file names")
    p.add_argument("--out", help="directory for the report files")

    p = add("experiment", cmd_experiment, "run a benchmark experiment")
    p.add_argument("kind", choices=("cv5", "holdout", "crossmat", "active"))
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--folds", type=_positive_int, default=5)
    p.add_argument("--fold-indices", type=_int_list)
    p.add_argument("--train-objects", type=_int_list)
    p.add_argument("--test-objects", type=_int_list)
    p.add_argument("--hard-pool", type=_int_list)
    p.add_argument("--base-checkpoint")
    _add_train_flags(p)
    _add_retrieval_flags(p)
    return parser


def _apply_config_file(parser, argv):
    """Parse ``argv`` using defaults from ``--config``; explicit flags still win."""
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    subparsers = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in subparsers), None)
    if not known.config or command is None:
        return parser.parse_args(argv)
    with open(known.config) as fh:
        try:
            values = json.load(fh)
        except json.JSONDecodeError as exc:
            parser.error(f"config file {known.config}: {exc}")
    if not isinstance(values, dict):
        parser.error("config file must hold a JSON object")
    sub = subparsers[command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, val in values.items():
        dest = key.replace("-", "_")
        if dest not in actions or dest in ("help", "config", "func"):
            parser.error(f"config file: unknown option {key!r} for {command}")
        action = actions[dest]
        if action.type is not None and val is not None and not isinstance(val, bool):
            try:
                val = action.type(val if action.type is _int_list else str(val))
            except (argparse.ArgumentTypeError, ValueError) as exc:
                parser.error(f"config file: {key}: {exc}")
        if action.choices is not None and val not in action.choices:
            parser.error(f"config file: {key} must be one of {sorted(action.choices)}")
        defaults[dest] = val
        action.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None):
    parser = build_parser()
    try:
        args = _apply_config_file(parser, argv)
    except SystemExit as exc:
        return exc.code
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except PipelineStageError as exc:
        print(f"error: pipeline stage '{exc.stage}' failed: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    except (OSError, NetpbmError, ManifestError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, Watermark3DError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
