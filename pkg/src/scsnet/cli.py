"""Command-line driver for the classification pipeline.

Usage:
    scsnet [--config PATH] [--seed N] [--out DIR] [--precision {f32,f64}] CMD ...

Commands:
    inspect       print cube dimensions and the label histogram
    convert-help  print instructions for producing cube and label files
    pca           fit the band reduction, write the reduced cube
    split         draw the stratified split, write it out
    train         run the full pipeline, write checkpoint/history/report
    eval          score a checkpoint on one side of the split
    map           render a classification map from a checkpoint
    paramcount    compare parameter budgets of the reference models
    gradcheck     finite-difference audit of the layer gradients

Exit codes are a stable scripting contract: 0 success, 1 internal error
(corrupt files, training divergence, a failed gradient audit), 2 usage or
configuration error (malformed config, missing input files, checkpoint
digests that do not match the current config or dataset).

`--seed` overrides both the split seed and the training seed; `--out` and
`--precision` override the [output] section.  Flags go before the command
name.  Artifacts land in the output directory under fixed names
(checkpoint.scsc, history.txt, split.hsis, val_report.txt, val_report.kv,
reduced.hsic, map.ppm), so reruns with the same config are byte-for-byte
comparable.
"""

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .autograd import Tensor, finite_difference_check, mul, reduce_sum
from .config import load_experiment_config
from .conv import ConvLayer
from .errors import (ConfigError, ContractError, DataError, DomainError,
                     FormatError, ScsNetError, ShapeError, TrainingError)
from .hsio import (ROLE_TEST, ROLE_TRAIN, ROLE_VAL, LabelGrid,
                   check_split_matches, load_cube, load_labels, load_split,
                   save_cube, save_split)
from .metrics import emit_map, evaluate, format_report, keyvalue_report
from .model import (REFERENCE_ARCHITECTURES, build_model, count_parameters,
                    reference_config)
from .pipeline import (extract_patches, normalize, pca_fit, pca_reduce,
                       samples_for_role)
from .pipeline import split as make_split
from .scs import ScsLayer
from .train import (digest_files, digest_text, evaluate_model,
                    format_history_line, load_checkpoint, restore_training,
                    save_checkpoint, train)

GRADCHECK_TOLERANCE = 1e-4

ROLE_BY_NAME = {"train": ROLE_TRAIN, "val": ROLE_VAL, "test": ROLE_TEST}

_ERROR_PREFIX = {
    ShapeError: "shape",
    DomainError: "domain",
    ContractError: "contract",
    FormatError: "format",
    ConfigError: "config",
    DataError: "data",
    TrainingError: "training",
}

CONVERT_HELP = """\
Input files use two small binary formats, both little-endian.

Cube (.hsic):   magic "HSIC", u32 version = 1, u32 rows, u32 cols,
                u32 bands, then rows*cols*bands float32 reflectance
                values ordered ((i * cols) + j) * bands + b.
Labels (.hsig): magic "HSIG", u32 version = 1, u32 rows, u32 cols,
                then rows*cols uint16 class ids, row-major, 0 meaning
                unlabeled background.

The public hyperspectral benchmarks ship as MATLAB arrays: a data array
of shape [rows, cols, bands] and a ground-truth array of shape
[rows, cols].  To convert, load them (scipy.io.loadmat) and write the
headers and payloads with struct.pack / ndarray.astype(...).tobytes():

    import struct, numpy as np
    from scipy.io import loadmat

    cube = loadmat("Indian_pines_corrected.mat")["indian_pines_corrected"]
    gt = loadmat("Indian_pines_gt.mat")["indian_pines_gt"]
    m, n, b = cube.shape
    with open("cube.hsic", "wb") as fh:
        fh.write(b"HSIC" + struct.pack("<IIII", 1, m, n, b))
        fh.write(np.ascontiguousarray(cube, dtype="<f4").tobytes())
    with open("labels.hsig", "wb") as fh:
        fh.write(b"HSIG" + struct.pack("<III", 1, m, n))
        fh.write(np.ascontiguousarray(gt, dtype="<u2").tobytes())

Raw radiance counts are fine as-is; the pipeline min-max normalizes each
band before any further processing.  See docs/converting.md in the
source tree for per-dataset notes.
"""


# ---- shared plumbing -----------------------------------------------------


def _require_file(path, what):
    if not path:
        raise ConfigError(f"no {what} file configured; set [dataset] {what} "
                          f"or pass --config")
    if not os.path.isfile(path):
        raise ConfigError(f"{what} file not found: {path}")
    return path


def _out_dir(config):
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_dataset(config):
    cube = load_cube(_require_file(config.cube, "cube"))
    labels = load_labels(_require_file(config.labels, "labels"))
    if labels.labels.shape != (cube.rows, cube.cols):
        raise DataError(f"label grid {labels.labels.shape} does not match "
                        f"cube grid {(cube.rows, cube.cols)}")
    return cube, labels


def _reduced_cube(config, cube):
    if config.bands > cube.bands:
        raise ConfigError(f"bands = {config.bands} exceeds the cube's "
                          f"{cube.bands} bands")
    normalized = normalize(cube)
    model = pca_fit(normalized, config.bands)
    return pca_reduce(normalized, model), model, normalized


def _class_names(config, num_classes):
    if not config.class_names:
        return None
    if len(config.class_names) != num_classes:
        raise ConfigError(f"class_names lists {len(config.class_names)} "
                          f"names but the labels define {num_classes} classes")
    return config.class_names


def _digests(config):
    return (digest_text(config.canonical_text()),
            digest_files(config.cube, config.labels))


def _check_digests(checkpoint, config, verb):
    config_digest, dataset_digest = _digests(config)
    if checkpoint.config_digest != config_digest:
        raise ConfigError(f"checkpoint was written under a different "
                          f"configuration; refusing to {verb}")
    if checkpoint.dataset_digest != dataset_digest:
        raise ConfigError(f"checkpoint was trained on different cube/label "
                          f"files; refusing to {verb}")


def _load_assignment(config, labels, path, explicit):
    """The split to use: the given file, or a fresh deterministic draw."""
    if explicit and not os.path.isfile(path):
        raise ConfigError(f"split file not found: {path}")
    if os.path.isfile(path):
        assignment = load_split(path, labels.labels.shape)
        if assignment.seed != config.split_seed:
            raise ConfigError(f"split file {path} was drawn with seed "
                              f"{assignment.seed}, config says "
                              f"{config.split_seed}")
    else:
        assignment = make_split(labels, config.split_seed, config.fractions)
    check_split_matches(assignment, labels)
    return assignment


def _prediction_grid(shape, samples, predictions):
    grid = np.zeros(shape, dtype=np.int64)
    coords = np.array([s.coord for s in samples]).reshape(-1, 2)
    grid[coords[:, 0], coords[:, 1]] = predictions
    return grid


# ---- commands ------------------------------------------------------------


def _run_inspect(config, args):
    cube_path = args.cube or config.cube
    label_path = args.labels or config.labels
    cube = load_cube(_require_file(cube_path, "cube"))
    print(f"cube: {cube_path}")
    print(f"  {cube.rows} x {cube.cols} pixels, {cube.bands} bands")
    print(f"  values in [{cube.data.min():.6f}, {cube.data.max():.6f}]")
    if not label_path:
        return 0
    labels = load_labels(_require_file(label_path, "labels"))
    print(f"labels: {label_path}")
    if labels.labels.shape != (cube.rows, cube.cols):
        print(f"  warning: label grid {labels.labels.shape} does not match "
              f"the cube grid")
    labeled = int(np.count_nonzero(labels.labels))
    total = labels.rows * labels.cols
    if labeled == 0:
        print("  warning: 0 labeled pixels")
        return 0
    print(f"  {labels.num_classes} classes, {labeled} of {total} pixels "
          f"labeled")
    names = _class_names(config, labels.num_classes)
    for c, count in labels.class_counts().items():
        name = names[c - 1] if names else f"class {c}"
        print(f"  {name}: {count}")
    return 0


def _run_convert_help(config, args):
    print(CONVERT_HELP, end="")
    return 0


def _run_pca(config, args):
    cube = load_cube(_require_file(config.cube, "cube"))
    reduced, model, normalized = _reduced_cube(config, cube)
    total_var = normalized.data.reshape(-1, cube.bands).var(axis=0).sum()
    print(f"fitted on {cube.rows * cube.cols} pixels, {cube.bands} bands, "
          f"keeping {config.bands} components")
    print(f"{'component':>9}  {'eigenvalue':>12}  {'share%':>8}  "
          f"{'cumulative%':>11}")
    running = 0.0
    for i, ev in enumerate(model.eigenvalues):
        share = 100.0 * ev / total_var if total_var > 0 else 0.0
        running += share
        print(f"{i + 1:>9}  {ev:>12.6f}  {share:>8.4f}  {running:>11.4f}")
    out = _out_dir(config) / "reduced.hsic"
    save_cube(out, reduced)
    print(f"wrote {out}")
    return 0


def _run_split(config, args):
    _, labels = _load_dataset(config)
    if labels.num_classes == 0:
        raise DataError("label grid has no labeled pixels; nothing to split")
    assignment = make_split(labels, config.split_seed, config.fractions)
    ft, fv, fs = config.fractions
    print(f"split seed {config.split_seed}, fractions "
          f"{ft:.2f}/{fv:.2f}/{fs:.2f}")
    print(f"{'class':>8}  {'total':>7}  {'train':>7}  {'val':>7}  {'test':>7}")
    sums = np.zeros(4, dtype=np.int64)
    for c in range(1, labels.num_classes + 1):
        in_class = labels.labels == c
        row = [int(np.count_nonzero(in_class))]
        for role in (ROLE_TRAIN, ROLE_VAL, ROLE_TEST):
            row.append(int(np.count_nonzero(in_class
                                            & (assignment.roles == role))))
        sums += row
        print(f"{c:>8}  {row[0]:>7}  {row[1]:>7}  {row[2]:>7}  {row[3]:>7}")
    print(f"{'total':>8}  {sums[0]:>7}  {sums[1]:>7}  {sums[2]:>7}  "
          f"{sums[3]:>7}")
    out = _out_dir(config) / "split.hsis"
    save_split(out, assignment)
    print(f"wrote {out}")
    return 0


def _run_train(config, args):
    cube, labels = _load_dataset(config)
    num_classes = labels.num_classes
    if num_classes == 0:
        raise DataError("label grid has no labeled pixels; nothing to train on")
    names = _class_names(config, num_classes)
    reduced, _, _ = _reduced_cube(config, cube)
    samples = extract_patches(reduced, labels, config.patch)
    assignment = make_split(labels, config.split_seed, config.fractions)
    parts = {role: samples_for_role(samples, assignment, role)
             for role in (ROLE_TRAIN, ROLE_VAL, ROLE_TEST)}
    print(f"samples: train {len(parts[ROLE_TRAIN])} "
          f"val {len(parts[ROLE_VAL])} test {len(parts[ROLE_TEST])}, "
          f"{num_classes} classes")

    model = build_model(config.model_config(num_classes),
                        seed=config.train_seed, dtype=config.dtype)
    _, total = count_parameters(model)
    print(f"model: {config.architecture}, {total} parameters, "
          f"precision {config.precision}")

    train_cfg = config.train_config()
    config_digest, dataset_digest = _digests(config)
    out = _out_dir(config)
    checkpoint_path = out / "checkpoint.scsc"
    start_epoch, state, best = 0, None, None
    if args.resume:
        if not checkpoint_path.is_file():
            raise ConfigError(f"no checkpoint to resume: {checkpoint_path}")
        ck = load_checkpoint(checkpoint_path)
        _check_digests(ck, config, "resume")
        state, best = restore_training(model, ck)
        start_epoch = ck.epoch
        print(f"resuming from {checkpoint_path} at epoch {start_epoch}")
        if start_epoch > train_cfg.epochs:
            raise ConfigError(f"checkpoint is at epoch {start_epoch}, beyond "
                              f"the configured {train_cfg.epochs}")

    save_split(out / "split.hsis", assignment)
    history_path = out / "history.txt"
    mode = "a" if args.resume and history_path.is_file() else "w"
    with open(history_path, mode) as history_file:

        def on_epoch(r):
            # persist progress every epoch so an interrupted run can --resume
            line = format_history_line(r.history[-1])
            print(line, flush=True)
            history_file.write(line + "\n")
            history_file.flush()
            save_checkpoint(checkpoint_path, r.history[-1].epoch + 1,
                            model.parameters(), r.state, r.best_epoch,
                            r.best_val_acc, r.best_params, train_cfg.seed,
                            config_digest, dataset_digest)

        result = train(model, parts[ROLE_TRAIN], parts[ROLE_VAL], train_cfg,
                       start_epoch=start_epoch, state=state, best=best,
                       on_epoch=on_epoch)

    save_checkpoint(checkpoint_path, train_cfg.epochs, model.parameters(),
                    result.state, result.best_epoch, result.best_val_acc,
                    result.best_params, train_cfg.seed, config_digest,
                    dataset_digest)

    # the reported model is the best-validation snapshot, not the last epoch
    model.load_state_dict(result.best_params)
    if parts[ROLE_VAL]:
        ev = evaluate_model(model, parts[ROLE_VAL], train_cfg.batch_size)
        targets = np.array([s.label for s in parts[ROLE_VAL]], dtype=np.int64)
        report = evaluate(targets, ev.predictions, num_classes)
        (out / "val_report.txt").write_text(format_report(report, names))
        (out / "val_report.kv").write_text(keyvalue_report(report))
        print(f"best epoch {result.best_epoch} "
              f"(val acc {result.best_val_acc:.4f})")
        print(f"val oa={report.oa:.4f} aa={report.aa:.4f} "
              f"kappa={report.kappa:.4f}")
    for name in ("checkpoint.scsc", "history.txt", "split.hsis",
                 "val_report.txt", "val_report.kv"):
        if (out / name).is_file():
            print(f"wrote {out / name}")
    return 0


def _evaluation_context(config, args, verb):
    """Load dataset, checkpoint, split; rebuild the model with its best
    parameters; return everything eval-like commands need."""
    cube, labels = _load_dataset(config)
    num_classes = labels.num_classes
    if num_classes == 0:
        raise DataError("label grid has no labeled pixels; nothing to "
                        + verb)
    out = _out_dir(config)
    checkpoint_path = args.checkpoint or str(out / "checkpoint.scsc")
    if not os.path.isfile(checkpoint_path):
        raise ConfigError(f"checkpoint file not found: {checkpoint_path}")
    ck = load_checkpoint(checkpoint_path)
    _check_digests(ck, config, verb)
    assignment = _load_assignment(config, labels,
                                  args.split or str(out / "split.hsis"),
                                  explicit=args.split is not None)
    reduced, _, _ = _reduced_cube(config, cube)
    samples = extract_patches(reduced, labels, config.patch)
    model = build_model(config.model_config(num_classes),
                        seed=config.train_seed, dtype=config.dtype)
    model.load_state_dict(ck.best_params)
    return cube, labels, ck, assignment, samples, model, checkpoint_path


def _run_eval(config, args):
    (_, labels, ck, assignment, samples, model,
     checkpoint_path) = _evaluation_context(config, args, "evaluate")
    role = ROLE_BY_NAME[args.role]
    part = samples_for_role(samples, assignment, role)
    if not part:
        raise ConfigError(f"the split assigns no pixels to role {args.role}")
    ev = evaluate_model(model, part, config.batch_size)
    targets = np.array([s.label for s in part], dtype=np.int64)
    report = evaluate(targets, ev.predictions, labels.num_classes)
    print(f"checkpoint: {checkpoint_path} (epoch {ck.epoch}, best epoch "
          f"{ck.best_epoch}, best val acc {ck.best_val_acc:.4f})")
    print(f"role: {args.role}, samples: {len(part)}, "
          f"loss: {ev.loss:.6f}")
    print()
    if args.kv:
        print(keyvalue_report(report), end="")
    else:
        print(format_report(report, _class_names(config, labels.num_classes)),
              end="")
    if args.map:
        shown = LabelGrid(labels.labels * (assignment.roles == role))
        grid = _prediction_grid(labels.labels.shape, part, ev.predictions)
        emit_map(args.map, shown, grid)
        print(f"wrote {args.map}")
    return 0


def _run_map(config, args):
    (_, labels, _, _, samples, model,
     _) = _evaluation_context(config, args, "map")
    ev = evaluate_model(model, samples, config.batch_size)
    grid = _prediction_grid(labels.labels.shape, samples, ev.predictions)
    out_path = args.output or str(_out_dir(config) / "map.ppm")
    emit_map(out_path, labels, grid)
    print(f"wrote {out_path}")
    return 0


def _run_paramcount(config, args):
    shape, classes = (15, 15, 15), 16
    columns = []
    for name in REFERENCE_ARCHITECTURES:
        model = build_model(reference_config(name, shape, classes))
        rows, total = count_parameters(model)
        columns.append((name, rows, total))
    width = 25
    print(f"reference architectures on {shape[0]}x{shape[1]}x{shape[2]} "
          f"input, {classes} classes")
    print(f"{'':>8}" + "".join(f"{name:>{width}}" for name, _, _ in columns))
    depth = max(len(rows) for _, rows, _ in columns)
    for i in range(depth):
        cells = []
        for _, rows, _ in columns:
            if i < len(rows):
                stage, n = rows[i]
                kind = stage.split(".", 1)[1]
                cells.append(f"{kind:>14} {n:>10}")
            else:
                cells.append(" " * width)
        print(f"{'layer ' + str(i):>8}" + "".join(cells))
    print(f"{'total':>8}"
          + "".join(f"{total:>{width}}" for _, _, total in columns))
    base = columns[0][2]
    print(f"{'ratio':>8}"
          + "".join(f"{total / base:>{width - 1}.1f}x"
                    for _, _, total in columns))

    if config.architecture == "custom":
        classes = 16
        if config.labels and os.path.isfile(config.labels):
            classes = load_labels(config.labels).num_classes or classes
        model = build_model(config.model_config(classes))
        rows, total = count_parameters(model)
        print()
        print(f"configured model on {config.patch}x{config.patch}x"
              f"{config.bands} input, {classes} classes")
        for stage, n in rows:
            print(f"{stage:>22} {n:>10}")
        print(f"{'total':>22} {total:>10}")
    return 0


def _gradcheck_scs(rng):
    units = int(rng.integers(1, 4))
    kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    cin = int(rng.integers(1, 3))
    h, w = kh + int(rng.integers(0, 3)), kw + int(rng.integers(0, 3))
    layer = ScsLayer(units, (kh, kw), cin, seed=int(rng.integers(1 << 32)))
    layer.p_log.data[:] = rng.uniform(0.0, 0.7, size=units)
    layer.q_raw.data[:] = rng.uniform(-3.0, -1.0)
    x = Tensor(rng.standard_normal((1, h, w, cin)))
    return layer, x


def _gradcheck_conv(rng, rank):
    units = int(rng.integers(1, 4))
    window = tuple(int(rng.integers(1, 4)) for _ in range(rank))
    cin = int(rng.integers(1, 3))
    dims = tuple(k + int(rng.integers(0, 3)) for k in window)
    layer = ConvLayer(units, window, cin, seed=int(rng.integers(1 << 32)))
    x = Tensor(rng.standard_normal((1,) + dims + (cin,)))
    return layer, x


def _run_gradcheck(config, args):
    seed = args.seed if args.seed is not None else config.train_seed
    trials = args.trials
    print(f"seed {seed}, {trials} trials per family, tolerance "
          f"{GRADCHECK_TOLERANCE:.1e}")
    overall = 0.0
    families = [("scs", _gradcheck_scs),
                ("conv2d", lambda rng: _gradcheck_conv(rng, 2)),
                ("conv3d", lambda rng: _gradcheck_conv(rng, 3))]
    for index, (name, draw) in enumerate(families):
        rng = np.random.Generator(np.random.Philox(
            key=np.array([seed, (1 << 33) + index], dtype=np.uint64)))
        worst = 0.0
        for _ in range(trials):
            layer, x = draw(rng)
            probe = None

            def loss(_):
                out = layer.forward(x)
                return reduce_sum(mul(out, probe))

            out_shape = layer.forward(x).shape
            probe = Tensor(rng.standard_normal(out_shape))
            for _, param in layer.parameters():
                worst = max(worst, finite_difference_check(loss, param))
            worst = max(worst, finite_difference_check(loss, x))
        print(f"{name:>8}  max relative error {worst:.3e}")
        overall = max(overall, worst)
    ok = overall <= GRADCHECK_TOLERANCE
    print(f"overall max relative error {overall:.3e}: "
          f"{'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


# ---- argument parsing ----------------------------------------------------


_DISPATCH = {
    "inspect": _run_inspect,
    "convert-help": _run_convert_help,
    "pca": _run_pca,
    "split": _run_split,
    "train": _run_train,
    "eval": _run_eval,
    "map": _run_map,
    "paramcount": _run_paramcount,
    "gradcheck": _run_gradcheck,
}


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="scsnet",
        description="hyperspectral classification with sharpened cosine "
                    "similarity networks")
    parser.add_argument("--config", metavar="PATH",
                        help="experiment config file (INI)")
    parser.add_argument("--seed", type=int, metavar="N",
                        help="override both the split and training seeds")
    parser.add_argument("--out", metavar="DIR",
                        help="override the output directory")
    parser.add_argument("--precision", choices=("f32", "f64"),
                        help="override the compute precision")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="COMMAND")

    p = sub.add_parser("inspect", help="print cube and label summaries")
    p.add_argument("cube", nargs="?", help="cube file (default from config)")
    p.add_argument("labels", nargs="?",
                   help="label file (default from config)")

    sub.add_parser("convert-help",
                   help="how to produce cube and label files")
    sub.add_parser("pca", help="fit band reduction, write the reduced cube")
    sub.add_parser("split", help="draw the stratified split, write it out")

    p = sub.add_parser("train", help="train and write artifacts")
    p.add_argument("--resume", action="store_true",
                   help="continue from the checkpoint in the output dir")

    for name, extra in (("eval", True), ("map", False)):
        p = sub.add_parser(name, help="score a checkpoint" if extra
                           else "render a full classification map")
        p.add_argument("--checkpoint", metavar="PATH",
                       help="checkpoint file (default OUT/checkpoint.scsc)")
        p.add_argument("--split", metavar="PATH",
                       help="split file (default OUT/split.hsis, or a fresh "
                            "deterministic draw)")
        if extra:
            p.add_argument("--role", choices=sorted(ROLE_BY_NAME),
                           default="test", help="which side of the split")
            p.add_argument("--kv", action="store_true",
                           help="print key=value lines instead of the table")
            p.add_argument("--map", metavar="PATH",
                           help="also write a map of the evaluated pixels")
        else:
            p.add_argument("--output", metavar="PATH",
                           help="map file (default OUT/map.ppm)")

    sub.add_parser("paramcount",
                   help="parameter budgets of the reference models")

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--trials", type=int, default=5, metavar="N",
                   help="random layer configs per family (default 5)")
    return parser


def _overrides(args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    if args.precision is not None:
        overrides["precision"] = args.precision
    return overrides


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code
        return code if isinstance(code, int) else (0 if code is None else 2)
    try:
        config = load_experiment_config(args.config, _overrides(args))
        return _DISPATCH[args.command](config, args)
    except ConfigError as err:
        print(f"error: config: {err}", file=sys.stderr)
        return 2
    except FileNotFoundError as err:
        print(f"error: file not found: {err.filename or err}", file=sys.stderr)
        return 2
    except ScsNetError as err:
        prefix = _ERROR_PREFIX.get(type(err), "internal")
        print(f"error: {prefix}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
