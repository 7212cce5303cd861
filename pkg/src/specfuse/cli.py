"""Command-line entry point: ``specfuse <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .fuse import fuse, level_masks, onehot_prediction, parsimony_stats
from .gt import RelabelPolicy, derive_gt, relabel, supervised_counts
from .pyramid import DimensionError, PyramidError, PyramidSpec

EXIT_USAGE = 2
EXIT_BAD_PGM = 3
EXIT_KIND = 4
EXIT_NUMERIC = 5
EXIT_VERSION = 6

log = logging.getLogger("specfuse")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _tau(value: str) -> float:
    t = float(value)
    if not 0.0 < t < 1.0:
        raise argparse.ArgumentTypeError(f"tau must lie strictly inside (0, 1), got {value}")
    return t


def _read_container(path, kind: int):
    try:
        return io.read_pyramid(path, expect_kind=kind)
    except io.KindError as e:
        raise CliError(str(e), EXIT_KIND)
    except io.VersionError as e:
        raise CliError(str(e), EXIT_VERSION)
    except io.FormatError as e:
        raise CliError(f"{path}: {e}", EXIT_USAGE)


def _load_model(path):
    from .train import ConfigError, TrainConfig, build_model

    try:
        config, state = io.load_checkpoint(path)
    except io.VersionError as e:
        raise CliError(str(e), EXIT_VERSION)
    except io.FormatError as e:
        raise CliError(f"{path}: {e}", EXIT_USAGE)
    try:
        cfg = TrainConfig.from_dict(config)
    except ConfigError as e:
        raise CliError(f"{path}: {e}", EXIT_USAGE)
    model = build_model(cfg)
    model.load_state_dict(state)
    return cfg, model.eval()


def cmd_encode(args):
    try:
        labels = io.read_label_map(args.labels)
    except (io.FormatError, OSError) as e:
        raise CliError(f"{args.labels}: {e}", EXIT_BAD_PGM)
    num_classes = args.num_classes or max(2, int(labels.max(initial=0)) + 1)
    try:
        spec = PyramidSpec(args.levels, args.finest_stride, num_classes)
        gt = derive_gt(labels, spec)
    except DimensionError as e:
        raise CliError(f"dimension error on axis {e.axis}: {e}", EXIT_USAGE)
    except PyramidError as e:
        raise CliError(str(e), EXIT_USAGE)
    io.write_pyramid(args.out, onehot_prediction(gt) if args.one_hot else gt)
    return 0


def cmd_fuse(args):
    pred = _read_container(args.sem, io.KIND_PRED)
    scores, labels = fuse(pred, args.tau)
    from .fuse import fuse_assignment

    assignment = fuse_assignment(pred.unity, pred.spec, args.tau)
    try:
        io.write_label_map(args.out_labels, labels)
    except io.FormatError as e:
        raise CliError(str(e), EXIT_USAGE)
    io.write_pgm(args.out_assignment, assignment.astype(np.uint8))
    if args.stats:
        st = parsimony_stats(assignment, pred.spec)
        rows = [(level, a, s, st["labels_read_ratio"])
                for level, a, s in zip(pred.spec.levels, st["assigned_positions"], st["selected_cells"])]
        io.write_csv(args.stats, "specfuse.parsimony v1",
                     ["level", "assigned_positions", "selected_cells", "labels_read_ratio"], rows)
    return 0


def cmd_relabel(args):
    policy = RelabelPolicy(args.policy)
    if policy is RelabelPolicy.FINAL and not args.pred_unity:
        raise CliError("--policy final needs --pred-unity", EXIT_USAGE)
    gt = _read_container(args.gt, io.KIND_GT)
    pred_unity = None
    if args.pred_unity:
        pred = _read_container(args.pred_unity, io.KIND_PRED)
        if pred.spec.num_levels != gt.spec.num_levels or pred.finest_shape != gt.finest_shape:
            raise CliError("prediction and ground-truth containers have different geometry", EXIT_USAGE)
        pred_unity = pred.unity
    tau = args.tau if args.tau is not None else gt.spec.tau
    out = relabel(gt, pred_unity, policy, tau)
    io.write_pyramid(args.out, out)
    for level, n in zip(gt.spec.levels, supervised_counts(out)):
        print(f"level {level}: {n} supervised cells")
    return 0


def cmd_train(args):
    from .train import ConfigError, TrainingDiverged, load_config, train

    try:
        cfg = load_config(args.config)
    except ConfigError as e:
        raise CliError(str(e), EXIT_USAGE)
    rows = []
    try:
        model = train(cfg, rows, progress_every=args.progress_every)
    except TrainingDiverged as e:
        raise CliError(str(e), EXIT_NUMERIC)
    finally:
        if args.log:
            io.write_csv(args.log, "specfuse.trainlog v1",
                         ["iter", "lr", "loss"] + [f"supervised_l{l}" for l in cfg.spec.levels],
                         ([r["iter"], r["lr"], r["loss"], *r["supervised"]] for r in rows))
    io.save_checkpoint(args.out_ckpt, cfg.to_dict(), model.state_dict())
    return 0


def write_eval_report(report, path) -> list[Path]:
    """Write the summary, level-pair and class-delta CSVs; returns the paths written."""
    path = Path(path)
    spec = report.spec
    iou = report.fused_iou.as_array()
    summary = [("pixel_accuracy", "", report.pixel_accuracy), ("miou", "", report.miou),
               ("labels_read_ratio", "", report.labels_read_ratio)]
    summary += [("class_iou", k, iou[k]) for k in range(spec.num_classes)]
    summary += [("level_miou", level, report.level_miou(level)) for level in spec.levels]
    io.write_csv(path, "specfuse.eval v1", ["metric", "index", "value"], summary)

    pair_path = path.with_name(path.stem + "_level_pair.csv")
    m = report.level_pair_matrix()
    io.write_csv(pair_path, "specfuse.level_pair v1", ["semantic_level"] + [f"assigned_l{l}" for l in spec.levels],
                 ([lp, *m[lp - 1]] for lp in spec.levels))

    delta_path = path.with_name(path.stem + "_class_delta.csv")
    d = report.class_level_delta()
    io.write_csv(delta_path, "specfuse.class_delta v1", ["class"] + [f"level{l}" for l in spec.levels],
                 ([k, *d[k]] for k in range(spec.num_classes)))
    return [path, pair_path, delta_path]


def cmd_eval(args):
    from .train import evaluate

    cfg, model = _load_model(args.ckpt)
    report = evaluate(model, cfg.synth(cfg.eval_seed), args.n_samples, tau=args.tau, finest_only=args.finest_only)
    write_eval_report(report, args.report)
    print(f"pixel accuracy {report.pixel_accuracy:.4f}  mIoU {report.miou:.4f}")
    return 0


def cmd_gradcheck(args):
    from .train import ConfigError, gradcheck_model, load_config, toy_config

    try:
        cfg = load_config(args.config) if args.config else toy_config()
    except ConfigError as e:
        raise CliError(str(e), EXIT_USAGE)
    err = gradcheck_model(cfg)
    print(f"max relative error {err:.3e}")
    return 0 if err < 1e-4 else 1


def cmd_dump(args):
    from .synth import gen_sample

    cfg, model = _load_model(args.ckpt)
    spec = cfg.spec
    rgb, _ = gen_sample(cfg.synth(cfg.eval_seed), args.sample)
    pred = model.predict(rgb[None])[0]
    from .fuse import fuse_assignment

    assignment = fuse_assignment(pred.unity, spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for level, sem in zip(spec.levels, pred.semantic):
        io.write_label_map(out / f"level{level}_semantic.pgm", sem.argmax(0))
    for level, uni in zip(spec.levels, pred.unity):
        io.write_pgm(out / f"level{level}_unity.pgm", np.round(np.clip(uni, 0, 1) * 255).astype(np.uint8))
    shades = np.array([0, 255, 128], dtype=np.uint8)  # finer / selected / done by coarser
    for level, mask in zip(spec.levels, level_masks(assignment, spec)):
        io.write_pgm(out / f"level{level}_mask.pgm", shades[mask])
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="specfuse", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("encode", help="derive the ground-truth pyramid of a PGM label map")
    e.add_argument("--labels", required=True)
    e.add_argument("--levels", type=int, required=True)
    e.add_argument("--finest-stride", type=int, required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--num-classes", type=int, default=None)
    e.add_argument("--one-hot", action="store_true", help="write a one-hot prediction container instead")
    e.set_defaults(func=cmd_encode)

    f = sub.add_parser("fuse", help="fuse a prediction container into one label map")
    f.add_argument("--sem", required=True)
    f.add_argument("--tau", type=_tau, default=0.9)
    f.add_argument("--out-labels", required=True)
    f.add_argument("--out-assignment", required=True)
    f.add_argument("--stats")
    f.set_defaults(func=cmd_fuse)

    r = sub.add_parser("relabel", help="apply a training relabel policy to a ground-truth container")
    r.add_argument("--gt", required=True)
    r.add_argument("--pred-unity")
    r.add_argument("--policy", choices=[x.value for x in RelabelPolicy], required=True)
    r.add_argument("--tau", type=_tau, default=None)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_relabel)

    t = sub.add_parser("train", help="train the toy model on synthetic data")
    t.add_argument("--config", required=True)
    t.add_argument("--out-ckpt", required=True)
    t.add_argument("--log")
    t.add_argument("--progress-every", type=int, default=0)
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("eval", help="evaluate a checkpoint on held-out synthetic samples")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--n-samples", type=int, default=200)
    v.add_argument("--report", required=True)
    v.add_argument("--tau", type=_tau, default=None)
    v.add_argument("--finest-only", action="store_true", help="discard coarse levels at inference")
    v.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of the full training loss")
    g.add_argument("--config")
    g.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("dump-intermediate", help="write per-level semantic, unity and mask PGMs")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--sample", type=int, default=0)
    d.add_argument("--out-dir", required=True)
    d.set_defaults(func=cmd_dump)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CliError as e:
        print(f"specfuse {args.command}: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
