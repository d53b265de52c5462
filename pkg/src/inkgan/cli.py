"""Operator entry point: prepare, train, eval, report and infer commands.

Runs are reproducible: every command echoes its fully resolved configuration
and persists it into the run artifacts. Config files are plain `key = value`
text with `#` comments; command-line flags override file values. Exit codes:
0 success, 1 runtime failure, 2 usage or configuration error.
"""

# Thread setup must precede the first numpy import: INKGAN_THREADS=0 pins the
# BLAS pools to one thread (deterministic mode); any other value is the pool
# size. Without the variable the environment default stands.
import os

_threads = os.environ.get("INKGAN_THREADS")
if _threads is not None:
    _n = "1" if _threads.strip() == "0" else _threads.strip()
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _n)

import argparse
import csv
import sys
import time
from dataclasses import fields

from .data import Dataset, load_png, prepare, save_png, to_unit
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    InkganError,
    MetricError,
    TrainingError,
)
from .metrics import (
    FeatureExtractor,
    SsimConfig,
    append_metric_record,
    evaluate_sample,
    read_metric_records,
)
from .nets import forward
from .report import line_chart
from .trainer import TrainConfig, infer, load_generator, train
from . import tensor as ts

import numpy as np

_EXTRA_KEYS = ("data", "run_dir")


def _parse_bool(text):
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _field_types():
    by_name = {"int": int, "float": float, "str": str, "bool": bool}
    types = {}
    for f in fields(TrainConfig):
        t = by_name[f.type] if isinstance(f.type, str) else f.type
        types[f.name] = _parse_bool if t is bool else t
    return types


_TYPES = _field_types()


def parse_config_file(path):
    """`key = value` lines, `#` comments, blank lines ignored."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    values = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{line_no}: expected `key = value`, got {line!r}")
            key, value = (part.strip() for part in text.split("=", 1))
            values[key] = value
    return values


def resolve_train_config(file_values, flag_values):
    """Merge defaults <- file <- flags into a resolved dict (all keys set)."""
    merged = {}
    for key, raw in file_values.items():
        if key in _TYPES:
            merged[key] = _TYPES[key](raw)
        elif key in _EXTRA_KEYS:
            merged[key] = raw
        else:
            raise ConfigError(f"unknown config key {key!r}")
    for key, value in flag_values.items():
        if value is not None:
            merged[key] = value

    image_size = merged.get("image_size", TrainConfig.image_size)
    # desk-scale topology below 256, full-scale at and above
    merged.setdefault("depth", 8 if image_size >= 256 else 4)
    merged.setdefault("base_filters", 64 if image_size >= 256 else 16)

    data_root = merged.pop("data", None)
    run_dir = merged.pop("run_dir", None)
    cfg = TrainConfig(**{k: v for k, v in merged.items() if k in _TYPES})
    return cfg, data_root, run_dir


def _echo_config(cfg, data_root, run_dir, stream=None):
    stream = stream or sys.stdout
    resolved = dict(cfg.to_dict(), data=data_root, run_dir=run_dir)
    for key in sorted(resolved):
        stream.write(f"{key} = {resolved[key]}\n")


def _persist_config(cfg, data_root, run_dir):
    path = os.path.join(run_dir, "config.resolved")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        _echo_config(cfg, data_root, run_dir, stream=fh)
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(args):
    if not os.path.isdir(args.input_dir):
        raise ConfigError(f"input directory not found: {args.input_dir}")
    summary = prepare(
        args.input_dir, args.output_dir, size=args.size,
        val_fraction=args.val_fraction, seed=args.seed,
    )
    for name, reason in summary.skipped:
        print(f"skipped {name}: {reason}", file=sys.stderr)
    print(
        f"prepared {summary.total} pairs ({len(summary.train_ids)} train, "
        f"{len(summary.val_ids)} val) into {args.output_dir}"
    )
    return 0


def _add_train_config_flags(parser):
    for f in fields(TrainConfig):
        flags = ["--" + f.name.replace("_", "-")]
        if f.name == "image_size":
            flags.append("--size")
        if _TYPES[f.name] is _parse_bool:
            parser.add_argument(*flags, type=_parse_bool, default=None, metavar="BOOL")
        else:
            parser.add_argument(*flags, type=_TYPES[f.name], default=None)


def cmd_train(args):
    file_values = parse_config_file(args.config) if args.config else {}
    flag_values = {f.name: getattr(args, f.name) for f in fields(TrainConfig)}
    if args.data is not None:
        flag_values["data"] = args.data
    if args.run_dir is not None:
        flag_values["run_dir"] = args.run_dir
    cfg, data_root, run_dir = resolve_train_config(file_values, flag_values)

    if not data_root:
        raise ConfigError("no dataset given: pass --data or set `data = ...` in the config")
    if not os.path.isdir(data_root):
        raise ConfigError(f"dataset path not found: {data_root}")
    dataset = Dataset(data_root, grayscale_sketch=cfg.grayscale_sketch)

    if run_dir is None:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run_dir = os.path.join(args.runs_dir, f"{stamp}-{cfg.objective}")
        counter = 1
        while os.path.exists(run_dir):
            run_dir = os.path.join(args.runs_dir, f"{stamp}-{cfg.objective}-{counter}")
            counter += 1
    os.makedirs(run_dir, exist_ok=True)

    _echo_config(cfg, data_root, run_dir)
    _persist_config(cfg, data_root, run_dir)
    result = train(cfg, dataset, run_dir, resume_from=args.resume, log=print)
    last = result.records[-1] if result.records else None
    if last:
        print(
            f"done: {run_dir} (epoch {last.epoch}: fid={last.fid:.3f} "
            f"ssim_mean={last.ssim_mean:.4f})"
        )
    return 0


def cmd_eval(args):
    g_net, cfg = load_generator(args.checkpoint)
    if not os.path.isdir(args.data):
        raise ConfigError(f"dataset path not found: {args.data}")
    dataset = Dataset(args.data, grayscale_sketch=cfg.grayscale_sketch)
    val_ids = dataset.ids("val")
    if args.sample_size > len(val_ids):
        raise ConfigError(
            f"sample-size {args.sample_size} exceeds validation set of {len(val_ids)}"
        )
    ids = val_ids[: args.sample_size]
    references = [to_unit(dataset.load_pair(i).color) for i in ids]
    if args.control:
        generated = references  # ground-truth-as-generated sanity run
    else:
        generated = []
        for start in range(0, len(ids), cfg.batch_size):
            chunk = ids[start : start + cfg.batch_size]
            sketch = np.stack([dataset.load_pair(i).sketch.data for i in chunk])
            fake = forward(g_net, ts.Tensor(sketch), mode="eval")
            generated.extend(to_unit(fake.data[i]) for i in range(len(chunk)))
    extractor = FeatureExtractor(seed=cfg.extractor_seed)
    record = evaluate_sample(
        generated, references, extractor, SsimConfig(),
        generated_ids=ids, reference_ids=ids, epoch=args.epoch,
    )
    print(
        f"epoch={record.epoch} fid={record.fid!r} ssim_mean={record.ssim_mean!r} "
        f"ssim_std={record.ssim_std!r} sample_size={record.sample_size} "
        f"extractor={extractor.name}"
    )
    out = args.out or os.path.join(os.path.dirname(args.checkpoint) or ".", "eval_metrics.csv")
    append_metric_record(out, record)
    return 0


def cmd_report(args):
    run_dirs = [args.run_dir] + list(args.compare or [])
    series = []
    for run in run_dirs:
        path = os.path.join(run, "metrics.csv")
        records = read_metric_records(path)
        if not records:
            raise MetricError(f"{path} has no metric rows")
        series.append((os.path.basename(os.path.normpath(run)), records))

    out_dir = args.out or os.path.join(args.run_dir, "report")
    os.makedirs(out_dir, exist_ok=True)
    outputs = []
    for metric, label in (("fid", "FID"), ("ssim_mean", "SSIM mean"), ("ssim_std", "SSIM std")):
        chart = line_chart(
            [
                (name, [r.epoch for r in recs], [getattr(r, metric) for r in recs])
                for name, recs in series
            ],
            title=f"{label} per epoch",
            y_label=label,
        )
        path = os.path.join(out_dir, f"{metric}.svg")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(chart)
        outputs.append(path)

    combined = os.path.join(out_dir, "combined.csv")
    with open(combined, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["run", "epoch", "fid", "ssim_mean", "ssim_std", "sample_size"])
        for name, recs in series:
            for r in recs:
                writer.writerow(
                    [name, r.epoch, repr(r.fid), repr(r.ssim_mean), repr(r.ssim_std), r.sample_size]
                )
    outputs.append(combined)
    for path in outputs:
        print(path)
    return 0


def cmd_infer(args):
    if not os.path.exists(args.checkpoint):
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    if os.path.isdir(args.input):
        names = sorted(n for n in os.listdir(args.input) if n.lower().endswith(".png"))
        if not names:
            raise ConfigError(f"no .png files in {args.input}")
        os.makedirs(args.output, exist_ok=True)
        images = [load_png(os.path.join(args.input, n)) for n in names]
        outputs = infer(args.checkpoint, images)
        for name, out in zip(names, outputs):
            save_png(out, os.path.join(args.output, name))
        print(f"wrote {len(outputs)} images to {args.output}")
    else:
        if not os.path.exists(args.input):
            raise ConfigError(f"input not found: {args.input}")
        (out,) = infer(args.checkpoint, [load_png(args.input)])
        parent = os.path.dirname(args.output)
        if parent:
            os.makedirs(parent, exist_ok=True)
        save_png(out, args.output)
        print(args.output)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="inkgan",
        description="Sketch colorization: Pix2Pix / CycleGAN training, evaluation, inference.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="split, resize and index raw pair PNGs")
    p.add_argument("--input-dir", required=True)
    p.add_argument("--output-dir", required=True)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train an objective on a prepared dataset")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--data", help="prepared dataset root")
    p.add_argument("--run-dir", help="exact run directory (default: timestamped)")
    p.add_argument("--runs-dir", default="runs", help="parent for timestamped run dirs")
    p.add_argument("--resume", help="checkpoint to resume from")
    _add_train_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the validation split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sample-size", type=int, default=100)
    p.add_argument("--epoch", type=int, default=0, help="epoch tag for the CSV row")
    p.add_argument("--out", help="metrics CSV to append to")
    p.add_argument(
        "--control", action="store_true",
        help="evaluate ground truth against itself (sanity check)",
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render metric curves as SVG charts")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--compare", nargs="*", help="additional run dirs to overlay")
    p.add_argument("--out", help="output directory (default: <run-dir>/report)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("infer", help="colorize sketch PNGs with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="PNG file or directory")
    p.add_argument("--output", required=True, help="output file or directory")
    p.set_defaults(func=cmd_infer)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, TrainingError, CheckpointError, MetricError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except InkganError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
