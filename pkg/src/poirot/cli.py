"""Command-line entry point: convert, respond, train, eval and detect.

Every command accepts ``--config FILE`` (plain ``key = value`` lines) and a
few flag overrides; the fully resolved configuration is written next to the
outputs as ``resolved_config.txt`` and can be fed back with ``--config``.
Failures print one line ``error: <category>: <message>`` to stderr.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .errors import ConfigError, EmptyError, ParseError, PoirotError
from .geometry import PointCloud, centroid
from .io import atomic_write, detect_format, format_xyz, parse_image_grid, read_cloud, signal_to_bytes, signal_to_csv

log = logging.getLogger("poirot")

EXIT_CODES = {"usage": 2, "config": 2, "parse": 3, "io": 4, "numeric": 5}
THREADS_ENV = "POIROT_THREADS"


class UsageError(PoirotError):
    category = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# per-command settings


@dataclasses.dataclass(frozen=True)
class ConvertSettings:
    """``points`` = 0 keeps every point (images default to 256)."""

    input: str = ""
    format: str = ""
    points: int = 0
    seed: int = 0


@dataclasses.dataclass(frozen=True)
class RespondSettings:
    input: str = ""
    bandwidth: int = 8
    radius: float = 0.2
    center: int = -1
    partitions: int = 1
    use_normals: bool = False
    upscale: int = 8


@dataclasses.dataclass(frozen=True)
class DataSettings:
    """``data`` is ``synthetic`` or a manifest file with one ``path [label]`` per line."""

    data: str = "synthetic"
    n_shapes: int = 300
    n_train: int = 200
    points: int = 256
    split: str = "test"
    rotate: bool = False
    rotate_seed: int = 1


@dataclasses.dataclass(frozen=True)
class EvalSettings:
    checkpoint: str = ""
    seed: int = 0


@dataclasses.dataclass(frozen=True)
class DetectSettings:
    input: str = ""
    atlas: str = ""


def _fields(cls, exclude=()):
    return [f.name for f in dataclasses.fields(cls) if f.name not in exclude]


def _sections(command):
    from .detection import DetectConfig
    from .model import ModelConfig, TrainConfig

    if command == "convert":
        return [ConvertSettings]
    if command == "respond":
        return [RespondSettings]
    if command == "train":
        return [ModelConfig, TrainConfig, DataSettings]
    if command == "eval":
        return [EvalSettings, DataSettings]
    if command == "detect":
        return [DetectSettings, DetectConfig]
    raise UsageError(f"unknown command {command!r}")


def resolve(command, mapping):
    """Split a flat ``{key: value}`` mapping over the command's sections.

    A key may belong to several sections (``seed`` feeds every one that has it).
    """
    sections = _sections(command)
    allowed = {"seed"}
    for cls in sections:
        allowed.update(_fields(cls))
    unknown = sorted(set(mapping) - allowed)
    if unknown:
        raise ConfigError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
    out = []
    for cls in sections:
        names = set(_fields(cls))
        sub = {k: v for k, v in mapping.items() if k in names}
        out.append(cfgmod.from_mapping(cls, sub))
    return out


def resolved_text(sections):
    merged = {}
    for obj in sections:
        merged.update(cfgmod.to_mapping(obj))
    return "".join(f"{k} = {cfgmod.format_value(merged[k])}\n" for k in sorted(merged))


def _load_mapping(args, command):
    mapping = {}
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc.strerror}") from None
        mapping.update(cfgmod.parse_config_text(text, path=args.config))
    overrides = {
        "seed": args.seed,
        "points": getattr(args, "points", None),
        "bandwidth": getattr(args, "bandwidth", None),
        "radius": getattr(args, "radius", None),
        "task": getattr(args, "task", None),
    }
    for key in ("input", "atlas", "checkpoint", "center"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    allowed = {"seed"}
    for cls in _sections(command):
        allowed.update(_fields(cls))
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in allowed:
            raise UsageError(f"--{key} does not apply to {command}")
        mapping[key] = value
    return mapping


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# convert


def image_to_cloud(image, n_points=256, seed=0):
    """Foreground pixels (> half the maximum) as points (col, -row, 0), centered, unit diameter."""
    image = np.asarray(image, dtype=float)
    peak = image.max() if image.size else 0.0
    rows, cols = np.nonzero(image > 0.5 * peak) if peak > 0 else (np.array([], int), np.array([], int))
    if len(rows) == 0:
        raise EmptyError("no foreground pixels")
    pts = np.column_stack([cols, -rows, np.zeros(len(rows))]).astype(float)
    return subsample(normalize_unit(PointCloud(pts)), n_points, seed)


def normalize_unit(cloud):
    """Center on the mean and scale to unit diameter (single points land at the origin)."""
    pts = cloud.points - cloud.points.mean(axis=0)
    diam = cloud.diameter
    if diam > 0:
        pts = pts / diam
    return PointCloud(pts, cloud.normals, cloud.labels)


def subsample(cloud, n_points, seed):
    """Uniform draw of ``min(n_points, N)`` points without replacement, original order kept."""
    if n_points <= 0 or n_points >= len(cloud):
        return cloud
    idx = np.sort(np.random.default_rng(seed).choice(len(cloud), n_points, replace=False))
    return cloud.subset(idx)


def cmd_convert(args):
    (s,) = resolve("convert", _load_mapping(args, "convert"))
    if not s.input:
        raise UsageError("convert needs an input file")
    fmt = (s.format or detect_format(s.input)).lower()
    if fmt == "image":
        grid = parse_image_grid(Path(s.input).read_text(), path=s.input)
        cloud = image_to_cloud(grid, s.points or 256, s.seed)
    else:
        cloud = subsample(normalize_unit(read_cloud(s.input, fmt)), s.points, s.seed)
    out = Path(args.out)
    if out.suffix.lower() != ".xyz":
        out.mkdir(parents=True, exist_ok=True)
        atomic_write(out / "resolved_config.txt", resolved_text([s]))
        out = out / (Path(s.input).stem + ".xyz")
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        atomic_write(out.with_name(out.stem + ".resolved_config.txt"), resolved_text([s]))
    atomic_write(out, format_xyz(cloud))
    print(f"wrote {len(cloud)} points to {out}")


# ---------------------------------------------------------------------------
# respond


def cmd_respond(args):
    from .plotting import heatmap_bmp, render_response_png
    from .sphere import ResponseConfig, make_grid, respond

    (s,) = resolve("respond", _load_mapping(args, "respond"))
    if not s.input:
        raise UsageError("respond needs an input file")
    cloud = read_cloud(s.input)
    center = centroid(cloud) if s.center < 0 else s.center
    if center >= len(cloud):
        raise ConfigError(f"center {center} out of range for {len(cloud)} points")
    diam = cloud.diameter if cloud.diameter > 0 else 1.0
    rc = ResponseConfig(s.radius * diam, s.partitions, s.use_normals)
    signal = respond(cloud, center, rc, make_grid(s.bandwidth))
    out = _out_dir(args)
    atomic_write(out / "resolved_config.txt", resolved_text([s]))
    atomic_write(out / "response.bin", signal_to_bytes(signal))
    atomic_write(out / "response.csv", signal_to_csv(signal))
    for c in range(signal.channels):
        suffix = "" if signal.channels == 1 else f"_{c}"
        atomic_write(out / f"response{suffix}.bmp", heatmap_bmp(signal.values[c], s.upscale))
    render_response_png(out / "response.png", signal)
    flat = int(np.argmax(signal.values[0]))
    i, j = np.unravel_index(flat, signal.values[0].shape)
    peak = signal.grid.directions[i, j]
    print(f"center {center}; peak direction " + " ".join(f"{v:.6f}" for v in peak))


# ---------------------------------------------------------------------------
# datasets for train / eval


def _read_manifest(path, points, seed):
    base = Path(path).parent
    clouds, labels = [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].split()
        if not line:
            continue
        if len(line) > 2:
            raise ParseError("expected 'path [label]'", lineno, path)
        cloud = read_cloud(base / line[0])
        clouds.append(subsample(cloud, points, seed + len(clouds)))
        if len(line) == 2:
            try:
                labels.append(int(line[1]))
            except ValueError:
                raise ParseError(f"bad label {line[1]!r}", lineno, path) from None
    if labels and len(labels) != len(clouds):
        raise ParseError("either every manifest line has a label or none does", path=path)
    if not clouds:
        raise EmptyError(f"manifest {path} lists no clouds")
    from .model import Dataset

    return Dataset(clouds, labels or None, seeds=[seed * 100003 + i for i in range(len(clouds))])


def build_dataset(task, data, seed):
    """(train, evaluation) datasets per ``data.split``."""
    from .datasets import classification_dataset, rotated, segmentation_dataset, split

    if data.split not in ("train", "test", "all"):
        raise ConfigError("split must be 'train', 'test' or 'all'")
    if data.data == "synthetic":
        if task == "classification":
            ds = classification_dataset(data.n_shapes // 2, data.points, seed)
        else:
            ds = segmentation_dataset(data.n_shapes, data.points, seed)
    else:
        ds = _read_manifest(data.data, data.points, seed)
    if not 0 < data.n_train <= len(ds):
        raise ConfigError(f"n_train={data.n_train} must lie in [1, {len(ds)}]")
    train_ds, test_ds = split(ds, data.n_train)
    chosen = {"train": train_ds, "test": test_ds, "all": ds}[data.split]
    if data.rotate:
        chosen = rotated(chosen, data.rotate_seed)
    return train_ds, chosen


def _threads():
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def cmd_train(args):
    from .model import POIRot, count_params, format_record, save_checkpoint, train
    from .plotting import render_training_png

    model_cfg, train_cfg, data = resolve("train", _load_mapping(args, "train"))
    train_ds, _ = build_dataset(model_cfg.task, data, model_cfg.seed)
    out = _out_dir(args)
    atomic_write(out / "resolved_config.txt", resolved_text([model_cfg, train_cfg, data]))
    model = POIRot(model_cfg)
    log.info("model has %d parameters", count_params(model))
    records = train(model, train_ds, train_cfg, log=log.info)
    atomic_write(out / "metrics.jsonl", "".join(format_record(r) + "\n" for r in records))
    save_checkpoint(out / "checkpoint.bin", model)
    metric = "miou" if model_cfg.task == "segmentation" else "accuracy"
    render_training_png(out / "training.png", records, metric)
    last = records[-1] if records else {}
    print(format_record({"params": count_params(model), **last}))


def cmd_eval(args):
    from .model import evaluate, format_record, load_checkpoint

    ev, data = resolve("eval", _load_mapping(args, "eval"))
    if not ev.checkpoint:
        raise UsageError("eval needs a checkpoint")
    try:
        model = load_checkpoint(ev.checkpoint)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint {ev.checkpoint} not found") from None
    _, ds = build_dataset(model.config.task, data, ev.seed)
    metrics = evaluate(model, ds)
    out = _out_dir(args)
    atomic_write(out / "resolved_config.txt", resolved_text([ev, data]))
    metrics.pop("predictions")
    record = format_record({"n": len(ds), **metrics})
    atomic_write(out / "metrics.json", record + "\n")
    print(record)


def cmd_detect(args):
    from .detection import detect
    from .plotting import render_detection_png

    paths, dcfg = resolve("detect", _load_mapping(args, "detect"))
    if not paths.input or not paths.atlas:
        raise UsageError("detect needs a scene and an atlas file")
    scene = read_cloud(paths.input)
    atlas = read_cloud(paths.atlas)
    result = detect(scene, atlas, dcfg)
    out = _out_dir(args)
    atomic_write(out / "resolved_config.txt", resolved_text([paths, dcfg]))
    atomic_write(out / "members.txt", "".join(f"{int(i)}\n" for i in result.members))
    records = [
        json.dumps({"anchor": int(a), "probability": float(p), "score": float(s)}, sort_keys=True)
        for a, p, s in zip(result.anchors, result.probabilities, result.scores)
    ]
    atomic_write(out / "probabilities.jsonl", "".join(r + "\n" for r in records))
    labels = np.zeros(len(scene), dtype=int)
    labels[result.members] = 1
    atomic_write(out / "labeled.xyz", format_xyz(PointCloud(scene.points), labels))
    render_detection_png(out / "detection.png", scene, result)
    summary = {
        "anchor": int(result.anchors[result.selected]),
        "entropy": result.entropy,
        "probability": float(result.probabilities[result.selected]),
        "steps": max(len(result.entropy_trace) - 1, 0),
    }
    print(json.dumps(summary, sort_keys=True))


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    p = _Parser(prog="poirot", description="Rotation-invariant point-cloud tools.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, points=False, bandwidth=False, radius=False, task=False):
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--seed", type=int, help="global seed")
        sp.add_argument("--out", required=True, help="output directory (or .xyz file for convert)")
        if points:
            sp.add_argument("--points", type=int, help="number of points to keep")
        if bandwidth:
            sp.add_argument("--bandwidth", type=int, help="spherical bandwidth B")
        if radius:
            sp.add_argument("--radius", type=float, help="ball radius as a fraction of the diameter")
        if task:
            sp.add_argument("--task", choices=["classification", "segmentation"])
        sp.add_argument("-v", "--verbose", action="store_true")

    sp = sub.add_parser("convert", help="OFF/PLY/XYZ/image grid to a normalized XYZ file")
    sp.add_argument("input", nargs="?")
    common(sp, points=True)
    sp = sub.add_parser("respond", help="spherical response of one point, with heat maps")
    sp.add_argument("input", nargs="?")
    sp.add_argument("--center", type=int, help="center point index (default: point nearest the mean)")
    common(sp, bandwidth=True, radius=True)
    sp = sub.add_parser("train", help="train a classifier or segmenter")
    common(sp, points=True, bandwidth=True, radius=True, task=True)
    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("checkpoint", nargs="?")
    common(sp, points=True)
    sp = sub.add_parser("detect", help="find the scene region that matches an atlas")
    sp.add_argument("input", nargs="?", help="scene point cloud")
    sp.add_argument("atlas", nargs="?", help="atlas point cloud")
    common(sp, bandwidth=True, radius=True)
    return p


COMMANDS = {"convert": cmd_convert, "respond": cmd_respond, "train": cmd_train, "eval": cmd_eval, "detect": cmd_detect}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
            stream=sys.stderr,
        )
        threads = _threads()
        if threads is None:
            COMMANDS[args.command](args)
        else:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=threads):
                COMMANDS[args.command](args)
    except PoirotError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except OSError as exc:
        where = f" {exc.filename}" if exc.filename else ""
        print(f"error: io: {exc.strerror or exc}{where}", file=sys.stderr)
        return EXIT_CODES["io"]
    return 0


if __name__ == "__main__":
    sys.exit(main())
