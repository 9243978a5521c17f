"""``spfusion`` command line: data generation, training, evaluation, ablation, domain shift, gradcheck.

Every command prints one ``RESULT key=value ...`` line on success.  Exit codes:
0 ok, 1 divergence or gradcheck failure, 2 usage or validation error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import typing
from dataclasses import MISSING, fields, replace
from pathlib import Path
from typing import Any, Sequence

from .datamodel import (DatasetIOError, DigestMismatchError, ValidationError, load_dataset, read_manifest,
                        save_dataset, write_csv, write_metrics)
from .harness import TrainConfig, ablate, domain_shift_eval, evaluate, gradcheck, load_model, train
from .synthdata import FrustumError, SceneConfig, generate_dataset

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("spfusion")


class UsageError(Exception):
    pass


SCENE_HELP = {
    "n_points": "points per scene",
    "image_size": "image height,width in pixels",
    "n_classes": "number of semantic classes (2..6)",
    "objects_per_scene": "min,max objects of each placed class",
    "noise_sigma": "LiDAR range noise in metres",
    "focal": "camera focal length in pixels",
    "camera_yaw_deg": "extra camera yaw in degrees",
    "illumination_delta": "additive brightness change of the target style",
    "target_dropout": "fraction of points dropped in the target style",
    "target_yaw_shift_deg": "object yaw shift of the target style in degrees",
    "sample_density": "surface samples per square metre before visibility",
    "patch_size_2d": "image patch size the image size must divide",
}


# ---------------------------------------------------------------------------
# config values

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _field_type(cls, name: str):
    return typing.get_type_hints(cls)[name]


def parse_value(text: str, typ) -> Any:
    text = text.strip()
    if typ is bool:
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise UsageError(f"expected a boolean, got {text!r}")
    origin = typing.get_origin(typ)
    if origin is tuple:
        items = [t for t in text.replace(",", " ").split() if t]
        args = typing.get_args(typ)
        if len(items) != len(args):
            raise UsageError(f"expected {len(args)} comma-separated values, got {text!r}")
        return tuple(parse_value(i, a) for i, a in zip(items, args))
    try:
        return typ(text)
    except ValueError as exc:
        raise UsageError(f"expected {typ.__name__}, got {text!r}") from exc


def parse_config_text(text: str, cls=TrainConfig, source: str = "<config>") -> dict[str, Any]:
    """Plain ``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    known = {f.name for f in fields(cls)}
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in known:
            raise UsageError(f"{source}:{lineno}: unknown config key {key!r}")
        try:
            out[key] = parse_value(value, _field_type(cls, key))
        except UsageError as exc:
            raise UsageError(f"{source}:{lineno}: {key}: {exc}") from None
    return out


def read_config_file(path, cls=TrainConfig) -> dict[str, Any]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DatasetIOError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, cls, str(path))


def format_config(config) -> str:
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, tuple):
            return ",".join(str(x) for x in v)
        return str(v)
    return "".join(f"{f.name} = {fmt(getattr(config, f.name))}\n" for f in fields(config))


def parse_grid_text(text: str, source: str = "<grid>") -> list[dict[str, Any]]:
    """One ablation row per line: whitespace-separated ``key=value`` pairs, optional ``name=``."""
    rows = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        pairs = line.split()
        name = None
        body = []
        for p in pairs:
            if p.startswith("name="):
                name = p[5:]
            else:
                body.append(p)
        row = parse_config_text("\n".join(body), TrainConfig, f"{source}:{lineno}")
        if name:
            row["name"] = name
        rows.append(row)
    return rows


def _add_config_flags(parser: argparse.ArgumentParser, cls, skip: Sequence[str] = ()) -> None:
    group = parser.add_argument_group(f"{cls.__name__} keys (config-file keys; flags override the file)")
    for f in fields(cls):
        if f.name in skip:
            continue
        default = f.default if f.default is not MISSING else None
        help_text = f.metadata.get("help", "") if f.metadata else SCENE_HELP.get(f.name, "")
        choices = f.metadata.get("choices") if f.metadata else None
        extra = f" {{{'|'.join(choices)}}}" if choices else ""
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", metavar="V",
                           default=argparse.SUPPRESS, help=f"{help_text}{extra} (default: {default})")


def _flag_overrides(args: argparse.Namespace, cls) -> dict[str, Any]:
    out = {}
    for f in fields(cls):
        key = f"cfg_{f.name}"
        if hasattr(args, key):
            try:
                out[f.name] = parse_value(getattr(args, key), _field_type(cls, f.name))
            except UsageError as exc:
                raise UsageError(f"--{f.name.replace('_', '-')}: {exc}") from None
    return out


def resolve_train_config(args: argparse.Namespace) -> TrainConfig:
    values = read_config_file(args.config) if getattr(args, "config", None) else {}
    values.update(_flag_overrides(args, TrainConfig))
    return TrainConfig.from_dict(values)


def result_line(**items) -> str:
    def fmt(v):
        if isinstance(v, float):
            return f"{v:.6f}" if abs(v) >= 1e-3 or v == 0 else f"{v:.3e}"
        if isinstance(v, bool):
            return str(v).lower()
        return str(v)
    return "RESULT " + " ".join(f"{k}={fmt(v)}" for k, v in items.items())


def _emit(**items) -> None:
    print(result_line(**items), flush=True)


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    if args.scenes < 1:
        raise UsageError("--scenes must be >= 1")
    overrides = _flag_overrides(args, SceneConfig)
    config = SceneConfig(**{**overrides, "seed": args.seed, "domain_style": args.style})
    scenes = generate_dataset(args.scenes, config)
    save_dataset(scenes, args.out)
    manifest = read_manifest(args.out)
    print(f"wrote {len(scenes)} scenes ({args.style}) to {args.out}")
    _emit(scenes=len(manifest["scenes"]), n_classes=manifest["n_classes"], style=args.style, out=args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    config = resolve_train_config(args)
    train_set = load_dataset(args.data)
    val_set = load_dataset(args.val) if args.val else None
    class_names = read_manifest(args.data)["class_names"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(format_config(config))
    report = train(config, train_set, val_set, out, class_names=class_names)
    if report.metrics is not None:
        write_metrics(report.metrics, out / "metrics.csv")
    if report.diverged:
        d = report.divergence
        print(f"training diverged: non-finite {d['term']} at epoch {d['epoch']} step {d['step']}; "
              f"kept the last finite checkpoint", file=sys.stderr)
    _emit(miou=report.miou, diverged=report.diverged, epochs_completed=len(report.curves),
          wall_time=report.wall_time, checkpoint=report.checkpoint_path)
    return EXIT_FAIL if report.diverged else EXIT_OK


def cmd_eval(args) -> int:
    model, _, extra = load_model(args.ckpt)
    dataset = load_dataset(args.data)
    metrics = evaluate(model, dataset, extra.get("class_names"))
    out = Path(args.out) if args.out else Path(args.ckpt).parent
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(metrics, out / "metrics.csv", out / "metrics.json")
    _emit(miou=metrics.miou, n_evaluated=metrics.n_evaluated)
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = resolve_train_config(args)
    try:
        grid_text = Path(args.grid).read_text()
    except OSError as exc:
        raise DatasetIOError(f"cannot read grid {args.grid}: {exc}") from exc
    grid = parse_grid_text(grid_text, args.grid)
    for row in grid:
        replace(base, **{k: v for k, v in row.items() if k != "name"})  # validate before any training
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    train_set = load_dataset(args.data)
    val_set = load_dataset(args.val)
    target = load_dataset(args.target) if args.target else None
    result = ablate(base, grid, train_set, val_set, n_seeds=args.seeds, target_set=target, out_dir=args.out)
    for row in result.table():
        print(f"{row['name']:<32} miou {row['miou_mean']:.4f} +- {row['miou_std']:.4f} "
              f"diverged {row['diverged']}/{row['runs']}")
    first = result.rows[0]
    _emit(rows=len(result.rows), runs=sum(len(r.mious) for r in result.rows), first_miou=first.mean,
          diverged=sum(sum(r.diverged) for r in result.rows), table=str(Path(args.out) / "ablation.csv"))
    return EXIT_OK


def cmd_domain_shift(args) -> int:
    model, _, _ = load_model(args.ckpt)
    src, tgt, drop = domain_shift_eval(model, load_dataset(args.source), load_dataset(args.target))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics(src, out / "source_metrics.csv")
        write_metrics(tgt, out / "target_metrics.csv")
        (out / "domain_shift.json").write_text(json.dumps(
            {"source": src.summary(), "target": tgt.summary(), "drop": drop}, indent=2) + "\n")
    _emit(source_miou=src.miou, target_miou=tgt.miou, drop=drop)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    config = resolve_train_config(args)
    report = gradcheck(config, step=args.step, tolerance=args.tolerance)
    for row in report.rows():
        cells = " ".join(f"{t}={v if isinstance(v, str) else f'{v:.2e}'}" for t, v in row.items() if t != "group")
        print(f"{row['group']:<16} {cells}")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        write_csv(report.rows(), Path(args.out) / "gradcheck.csv")
    for g, t, v in report.offenders:
        print(f"gradcheck failure: group {g} term {t} relative error {v:.3e}", file=sys.stderr)
    _emit(max_rel_error=report.max_error, passed=report.passed, n_parameters=report.n_parameters,
          wall_time=report.wall_time)
    return EXIT_OK if report.passed else EXIT_FAIL


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spfusion", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--scenes", type=int, required=True, help="number of scenes")
    p.add_argument("--seed", type=int, default=0, help="seed of the first scene")
    p.add_argument("--style", choices=("source", "target"), default="source", help="domain style")
    _add_config_flags(p, SceneConfig, skip=("seed", "domain_style"))
    p.set_defaults(func=cmd_gen_data)

    def train_like(name, help_text, func):
        q = sub.add_parser(name, help=help_text)
        q.add_argument("--config", help="key=value config file")
        _add_config_flags(q, TrainConfig)
        q.set_defaults(func=func)
        return q

    p = train_like("train", "train a model", cmd_train)
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--val", help="held-out dataset directory")
    p.add_argument("--out", required=True, help="run directory")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", help="directory for metrics files (default: checkpoint directory)")
    p.set_defaults(func=cmd_eval)

    p = train_like("ablate", "train a grid of configurations over several seeds", cmd_ablate)
    p.add_argument("--grid", required=True, help="one row of key=value overrides per line")
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--val", required=True, help="held-out dataset directory")
    p.add_argument("--target", help="optional shifted-domain dataset, reported per row")
    p.add_argument("--seeds", type=int, default=3, help="seeds per row")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("domain-shift", help="evaluate a checkpoint on source and target data")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--source", required=True, help="source-style dataset directory")
    p.add_argument("--target", required=True, help="target-style dataset directory")
    p.add_argument("--out", help="directory for metrics files")
    p.set_defaults(func=cmd_domain_shift)

    p = train_like("gradcheck", "finite-difference gradient verification on a tiny model", cmd_gradcheck)
    p.add_argument("--step", type=float, default=1e-5, help="central-difference step")
    p.add_argument("--tolerance", type=float, default=1e-3, help="maximum allowed relative error")
    p.add_argument("--out", help="directory for gradcheck.csv")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ValidationError, ValueError) as exc:
        print(f"spfusion {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FrustumError as exc:
        print(f"spfusion {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (DatasetIOError, DigestMismatchError, OSError) as exc:
        print(f"spfusion {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
