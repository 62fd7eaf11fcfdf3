"""Command-line entry point: scene generation, training, rendering, eval.

Config files are flat key=value text (one pair per line, `#` comments);
command-line flags override file values.  Exit codes: 0 success, 2 bad
usage/input, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, fields

import numpy as np
from PIL import Image

from svrender.geometry import load_scene
from svrender.scenes_metrics import Primitive, ToySceneSpec, generate_toy_scene, psnr, ssim
from svrender.training import (
    TrainConfig,
    _source_views,
    load_model,
    train,
)
from svrender.renderer import render_image


class UsageError(Exception):
    """Bad input or arguments; maps to exit code 2."""


def parse_config_file(path):
    """Flat key=value file -> dict; repeated keys accumulate into lists."""
    if not os.path.isfile(path):
        raise UsageError(f"config file not found: {path}")
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key in values:
                if not isinstance(values[key], list):
                    values[key] = [values[key]]
                values[key].append(value)
            else:
                values[key] = value
    return values


def _floats(text):
    try:
        return tuple(float(t) for t in text.split(","))
    except ValueError as exc:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text):
    try:
        return [int(t) for t in str(text).split(",") if t.strip() != ""]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc


def parse_primitive(text):
    """`kind cx,cy,cz size ar,ag,ab [views=i,j]` -> Primitive."""
    tokens = text.split()
    if len(tokens) not in (4, 5):
        raise UsageError(
            f"primitive needs 'kind center size albedo [views=..]', got {text!r}"
        )
    kind, center_s, size_s, albedo_s = tokens[:4]
    views = None
    if len(tokens) == 5:
        if not tokens[4].startswith("views="):
            raise UsageError(f"fifth primitive field must be views=.., got {tokens[4]!r}")
        views = _ints(tokens[4][len("views="):])
    center = _floats(center_s)
    size = _floats(size_s)
    if len(size) == 1:
        size = size[0]
    albedo = _floats(albedo_s)
    try:
        return Primitive(kind=kind, center=center, size=size, albedo=albedo, views=views)
    except ValueError as exc:
        raise UsageError(f"bad primitive {text!r}: {exc}") from exc


_SCENE_KEYS = {
    "n_views": int,
    "width": int,
    "height": int,
    "ring_radius": float,
    "elevation_deg": float,
    "fov_deg": float,
    "near": float,
    "far": float,
    "jitter": float,
    "seed": int,
}


def build_scene_spec(values):
    """Config dict (from parse_config_file) -> ToySceneSpec."""
    kwargs = {}
    for key, value in values.items():
        if key in ("primitive", "occluder"):
            continue
        if key not in _SCENE_KEYS:
            raise UsageError(f"unknown scene key {key!r}")
        if isinstance(value, list):
            raise UsageError(f"scene key {key!r} given more than once")
        try:
            kwargs[key] = _SCENE_KEYS[key](value)
        except ValueError as exc:
            raise UsageError(f"bad value for {key!r}: {value!r}") from exc

    def plist(key):
        raw = values.get(key, [])
        if isinstance(raw, str):
            raw = [raw]
        return [parse_primitive(t) for t in raw]

    primitives = plist("primitive")
    occluders = plist("occluder")
    if not primitives and not occluders:
        kwargs["primitives"] = []
    try:
        return ToySceneSpec(primitives=primitives, occluders=occluders, **kwargs)
    except ValueError as exc:
        raise UsageError(f"bad scene spec: {exc}") from exc


def _write_snapshot(path, values):
    with open(path, "w") as fh:
        for key, value in values.items():
            if isinstance(value, list):
                for item in value:
                    fh.write(f"{key}={item}\n")
            elif value is not None:
                fh.write(f"{key}={value}\n")


def _load_scene_dir(path):
    if not os.path.isdir(path):
        raise UsageError(f"scene directory not found: {path}")
    try:
        return load_scene(path)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"unreadable scene at {path}: {exc}") from exc


def cmd_make_scene(args):
    values = parse_config_file(args.spec)
    if args.seed is not None:
        values["seed"] = str(args.seed)
    spec = build_scene_spec(values)
    os.makedirs(args.out, exist_ok=True)
    try:
        generate_toy_scene(spec, args.out)
    except ValueError as exc:
        raise UsageError(f"bad scene spec: {exc}") from exc
    _write_snapshot(os.path.join(args.out, "config.cfg"), values)
    print(f"scene with {spec.n_views} views written to {args.out}")
    return 0


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce_field(name, kind, value):
    if isinstance(value, list):
        raise UsageError(f"config key {name!r} given more than once")
    if kind is bool:
        low = str(value).lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise UsageError(f"bad boolean for {name!r}: {value!r}")
    try:
        return kind(value)
    except ValueError as exc:
        raise UsageError(f"bad value for {name!r}: {value!r}") from exc


def build_train_config(file_values, args):
    """Merge config file and CLI overrides -> (TrainConfig, train_views, eval_view)."""
    field_types = {f.name: f.type for f in fields(TrainConfig)}
    typed = {}
    train_views = None
    eval_view = None
    for key, value in file_values.items():
        if key == "train_views":
            train_views = _ints(value)
            continue
        if key == "eval_view":
            eval_view = _coerce_field(key, int, value)
            continue
        if key not in field_types:
            raise UsageError(f"unknown training key {key!r}")
        kind = {"int": int, "float": float, "str": str, "bool": bool}[field_types[key]]
        typed[key] = _coerce_field(key, kind, value)

    overrides = {
        "variant": args.variant,
        "iterations": args.iterations,
        "seed": args.seed,
        "ray_batch": args.ray_batch,
        "workers": args.workers,
        "dtype": args.dtype,
        "log_every": args.log_every,
        "eval_every": args.eval_every,
    }
    for key, value in overrides.items():
        if value is not None:
            typed[key] = value
    if args.deterministic:
        typed["deterministic"] = True
    if args.train_views is not None:
        train_views = _ints(args.train_views)
    if args.eval_view is not None:
        eval_view = args.eval_view
    try:
        return TrainConfig.from_dict(typed), train_views, eval_view
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad training config: {exc}") from exc


def cmd_train(args):
    images, cameras, _ = _load_scene_dir(args.scene)
    file_values = parse_config_file(args.config) if args.config else {}
    config, train_views, eval_view = build_train_config(file_values, args)
    if train_views is not None:
        for v in train_views:
            if not 0 <= v < len(images):
                raise UsageError(f"train view {v} out of range for {len(images)} views")
    if eval_view is not None and not 0 <= eval_view < len(images):
        raise UsageError(f"eval view {eval_view} out of range for {len(images)} views")

    os.makedirs(args.out, exist_ok=True)
    snapshot = dict(sorted(asdict(config).items()))
    if train_views is not None:
        snapshot["train_views"] = ",".join(str(v) for v in train_views)
    if eval_view is not None:
        snapshot["eval_view"] = eval_view
    _write_snapshot(os.path.join(args.out, "config.cfg"), snapshot)

    result = train(
        images, cameras, config,
        out_dir=args.out, train_views=train_views, eval_view=eval_view,
    )
    if result.final_psnr is not None:
        print(f"final held-out PSNR: {result.final_psnr:.3f} dB")
    print(f"checkpoint and log written to {args.out}")
    return 0


def _save_png(path, image):
    quantized = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(quantized, mode="RGB").save(path)


def _float_dump(path_base, image):
    arr = np.ascontiguousarray(np.asarray(image, dtype="<f4"))
    with open(path_base + ".f32", "wb") as fh:
        fh.write(arr.tobytes())
    with open(path_base + ".f32.json", "w") as fh:
        json.dump({"dtype": "<f4", "shape": list(arr.shape)}, fh)


def _checkpoint_model(path):
    if not os.path.isdir(path):
        raise UsageError(f"checkpoint directory not found: {path}")
    try:
        return load_model(path)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"unreadable checkpoint at {path}: {exc}") from exc


def _render_view(model, meta, images, cameras, view, seed):
    config = TrainConfig.from_dict(meta["config"])
    train_views = meta.get("train_views") or [
        i for i in range(len(images)) if i != view
    ]
    sources = _source_views(cameras, train_views, view, config.n_s)
    fine, _ = render_image(
        model,
        cameras[view],
        [cameras[i] for i in sources],
        [images[i] for i in sources],
        config.render_options(),
        seed=seed,
    )
    return fine


def cmd_render(args):
    images, cameras, _ = _load_scene_dir(args.scene)
    model, meta = _checkpoint_model(args.checkpoint)
    if not 0 <= args.view < len(images):
        raise UsageError(f"unknown view index {args.view} (scene has {len(images)})")
    seed = args.seed if args.seed is not None else 0
    fine = _render_view(model, meta, images, cameras, args.view, seed)

    os.makedirs(args.out, exist_ok=True)
    base = os.path.join(args.out, f"view_{args.view:03d}")
    _save_png(base + ".png", fine)
    if args.float_dump:
        _float_dump(base, fine)
    value = psnr(fine, images[args.view])
    print(f"wrote {base}.png  PSNR vs ground truth: {value:.3f} dB")
    return 0


def cmd_eval(args):
    if not args.checkpoint:
        raise UsageError("at least one --checkpoint is required")
    images, cameras, _ = _load_scene_dir(args.scene)
    seed = args.seed if args.seed is not None else 0
    rows = []
    lambda_names = set()
    for path in args.checkpoint:
        model, meta = _checkpoint_model(path)
        view = meta.get("eval_view")
        if view is None:
            view = len(images) - 1
        if not 0 <= view < len(images):
            raise UsageError(f"checkpoint {path}: eval view {view} out of range")
        fine = _render_view(model, meta, images, cameras, view, seed)
        lambdas = {}
        for branch in ("coarse", "fine"):
            bank = model.banks.get(branch)
            if bank is None:
                continue
            for k, value in enumerate(bank.lambdas()):
                lambdas[f"{branch}_lambda_{k + 1}"] = float(value)
        lambda_names.update(lambdas)
        rows.append(
            {
                "checkpoint": path,
                "variant": meta["config"]["variant"],
                "view": view,
                "psnr": psnr(fine, images[view]),
                "ssim": ssim(fine, images[view]),
                "lambdas": lambdas,
            }
        )

    columns = ["checkpoint", "variant", "view", "psnr", "ssim"] + sorted(lambda_names)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            record = [row["checkpoint"], row["variant"], row["view"],
                      repr(row["psnr"]), repr(row["ssim"])]
            record += [
                repr(row["lambdas"][n]) if n in row["lambdas"] else ""
                for n in sorted(lambda_names)
            ]
            writer.writerow(record)
    for row in rows:
        print(
            f"{row['checkpoint']}: variant={row['variant']} view={row['view']} "
            f"psnr={row['psnr']:.3f} ssim={row['ssim']:.4f}"
        )
    print(f"metrics written to {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="svrender",
        description="Multi-view toy renderer: scenes, training, rendering, metrics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override seed")
    common.add_argument("--deterministic", action="store_true",
                        help="force deterministic single-order execution")
    common.add_argument("--workers", type=int, default=None, help="worker count")

    p = sub.add_parser("make-scene", parents=[common], help="generate a toy scene")
    p.add_argument("--spec", required=True, help="scene spec file (key=value)")
    p.add_argument("--out", required=True, help="output scene directory")
    p.set_defaults(func=cmd_make_scene)

    p = sub.add_parser("train", parents=[common], help="train on a scene")
    p.add_argument("--scene", required=True, help="scene directory")
    p.add_argument("--out", required=True, help="output run directory")
    p.add_argument("--config", default=None, help="training config file")
    p.add_argument("--variant", default=None, help="aggregation variant")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--ray-batch", dest="ray_batch", type=int, default=None)
    p.add_argument("--dtype", default=None, choices=("float32", "float64"))
    p.add_argument("--log-every", dest="log_every", type=int, default=None)
    p.add_argument("--eval-every", dest="eval_every", type=int, default=None)
    p.add_argument("--train-views", dest="train_views", default=None,
                   help="comma-separated training view indices")
    p.add_argument("--eval-view", dest="eval_view", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", parents=[common], help="render a view")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--scene", required=True, help="scene directory")
    p.add_argument("--view", type=int, required=True, help="view index to render")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--float-dump", dest="float_dump", action="store_true",
                   help="also write raw 32-bit float image")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", parents=[common], help="evaluate checkpoints")
    p.add_argument("--scene", required=True, help="scene directory")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--checkpoint", action="append", default=[],
                   help="checkpoint directory (repeatable)")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 1
        print(f"failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
