"""Command-line front end: ``masklift <command> [options]``.

Every option can also come from a JSON config (``--config``); precedence is
flag > config > built-in default. Each run writes ``<stem>.config.json`` beside its
main output holding the fully resolved parameters, which can be fed back with
``--config`` to reproduce the run.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import io
from .frames import asymmetric_test_pattern, find_rear_frames, make_mirrored_sequence, residual_handle
from .lifting import LiftingConfig, View, export_instances, lift_masks
from .meshing import MeshingConfig
from .metrics import segmentation_metrics, write_json
from .prompting import generate_pnp_prompts, read_detections, write_prompts
from .synth import export_scene, make_blob_scene, make_ribbon_leaf
from .traits import TraitConfig, extract_traits, write_trait_csv

log = logging.getLogger("masklift")

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


class CliError(Exception):
    """User-facing failure reported as one JSON line on stderr."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _int_list(v) -> list[int]:
    if isinstance(v, str):
        v = [x for x in v.replace("x", ",").split(",") if x]
    return [int(x) for x in v]


def _opt_float(v):
    return None if v is None or v == "none" else float(v)


def _id_pairs(v) -> list[list[int]] | None:
    if v is None or v == "none":
        return None
    if isinstance(v, str):
        v = [p.split(":") for p in v.split(",") if p]
    return [[int(a), int(b)] for a, b in v]


def _classes(v) -> dict:
    if isinstance(v, str):
        v = dict(p.split(":") for p in v.split(",") if p)
    return {str(k): str(c) for k, c in (v or {}).items()}


@dataclass(frozen=True)
class Param:
    name: str
    kind: Callable
    default: Any
    help: str = ""
    path: bool = False  # resolved to an absolute path in the echo
    required: bool = False


COMMON = [
    Param("seed", int, 0, "single source of randomness"),
    Param("threads", int, None, "worker cap (default: hardware parallelism)"),
]

LIFT_PARAMS = [
    Param("learning_rate", float, LiftingConfig.learning_rate),
    Param("lam", float, LiftingConfig.lam, "background penalty weight"),
    Param("chunk_rays", int, LiftingConfig.chunk_rays),
    Param("passes", int, LiftingConfig.passes),
    Param("samples_per_ray", int, LiftingConfig.samples_per_ray),
    Param("export_threshold", float, LiftingConfig.export_threshold),
]

MESH_PARAMS = [
    Param("voxel_size", float, MeshingConfig.voxel_size),
    Param("outlier_k", int, MeshingConfig.outlier_k),
    Param("outlier_sigma", float, MeshingConfig.outlier_sigma),
    Param("alpha", _opt_float, None, "alpha radius (default 3x voxel_size)"),
    Param("loop_iterations", int, MeshingConfig.loop_iterations),
]

TRAIT_PARAMS = [
    Param("k", int, TraitConfig.k),
    Param("theta_max", float, TraitConfig.theta_max),
    Param("epsilon", _opt_float, None, "midrib stop tolerance (default 2x mean spacing)"),
    Param("m_max", int, TraitConfig.m_max),
    Param("n", int, TraitConfig.n, "width sampling intervals"),
    Param("arap_max_iterations", int, TraitConfig.arap_max_iterations),
    Param("arap_tol", float, TraitConfig.arap_tol),
    Param("scale_cm_per_unit", float, TraitConfig.scale_cm_per_unit),
    Param("classes", _classes, {}, "instance classes, e.g. 0:leaf,1:panicle (default: auto)"),
]

COMMANDS: dict[str, list[Param]] = {
    "prompts": [
        Param("detections", str, None, "detections JSON", path=True, required=True),
        Param("out", str, "prompts.json", path=True),
        Param("grid", int, 3, "positive point spacing in pixels"),
        Param("radius", int, 1, "positive offsets per side"),
    ],
    "postprocess": [
        Param("masks", str, None, "directory of mask PNGs", path=True, required=True),
        Param("out", str, "masks_clean", "output directory", path=True),
    ],
    "rearframes": [
        Param("reference", str, None, "reference image", path=True, required=True),
        Param("frames", str, None, "directory of frames, sorted by name", path=True, required=True),
        Param("out", str, "rearframes.json", path=True),
        Param("threshold", float, 0.05),
        Param("down_width", int, 128),
    ],
    "lift": [
        Param("density", str, None, "density grid (.dgrd)", path=True, required=True),
        Param("poses", str, None, "poses JSON", path=True, required=True),
        Param("masks", str, None, "directory of frame_XXXXX_obj_YY.png", path=True, required=True),
        Param("cloud", str, None, "point cloud PLY to label", path=True, required=True),
        Param("out", str, "lift_out", "output directory", path=True),
    ] + LIFT_PARAMS,
    "traits": [
        Param("cloud", str, None, "labeled point cloud PLY", path=True, required=True),
        Param("out", str, "traits.csv", path=True),
    ] + MESH_PARAMS + TRAIT_PARAMS,
    "metrics": [
        Param("pred", str, None, "predicted labeled PLY", path=True, required=True),
        Param("truth", str, None, "ground-truth labeled PLY", path=True, required=True),
        Param("out", str, "metrics.json", path=True),
        Param("id_map", _id_pairs, None, "pred:truth pairs, e.g. 0:0,1:1 (default: greedy IoU)"),
    ],
    "synth": [
        Param("kind", str, "blobs", "blobs | ribbon | frames"),
        Param("out", str, "synth_out", "output directory", path=True),
        Param("n_objects", int, 3),
        Param("dims", _int_list, [64, 64, 64]),
        Param("n_views", int, 24),
        Param("image_size", int, 128),
        Param("length", float, 10.0),
        Param("width", float, 2.0),
        Param("bend_radius", _opt_float, None),
        Param("spacing", float, 0.05),
        Param("jitter", float, 0.0),
        Param("n_frames", int, 30),
        Param("first", int, 10),
        Param("last", int, 20),
        Param("noise", float, 2.0, "pixel noise std on the 0..255 scale"),
    ],
}

ALL_KEYS = {p.name for ps in COMMANDS.values() for p in ps} | {p.name for p in COMMON} | {"command"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="masklift", description="Lift 2D instance masks to 3D and measure organ traits.")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name, params in COMMANDS.items():
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", help="JSON config; flags override its keys")
        for prm in params + COMMON:
            p.add_argument("--" + prm.name.replace("_", "-"), dest=prm.name, default=argparse.SUPPRESS,
                           help=f"{prm.help} (default: {prm.default})".strip())
    return parser


def load_config(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError("missing_file", f"config not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError("bad_config", f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(doc, dict):
        raise CliError("bad_config", f"{path}: top level must be an object")
    unknown = sorted(set(doc) - ALL_KEYS)
    if unknown:
        raise CliError("bad_config", f"{path}: unknown keys {unknown}")
    return doc


def resolve(command: str, flags: dict, config: dict) -> dict:
    """Merge flag > config > default and coerce every value."""
    if "command" in config and config["command"] != command:
        raise CliError("bad_config", f"config is for '{config['command']}', not '{command}'")
    out: dict[str, Any] = {"command": command}
    for prm in COMMANDS[command] + COMMON:
        if prm.name in flags:
            raw = flags[prm.name]
        elif prm.name in config:
            raw = config[prm.name]
        else:
            raw = prm.default
        if raw is None:
            if prm.required:
                raise CliError("usage", f"missing required option --{prm.name.replace('_', '-')}")
            out[prm.name] = None
            continue
        try:
            val = prm.kind(raw)
        except (TypeError, ValueError) as exc:
            raise CliError("bad_config", f"{prm.name}: cannot interpret {raw!r} ({exc})") from None
        if prm.path:
            val = str(Path(val).expanduser().resolve())
        out[prm.name] = val
    return out


def echo_path(out: str) -> Path:
    p = Path(out)
    if p.suffix:
        return p.with_name(p.stem + ".config.json")
    return p / "config.json"


def write_echo(cfg: dict) -> Path:
    path = echo_path(cfg["out"])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return path


def _require(path: str, what: str, is_dir: bool = False) -> Path:
    p = Path(path)
    if not (p.is_dir() if is_dir else p.is_file()):
        raise CliError("missing_file", f"{what} not found: {path}")
    return p


def _workers(cfg) -> int:
    return cfg["threads"] or os.cpu_count() or 1


# -- commands --------------------------------------------------------------------

def cmd_prompts(cfg) -> dict:
    dets = read_detections(_require(cfg["detections"], "detections"))
    prompts = generate_pnp_prompts(dets, cfg["grid"], cfg["radius"])
    Path(cfg["out"]).parent.mkdir(parents=True, exist_ok=True)
    write_prompts(cfg["out"], prompts)
    return {"prompts": len(prompts), "out": cfg["out"]}


def cmd_postprocess(cfg) -> dict:
    src = _require(cfg["masks"], "mask directory", is_dir=True)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    files = sorted(p for p in src.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise CliError("missing_file", f"no PNG masks in {src}")

    def one(p):
        io.write_mask_png(out / p.name, residual_handle(io.read_gray_png(p)).astype(np.float64))

    with ThreadPoolExecutor(max_workers=_workers(cfg)) as pool:
        list(pool.map(one, files))
    return {"masks": len(files), "out": str(out)}


def _read_image(path) -> np.ndarray:
    return io.read_gray_png(path)


def cmd_rearframes(cfg) -> dict:
    ref = _read_image(_require(cfg["reference"], "reference image"))
    fdir = _require(cfg["frames"], "frame directory", is_dir=True)
    files = sorted(p for p in fdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise CliError("missing_file", f"no images in {fdir}")
    frames = [_read_image(p) for p in files]
    found = find_rear_frames(ref, frames, cfg["threshold"], cfg["down_width"], cfg["threads"])
    result = {"first": None, "last": None} if found is None else {"first": found[0], "last": found[1]}
    write_json(cfg["out"], result)
    print(json.dumps(result))
    return result


def _views_from_masks(mask_dir, poses, intr) -> list[View]:
    masks = io.read_mask_dir(_require(mask_dir, "mask directory", is_dir=True))
    if not masks:
        raise CliError("missing_file", f"no frame_XXXXX_obj_YY.png masks in {mask_dir}")
    n_obj = 1 + max(o for per in masks.values() for o in per)
    views = []
    for k, pose in enumerate(poses):
        stack = np.zeros((n_obj, intr.height, intr.width))
        for o, m in masks.get(k, {}).items():
            if m.shape != stack.shape[1:]:
                raise CliError("bad_input", f"mask frame {k} obj {o} has shape {m.shape}, expected {stack.shape[1:]}")
            stack[o] = m
        views.append(View(pose, stack))
    extra = sorted(set(masks) - set(range(len(poses))))
    if extra:
        log.warning("ignoring masks for %d frame(s) without a pose", len(extra))
    return views


def cmd_lift(cfg) -> dict:
    density = io.read_density_grid(_require(cfg["density"], "density grid"))
    _, poses, intr = io.read_poses_json(_require(cfg["poses"], "poses file"))
    views = _views_from_masks(cfg["masks"], poses, intr)
    cloud = io.read_cloud_ply(_require(cfg["cloud"], "point cloud"))
    lcfg = LiftingConfig(**{p.name: cfg[p.name] for p in LIFT_PARAMS}, seed=cfg["seed"])
    t0 = time.perf_counter()
    field = lift_masks(density, views, intr, lcfg)
    elapsed = time.perf_counter() - t0
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    io.write_mask_field(out / "mask_field.mfld", field)
    labeled = export_instances(field, cloud, lcfg.export_threshold)
    io.write_cloud_ply(out / "labeled.ply", labeled)
    counts = {int(i): int(c) for i, c in zip(*np.unique(labeled.instance_ids, return_counts=True))}
    log.info("lifted %d objects over %d views in %.1f s", field.n_objects, len(views), elapsed)
    return {"objects": field.n_objects, "label_counts": counts, "out": str(out)}


def cmd_traits(cfg) -> dict:
    cloud = io.read_cloud_ply(_require(cfg["cloud"], "labeled point cloud"))
    mcfg = MeshingConfig(**{p.name: cfg[p.name] for p in MESH_PARAMS})
    tcfg = TraitConfig(**{p.name: cfg[p.name] for p in TRAIT_PARAMS if p.name != "classes"})
    ids = [int(i) for i in np.unique(cloud.instance_ids) if i >= 0]
    if not ids:
        raise CliError("bad_input", "cloud has no labeled instances")
    # Shared grid for all instances, offset half a voxel like the downsampling default.
    anchor = cloud.points.min(axis=0) - 0.5 * cfg["voxel_size"]

    def one(i):
        return extract_traits(i, cloud.instance(i), mcfg, tcfg, cfg["classes"].get(str(i)), anchor)

    with ThreadPoolExecutor(max_workers=_workers(cfg)) as pool:
        reports = list(pool.map(one, ids))
    Path(cfg["out"]).parent.mkdir(parents=True, exist_ok=True)
    write_trait_csv(cfg["out"], reports)
    return {"instances": len(reports), "out": cfg["out"]}


def cmd_metrics(cfg) -> dict:
    pred = io.read_cloud_ply(_require(cfg["pred"], "prediction cloud"))
    truth = io.read_cloud_ply(_require(cfg["truth"], "truth cloud"))
    if pred.instance_ids is None or truth.instance_ids is None:
        raise CliError("bad_input", "both clouds need instance_id labels")
    result = segmentation_metrics(pred, truth, cfg["id_map"])
    write_json(cfg["out"], result)
    print(json.dumps({"miou": result["miou"], "matcher": result["matcher"]}))
    return {"miou": result["miou"]}


def cmd_synth(cfg) -> dict:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    kind = cfg["kind"]
    if kind == "blobs":
        if len(cfg["dims"]) != 3:
            raise CliError("bad_config", "dims needs three integers")
        scene = make_blob_scene(cfg["n_objects"], tuple(cfg["dims"]), cfg["n_views"], cfg["seed"], cfg["image_size"])
        return {"paths": export_scene(scene, out)}
    if kind == "ribbon":
        leaf = make_ribbon_leaf(cfg["length"], cfg["width"], cfg["bend_radius"], cfg["spacing"], cfg["seed"],
                                cfg["jitter"])
        io.write_cloud_ply(out / "ribbon.ply", leaf.cloud)
        io.write_mesh_ply(out / "ribbon_mesh.ply", leaf.mesh)
        (out / "truth.json").write_text(json.dumps(leaf.truth, indent=2) + "\n")
        return {"truth": leaf.truth}
    if kind == "frames":
        ref = asymmetric_test_pattern(seed=cfg["seed"])
        seq = make_mirrored_sequence(ref, cfg["n_frames"], cfg["first"], cfg["last"], cfg["noise"], cfg["seed"])
        (out / "frames").mkdir(exist_ok=True)
        io.write_mask_png(out / "reference.png", ref / 255.0)
        for k, f in enumerate(seq):
            io.write_mask_png(out / "frames" / f"frame_{k:05d}.png", f / 255.0)
        return {"frames": len(seq)}
    raise CliError("bad_config", f"unknown synth kind '{kind}' (expected blobs, ribbon or frames)")


HANDLERS = {
    "prompts": cmd_prompts,
    "postprocess": cmd_postprocess,
    "rearframes": cmd_rearframes,
    "lift": cmd_lift,
    "traits": cmd_traits,
    "metrics": cmd_metrics,
    "synth": cmd_synth,
}


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        raise CliError("usage", f"a command is required: {', '.join(COMMANDS)}")
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "log_level")}
    config = load_config(args.config) if args.config else {}
    cfg = resolve(args.command, flags, config)
    if cfg["threads"] is not None and cfg["threads"] < 1:
        raise CliError("bad_config", "threads must be >= 1")
    summary = HANDLERS[args.command](cfg)
    echo = write_echo(cfg)
    log.info("resolved config written to %s", echo)
    log.info("%s done: %s", args.command, json.dumps(summary, default=str))
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except CliError as exc:
        print(json.dumps({"error": exc.kind, "message": str(exc)}), file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
