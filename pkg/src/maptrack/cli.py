"""Command-line entry point: render, dataset, align, track and bench.

Configuration is an INI file with the sections ``[camera]``, ``[map]``,
``[layer <label>]`` (one per map layer), ``[align]``, ``[dataset]`` and
``[run]``. Relative paths are resolved against the config file's directory.
Command-line flags override config values.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import CameraModel
from .eval import (
    PAIR_MODES,
    VARIANTS,
    PerturbationConfig,
    angular_error,
    epe,
    generate_dataset,
    load_manifest,
    overlay,
    resolve_variants,
    run_benchmark,
    translational_error,
)
from .geodata import MapLayer, MapStack, load_elevation, load_orthoimage
from .features import ENCODERS
from .iclk import WEIGHTINGS, AlignConfig, align
from .renderer import build_mesh, load_depth, nadir_pose, render_view, save_depth
from .se3 import PoseSE3
from .tracker import initialize, track_sequence

logger = logging.getLogger("maptrack")


class ConfigError(ValueError):
    pass


_CAMERA_KEYS = ("fx", "fy", "cx", "cy", "width", "height", "k1", "k2", "p1", "p2", "k3")
_LAYER_KEYS = ("image", "world", "elevation")
_ALIGN_KEYS = ("max_iterations", "damping", "stop_threshold", "weighting", "huber_c",
               "weight_file", "encoder", "border_margin", "converge_tol")
_DATASET_KEYS = ("n_samples", "altitude_min", "altitude_max", "sigma_t", "sigma_r",
                 "pair_mode", "tilt_sigma")
_RUN_KEYS = ("seed", "out_dir", "workers")
_MAP_KEYS = ("latest",)


@dataclass
class RunConfig:
    cam: CameraModel | None = None
    layers: list = field(default_factory=list)   # (label, image, world, elevation)
    latest: str | None = None
    align: AlignConfig = field(default_factory=AlignConfig)
    perturbation: PerturbationConfig = field(default_factory=PerturbationConfig)
    n_samples: int = 10
    altitude_range: tuple = (100.0, 150.0)
    pair_mode: str = "all"
    tilt_sigma: float = 0.02
    seed: int = 0
    out_dir: Path = Path("out")
    workers: int | None = None

    def load_maps(self) -> MapStack:
        if not self.layers:
            raise ConfigError("config defines no [layer <label>] sections")
        layers = []
        for label, image, world, elevation in self.layers:
            ortho = load_orthoimage(image, world, label=label)
            layers.append(MapLayer(label, ortho, load_elevation(elevation)))
        return MapStack(tuple(layers), self.latest)

    def camera(self) -> CameraModel:
        if self.cam is None:
            raise ConfigError("config has no [camera] section")
        return self.cam


def _floats(text: str, n: int, key: str):
    vals = [float(v) for v in text.replace(",", " ").split()]
    if len(vals) == 1:
        vals = vals * n
    if len(vals) != n:
        raise ConfigError(f"{key}: expected {n} numbers")
    return tuple(vals)


def _check_keys(section, allowed, name):
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"[{name}]: unknown key(s) {', '.join(unknown)}; valid: {', '.join(allowed)}")


def _existing(base: Path, value: str, what: str) -> Path:
    p = Path(value)
    if not p.is_absolute():
        p = base / p
    if not p.exists():
        raise ConfigError(f"{what}: file not found: {p}")
    return p


def load_config(path) -> RunConfig:
    """Parse and validate a run configuration; unknown keys are errors."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    base = path.parent
    cfg = RunConfig()
    try:
        for name in parser.sections():
            sec = parser[name]
            if name == "camera":
                _check_keys(sec, _CAMERA_KEYS, name)
                for key in ("fx", "fy", "cx", "cy", "width", "height"):
                    if key not in sec:
                        raise ConfigError(f"[camera]: missing key {key}")
                cfg.cam = CameraModel(
                    sec.getfloat("fx"), sec.getfloat("fy"), sec.getfloat("cx"), sec.getfloat("cy"),
                    sec.getint("width"), sec.getint("height"),
                    tuple(sec.getfloat(k, 0.0) for k in ("k1", "k2", "p1", "p2", "k3")),
                )
            elif name.startswith("layer "):
                label = name[len("layer "):].strip()
                _check_keys(sec, _LAYER_KEYS, name)
                if "image" not in sec or "elevation" not in sec:
                    raise ConfigError(f"[{name}]: needs image and elevation")
                image = _existing(base, sec["image"], f"[{name}] image")
                world = _existing(base, sec["world"], f"[{name}] world") if "world" in sec else None
                elevation = _existing(base, sec["elevation"], f"[{name}] elevation")
                cfg.layers.append((label, image, world, elevation))
            elif name == "map":
                _check_keys(sec, _MAP_KEYS, name)
                cfg.latest = sec.get("latest")
            elif name == "align":
                _check_keys(sec, _ALIGN_KEYS, name)
                kw = {}
                for key in ("max_iterations", "border_margin"):
                    if key in sec:
                        kw[key] = sec.getint(key)
                for key in ("damping", "stop_threshold", "huber_c", "converge_tol"):
                    if key in sec:
                        kw[key] = sec.getfloat(key)
                for key in ("weighting", "encoder"):
                    if key in sec:
                        kw[key] = sec[key]
                if "weight_file" in sec:
                    kw["weight_file"] = str(_existing(base, sec["weight_file"], "[align] weight_file"))
                cfg.align = AlignConfig(**kw)
            elif name == "dataset":
                _check_keys(sec, _DATASET_KEYS, name)
                cfg.n_samples = sec.getint("n_samples", cfg.n_samples)
                cfg.altitude_range = (sec.getfloat("altitude_min", cfg.altitude_range[0]),
                                      sec.getfloat("altitude_max", cfg.altitude_range[1]))
                pert = {}
                if "sigma_t" in sec:
                    pert["sigma_t"] = _floats(sec["sigma_t"], 3, "sigma_t")
                if "sigma_r" in sec:
                    pert["sigma_r"] = _floats(sec["sigma_r"], 3, "sigma_r")
                cfg.perturbation = replace(cfg.perturbation, **pert)
                cfg.pair_mode = sec.get("pair_mode", cfg.pair_mode)
                cfg.tilt_sigma = sec.getfloat("tilt_sigma", cfg.tilt_sigma)
            elif name == "run":
                _check_keys(sec, _RUN_KEYS, name)
                cfg.seed = sec.getint("seed", cfg.seed)
                if "out_dir" in sec:
                    out = Path(sec["out_dir"])
                    cfg.out_dir = out if out.is_absolute() else base / out
                if "workers" in sec:
                    cfg.workers = sec.getint("workers")
            else:
                raise ConfigError(f"unknown section [{name}]")
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path}: {exc}") from exc
    cfg.perturbation = replace(cfg.perturbation, seed=cfg.seed)
    return cfg


# ---------------------------------------------------------------------------
# Argument helpers
# ---------------------------------------------------------------------------


def _parse_pose(text: str) -> PoseSE3:
    path = Path(text)
    if path.exists():
        text = path.read_text()
    try:
        return PoseSE3.from_text(text)
    except ValueError as exc:
        raise ConfigError(f"invalid pose {text!r}: {exc}") from exc


def _pose_from_args(args, required: bool = True) -> PoseSE3 | None:
    if getattr(args, "nadir", None) is not None:
        vals = args.nadir
        if len(vals) not in (3, 4):
            raise ConfigError("--nadir takes EASTING NORTHING HEIGHT [YAW]")
        return nadir_pose(*vals)
    if getattr(args, "pose", None) is not None:
        return _parse_pose(args.pose)
    if required:
        raise ConfigError("a pose is required (--pose or --nadir)")
    return None


def _load_rgb(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"file not found: {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def _load_depth_checked(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"file not found: {path}")
    return load_depth(path)


def _workers(args, cfg: RunConfig):
    return args.workers if args.workers is not None else cfg.workers


def _align_config(args, cfg: RunConfig) -> AlignConfig:
    kw = {}
    if getattr(args, "iterations", None) is not None:
        kw["max_iterations"] = args.iterations
    if getattr(args, "weighting", None) is not None:
        kw["weighting"] = args.weighting
    if getattr(args, "encoder", None) is not None:
        kw["encoder"] = args.encoder
    if getattr(args, "weight_file", None) is not None:
        kw["weight_file"] = args.weight_file
    return replace(cfg.align, **kw)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_render(args) -> int:
    cfg = load_config(args.config)
    cam = cfg.camera()
    maps = cfg.load_maps()
    if args.layer and args.layer not in maps.labels:
        raise ConfigError(f"unknown layer {args.layer!r}; valid: {', '.join(maps.labels)}")
    layer = maps.layer(args.layer) if args.layer else maps.most_recent()
    pose = _pose_from_args(args)
    from .renderer import check_pose_over_extent

    check_pose_over_extent(pose, layer.ortho.extent(), layer.elevation)
    mesh = build_mesh(layer.ortho, layer.elevation)
    out = render_view(mesh, pose, cam, workers=_workers(args, cfg))
    prefix = Path(args.output)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    image_path = prefix.with_suffix(".png")
    depth_path = prefix.with_suffix(".dpth")
    Image.fromarray(out.image).save(image_path)
    save_depth(depth_path, out.depth)
    print(f"image {image_path}")
    print(f"depth {depth_path}")
    print(f"valid_fraction {out.valid_fraction:.6f}")
    return 0


def cmd_dataset(args) -> int:
    cfg = load_config(args.config)
    n = args.n if args.n is not None else cfg.n_samples
    if n < 1:
        raise ConfigError("dataset size must be at least 1")
    seed = args.seed if args.seed is not None else cfg.seed
    out_dir = Path(args.out_dir) if args.out_dir else cfg.out_dir
    pair_mode = args.pair_mode or cfg.pair_mode
    manifest = generate_dataset(
        cfg.load_maps(), n, cfg.altitude_range, replace(cfg.perturbation, seed=seed),
        cfg.camera(), out_dir, pair_mode=pair_mode, tilt_sigma=cfg.tilt_sigma,
        workers=_workers(args, cfg),
    )
    print(f"manifest {manifest.path}")
    print(f"samples {len(manifest)}")
    return 0


def _error_line(name, depth, cam, T, T_gt):
    return (f"{name}_epe {epe(depth, cam, T, T_gt)!r}\n"
            f"{name}_angular {angular_error(T, T_gt)!r}\n"
            f"{name}_translational {translational_error(T, T_gt)!r}")


def cmd_align(args) -> int:
    cfg = load_config(args.config)
    cam = cfg.camera().undistorted()
    ref = _load_rgb(args.ref_image)
    depth = _load_depth_checked(args.ref_depth)
    query = _load_rgb(args.query_image)
    init = _parse_pose(args.init) if args.init else PoseSE3.identity()
    config = _align_config(args, cfg)
    result = align(ref, depth, query, cam, init, config)
    lines = [
        f"converged {int(result.converged)}",
        f"iterations {len(result.trace)}",
        f"valid_pixels {result.valid_pixels}",
        f"degenerate_levels {' '.join(map(str, result.degenerate_levels)) or '-'}",
        f"pose {result.pose.to_text()}",
    ]
    if result.message:
        lines.append(f"message {result.message}")
    for e in result.trace:
        lines.append(f"trace {e.level} {e.iteration} {e.energy!r} {e.step_norm!r}")
    if args.gt:
        gt = _parse_pose(args.gt)
        lines.append(_error_line("init", depth, cam, init, gt))
        lines.append(_error_line("final", depth, cam, result.pose, gt))
    text = "\n".join(lines) + "\n"
    if args.report:
        Path(args.report).write_text(text)
    print(text, end="")
    if args.overlay:
        Image.fromarray(overlay(ref, query, result.pose, depth, cam)).save(args.overlay)
        print(f"overlay {args.overlay}")
    return 0


def cmd_track(args) -> int:
    cfg = load_config(args.config)
    cam = cfg.camera()
    frames_dir = Path(args.frames)
    if not frames_dir.is_dir():
        raise ConfigError(f"frames directory not found: {frames_dir}")
    paths = sorted(p for p in frames_dir.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".tif"))
    if not paths:
        raise ConfigError(f"no frame images in {frames_dir}")
    gt = None
    if args.gt:
        gt_path = Path(args.gt)
        if not gt_path.exists():
            raise ConfigError(f"file not found: {gt_path}")
        gt = [PoseSE3.from_text(line) for line in gt_path.read_text().splitlines()
              if line.strip() and not line.startswith("#")]
    state = initialize(_pose_from_args(args), cfg.load_maps(), cam, _align_config(args, cfg),
                       workers=_workers(args, cfg))
    _, report = track_sequence(state, [_load_rgb(p) for p in paths], gt)
    text = report.to_text()
    if args.output:
        Path(args.output).write_text(text)
    print(text, end="")
    return 0 if all(f.converged for f in report.frames) else 1


def cmd_bench(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    names = [v for v in args.variants.split(",") if v]
    variants = resolve_variants(names)
    manifest = load_manifest(args.manifest)
    out_dir = Path(args.out_dir) if args.out_dir else cfg.out_dir
    report = run_benchmark(manifest, variants, out_dir, workers=_workers(args, cfg))
    print(report.to_text(), end="")
    total = len(report.results)
    failed = sum(r.failed for r in report.results)
    print(f"failures {failed}/{total}")
    return 1 if failed == total else 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="maptrack", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="INI run configuration")
        sp.add_argument("--workers", type=int, default=None, help="cap on worker threads/processes")

    def pose_args(sp):
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--pose", help="12 numbers (row-major 3x4 camera-to-world) or a file holding them")
        g.add_argument("--nadir", type=float, nargs="+", metavar="V",
                       help="EASTING NORTHING HEIGHT [YAW]: straight-down camera")

    def align_args(sp):
        sp.add_argument("--iterations", type=int)
        sp.add_argument("--weighting", choices=WEIGHTINGS)
        sp.add_argument("--encoder", choices=ENCODERS)
        sp.add_argument("--weight-file")

    sp = sub.add_parser("render", help="render texture and depth at a pose")
    common(sp)
    pose_args(sp)
    sp.add_argument("--layer", help="map layer label (default: most recent)")
    sp.add_argument("-o", "--output", required=True, help="output prefix; writes .png and .dpth")
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("dataset", help="generate a synthetic reference/query dataset")
    common(sp)
    sp.add_argument("-n", "--n", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--pair-mode", choices=PAIR_MODES)
    sp.add_argument("--out-dir")
    sp.set_defaults(func=cmd_dataset)

    sp = sub.add_parser("align", help="align one query image to a rendered reference")
    common(sp)
    align_args(sp)
    sp.add_argument("--ref-image", required=True)
    sp.add_argument("--ref-depth", required=True)
    sp.add_argument("--query-image", required=True)
    sp.add_argument("--init", help="initial T^{C_ref}_{C_1} (12 numbers or file)")
    sp.add_argument("--gt", help="ground-truth T^{C_ref}_{C_1} for error reporting")
    sp.add_argument("--overlay", help="write an alignment overlay PNG")
    sp.add_argument("--report", help="also write the report to this file")
    sp.set_defaults(func=cmd_align)

    sp = sub.add_parser("track", help="track a directory of frames against the map")
    common(sp)
    pose_args(sp)
    align_args(sp)
    sp.add_argument("--frames", required=True, help="directory of frames (lexicographic order)")
    sp.add_argument("--gt", help="ground-truth poses, one 12-number line per frame")
    sp.add_argument("-o", "--output", help="trajectory report path")
    sp.set_defaults(func=cmd_track)

    sp = sub.add_parser("bench", help="benchmark alignment variants on a dataset manifest")
    common(sp, config_required=False)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--variants", default="no-nn-20,no-nn-50,huber-20",
                    help=f"comma-separated subset of: {', '.join(VARIANTS)}")
    sp.add_argument("--out-dir")
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers is not None and args.workers < 1:
        print("error: --workers must be at least 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
