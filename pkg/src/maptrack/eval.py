"""Error metrics, synthetic datasets, overlays and the benchmark harness."""

from __future__ import annotations

import csv
import logging
import math
import os
import statistics
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import se3
from .camera import CameraModel, unproject
from .geodata import MapStack, sample_elevation
from .iclk import AlignConfig, align, warp
from .features import to_gray
from .renderer import build_mesh, load_depth, render, save_depth, tilted_pose
from .se3 import PoseSE3

logger = logging.getLogger(__name__)

METRICS = ("epe", "angular", "translational")


class DatasetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _shifted_mean(values: np.ndarray) -> float:
    # exact for constant series, unlike sum / n
    d0 = values[0]
    return float(d0 + np.mean(values - d0))


def _norm3(v: np.ndarray) -> np.ndarray:
    # fixed evaluation order, so a vector and a stack of copies agree bit for bit
    v = np.asarray(v, dtype=float)
    return np.sqrt(v[..., 0] * v[..., 0] + v[..., 1] * v[..., 1] + v[..., 2] * v[..., 2])


def reference_points(ref_depth, cam: CameraModel) -> np.ndarray:
    """Back-projected (N, 3) points of every valid reference pixel."""
    d = np.asarray(ref_depth, dtype=float)
    vs, us = np.nonzero(np.isfinite(d) & (d > 0))
    if vs.size == 0:
        raise ValueError("no valid depth pixels")
    return unproject(cam, us.astype(float), vs.astype(float), d[vs, us])


def epe(ref_depth, cam: CameraModel, T_est: PoseSE3, T_gt: PoseSE3) -> float:
    """Mean 3D end-point error of the reference points under two transforms."""
    p = reference_points(ref_depth, cam)
    diff = p @ (T_est.rotation - T_gt.rotation).T + (T_est.translation - T_gt.translation)
    return _shifted_mean(_norm3(diff))


def angular_error(T_est: PoseSE3, T_gt: PoseSE3) -> float:
    """Angle of the relative rotation in radians."""
    return se3.rotation_angle(T_est, T_gt)


def translational_error(T_est: PoseSE3, T_gt: PoseSE3) -> float:
    return float(_norm3(T_est.translation - T_gt.translation))


@dataclass(frozen=True)
class ErrorStats:
    mean: float
    stdev: float
    median: float
    min: float
    max: float
    series: tuple = field(default=(), repr=False)

    @property
    def n(self) -> int:
        return len(self.series)


def stats(series) -> ErrorStats:
    """Summary with the n-1 standard deviation and the lower-middle median."""
    values = np.asarray(list(series), dtype=float)
    if values.size == 0:
        raise ValueError("cannot summarize an empty series")
    ordered = np.sort(values)
    # statistics accumulates exactly: constant series give stdev 0, order does not matter
    series = values.tolist()
    stdev = float(statistics.stdev(series)) if values.size > 1 else 0.0
    return ErrorStats(
        mean=float(statistics.mean(series)),
        stdev=stdev,
        median=float(ordered[(values.size - 1) // 2]),
        min=float(ordered[0]),
        max=float(ordered[-1]),
        series=tuple(values.tolist()),
    )


# ---------------------------------------------------------------------------
# Random streams and perturbations
# ---------------------------------------------------------------------------


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named consumer of the global seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


@dataclass(frozen=True)
class PerturbationConfig:
    """Per-axis standard deviations of the initial misalignment."""

    sigma_t: tuple = (10.0, 10.0, 2.5)
    sigma_r: tuple = (0.04, 0.04, 0.04)
    seed: int = 0

    def __post_init__(self):
        if len(self.sigma_t) != 3 or len(self.sigma_r) != 3:
            raise ValueError("sigma_t and sigma_r need three components each")
        if min(self.sigma_t) < 0 or min(self.sigma_r) < 0:
            raise ValueError("perturbation sigmas must be non-negative")


def sample_perturbation(config: PerturbationConfig, rng: np.random.Generator) -> PoseSE3:
    t = rng.normal(0.0, 1.0, 3) * np.asarray(config.sigma_t, dtype=float)
    phi = rng.normal(0.0, 1.0, 3) * np.asarray(config.sigma_r, dtype=float)
    return PoseSE3(se3.so3_exp(phi), t)


# ---------------------------------------------------------------------------
# Dataset manifest
# ---------------------------------------------------------------------------

PAIR_MODES = ("all", "same", "cross")
MANIFEST_NAME = "manifest.txt"


@dataclass(frozen=True)
class DatasetSample:
    """One reference/query pair; ``pose`` is the ground-truth ``T^{C_ref}_{C_1}``."""

    sample_id: str
    ref_image: Path
    ref_depth: Path
    query_image: Path
    pose: PoseSE3
    ref_label: str
    query_label: str


@dataclass(frozen=True)
class Manifest:
    cam: CameraModel
    samples: tuple
    path: Path | None = None

    def __len__(self):
        return len(self.samples)


def _camera_header(cam: CameraModel) -> str:
    vals = [cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height, *cam.dist]
    return "# camera " + " ".join(repr(float(v)) if not isinstance(v, int) else str(v) for v in vals)


def save_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    root = path.parent
    lines = [_camera_header(manifest.cam),
             "# id ref_image ref_depth query_image ref_label query_label pose(12)"]
    for s in manifest.samples:
        rel = [os.path.relpath(p, root) for p in (s.ref_image, s.ref_depth, s.query_image)]
        lines.append(" ".join([s.sample_id, *rel, s.ref_label, s.query_label, s.pose.to_text()]))
    path.write_text("\n".join(lines) + "\n")


def load_manifest(path, check_files: bool = True) -> Manifest:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DatasetError(f"cannot read manifest {path}: {exc}") from exc
    cam = None
    samples = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "#":
            if len(parts) > 1 and parts[1] == "camera":
                v = parts[2:]
                if len(v) != 11:
                    raise DatasetError(f"{path}:{lineno}: camera header needs 11 values")
                cam = CameraModel(float(v[0]), float(v[1]), float(v[2]), float(v[3]),
                                  int(v[4]), int(v[5]), tuple(float(x) for x in v[6:]))
            continue
        if len(parts) != 18:
            raise DatasetError(f"{path}:{lineno}: expected 18 fields, found {len(parts)}")
        sid, a, b, c, la, lb = parts[:6]
        files = [path.parent / p for p in (a, b, c)]
        if check_files:
            for f in files:
                if not f.exists():
                    raise DatasetError(f"{path}:{lineno}: missing file {f}")
        try:
            pose = PoseSE3.from_values([float(x) for x in parts[6:]])
        except ValueError as exc:
            raise DatasetError(f"{path}:{lineno}: bad pose: {exc}") from exc
        samples.append(DatasetSample(sid, *files, pose, la, lb))
    if cam is None:
        raise DatasetError(f"{path}: missing '# camera' header")
    return Manifest(cam, tuple(samples), path)


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------


def layer_pairs(labels, mode: str = "all"):
    if mode not in PAIR_MODES:
        raise ValueError(f"unknown pair mode {mode!r}; valid: {', '.join(PAIR_MODES)}")
    pairs = [(a, b) for a in labels for b in labels
             if mode == "all" or (mode == "same") == (a == b)]
    if not pairs:
        raise DatasetError(f"pair mode {mode!r} yields no pairs for layers {list(labels)}")
    return pairs


def generate_dataset(maps: MapStack, n_samples: int, altitude_range, config: PerturbationConfig,
                     cam: CameraModel, out_dir, pair_mode: str = "all", tilt_sigma: float = 0.02,
                     max_retries: int = 100, workers: int | None = None) -> Manifest:
    """Render reference/query pairs at random nadir-biased poses over the map.

    Each location is used for every layer pair of ``pair_mode``; a location
    whose reference or query view leaves the map is redrawn. Images are
    pinhole renders of ``cam``; ``altitude_range`` is height above ground.
    """
    if n_samples < 1:
        raise DatasetError("n_samples must be at least 1")
    lo, hi = float(altitude_range[0]), float(altitude_range[1])
    if not 0 < lo <= hi:
        raise DatasetError(f"invalid altitude range {altitude_range}")
    cam = cam.undistorted()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pairs = layer_pairs(maps.labels, pair_mode)
    n_locations = math.ceil(n_samples / len(pairs))
    meshes = {}
    for label in sorted({x for p in pairs for x in p}):
        layer = maps.layer(label)
        meshes[label] = build_mesh(layer.ortho, layer.elevation)
    elev = maps.layer(pairs[0][0]).elevation
    (e0, e1), (n0, n1) = maps.layer(pairs[0][0]).ortho.extent()

    loc_rng = substream(config.seed, "dataset.locations")
    pert_rng = substream(config.seed, "dataset.perturbation")
    samples = []
    for loc in range(n_locations):
        for attempt in range(max_retries + 1):
            if attempt == max_retries:
                raise DatasetError(
                    f"location {loc}: no pose with the footprint inside the map after {max_retries} retries"
                )
            e = loc_rng.uniform(e0, e1)
            n = loc_rng.uniform(n0, n1)
            yaw = loc_rng.uniform(0.0, 2.0 * np.pi)
            pitch, roll = loc_rng.normal(0.0, tilt_sigma, 2)
            h = loc_rng.uniform(lo, hi)
            T_gt = sample_perturbation(config, pert_rng)
            try:
                ground = float(sample_elevation(elev, e, n))
            except ValueError:
                continue
            ref_pose = tilted_pose(e, n, ground + h, yaw, pitch, roll)
            query_pose = se3.compose(ref_pose, T_gt)
            views = {}
            ok = True
            for a, b in pairs:
                for label, pose in ((a, ref_pose), (b, query_pose)):
                    key = (label, pose is ref_pose)
                    if key not in views:
                        views[key] = render(meshes[label], pose, cam, workers)
                        if not views[key].mask.all():
                            ok = False
                            break
                if not ok:
                    break
            if ok:
                break
        for a, b in pairs:
            if len(samples) == n_samples:
                break
            sid = f"{len(samples):05d}"
            ref, query = views[(a, True)], views[(b, False)]
            ref_png = out_dir / f"{sid}_ref_{a}.png"
            ref_dpt = out_dir / f"{sid}_ref_{a}.dpth"
            qry_png = out_dir / f"{sid}_query_{b}.png"
            Image.fromarray(ref.image).save(ref_png)
            save_depth(ref_dpt, ref.depth)
            Image.fromarray(query.image).save(qry_png)
            samples.append(DatasetSample(sid, ref_png, ref_dpt, qry_png, T_gt, a, b))
    manifest = Manifest(cam, tuple(samples), out_dir / MANIFEST_NAME)
    save_manifest(manifest, manifest.path)
    return manifest


# ---------------------------------------------------------------------------
# Overlay
# ---------------------------------------------------------------------------


def overlay(image0, image1, T: PoseSE3, ref_depth, cam: CameraModel) -> np.ndarray:
    """Green = image0, magenta = image1 warped into image0's view by ``T``.

    Aligned structure appears gray; pixels without a valid warp are black.
    """
    g0 = to_gray(image0)
    g1 = to_gray(image1)
    if g0.shape != g1.shape or g0.shape != np.shape(ref_depth):
        raise ValueError("overlay inputs must share dimensions")
    warped, mask = warp(g1, T, np.asarray(ref_depth, dtype=float), cam)
    out = np.zeros(g0.shape + (3,), dtype=np.uint8)
    w = np.clip(np.floor(warped[0] + 0.5), 0, 255).astype(np.uint8)
    g = np.clip(np.floor(g0 + 0.5), 0, 255).astype(np.uint8)
    out[mask, 0] = w[mask]
    out[mask, 1] = g[mask]
    out[mask, 2] = w[mask]
    return out


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------

VARIANTS = {
    "no-nn-20": AlignConfig(max_iterations=20, weighting="uniform"),
    "no-nn-50": AlignConfig(max_iterations=50, weighting="uniform"),
    "huber-20": AlignConfig(max_iterations=20, weighting="huber"),
    "huber-50": AlignConfig(max_iterations=50, weighting="huber"),
}


def resolve_variants(names) -> dict:
    unknown = [n for n in names if n not in VARIANTS]
    if unknown:
        raise ValueError(f"unknown variant(s) {', '.join(unknown)}; valid: {', '.join(VARIANTS)}")
    if not names:
        raise ValueError(f"no variants given; valid: {', '.join(VARIANTS)}")
    return {n: VARIANTS[n] for n in names}


@dataclass
class SampleResult:
    sample_id: str
    variant: str
    init: dict | None = None
    final: dict | None = None
    converged: bool = False
    runtime_ms: float = float("nan")
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


def _load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def _metrics(depth, cam, T, T_gt):
    return {"epe": epe(depth, cam, T, T_gt), "angular": angular_error(T, T_gt),
            "translational": translational_error(T, T_gt)}


def _bench_sample(args):
    sample, cam, variants = args
    out = []
    try:
        ref = _load_image(sample.ref_image)
        depth = load_depth(sample.ref_depth)
        query = _load_image(sample.query_image)
        init = _metrics(depth, cam, PoseSE3.identity(), sample.pose)
    except Exception as exc:  # recorded as a failed row
        return [SampleResult(sample.sample_id, name, error=f"{type(exc).__name__}: {exc}")
                for name in variants]
    for name, config in variants.items():
        try:
            t0 = time.perf_counter()
            res = align(ref, depth, query, cam, PoseSE3.identity(), config)
            ms = 1000.0 * (time.perf_counter() - t0)
            out.append(SampleResult(sample.sample_id, name, init, _metrics(depth, cam, res.pose, sample.pose),
                                    res.converged, ms))
        except Exception as exc:
            out.append(SampleResult(sample.sample_id, name, init, error=f"{type(exc).__name__}: {exc}"))
    return out


@dataclass
class BenchmarkReport:
    variants: list
    results: list   # SampleResult, manifest order then variant order
    tables: dict    # (variant, metric) -> {"init": ErrorStats, "final": ErrorStats}
    runtime: dict   # variant -> ErrorStats (milliseconds)
    failures: dict  # variant -> count

    def to_text(self) -> str:
        lines = []
        head = f"{'':8s}{'mean':>12s}{'stdev':>12s}{'median':>12s}{'min':>12s}{'max':>12s}"
        for (variant, metric), rows in self.tables.items():
            unit = "rad" if metric == "angular" else "m"
            lines.append(f"{variant} / {metric} [{unit}]  n={rows['final'].n} failures={self.failures[variant]}")
            lines.append(head)
            for stage in ("init", "final"):
                s = rows[stage]
                lines.append(f"{stage:8s}" + "".join(f"{v:12.4f}" for v in (s.mean, s.stdev, s.median, s.min, s.max)))
            lines.append("")
        lines.append("runtime [ms]")
        lines.append(f"{'variant':12s}" + head[8:])
        for variant, s in self.runtime.items():
            lines.append(f"{variant:12s}" + "".join(f"{v:12.2f}" for v in (s.mean, s.stdev, s.median, s.min, s.max)))
        return "\n".join(lines) + "\n"


def run_benchmark(manifest: Manifest, variants, out_dir=None, workers: int | None = None) -> BenchmarkReport:
    """Align every sample with every variant and summarize the errors.

    ``variants`` is a list of names from VARIANTS or a name -> AlignConfig
    mapping. Results are gathered in manifest order whatever ``workers`` is.
    """
    if not isinstance(variants, dict):
        variants = resolve_variants(list(variants))
    if not manifest.samples:
        raise DatasetError("manifest has no samples")
    tasks = [(s, manifest.cam, variants) for s in manifest.samples]
    workers = os.cpu_count() if workers is None else max(1, int(workers))
    if workers == 1 or len(tasks) == 1:
        per_sample = [_bench_sample(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
            per_sample = list(pool.map(_bench_sample, tasks))
    results = [r for rows in per_sample for r in rows]

    tables, runtime, failures = {}, {}, {}
    for name in variants:
        rows = [r for r in results if r.variant == name]
        ok = [r for r in rows if not r.failed]
        failures[name] = len(rows) - len(ok)
        if not ok:
            continue
        for metric in METRICS:
            tables[(name, metric)] = {
                "init": stats(r.init[metric] for r in ok),
                "final": stats(r.final[metric] for r in ok),
            }
        runtime[name] = stats(r.runtime_ms for r in ok)
    report = BenchmarkReport(list(variants), results, tables, runtime, failures)
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def write_report(report: BenchmarkReport, out_dir) -> None:
    """stats.csv and samples.csv are deterministic; runtime.csv holds wall-clock data."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "stats.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "metric", "mean", "stdev", "median", "min", "max", "n", "failures"])
        for (variant, metric), rows in report.tables.items():
            for stage in ("init", "final"):
                s = rows[stage]
                w.writerow([variant, f"{metric}_{stage}", repr(s.mean), repr(s.stdev), repr(s.median),
                            repr(s.min), repr(s.max), s.n, report.failures[variant]])
    with open(out_dir / "runtime.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "mean", "stdev", "median", "min", "max", "n"])
        for variant, s in report.runtime.items():
            w.writerow([variant, f"{s.mean:.3f}", f"{s.stdev:.3f}", f"{s.median:.3f}",
                        f"{s.min:.3f}", f"{s.max:.3f}", s.n])
    with open(out_dir / "samples.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "variant", "converged", *(f"{m}_init" for m in METRICS),
                    *(f"{m}_final" for m in METRICS), "error"])
        for r in report.results:
            init = [repr(r.init[m]) if r.init else "" for m in METRICS]
            final = [repr(r.final[m]) if r.final else "" for m in METRICS]
            w.writerow([r.sample_id, r.variant, int(r.converged), *init, *final, r.error or ""])
    (out_dir / "stats.txt").write_text(report.to_text())
