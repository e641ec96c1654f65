"""Software renderer for textured terrain meshes.

``render`` produces the texture image and metric z-depth map seen by a
camera with pose ``T^W_C`` (camera-to-world). World coordinates are
(easting, northing, elevation).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from . import _raster
from .camera import CameraModel, normalized_rays
from .geodata import ElevationMap, GeoDataError, Orthoimage, _pixel_window, pixel_to_geo, sample_elevation
from .se3 import PoseSE3

NEAR_PLANE = 0.01
DEPTH_MAGIC = b"DPTH"


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class TerrainMesh:
    """Regular-grid triangle mesh with per-vertex orthoimage texel coordinates.

    ``texcoords`` holds (col, row) into ``texture``; ``grid_shape`` is the
    (rows, cols) vertex layout.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    texcoords: np.ndarray
    texture: np.ndarray
    grid_shape: tuple

    @property
    def n_faces(self) -> int:
        return self.triangles.shape[0]

    def bounds(self):
        v = self.vertices
        return (float(v[:, 0].min()), float(v[:, 0].max())), (float(v[:, 1].min()), float(v[:, 1].max()))


@dataclass(frozen=True)
class RenderOutput:
    image: np.ndarray   # (H, W, C) uint8, zero where nothing was hit
    depth: np.ndarray   # (H, W) float32 z-depth, +inf where nothing was hit
    mask: np.ndarray    # (H, W) bool

    @property
    def valid_fraction(self) -> float:
        return float(self.mask.mean())


def grid_triangles(rows: int, cols: int) -> np.ndarray:
    """Two triangles per grid cell, split along the top-left/bottom-right diagonal."""
    r, c = np.mgrid[0:rows - 1, 0:cols - 1]
    a = (r * cols + c).ravel()
    b = a + 1
    d = a + cols + 1
    e = a + cols
    tris = np.empty((a.size * 2, 3), dtype=np.int64)
    tris[0::2] = np.stack([a, b, d], axis=1)
    tris[1::2] = np.stack([a, d, e], axis=1)
    return tris


def build_mesh(ortho: Orthoimage, elev: ElevationMap, region=None) -> TerrainMesh:
    """One vertex per orthoimage pixel center in ``region``.

    ``region`` is ``(easting_range, northing_range)``; None means the whole
    orthoimage. Elevations are sampled bilinearly from ``elev``.
    """
    if region is None:
        c0, r0, c1, r1 = 0, 0, ortho.width, ortho.height
    else:
        c0, r0, c1, r1 = _pixel_window(ortho.geo, ortho.width, ortho.height, *region)
    rows, cols = r1 - r0, c1 - c0
    if rows < 2 or cols < 2:
        raise RenderError(f"mesh region of {cols}x{rows} pixels has no faces")
    rr, cc = np.mgrid[r0:r1, c0:c1].astype(float)
    east, north = pixel_to_geo(ortho.geo, cc, rr)
    try:
        z = sample_elevation(elev, east, north)
    except GeoDataError as exc:
        raise RenderError(f"cannot build mesh: {exc}") from exc
    vertices = np.stack([east.ravel(), north.ravel(), z.ravel()], axis=1)
    texcoords = np.stack([cc.ravel(), rr.ravel()], axis=1)
    return TerrainMesh(
        vertices=vertices,
        triangles=grid_triangles(rows, cols),
        texcoords=texcoords,
        texture=ortho.data,
        grid_shape=(rows, cols),
    )


def _n_bands(workers):
    n = numba.get_num_threads() if workers is None else max(1, int(workers))
    return max(1, n)


def _raster_pinhole(mesh: TerrainMesh, pose: PoseSE3, fx, fy, cx, cy, width, height, workers):
    if mesh.n_faces == 0:
        raise RenderError("empty mesh")
    # world -> camera: R^T (p - t); subtracting first keeps UTM-sized numbers small
    verts_cam = (mesh.vertices - pose.translation) @ pose.rotation
    z = verts_cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([fx * verts_cam[:, 0] / z + cx, fy * verts_cam[:, 1] / z + cy], axis=1)
    if workers is not None:
        prev = numba.get_num_threads()
        numba.set_num_threads(max(1, min(int(workers), numba.config.NUMBA_NUM_THREADS)))
    try:
        zbuf, texcol, texrow = _raster.rasterize(
            np.ascontiguousarray(verts_cam), np.ascontiguousarray(uv), mesh.triangles,
            np.ascontiguousarray(mesh.texcoords, dtype=float),
            float(fx), float(fy), float(cx), float(cy), NEAR_PLANE, int(width), int(height),
            _n_bands(workers),
        )
    finally:
        if workers is not None:
            numba.set_num_threads(prev)
    return zbuf, texcol, texrow


def _shade(mesh, zbuf, texcol, texrow):
    mask = np.isfinite(zbuf)
    tex = mesh.texture
    col = np.clip(texcol, 0, tex.shape[1] - 1)
    row = np.clip(texrow, 0, tex.shape[0] - 1)
    image = tex[row, col]
    image[~mask] = 0
    return image, mask


def render(mesh: TerrainMesh, pose: PoseSE3, cam: CameraModel, workers=None) -> RenderOutput:
    """Z-buffered render through the zero-distortion pinhole of ``cam``."""
    zbuf, texcol, texrow = _raster_pinhole(mesh, pose, cam.fx, cam.fy, cam.cx, cam.cy,
                                           cam.width, cam.height, workers)
    image, mask = _shade(mesh, zbuf, texcol, texrow)
    depth = zbuf.astype(np.float32)
    return RenderOutput(image=image, depth=depth, mask=mask)


def render_distorted(mesh: TerrainMesh, pose: PoseSE3, cam: CameraModel, workers=None) -> RenderOutput:
    """Render with lens distortion by resampling an enlarged pinhole render."""
    if not cam.has_distortion:
        return render(mesh, pose, cam, workers)
    x, y = normalized_rays(cam)
    finite = np.isfinite(x) & np.isfinite(y)
    xs, ys = x[finite], y[finite]
    # needed extent of the undistorted grid plus a 10 % field-of-view margin
    pad_x = 0.1 * cam.width
    pad_y = 0.1 * cam.height
    left = max(0, math.ceil(-(cam.fx * xs.min() + cam.cx) + pad_x))
    right = max(0, math.ceil(cam.fx * xs.max() + cam.cx - (cam.width - 1) + pad_x))
    top = max(0, math.ceil(-(cam.fy * ys.min() + cam.cy) + pad_y))
    bottom = max(0, math.ceil(cam.fy * ys.max() + cam.cy - (cam.height - 1) + pad_y))
    W = cam.width + left + right
    H = cam.height + top + bottom
    cx, cy = cam.cx + left, cam.cy + top
    zbuf, texcol, texrow = _raster_pinhole(mesh, pose, cam.fx, cam.fy, cx, cy, W, H, workers)
    big_img, big_mask = _shade(mesh, zbuf, texcol, texrow)

    u = np.where(finite, cam.fx * np.nan_to_num(x) + cx, -1.0)
    v = np.where(finite, cam.fy * np.nan_to_num(y) + cy, -1.0)
    ui = np.floor(u + 0.5).astype(np.int64)
    vi = np.floor(v + 0.5).astype(np.int64)
    inside = finite & (ui >= 0) & (ui < W) & (vi >= 0) & (vi < H)
    uic, vic = np.clip(ui, 0, W - 1), np.clip(vi, 0, H - 1)
    mask = inside & big_mask[vic, uic]
    depth = np.where(mask, zbuf[vic, uic], np.inf).astype(np.float32)

    # bilinear texture over valid neighbours only
    u0 = np.clip(np.floor(u).astype(np.int64), 0, W - 2)
    v0 = np.clip(np.floor(v).astype(np.int64), 0, H - 2)
    fu = np.clip(u - u0, 0.0, 1.0)[..., None]
    fv = np.clip(v - v0, 0.0, 1.0)[..., None]
    acc = np.zeros(u.shape + (big_img.shape[2],))
    wsum = np.zeros(u.shape + (1,))
    for dv, du, w in ((0, 0, (1 - fu) * (1 - fv)), (0, 1, fu * (1 - fv)),
                      (1, 0, (1 - fu) * fv), (1, 1, fu * fv)):
        ok = big_mask[v0 + dv, u0 + du][..., None]
        acc += np.where(ok, w * big_img[v0 + dv, u0 + du], 0.0)
        wsum += np.where(ok, w, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        color = np.where(wsum > 0, acc / wsum, 0.0)
    image = np.clip(np.floor(color + 0.5), 0, 255).astype(np.uint8)
    image[~mask] = 0
    return RenderOutput(image=image, depth=depth, mask=mask)


def render_view(mesh: TerrainMesh, pose: PoseSE3, cam: CameraModel, workers=None) -> RenderOutput:
    """Dispatch to the distorted path only when the camera needs it."""
    if cam.has_distortion:
        return render_distorted(mesh, pose, cam, workers)
    return render(mesh, pose, cam, workers)


# ---------------------------------------------------------------------------
# Pose helpers and checks
# ---------------------------------------------------------------------------


def nadir_pose(easting: float, northing: float, altitude: float, yaw: float = 0.0) -> PoseSE3:
    """Camera looking straight down; yaw = 0 puts north at the image top.

    ``yaw`` rotates the heading counter-clockwise seen from above (radians).
    """
    c, s = math.cos(yaw), math.sin(yaw)
    # columns: camera x (image right), y (image down), z (optical axis) in world
    x_axis = np.array([c, s, 0.0])
    y_axis = np.array([s, -c, 0.0])
    z_axis = np.array([0.0, 0.0, -1.0])
    R = np.stack([x_axis, y_axis, z_axis], axis=1)
    return PoseSE3(R, [easting, northing, altitude])


def tilted_pose(easting, northing, altitude, yaw=0.0, pitch=0.0, roll=0.0) -> PoseSE3:
    """Nadir pose followed by a pitch (about camera x) and roll (about camera y)."""
    from .se3 import rotation_about

    base = nadir_pose(easting, northing, altitude, yaw)
    R = base.rotation @ rotation_about([1, 0, 0], pitch) @ rotation_about([0, 1, 0], roll)
    return PoseSE3(R, base.translation)


def check_pose_over_extent(pose: PoseSE3, extent, elevation: ElevationMap | None = None) -> None:
    """Raise RenderError when the camera center is outside ``extent`` or below ground."""
    (e_min, e_max), (n_min, n_max) = extent
    e, n, h = pose.translation
    if not (e_min <= e <= e_max):
        raise RenderError(f"camera easting {e:.3f} outside map bound [{e_min:.3f}, {e_max:.3f}]")
    if not (n_min <= n <= n_max):
        raise RenderError(f"camera northing {n:.3f} outside map bound [{n_min:.3f}, {n_max:.3f}]")
    if elevation is not None:
        try:
            ground = sample_elevation(elevation, e, n)
        except GeoDataError as exc:
            raise RenderError(f"no terrain below the camera: {exc}") from exc
        if h <= ground:
            raise RenderError(f"camera height {h:.3f} m is below the terrain ({ground:.3f} m)")


# ---------------------------------------------------------------------------
# Depth file format: "DPTH", uint32 width, uint32 height, uint32 reserved, float32 LE
# ---------------------------------------------------------------------------


def save_depth(path, depth: np.ndarray) -> None:
    depth = np.asarray(depth, dtype="<f4")
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC + struct.pack("<III", w, h, 0))
        fh.write(np.ascontiguousarray(depth).tobytes())


def load_depth(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise RenderError(f"cannot read depth file {path}: {exc}") from exc
    if len(raw) < 16 or raw[:4] != DEPTH_MAGIC:
        raise RenderError(f"{path} is not a depth file (bad magic)")
    w, h, _ = struct.unpack("<III", raw[4:16])
    if len(raw) != 16 + 4 * w * h:
        raise RenderError(f"{path}: payload size does not match {w}x{h}")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(h, w).astype(np.float32)
