"""Pinhole camera with 5-coefficient radial-tangential distortion.

Camera frame: +z along the optical axis, +x right, +y down (image rows).
Pixel (u, v) = (0, 0) is the center of the top-left pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

MIN_DEPTH = 1e-6


class ProjectionError(ValueError):
    pass


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    dist: tuple = field(default=(0.0, 0.0, 0.0, 0.0, 0.0))

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 2 or self.height < 2:
            raise ValueError(f"image must be at least 2x2, got {self.width}x{self.height}")
        dist = tuple(float(d) for d in self.dist)
        if len(dist) != 5:
            raise ValueError("distortion needs 5 coefficients (k1, k2, p1, p2, k3)")
        object.__setattr__(self, "dist", dist)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @classmethod
    def default(cls) -> "CameraModel":
        """752x480 test camera with fx = fy = 400 and no distortion."""
        return cls(fx=400.0, fy=400.0, cx=376.0, cy=240.0, width=752, height=480)

    @property
    def has_distortion(self) -> bool:
        return any(d != 0.0 for d in self.dist)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def undistorted(self) -> "CameraModel":
        return replace(self, dist=(0.0,) * 5)

    def scaled(self, level: int) -> "CameraModel":
        """Intrinsics for a 2**level block-averaged image (pixel-center convention)."""
        s = 2.0**level
        return replace(
            self,
            fx=self.fx / s,
            fy=self.fy / s,
            cx=(self.cx + 0.5) / s - 0.5,
            cy=(self.cy + 0.5) / s - 0.5,
            width=self.width // 2**level,
            height=self.height // 2**level,
        )


def distort(cam: CameraModel, x, y):
    """Apply radial-tangential distortion to normalized coordinates."""
    k1, k2, p1, p2, k3 = cam.dist
    r2 = x * x + y * y
    radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
    yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
    return xd, yd


def _distort_jacobian(cam: CameraModel, x, y):
    k1, k2, p1, p2, k3 = cam.dist
    r2 = x * x + y * y
    radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    dradial = k1 + r2 * (2.0 * k2 + 3.0 * k3 * r2)
    j11 = radial + 2.0 * x * x * dradial + 2.0 * p1 * y + 6.0 * p2 * x
    j12 = 2.0 * x * y * dradial + 2.0 * p1 * x + 2.0 * p2 * y
    j21 = 2.0 * x * y * dradial + 2.0 * p1 * x + 2.0 * p2 * y
    j22 = radial + 2.0 * y * y * dradial + 6.0 * p1 * y + 2.0 * p2 * x
    return j11, j12, j21, j22


def undistort(cam: CameraModel, xd, yd, max_iter: int = 20, tol: float = 1e-12,
              strict: bool = True):
    """Invert :func:`distort` on normalized coordinates.

    Runs the classic fixed-point iteration and finishes with a few Newton
    steps, which matter near the image corners where the fixed-point map
    contracts slowly for strong radial terms. With ``strict=False`` points
    outside the invertible region come back as NaN instead of raising.
    """
    xd = np.asarray(xd, dtype=float)
    yd = np.asarray(yd, dtype=float)
    if not cam.has_distortion:
        return xd, yd
    k1, k2, p1, p2, k3 = cam.dist
    x, y = xd.copy(), yd.copy()
    for _ in range(max_iter):
        r2 = x * x + y * y
        radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
        dx = 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
        dy = p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
        x_new = (xd - dx) / radial
        y_new = (yd - dy) / radial
        if strict:
            _check_diverged(x_new, y_new)
        with np.errstate(invalid="ignore"):
            step = max(float(np.nanmax(np.abs(x_new - x), initial=0.0)),
                       float(np.nanmax(np.abs(y_new - y), initial=0.0)))
        x, y = x_new, y_new
        if step < tol:
            break
    with np.errstate(all="ignore"):
        for _ in range(5):
            ex, ey = distort(cam, x, y)
            ex, ey = ex - xd, ey - yd
            if np.nanmax(np.maximum(np.abs(ex), np.abs(ey)), initial=0.0) < 1e-15:
                break
            j11, j12, j21, j22 = _distort_jacobian(cam, x, y)
            det = j11 * j22 - j12 * j21
            x = x - (j22 * ex - j12 * ey) / det
            y = y - (j11 * ey - j21 * ex) / det
            if strict:
                _check_diverged(x, y)
        ex, ey = distort(cam, x, y)
        bad = ~(np.maximum(np.abs(ex - xd), np.abs(ey - yd)) <= 1e-9)
        bad |= (np.abs(x) > 10.0) | (np.abs(y) > 10.0)
        # a root past the fold of the radial map is not the principal inverse
        k1, k2, _, _, k3 = cam.dist
        r2 = x * x + y * y
        radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
        slope = radial + 2.0 * r2 * (k1 + r2 * (2.0 * k2 + 3.0 * k3 * r2))
        bad |= ~((radial > 0) & (slope > 0))
    if np.any(bad):
        if strict:
            raise ProjectionError("undistortion did not converge (outside the invertible region)")
        x = np.where(bad, np.nan, x)
        y = np.where(bad, np.nan, y)
    return x, y


def _check_diverged(x, y):
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))) or \
            np.any(np.abs(x) > 10.0) or np.any(np.abs(y) > 10.0):
        raise ProjectionError("undistortion diverged")


def project(cam: CameraModel, p_cam):
    """Project camera-frame point(s) ``(..., 3)`` to pixel coordinates (u, v)."""
    p = np.asarray(p_cam, dtype=float)
    z = p[..., 2]
    if np.any(z <= MIN_DEPTH):
        raise ProjectionError("point at or behind the camera plane")
    x = p[..., 0] / z
    y = p[..., 1] / z
    if cam.has_distortion:
        x, y = distort(cam, x, y)
    u = cam.fx * x + cam.cx
    v = cam.fy * y + cam.cy
    if u.ndim == 0:
        return float(u), float(v)
    return u, v


def unproject(cam: CameraModel, u, v, depth):
    """Back-project pixel(s) with z-depth to camera-frame points ``(..., 3)``."""
    depth = np.asarray(depth, dtype=float)
    if np.any(depth <= 0):
        raise ProjectionError("depth must be positive")
    xd = (np.asarray(u, dtype=float) - cam.cx) / cam.fx
    yd = (np.asarray(v, dtype=float) - cam.cy) / cam.fy
    x, y = undistort(cam, xd, yd)
    return np.stack(np.broadcast_arrays(x * depth, y * depth, depth), axis=-1)


def normalized_rays(cam: CameraModel):
    """Undistorted normalized coordinates (x, y) for every pixel, each (H, W).

    Pixels outside the invertible region of the distortion model are NaN.
    """
    v, u = np.mgrid[0:cam.height, 0:cam.width].astype(float)
    xd = (u - cam.cx) / cam.fx
    yd = (v - cam.cy) / cam.fy
    if not cam.has_distortion:
        return xd, yd
    return undistort(cam, xd, yd, strict=False)


def in_bounds(cam: CameraModel, u, v, margin: float = 0.0):
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    ok = (u >= margin) & (u <= cam.width - 1 - margin) & (v >= margin) & (v <= cam.height - 1 - margin)
    return bool(ok) if ok.ndim == 0 else ok


def undistort_image(cam: CameraModel, image) -> np.ndarray:
    """Resample a distorted image onto the zero-distortion pinhole grid of ``cam``.

    Bilinear interpolation; samples falling outside the source are clamped
    to its border.
    """
    image = np.asarray(image)
    if not cam.has_distortion:
        return image
    v, u = np.mgrid[0:cam.height, 0:cam.width].astype(float)
    xd, yd = distort(cam, (u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy)
    us = np.clip(cam.fx * xd + cam.cx, 0, cam.width - 1)
    vs = np.clip(cam.fy * yd + cam.cy, 0, cam.height - 1)
    u0 = np.minimum(np.floor(us).astype(np.int64), cam.width - 2)
    v0 = np.minimum(np.floor(vs).astype(np.int64), cam.height - 2)
    fu, fv = us - u0, vs - v0
    src = image.astype(float)
    if src.ndim == 3:
        fu, fv = fu[..., None], fv[..., None]
    out = ((src[v0, u0] * (1 - fu) + src[v0, u0 + 1] * fu) * (1 - fv)
           + (src[v0 + 1, u0] * (1 - fu) + src[v0 + 1, u0 + 1] * fu) * fv)
    if np.issubdtype(image.dtype, np.integer):
        return np.clip(np.floor(out + 0.5), 0, np.iinfo(image.dtype).max).astype(image.dtype)
    return out.astype(image.dtype)
