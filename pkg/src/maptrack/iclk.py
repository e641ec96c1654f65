"""Coarse-to-fine six-DoF inverse-compositional Lucas-Kanade alignment.

Conventions
-----------
The estimated pose ``T = T^{C_ref}_{C_1}`` maps camera-1 coordinates into the
reference camera frame, so a reference point ``p`` is seen by the query
camera at ``inverse(T) @ p``. Internally the solver tracks that
reference-to-query map ``G = inverse(T)`` and applies the inverse
compositional update ``G <- G @ inverse(exp(dxi))``, with ``dxi`` from the
damped normal equations

    dxi = (J^T W J + lam * diag(J^T W J))^-1 J^T W r,   r = F_warped - F_ref.

``J`` is evaluated once per level on the reference features and depth.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, ndimage

from . import _raster, se3
from .camera import CameraModel
from .features import (
    N_LEVELS,
    ENCODERS,
    FeaturePyramid,
    build_depth_pyramid,
    central_gradient,
    color_normalize,
    encode_features,
    load_weights,
)
from .se3 import PoseSE3, TwistSE3

logger = logging.getLogger(__name__)

WEIGHTINGS = ("uniform", "huber", "external")
HUBER_C = 1.345
MAD_TO_SIGMA = 1.4826


class DegenerateSystemError(RuntimeError):
    """Normal equations are singular or have too few constraining rows."""


@dataclass(frozen=True)
class AlignConfig:
    max_iterations: int = 20
    damping: float = 1e-6
    stop_threshold: float = 1e-8
    weighting: str = "uniform"
    huber_c: float = HUBER_C
    weight_file: str | None = None
    encoder: str = "gradient"
    border_margin: int = 2
    converge_tol: float = 1e-3

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("iteration budget must be at least 1")
        if self.damping < 0:
            raise ValueError("damping must be non-negative")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"unknown weighting {self.weighting!r}; valid: {', '.join(WEIGHTINGS)}")
        if self.weighting == "external" and not self.weight_file:
            raise ValueError("external weighting needs weight_file")
        if self.encoder not in ENCODERS:
            raise ValueError(f"unknown encoder {self.encoder!r}; valid: {', '.join(ENCODERS)}")
        if self.huber_c <= 0:
            raise ValueError("huber_c must be positive")


@dataclass(frozen=True)
class TraceEntry:
    level: int
    iteration: int
    energy: float
    step_norm: float


@dataclass
class AlignmentResult:
    pose: PoseSE3
    trace: list
    converged: bool
    valid_pixels: int
    degenerate_levels: list = field(default_factory=list)
    message: str = ""


def level_schedule(total: int, levels: int = N_LEVELS) -> list[int]:
    """Iteration budget per level, coarsest first; the remainder goes to the coarsest."""
    base, extra = divmod(total, levels)
    return [base + (1 if i < extra else 0) for i in range(levels)]


# ---------------------------------------------------------------------------
# Reference precomputation
# ---------------------------------------------------------------------------


@dataclass
class ReferenceLevel:
    """Valid reference pixels of one pyramid level and their Jacobian rows."""

    cam: CameraModel
    pixels: np.ndarray     # (N, 2) integer (u, v)
    points: np.ndarray     # (N, 3) reference-frame points
    features: np.ndarray   # (N, C)
    jacobian: np.ndarray   # (N, C, 6)

    @property
    def n_pixels(self) -> int:
        return self.pixels.shape[0]


def projection_jacobian(cam: CameraModel, points: np.ndarray) -> np.ndarray:
    """d(u, v)/d(xi) at the identity increment, shape (N, 2, 6), order (rho | phi)."""
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    iz = 1.0 / z
    dpi = np.zeros((points.shape[0], 2, 3))
    dpi[:, 0, 0] = cam.fx * iz
    dpi[:, 0, 2] = -cam.fx * x * iz * iz
    dpi[:, 1, 1] = cam.fy * iz
    dpi[:, 1, 2] = -cam.fy * y * iz * iz
    # d(exp(xi) p)/d(xi) = [I | -[p]x]
    dp = np.zeros((points.shape[0], 3, 6))
    dp[:, 0, 0] = dp[:, 1, 1] = dp[:, 2, 2] = 1.0
    dp[:, 0, 4], dp[:, 0, 5] = z, -y
    dp[:, 1, 3], dp[:, 1, 5] = -z, x
    dp[:, 2, 3], dp[:, 2, 4] = y, -x
    return np.matmul(dpi, dp)


def precompute_level(features: np.ndarray, depth: np.ndarray, mask: np.ndarray,
                     cam: CameraModel, margin: int = 2) -> ReferenceLevel:
    C, H, W = features.shape
    margin = max(int(margin), 1)
    valid = mask & np.isfinite(depth) & (depth > 0)
    # central differences need valid neighbours
    valid = ndimage.binary_erosion(valid, structure=np.ones((3, 3), bool), border_value=0)
    valid[:margin, :] = False
    valid[H - margin:, :] = False
    valid[:, :margin] = False
    valid[:, W - margin:] = False
    vs, us = np.nonzero(valid)
    if vs.size < 6:
        raise DegenerateSystemError(
            f"only {vs.size * C} valid Jacobian rows at {W}x{H}, need {6 * C}"
        )
    d = depth[vs, us]
    points = np.stack([(us - cam.cx) / cam.fx * d, (vs - cam.cy) / cam.fy * d, d], axis=1)
    gx, gy = central_gradient(features)
    grad = np.stack([gx[:, vs, us].T, gy[:, vs, us].T], axis=2)   # (N, C, 2)
    jac = np.matmul(grad, projection_jacobian(cam, points))
    return ReferenceLevel(
        cam=cam,
        pixels=np.stack([us, vs], axis=1),
        points=points,
        features=features[:, vs, us].T.copy(),
        jacobian=jac,
    )


def precompute_reference(ref_features: FeaturePyramid, ref_depths, ref_masks, cams,
                         margin: int = 2) -> list[ReferenceLevel]:
    """Per-level reference data; raises DegenerateSystemError if any level is empty."""
    return [
        precompute_level(f, d, m, c, margin)
        for f, d, m, c in zip(ref_features.levels, ref_depths, ref_masks, cams)
    ]


# ---------------------------------------------------------------------------
# Warping
# ---------------------------------------------------------------------------


def bilinear_sample(raster: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample (C, H, W) at in-bounds float coordinates; returns (N, C)."""
    C, H, W = raster.shape
    u0 = np.clip(np.floor(u).astype(np.int64), 0, W - 2)
    v0 = np.clip(np.floor(v).astype(np.int64), 0, H - 2)
    fu = (u - u0)[:, None]
    fv = (v - v0)[:, None]
    r = raster
    top = r[:, v0, u0].T * (1 - fu) + r[:, v0, u0 + 1].T * fu
    bot = r[:, v0 + 1, u0].T * (1 - fu) + r[:, v0 + 1, u0 + 1].T * fu
    return top * (1 - fv) + bot * fv


def warp_points(query: np.ndarray, T: PoseSE3, points: np.ndarray, cam: CameraModel):
    """Sample query features at reference points moved into camera 1.

    ``T`` maps camera-1 coordinates into the reference frame. Returns
    (samples (N, C), valid mask (N,)).
    """
    G = se3.inverse(T)
    query = np.ascontiguousarray(query, dtype=float)
    points = np.ascontiguousarray(points, dtype=float)
    out = np.empty((points.shape[0], query.shape[0]))
    ok = np.empty(points.shape[0], dtype=bool)
    _raster.warp_sample(query, np.ascontiguousarray(G.rotation), np.ascontiguousarray(G.translation),
                        points, float(cam.fx), float(cam.fy), float(cam.cx), float(cam.cy), out, ok)
    return out, ok


def warp(query: np.ndarray, T: PoseSE3, ref_depth: np.ndarray, cam: CameraModel, ref_mask=None):
    """Warp a (C, H, W) query raster into the reference view.

    Returns (warped (C, H, W), mask (H, W)); invalid pixels are zero.
    """
    query = np.asarray(query, dtype=float)
    if query.ndim == 2:
        query = query[None]
    H, W = ref_depth.shape
    valid = np.isfinite(ref_depth) & (ref_depth > 0)
    if ref_mask is not None:
        valid &= ref_mask
    vs, us = np.nonzero(valid)
    d = ref_depth[vs, us].astype(float)
    points = np.stack([(us - cam.cx) / cam.fx * d, (vs - cam.cy) / cam.fy * d, d], axis=1)
    samples, ok = warp_points(query, T, points, cam)
    warped = np.zeros((query.shape[0], H, W))
    mask = np.zeros((H, W), dtype=bool)
    warped[:, vs[ok], us[ok]] = samples[ok].T
    mask[vs[ok], us[ok]] = True
    return warped, mask


# ---------------------------------------------------------------------------
# Weights and the damped solve
# ---------------------------------------------------------------------------


def huber_weights(residuals: np.ndarray, c: float = HUBER_C) -> np.ndarray:
    """Huber weights with a MAD scale estimated per channel (column)."""
    a = np.abs(residuals)
    flat = a.ndim == 1
    if flat:
        a = a[:, None]
    scale = c * MAD_TO_SIGMA * np.median(a, axis=0, keepdims=True)
    big = a > scale
    w = np.ones_like(a)
    w[big] = np.broadcast_to(scale, a.shape)[big] / a[big]
    return w[:, 0] if flat else w


def robust_weights(residuals, policy: str = "uniform", c: float = HUBER_C, external=None):
    """Per-row weights for residuals shaped (N,) or (N, C).

    ``external`` is a per-pixel (N,) array broadcast over channels.
    """
    residuals = np.asarray(residuals, dtype=float)
    if policy == "uniform":
        w = np.ones_like(residuals)
    elif policy == "huber":
        w = huber_weights(residuals, c)
    elif policy == "external":
        if external is None:
            raise ValueError("external weighting needs a weight array")
        external = np.asarray(external, dtype=float)
        if external.shape[0] != residuals.shape[0]:
            raise ValueError(
                f"weight raster has {external.shape[0]} entries for {residuals.shape[0]} pixels"
            )
        w = np.broadcast_to(external.reshape((-1,) + (1,) * (residuals.ndim - 1)), residuals.shape).copy()
        if np.any(w < 0):
            raise ValueError("weights must be non-negative")
    else:
        raise ValueError(f"unknown weighting {policy!r}; valid: {', '.join(WEIGHTINGS)}")
    if not np.any(w > 0):
        raise DegenerateSystemError("all weights are zero")
    return w


@dataclass
class NormalEquationsWorkspace:
    """Stacked rows of one Gauss-Newton system: J (M, 6), r (M,), w (M,)."""

    jacobian: np.ndarray
    residuals: np.ndarray
    weights: np.ndarray
    damping: float = 1e-6

    def normal_matrix(self) -> np.ndarray:
        J, w = self.jacobian, self.weights
        return J.T @ (w[:, None] * J)

    def gradient(self) -> np.ndarray:
        return self.jacobian.T @ (self.weights * self.residuals)


def lm_step(ws: NormalEquationsWorkspace) -> TwistSE3:
    """Solve (J^T W J + lam diag(J^T W J)) dxi = J^T W r by Cholesky."""
    if np.count_nonzero(ws.weights > 0) < 6:
        raise DegenerateSystemError("fewer than 6 positively weighted rows")
    # W enters both sides homogeneously; normalizing it makes scaling exact
    w = ws.weights / ws.weights.max()
    J = ws.jacobian
    H = J.T @ (w[:, None] * J)
    g = J.T @ (w * ws.residuals)
    A = H + ws.damping * np.diag(np.diag(H))
    diag = np.diag(A)
    if not np.all(np.isfinite(A)) or np.any(diag <= 0):
        raise DegenerateSystemError("normal matrix has a non-positive diagonal")
    # Jacobi scaling makes the conditioning test independent of units
    s = 1.0 / np.sqrt(diag)
    As = A * s[:, None] * s[None, :]
    eig = np.linalg.eigvalsh(As)
    if eig[0] <= 1e-12 * eig[-1]:
        raise DegenerateSystemError(f"normal matrix is singular (eigenvalue ratio {eig[0] / eig[-1]:.3g})")
    try:
        factor = linalg.cho_factor(As, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise DegenerateSystemError(f"normal matrix is not positive definite: {exc}") from exc
    dxi = s * linalg.cho_solve(factor, s * g, check_finite=False)
    return TwistSE3.from_vector(dxi)


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


def level_cameras(cam: CameraModel, levels: int = N_LEVELS) -> list[CameraModel]:
    base = cam.undistorted()
    return [base.scaled(k) for k in range(levels)]


def prepare_features(image, config: AlignConfig, mask=None) -> FeaturePyramid:
    return encode_features(color_normalize(image, mask), config.encoder)


def align(ref_image, ref_depth, query_image, cam: CameraModel, init: PoseSE3 | None = None,
          config: AlignConfig | None = None, ref_features: FeaturePyramid | None = None,
          query_features: FeaturePyramid | None = None, weights=None) -> AlignmentResult:
    """Estimate ``T^{C_ref}_{C_1}`` aligning the query image to the reference.

    Images are pinhole images of ``cam`` (its distortion is ignored here).
    Precomputed feature pyramids replace the built-in encoder when given;
    ``weights`` (per-level pixel rasters) override ``config.weight_file``.
    """
    config = config or AlignConfig()
    init = init or PoseSE3.identity()
    ref_depth = np.asarray(ref_depth, dtype=float)
    H, W = ref_depth.shape
    ref_mask = np.isfinite(ref_depth) & (ref_depth > 0)
    for name, img in (("reference", ref_image), ("query", query_image)):
        if img is not None and np.asarray(img).shape[:2] != (H, W):
            raise ValueError(f"{name} image shape {np.asarray(img).shape[:2]} != depth shape {(H, W)}")
    if (cam.height, cam.width) != (H, W):
        raise ValueError(f"camera is {cam.width}x{cam.height} but images are {W}x{H}")

    if ref_features is None:
        ref_features = prepare_features(ref_image, config, ref_mask)
    if query_features is None:
        query_features = prepare_features(query_image, config)
    if ref_features.channels != query_features.channels:
        raise ValueError("reference and query feature channel counts differ")
    if weights is None and config.weighting == "external":
        weights = load_weights(config.weight_file, (H, W))

    depths, masks = build_depth_pyramid(ref_depth, ref_mask)
    cams = level_cameras(cam)
    schedule = level_schedule(config.max_iterations)

    G = se3.inverse(init)
    trace: list[TraceEntry] = []
    degenerate: list[int] = []
    valid_pixels = 0
    last_step = np.inf
    for budget, level in zip(schedule, range(N_LEVELS - 1, -1, -1)):
        try:
            ref = precompute_level(ref_features.levels[level], depths[level], masks[level],
                                   cams[level], config.border_margin)
        except DegenerateSystemError as exc:
            logger.debug("level %d skipped: %s", level, exc)
            degenerate.append(level)
            continue
        J = ref.jacobian.reshape(-1, 6)
        ext = None
        if config.weighting == "external":
            raster = np.asarray(weights[level], dtype=float)
            ext = raster[ref.pixels[:, 1], ref.pixels[:, 0]]
        steps = 0
        for it in range(budget):
            samples, ok = warp_points(query_features.levels[level], se3.inverse(G), ref.points, ref.cam)
            if level == 0:
                valid_pixels = int(ok.sum())
            r = samples - ref.features
            r[~ok] = 0.0
            try:
                w = robust_weights(r[ok], config.weighting, config.huber_c,
                                   None if ext is None else ext[ok])
                w_full = np.zeros_like(r)
                w_full[ok] = w
                ws = NormalEquationsWorkspace(J, r.reshape(-1), w_full.reshape(-1), config.damping)
                dxi = lm_step(ws)
            except DegenerateSystemError as exc:
                logger.debug("level %d iteration %d degenerate: %s", level, it, exc)
                break
            energy = float(np.sum(w * r[ok] ** 2) / np.sum(w))
            last_step = dxi.norm()
            G = se3.compose(G, se3.inverse(se3.exp(dxi)))
            trace.append(TraceEntry(level, it, energy, last_step))
            steps += 1
            if last_step < config.stop_threshold:
                break
        if steps == 0:
            degenerate.append(level)

    if not trace:
        return AlignmentResult(init, [], False, valid_pixels, degenerate,
                               "degenerate system at every level")
    finest_ran = bool(trace) and trace[-1].level == 0
    converged = finest_ran and last_step < max(config.converge_tol, config.stop_threshold)
    return AlignmentResult(se3.inverse(G), trace, converged, valid_pixels, degenerate)
