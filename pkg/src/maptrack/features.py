"""Image normalization, pyramids and the hand-crafted feature encoder."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

N_LEVELS = 4
_LUMA = np.array([0.299, 0.587, 0.114])


class FeatureFileError(ValueError):
    pass


def to_gray(image) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[2] == 3:
        return image.astype(float) @ _LUMA
    if image.ndim == 3:
        return image[:, :, 0].astype(float)
    return image.astype(float)


def color_normalize(image, mask=None) -> np.ndarray:
    """Luminance with zero mean and unit standard deviation over ``mask``.

    A constant image maps to all zeros; pixels outside ``mask`` are set to 0.
    """
    gray = to_gray(image)
    if mask is None:
        mask = np.ones(gray.shape, dtype=bool)
    out = np.zeros_like(gray)
    vals = gray[mask]
    if vals.size == 0:
        return out
    mu = vals.mean()
    sigma = vals.std()
    if sigma < 1e-12:
        return out
    out[mask] = (vals - mu) / sigma
    return out


def _block_mean(a: np.ndarray) -> np.ndarray:
    h, w = a.shape[-2] // 2, a.shape[-1] // 2
    a = a[..., : 2 * h, : 2 * w]
    return 0.25 * (a[..., 0::2, 0::2] + a[..., 0::2, 1::2] + a[..., 1::2, 0::2] + a[..., 1::2, 1::2])


def build_pyramid(raster, levels: int = N_LEVELS) -> list[np.ndarray]:
    """2x2 block-average pyramid, index 0 = finest; works on (H, W) or (C, H, W)."""
    raster = np.asarray(raster, dtype=float)
    h, w = raster.shape[-2:]
    if h < 2 ** (levels - 1) or w < 2 ** (levels - 1):
        raise ValueError(f"{w}x{h} raster too small for {levels} pyramid levels")
    out = [raster]
    for _ in range(levels - 1):
        out.append(_block_mean(out[-1]))
    return out


def build_depth_pyramid(depth, mask=None, levels: int = N_LEVELS):
    """Valid-only 2x2 averaging; returns (depths, masks) lists.

    Invalid cells hold +inf.
    """
    depth = np.asarray(depth, dtype=float)
    if mask is None:
        mask = np.isfinite(depth) & (depth > 0)
    h, w = depth.shape
    if h < 2 ** (levels - 1) or w < 2 ** (levels - 1):
        raise ValueError(f"{w}x{h} depth map too small for {levels} pyramid levels")
    d = np.where(mask, depth, np.inf)
    depths, masks = [d], [mask.copy()]
    for _ in range(levels - 1):
        m = masks[-1].astype(float)
        val = np.where(masks[-1], depths[-1], 0.0)
        total = 4.0 * _block_mean(val)
        count = 4.0 * _block_mean(m)
        new_mask = count > 0
        with np.errstate(invalid="ignore", divide="ignore"):
            new = np.where(new_mask, total / np.maximum(count, 1.0), np.inf)
        depths.append(new)
        masks.append(new_mask)
    return depths, masks


def _binomial(img: np.ndarray) -> np.ndarray:
    k = np.array([0.25, 0.5, 0.25])
    return ndimage.correlate1d(ndimage.correlate1d(img, k, axis=0, mode="nearest"), k, axis=1, mode="nearest")


def central_gradient(img: np.ndarray):
    """Central differences along x (columns) and y (rows); borders replicate."""
    p = np.pad(img, [(0, 0)] * (img.ndim - 2) + [(1, 1), (1, 1)], mode="edge")
    gx = 0.5 * (p[..., 1:-1, 2:] - p[..., 1:-1, :-2])
    gy = 0.5 * (p[..., 2:, 1:-1] - p[..., :-2, 1:-1])
    return gx, gy


@dataclass
class FeaturePyramid:
    """``levels[k]`` is a (C, H_k, W_k) float array; level 0 is the finest."""

    levels: list

    @property
    def channels(self) -> int:
        return self.levels[0].shape[0]

    def shape(self, level: int):
        return self.levels[level].shape[1:]


ENCODERS = ("gradient", "intensity")


def encode_features(image, encoder: str = "gradient", levels: int = N_LEVELS) -> FeaturePyramid:
    """Hand-crafted stand-in for a learned encoder.

    ``gradient``: 3 channels per level (binomial-smoothed intensity and its
    central-difference x and y gradients). ``intensity``: the smoothed
    intensity alone.
    """
    if encoder not in ENCODERS:
        raise ValueError(f"unknown encoder {encoder!r}; valid: {', '.join(ENCODERS)}")
    out = []
    for img in build_pyramid(image, levels):
        smooth = _binomial(img)
        if encoder == "intensity":
            out.append(smooth[None])
            continue
        gx, gy = central_gradient(smooth)
        out.append(np.stack([smooth, gx, gy]))
    return FeaturePyramid(out)


# ---------------------------------------------------------------------------
# Raster pyramid files: magic, uint32 levels, per level uint32 (w, h, c),
# then per level little-endian float32 data in (c, h, w) order.
# ---------------------------------------------------------------------------

FEATURE_MAGIC = b"FEAT"
WEIGHT_MAGIC = b"WGHT"


def save_raster_pyramid(path, levels, magic: bytes = FEATURE_MAGIC) -> None:
    arrays = [np.asarray(a, dtype="<f4") for a in levels]
    arrays = [a[None] if a.ndim == 2 else a for a in arrays]
    with open(path, "wb") as fh:
        fh.write(magic + struct.pack("<I", len(arrays)))
        for a in arrays:
            c, h, w = a.shape
            fh.write(struct.pack("<III", w, h, c))
        for a in arrays:
            fh.write(np.ascontiguousarray(a).tobytes())


def load_raster_pyramid(path, magic: bytes = FEATURE_MAGIC) -> list[np.ndarray]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FeatureFileError(f"cannot read {path}: {exc}") from exc
    if raw[:4] != magic:
        raise FeatureFileError(f"{path}: expected magic {magic!r}, found {raw[:4]!r}")
    (n,) = struct.unpack_from("<I", raw, 4)
    offset = 8
    dims = []
    for _ in range(n):
        dims.append(struct.unpack_from("<III", raw, offset))
        offset += 12
    out = []
    for w, h, c in dims:
        count = w * h * c
        if offset + 4 * count > len(raw):
            raise FeatureFileError(f"{path}: truncated payload")
        out.append(np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(c, h, w).copy())
        offset += 4 * count
    if offset != len(raw):
        raise FeatureFileError(f"{path}: trailing bytes after payload")
    return out


def save_features(path, pyramid: FeaturePyramid) -> None:
    save_raster_pyramid(path, pyramid.levels, FEATURE_MAGIC)


def load_features(path, expected_shape=None) -> FeaturePyramid:
    """Load a feature pyramid; ``expected_shape`` is the level-0 (H, W) to verify."""
    levels = load_raster_pyramid(path, FEATURE_MAGIC)
    _check_dims(path, levels, expected_shape)
    return FeaturePyramid(levels)


def save_weights(path, levels) -> None:
    save_raster_pyramid(path, levels, WEIGHT_MAGIC)


def load_weights(path, expected_shape=None) -> list[np.ndarray]:
    """Per-pixel weight rasters, one (H_k, W_k) array per pyramid level."""
    levels = load_raster_pyramid(path, WEIGHT_MAGIC)
    _check_dims(path, levels, expected_shape)
    for a in levels:
        if a.shape[0] != 1:
            raise FeatureFileError(f"{path}: weight rasters must have one channel")
    return [a[0] for a in levels]


def _check_dims(path, levels, expected_shape):
    if expected_shape is None:
        return
    if len(levels) != N_LEVELS:
        raise FeatureFileError(f"{path}: expected {N_LEVELS} levels, found {len(levels)}")
    h, w = expected_shape
    for k, a in enumerate(levels):
        want = (h // 2**k, w // 2**k)
        if a.shape[1:] != want:
            raise FeatureFileError(
                f"{path}: level {k} is {a.shape[2]}x{a.shape[1]}, expected {want[1]}x{want[0]}"
            )
