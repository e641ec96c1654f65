"""Procedural orthoimages, elevation grids and pseudo-year appearance changes.

Stand-ins for real multi-year orthomosaics: every generator is a pure
function of its seed.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .geodata import ElevationMap, GeoTransform, MapLayer, MapStack, Orthoimage


def _octave_noise(rng, shape, sigmas, weights):
    out = np.zeros(shape)
    for s, w in zip(sigmas, weights):
        n = ndimage.gaussian_filter(rng.standard_normal(shape), s, mode="wrap")
        out += w * n / (n.std() + 1e-12)
    return out


def terrain_texture(height: int, width: int, seed: int = 0, field_size: float = 60.0) -> np.ndarray:
    """RGB texture of field parcels, multi-scale noise and a few roads.

    ``field_size`` is the typical parcel diameter in pixels.
    """
    rng = np.random.default_rng(seed)
    n_fields = max(4, int(height * width / field_size**2))
    seeds = rng.uniform([0, 0], [height, width], size=(n_fields, 2))
    rr, cc = np.mgrid[0:height, 0:width]
    _, label = cKDTree(seeds).query(np.stack([rr.ravel(), cc.ravel()], axis=1))
    label = label.reshape(height, width)
    palette = rng.uniform(0.15, 0.85, size=(n_fields, 3))
    palette[:, 1] = np.clip(palette[:, 1] + 0.1, 0, 1)
    img = palette[label]

    noise = _octave_noise(rng, (height, width), (24.0, 8.0, 3.0, 1.0), (0.08, 0.06, 0.05, 0.04))
    img = img + noise[:, :, None] * np.array([1.0, 0.9, 0.8])

    # roads: straight bands with a random heading
    for _ in range(max(1, (height + width) // 300)):
        angle = rng.uniform(0, np.pi)
        r0, c0 = rng.uniform(0, height), rng.uniform(0, width)
        dist = np.abs((rr - r0) * np.cos(angle) - (cc - c0) * np.sin(angle))
        road = dist < rng.uniform(1.5, 3.5)
        img[road] = rng.uniform(0.55, 0.75)

    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)


def terrain_heights(height: int, width: int, seed: int = 0, relief: float = 30.0,
                    base: float = 400.0) -> np.ndarray:
    """Smooth rolling hills, float32 meters."""
    rng = np.random.default_rng(seed + 7919)
    n = _octave_noise(rng, (height, width), (max(height, width) / 6.0, max(height, width) / 15.0),
                      (1.0, 0.35))
    n = (n - n.min()) / (np.ptp(n) + 1e-12)
    return (base + relief * n).astype(np.float32)


def synthetic_layer(label: str, size: tuple, pixel_size: float = 0.5, origin=(500000.0, 5200000.0),
                    seed: int = 0, relief: float = 30.0, dem_step: int = 4) -> MapLayer:
    """One co-registered orthoimage + elevation layer.

    The elevation grid is ``dem_step`` times coarser than the orthoimage and
    covers at least the same area.
    """
    h, w = size
    geo = GeoTransform(origin[0], origin[1], pixel_size, pixel_size)
    ortho = Orthoimage(terrain_texture(h, w, seed), geo, label=label)
    dh, dw = (h - 1) // dem_step + 2, (w - 1) // dem_step + 2
    egeo = GeoTransform(origin[0], origin[1], pixel_size * dem_step, pixel_size * dem_step)
    elev = ElevationMap(terrain_heights(dh, dw, seed, relief), egeo)
    return MapLayer(label, ortho, elev)


def flat_layer(label: str, size: tuple, pixel_size: float = 1.0, origin=(0.0, 0.0),
               elevation: float = 0.0, texture=None) -> MapLayer:
    h, w = size
    geo = GeoTransform(origin[0], origin[1], pixel_size, pixel_size)
    if texture is None:
        texture = np.full((h, w, 3), 128, np.uint8)
    ortho = Orthoimage(texture, geo, label=label)
    elev = ElevationMap(np.full((h, w), elevation, np.float32), geo)
    return MapLayer(label, ortho, elev)


def _regions(rng, h, w, size):
    n = max(2, int(h * w / size**2))
    seeds = rng.uniform([0, 0], [h, w], size=(n, 2))
    rr, cc = np.mgrid[0:h, 0:w]
    _, label = cKDTree(seeds).query(np.stack([rr.ravel(), cc.ravel()], axis=1))
    return label.reshape(h, w), n


def augment_appearance(image: np.ndarray, seed: int, strength: float = 1.0,
                       region_size: float = 80.0) -> np.ndarray:
    """Deterministic pseudo-year change of an RGB orthoimage.

    Applies a channel remix, smooth brightness/contrast fields, sharp
    per-region contrast changes (a fraction of regions inverted, as after a
    crop rotation) and patch occlusions. ``strength`` scales every effect;
    0 returns the input unchanged.
    """
    rng = np.random.default_rng(seed)
    h, w = image.shape[:2]
    img = image.astype(float) / 255.0
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    if strength <= 0:
        return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)

    # channel remix
    mix = np.eye(3) + strength * rng.normal(0, 0.15, size=(3, 3))
    img = img @ mix.T

    # smooth regional brightness/contrast fields
    scale = max(h, w) / 5.0
    gain = 1.0 + strength * 0.35 * _octave_noise(rng, (h, w), (scale,), (1.0,))
    offset = strength * 0.12 * _octave_noise(rng, (h, w), (scale * 0.7,), (1.0,))
    img = (img - 0.5) * gain[:, :, None] + 0.5 + offset[:, :, None]

    # sharp per-region contrast changes
    label, n = _regions(rng, h, w, region_size)
    g = 1.0 + strength * rng.uniform(-0.5, 0.5, n)
    flip = rng.random(n) < 0.25 * min(strength, 1.0)
    g[flip] *= -1.0
    shift = strength * rng.normal(0, 0.1, n)
    idx = np.arange(n)
    for ch in range(3):
        mean = np.asarray(ndimage.mean(img[:, :, ch], label, idx))
        img[:, :, ch] = mean[label] + g[label] * (img[:, :, ch] - mean[label]) + shift[label]

    # occluding patches
    n_patches = int(strength * h * w / 2500)
    for _ in range(n_patches):
        ph, pw = rng.integers(6, 30, size=2)
        r0, c0 = rng.integers(0, max(1, h - ph)), rng.integers(0, max(1, w - pw))
        img[r0:r0 + ph, c0:c0 + pw] = rng.uniform(0.05, 0.95, size=3)

    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)


def pseudo_year_stack(base: MapLayer, labels, strength: float = 1.0, seed: int = 0) -> MapStack:
    """Stack whose first layer is ``base`` and later layers are augmented copies."""
    layers = [MapLayer(labels[0], Orthoimage(base.ortho.data, base.ortho.geo, labels[0]), base.elevation)]
    for i, label in enumerate(labels[1:], start=1):
        data = augment_appearance(base.ortho.data, seed + 104729 * i, strength)
        layers.append(MapLayer(label, Orthoimage(data, base.ortho.geo, label), base.elevation))
    return MapStack(tuple(layers))


def write_demo_maps(out_dir, labels=("2010", "2013"), size=(1200, 1200), pixel_size: float = 0.5,
                    strength: float = 1.0, seed: int = 0, camera=None) -> Path:
    """Write a pseudo-year map stack plus a ready-to-use ``config.ini``.

    Returns the config path. Every layer gets a PNG with world file and an
    ESRI ASCII elevation grid.
    """
    from .camera import CameraModel
    from .geodata import save_elevation, save_orthoimage

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = synthetic_layer(labels[0], size, pixel_size=pixel_size, seed=seed)
    stack = pseudo_year_stack(base, list(labels), strength=strength, seed=seed)
    cam = camera or CameraModel.default()
    lines = ["[camera]"]
    for key in ("fx", "fy", "cx", "cy", "width", "height"):
        lines.append(f"{key} = {getattr(cam, key)}")
    for key, value in zip(("k1", "k2", "p1", "p2", "k3"), cam.dist):
        lines.append(f"{key} = {value}")
    save_elevation(base.elevation, out_dir / "elevation.asc")
    for layer in stack.layers:
        save_orthoimage(layer.ortho, out_dir / f"ortho_{layer.label}.png")
        lines += ["", f"[layer {layer.label}]", f"image = ortho_{layer.label}.png",
                  f"world = ortho_{layer.label}.wld", "elevation = elevation.asc"]
    lines += ["", "[run]", f"seed = {seed}", "out_dir = out", ""]
    path = out_dir / "config.ini"
    path.write_text("\n".join(lines))
    return path
