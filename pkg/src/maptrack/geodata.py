"""Geo-referenced rasters: orthoimages, elevation grids and map stacks.

Pixel coordinates follow the world-file convention: integer (col, row) is
the *center* of a pixel, and the GeoTransform origin is the center of the
top-left pixel. Northing decreases as the row index grows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image


class GeoDataError(ValueError):
    """Raised for malformed or inconsistent raster inputs."""


@dataclass(frozen=True)
class GeoTransform:
    origin_easting: float
    origin_northing: float
    pixel_size_x: float
    pixel_size_y: float

    def __post_init__(self):
        if not (self.pixel_size_x > 0 and self.pixel_size_y > 0):
            raise GeoDataError(
                f"pixel sizes must be positive, got "
                f"({self.pixel_size_x}, {self.pixel_size_y})"
            )

    def shifted(self, col0: int, row0: int) -> "GeoTransform":
        """Transform of a sub-raster whose top-left pixel is (col0, row0)."""
        e, n = pixel_to_geo(self, col0, row0)
        return replace(self, origin_easting=e, origin_northing=n)


def geo_to_pixel(geo: GeoTransform, easting, northing):
    col = (np.asarray(easting, dtype=float) - geo.origin_easting) / geo.pixel_size_x
    row = (geo.origin_northing - np.asarray(northing, dtype=float)) / geo.pixel_size_y
    if col.ndim == 0:
        return float(col), float(row)
    return col, row


def pixel_to_geo(geo: GeoTransform, col, row):
    easting = geo.origin_easting + np.asarray(col, dtype=float) * geo.pixel_size_x
    northing = geo.origin_northing - np.asarray(row, dtype=float) * geo.pixel_size_y
    if easting.ndim == 0:
        return float(easting), float(northing)
    return easting, northing


def raster_extent(geo: GeoTransform, width: int, height: int):
    """Outer pixel-edge extent as ((e_min, e_max), (n_min, n_max))."""
    hx, hy = 0.5 * geo.pixel_size_x, 0.5 * geo.pixel_size_y
    e_min = geo.origin_easting - hx
    e_max = geo.origin_easting + (width - 1) * geo.pixel_size_x + hx
    n_max = geo.origin_northing + hy
    n_min = geo.origin_northing - (height - 1) * geo.pixel_size_y - hy
    return (e_min, e_max), (n_min, n_max)


@dataclass(frozen=True)
class Orthoimage:
    """8-bit geo-referenced image, ``data`` shaped (height, width, channels)."""

    data: np.ndarray
    geo: GeoTransform
    label: str = ""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise GeoDataError(f"orthoimage must have 1 or 3 channels, got shape {data.shape}")
        if data.dtype != np.uint8:
            raise GeoDataError(f"orthoimage must be 8-bit, got {data.dtype}")
        data = np.ascontiguousarray(data)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def extent(self):
        return raster_extent(self.geo, self.width, self.height)


@dataclass(frozen=True)
class ElevationMap:
    """Float32 height grid in meters, ``data`` shaped (height, width).

    Cells equal to ``nodata`` are invalid; every other cell must be finite.
    """

    data: np.ndarray
    geo: GeoTransform
    nodata: float = -9999.0

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 2:
            raise GeoDataError(f"elevation grid must be 2-D, got shape {data.shape}")
        bad = ~np.isfinite(data) & ~self._nodata_cells(data)
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise GeoDataError(f"non-finite elevation at row {r}, col {c}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    def _nodata_cells(self, data):
        if math.isnan(self.nodata):
            return np.isnan(data)
        return data == np.float32(self.nodata)

    @property
    def valid(self) -> np.ndarray:
        return ~self._nodata_cells(self.data)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def extent(self):
        return raster_extent(self.geo, self.width, self.height)


@dataclass(frozen=True)
class MapLayer:
    label: str
    ortho: Orthoimage
    elevation: ElevationMap


@dataclass(frozen=True)
class MapStack:
    """Ordered map layers; ``latest`` names the layer used for online rendering."""

    layers: tuple[MapLayer, ...]
    latest: str | None = field(default=None)

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise GeoDataError("a map stack needs at least one layer")
        labels = [layer.label for layer in layers]
        if len(set(labels)) != len(labels):
            raise GeoDataError(f"duplicate layer labels: {labels}")
        latest = self.latest if self.latest is not None else labels[-1]
        if latest not in labels:
            raise GeoDataError(f"latest layer {latest!r} not among {labels}")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "latest", latest)

    @property
    def labels(self) -> list[str]:
        return [layer.label for layer in self.layers]

    def layer(self, label: str) -> MapLayer:
        for layer in self.layers:
            if layer.label == label:
                return layer
        raise KeyError(label)

    def most_recent(self) -> MapLayer:
        return self.layer(self.latest)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def read_world_file(path) -> GeoTransform:
    """Parse the 4-line header: pixel_size_x, pixel_size_y, origin E, origin N."""
    path = Path(path)
    try:
        tokens = path.read_text().split()
    except OSError as exc:
        raise GeoDataError(f"cannot read world file {path}: {exc}") from exc
    if len(tokens) != 4:
        raise GeoDataError(f"world file {path} must hold 4 numbers, found {len(tokens)}")
    try:
        sx, sy, e0, n0 = (float(t) for t in tokens)
    except ValueError as exc:
        raise GeoDataError(f"world file {path}: {exc}") from exc
    return GeoTransform(origin_easting=e0, origin_northing=n0, pixel_size_x=sx, pixel_size_y=sy)


def write_world_file(path, geo: GeoTransform) -> None:
    values = (geo.pixel_size_x, geo.pixel_size_y, geo.origin_easting, geo.origin_northing)
    Path(path).write_text("".join(f"{v!r}\n" for v in values))


def world_file_for(image_path) -> Path:
    return Path(image_path).with_suffix(".wld")


def load_orthoimage(image_path, world_file_path=None, label: str | None = None) -> Orthoimage:
    image_path = Path(image_path)
    world_file_path = world_file_for(image_path) if world_file_path is None else Path(world_file_path)
    geo = read_world_file(world_file_path)
    try:
        with Image.open(image_path) as img:
            if img.mode not in ("L", "RGB"):
                raise GeoDataError(
                    f"{image_path}: unsupported PNG mode {img.mode!r} (need 8-bit L or RGB)"
                )
            data = np.asarray(img)
    except GeoDataError:
        raise
    except (OSError, SyntaxError) as exc:
        raise GeoDataError(f"cannot read orthoimage {image_path}: {exc}") from exc
    return Orthoimage(data=data, geo=geo, label=image_path.stem if label is None else label)


def save_orthoimage(ortho: Orthoimage, image_path, world_file_path=None) -> None:
    image_path = Path(image_path)
    data = ortho.data[:, :, 0] if ortho.channels == 1 else ortho.data
    Image.fromarray(data).save(image_path, format="PNG")
    write_world_file(world_file_for(image_path) if world_file_path is None else world_file_path, ortho.geo)


_ASC_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "xllcenter", "yllcenter",
             "cellsize", "nodata_value")


def load_elevation(asc_path) -> ElevationMap:
    """Read an ESRI ASCII grid (corner or center registered)."""
    asc_path = Path(asc_path)
    try:
        lines = asc_path.read_text().splitlines()
    except OSError as exc:
        raise GeoDataError(f"cannot read elevation grid {asc_path}: {exc}") from exc

    header: dict[str, float] = {}
    idx = 0
    while idx < len(lines):
        parts = lines[idx].split()
        if not parts:
            idx += 1
            continue
        key = parts[0].lower()
        if key not in _ASC_KEYS:
            break
        if len(parts) != 2:
            raise GeoDataError(f"{asc_path}: malformed header line {lines[idx]!r}")
        try:
            header[key] = float(parts[1])
        except ValueError as exc:
            raise GeoDataError(f"{asc_path}: malformed header line {lines[idx]!r}") from exc
        idx += 1

    for key in ("ncols", "nrows", "cellsize"):
        if key not in header:
            raise GeoDataError(f"{asc_path}: header lacks {key}")
    has_corner = "xllcorner" in header and "yllcorner" in header
    has_center = "xllcenter" in header and "yllcenter" in header
    if not (has_corner or has_center):
        raise GeoDataError(f"{asc_path}: header lacks lower-left coordinates")
    ncols, nrows = int(header["ncols"]), int(header["nrows"])
    if ncols < 1 or nrows < 1 or ncols != header["ncols"] or nrows != header["nrows"]:
        raise GeoDataError(f"{asc_path}: invalid grid size {header['ncols']} x {header['nrows']}")
    cell = header["cellsize"]
    if not cell > 0:
        raise GeoDataError(f"{asc_path}: non-positive cellsize {cell}")
    nodata = header.get("nodata_value", -9999.0)

    rows = []
    for line in lines[idx:]:
        parts = line.split()
        if not parts:
            continue
        if len(parts) != ncols:
            raise GeoDataError(
                f"{asc_path}: row {len(rows)} has {len(parts)} values, expected {ncols}"
            )
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise GeoDataError(f"{asc_path}: row {len(rows)}: {exc}") from exc
    if len(rows) != nrows:
        raise GeoDataError(f"{asc_path}: found {len(rows)} rows, expected {nrows}")
    data = np.array(rows, dtype=np.float32)

    if has_center:
        e0, n_ll = header["xllcenter"], header["yllcenter"]
    else:
        e0, n_ll = header["xllcorner"] + 0.5 * cell, header["yllcorner"] + 0.5 * cell
    geo = GeoTransform(origin_easting=e0, origin_northing=n_ll + (nrows - 1) * cell,
                       pixel_size_x=cell, pixel_size_y=cell)
    return ElevationMap(data=data, geo=geo, nodata=nodata)


def save_elevation(elev: ElevationMap, asc_path) -> None:
    """Write an ESRI ASCII grid; float32 values are written round-trip exactly."""
    geo = elev.geo
    if geo.pixel_size_x != geo.pixel_size_y:
        raise GeoDataError("ESRI ASCII grids need square cells")
    n_ll = geo.origin_northing - (elev.height - 1) * geo.pixel_size_y
    out = [
        f"ncols {elev.width}",
        f"nrows {elev.height}",
        f"xllcenter {geo.origin_easting!r}",
        f"yllcenter {n_ll!r}",
        f"cellsize {geo.pixel_size_x!r}",
        f"NODATA_value {float(elev.nodata)!r}",
    ]
    # repr of float32 values is the shortest string that parses back exactly
    for row in elev.data:
        out.append(" ".join(repr(float(v)) if np.isfinite(v) else repr(float(elev.nodata))
                            for v in row.astype(np.float32).tolist()))
    Path(asc_path).write_text("\n".join(out) + "\n")


# ---------------------------------------------------------------------------
# Sampling and cropping
# ---------------------------------------------------------------------------


def sample_elevation(elev: ElevationMap, easting, northing):
    """Bilinear elevation at world coordinates (scalar or array)."""
    col, row = geo_to_pixel(elev.geo, easting, northing)
    col = np.asarray(col, dtype=float)
    row = np.asarray(row, dtype=float)
    tol = 1e-9
    outside = (col < -tol) | (col > elev.width - 1 + tol) | (row < -tol) | (row > elev.height - 1 + tol)
    if np.any(outside):
        raise GeoDataError("elevation query outside the raster extent")
    col = np.clip(col, 0.0, elev.width - 1)
    row = np.clip(row, 0.0, elev.height - 1)
    c0 = np.minimum(np.floor(col).astype(int), max(elev.width - 2, 0))
    r0 = np.minimum(np.floor(row).astype(int), max(elev.height - 2, 0))
    c1 = np.minimum(c0 + 1, elev.width - 1)
    r1 = np.minimum(r0 + 1, elev.height - 1)
    fc = col - c0
    fr = row - r0
    z = elev.data
    valid = elev.valid
    if not np.all(valid[r0, c0] & valid[r0, c1] & valid[r1, c0] & valid[r1, c1]):
        raise GeoDataError("elevation query touches a nodata cell")
    z00 = z[r0, c0].astype(float)
    z01 = z[r0, c1].astype(float)
    z10 = z[r1, c0].astype(float)
    z11 = z[r1, c1].astype(float)
    top = z00 + (z01 - z00) * fc
    bottom = z10 + (z11 - z10) * fc
    out = top + (bottom - top) * fr
    return float(out) if out.ndim == 0 else out


def _pixel_window(geo, width, height, easting_range, northing_range):
    """Half-open selection of pixels whose centers fall in the ranges."""
    eps = 1e-9
    e_lo, e_hi = sorted(easting_range)
    n_lo, n_hi = sorted(northing_range)
    c0 = math.ceil((e_lo - geo.origin_easting) / geo.pixel_size_x - eps)
    c1 = math.ceil((e_hi - geo.origin_easting) / geo.pixel_size_x - eps)
    # rows grow southward: northing n_hi maps to the smallest row
    r0 = math.floor((geo.origin_northing - n_hi) / geo.pixel_size_y + eps) + 1
    r1 = math.floor((geo.origin_northing - n_lo) / geo.pixel_size_y + eps) + 1
    c0, r0 = max(c0, 0), max(r0, 0)
    c1, r1 = min(c1, width), min(r1, height)
    if c1 <= c0 or r1 <= r0:
        raise GeoDataError("crop region does not intersect the raster")
    return c0, r0, c1, r1


def crop_region(stack: MapStack, easting_range, northing_range) -> MapStack:
    """Crop every layer to the pixels whose centers lie in the half-open ranges."""
    layers = []
    for layer in stack.layers:
        o, e = layer.ortho, layer.elevation
        c0, r0, c1, r1 = _pixel_window(o.geo, o.width, o.height, easting_range, northing_range)
        ortho = Orthoimage(data=o.data[r0:r1, c0:c1], geo=o.geo.shifted(c0, r0), label=o.label)
        c0, r0, c1, r1 = _pixel_window(e.geo, e.width, e.height, easting_range, northing_range)
        elev = ElevationMap(data=e.data[r0:r1, c0:c1], geo=e.geo.shifted(c0, r0), nodata=e.nodata)
        layers.append(MapLayer(layer.label, ortho, elev))
    return MapStack(tuple(layers), latest=stack.latest)
