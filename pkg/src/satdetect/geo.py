"""Core raster and georeferencing types shared by every stage.

Tiles carry normalized float pixels in [0, 1]; 8-bit quantization happens
only at the PNG boundary. The geographic model is a plain equirectangular
degree grid (affine pixel <-> lon/lat transform), which is all the exports
need.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

PATCH_SIZE = 64


class ValidationError(ValueError):
    """Raised when a domain object violates its invariants."""


@dataclass(frozen=True)
class GeoTransform:
    """Affine mapping between pixel coordinates and lon/lat degrees.

    ``deg_per_pixel_y`` is negative for north-up imagery (row index grows
    southward).
    """

    origin_lon: float
    origin_lat: float
    deg_per_pixel_x: float
    deg_per_pixel_y: float

    def __post_init__(self) -> None:
        if not self.deg_per_pixel_x > 0:
            raise ValidationError("deg_per_pixel_x must be > 0")
        if self.deg_per_pixel_y == 0:
            raise ValidationError("deg_per_pixel_y must be nonzero")

    def pixel_to_lonlat(self, x: float, y: float) -> tuple[float, float]:
        return (
            self.origin_lon + x * self.deg_per_pixel_x,
            self.origin_lat + y * self.deg_per_pixel_y,
        )

    def lonlat_to_pixel(self, lon: float, lat: float) -> tuple[float, float]:
        return (
            (lon - self.origin_lon) / self.deg_per_pixel_x,
            (lat - self.origin_lat) / self.deg_per_pixel_y,
        )

    def to_dict(self) -> dict:
        return {
            "origin_lon": self.origin_lon,
            "origin_lat": self.origin_lat,
            "deg_per_pixel_x": self.deg_per_pixel_x,
            "deg_per_pixel_y": self.deg_per_pixel_y,
        }

    @classmethod
    def from_dict(cls, d: dict) -> GeoTransform:
        return cls(
            origin_lon=float(d["origin_lon"]),
            origin_lat=float(d["origin_lat"]),
            deg_per_pixel_x=float(d["deg_per_pixel_x"]),
            deg_per_pixel_y=float(d["deg_per_pixel_y"]),
        )


DEFAULT_TRANSFORM = GeoTransform(0.0, 0.0, 1e-4, -1e-4)


@dataclass(frozen=True)
class RasterTile:
    """A geo-referenced image tile, immutable after creation.

    ``pixels`` has shape (height, width) for single-band tiles or
    (height, width, 3) for color; values are floats in [0, 1].
    """

    id: str
    pixels: np.ndarray
    transform: GeoTransform = DEFAULT_TRANSFORM
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            pass
        elif px.ndim == 3 and px.shape[2] == 3:
            pass
        else:
            raise ValidationError(
                f"pixels must be (H, W) or (H, W, 3), got shape {px.shape}"
            )
        if not np.all(np.isfinite(px)):
            raise ValidationError("pixels contain non-finite values")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValidationError("pixels outside [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def bands(self) -> int:
        return 1 if self.pixels.ndim == 2 else self.pixels.shape[2]

    def with_pixels(self, pixels: np.ndarray, meta: dict | None = None) -> RasterTile:
        """New tile sharing id/transform, optionally replacing meta."""
        return RasterTile(
            id=self.id,
            pixels=pixels,
            transform=self.transform,
            meta=dict(self.meta if meta is None else meta),
        )


@dataclass(frozen=True)
class Patch:
    """A 64x64 single-band window cut from a tile; the unit of classification."""

    tile_id: str
    x: int
    y: int
    pixels: np.ndarray

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.shape != (PATCH_SIZE, PATCH_SIZE):
            raise ValidationError(
                f"patch must be {PATCH_SIZE}x{PATCH_SIZE}, got {px.shape}"
            )
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def key(self) -> str:
        return f"{self.tile_id}_{self.x}_{self.y}"


def to_luminance(pixels: np.ndarray) -> np.ndarray:
    """Collapse a 3-band image to single-band using ITU-R 601 weights."""
    if pixels.ndim == 2:
        return pixels
    return pixels[..., 0] * 0.299 + pixels[..., 1] * 0.587 + pixels[..., 2] * 0.114


def rle_encode(mask: np.ndarray) -> list[int]:
    """Row-major run lengths, alternating zero/one runs, starting with zeros.

    The first entry may be 0 when the mask begins with a one-pixel.
    """
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return []
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(runs: list[int], shape: tuple[int, int]) -> np.ndarray:
    total = shape[0] * shape[1]
    flat = np.zeros(total, dtype=bool)
    pos = 0
    value = False
    for run in runs:
        if run:
            flat[pos : pos + run] = value
        pos += run
        value = not value
    if pos != total:
        raise ValidationError(f"RLE covers {pos} pixels, expected {total}")
    return flat.reshape(shape)


def _to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8)


def save_tile(tile: RasterTile, directory: str | Path) -> Path:
    """Write ``<id>.png`` plus ``<id>.meta.json`` sidecar; returns PNG path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    png_path = directory / f"{tile.id}.png"
    mode = "L" if tile.bands == 1 else "RGB"
    Image.fromarray(_to_uint8(tile.pixels), mode).save(png_path)
    sidecar = {
        "id": tile.id,
        "width": tile.width,
        "height": tile.height,
        "bands": tile.bands,
        "transform": tile.transform.to_dict(),
        "meta": tile.meta,
    }
    meta_path = directory / f"{tile.id}.meta.json"
    meta_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return png_path


def load_tile(png_path: str | Path) -> RasterTile:
    png_path = Path(png_path)
    meta_path = png_path.parent / (png_path.stem + ".meta.json")
    if not meta_path.exists():
        raise ValidationError(f"missing sidecar {meta_path.name} for {png_path.name}")
    sidecar = json.loads(meta_path.read_text())
    img = Image.open(png_path)
    arr = np.asarray(img, dtype=np.float64) / 255.0
    return RasterTile(
        id=sidecar["id"],
        pixels=arr,
        transform=GeoTransform.from_dict(sidecar["transform"]),
        meta=dict(sidecar.get("meta", {})),
    )
