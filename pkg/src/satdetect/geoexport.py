"""Detections out the door: density grids, KML/KMZ, GeoJSON, PNG heatmaps.

Everything here is deterministic byte for byte: inputs are sorted by
(tile_id, window origin), floats are formatted with repr-stable helpers,
and the KMZ entries carry a fixed timestamp so archives of identical
content hash identically.
"""
from __future__ import annotations

import json
import logging
import struct
import zlib
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dedup import ScoredMask
from .geo import PATCH_SIZE, GeoTransform, ValidationError

log = logging.getLogger(__name__)

_KMZ_DATE = (1980, 1, 1, 0, 0, 0)  # fixed entry timestamp, oldest zip allows


@dataclass(frozen=True)
class Detection:
    """One confirmed window in geographic coordinates."""

    lon: float
    lat: float
    polygon: tuple[tuple[float, float], ...]  # 4 corners, unclosed
    score: float
    tile_id: str
    x: int = 0
    y: int = 0

    def __post_init__(self) -> None:
        if len(self.polygon) != 4:
            raise ValidationError(
                f"polygon must have 4 corners, got {len(self.polygon)}"
            )
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"score {self.score} outside [0, 1]")

    @classmethod
    def from_mask(cls, mask: ScoredMask, transform: GeoTransform) -> Detection:
        cx, cy = mask.x + PATCH_SIZE / 2, mask.y + PATCH_SIZE / 2
        lon, lat = transform.pixel_to_lonlat(cx, cy)
        corners = tuple(
            transform.pixel_to_lonlat(px, py)
            for px, py in (
                (mask.x, mask.y),
                (mask.x + PATCH_SIZE, mask.y),
                (mask.x + PATCH_SIZE, mask.y + PATCH_SIZE),
                (mask.x, mask.y + PATCH_SIZE),
            )
        )
        return cls(
            lon=lon,
            lat=lat,
            polygon=corners,
            score=mask.score,
            tile_id=mask.tile_id,
            x=mask.x,
            y=mask.y,
        )


@dataclass
class DensityGrid:
    """Equirectangular degree grid of detection counts and score sums."""

    bounds: tuple[float, float, float, float]  # lon0, lat0, lon1, lat1
    cell_size: float
    counts: np.ndarray  # (rows, cols) int64
    score_sums: np.ndarray
    overflow: int = 0

    @property
    def rows(self) -> int:
        return self.counts.shape[0]

    @property
    def cols(self) -> int:
        return self.counts.shape[1]


def _sorted_detections(detections) -> list[Detection]:
    return sorted(detections, key=lambda d: (d.tile_id, d.x, d.y, -d.score))


def aggregate_density(
    detections, bounds: tuple[float, float, float, float], cell_size: float
) -> DensityGrid:
    """Bucket detection centers into a lon/lat grid.

    A center on a cell boundary lands in the lower-index cell. Centers
    outside the bounds go to the overflow bucket with a warning, so the
    conservation invariant (cells + overflow = detections) always holds.
    """
    lon0, lat0, lon1, lat1 = bounds
    if cell_size <= 0:
        raise ValidationError(f"cell_size must be > 0, got {cell_size}")
    if lon1 <= lon0 or lat1 <= lat0:
        raise ValidationError(f"empty bounds {bounds}")
    cols = int(np.ceil((lon1 - lon0) / cell_size))
    rows = int(np.ceil((lat1 - lat0) / cell_size))
    counts = np.zeros((rows, cols), dtype=np.int64)
    sums = np.zeros((rows, cols), dtype=np.float64)
    overflow = 0
    for det in detections:
        if not (lon0 <= det.lon <= lon1 and lat0 <= det.lat <= lat1):
            overflow += 1
            continue
        c = min(int((det.lon - lon0) / cell_size), cols - 1)
        r = min(int((det.lat - lat0) / cell_size), rows - 1)
        # exact boundary hits belong to the lower-index cell
        if det.lon == lon0 + c * cell_size and c > 0:
            c -= 1
        if det.lat == lat0 + r * cell_size and r > 0:
            r -= 1
        counts[r, c] += 1
        sums[r, c] += det.score
    if overflow:
        log.warning("%d detections fell outside the grid bounds", overflow)
    return DensityGrid(
        bounds=bounds, cell_size=cell_size, counts=counts, score_sums=sums,
        overflow=overflow,
    )


def _fmt(v: float) -> str:
    """Shortest float text that round-trips; keeps exports byte-stable."""
    return repr(float(v))


def _kml_escape(s: str) -> str:
    return (
        s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
        .replace('"', "&quot;")
    )


def write_kml(detections) -> str:
    """KML 2.2 document text: one Placemark per detection, closed rings."""
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        '<kml xmlns="http://www.opengis.net/kml/2.2">',
        "<Document>",
        "<name>detections</name>",
    ]
    for det in _sorted_detections(detections):
        ring = list(det.polygon) + [det.polygon[0]]
        coords = " ".join(f"{_fmt(lon)},{_fmt(lat)},0" for lon, lat in ring)
        lines.extend(
            [
                "<Placemark>",
                f"<name>{_kml_escape(det.tile_id)}_{det.x}_{det.y}</name>",
                "<ExtendedData>"
                f'<Data name="score"><value>{_fmt(det.score)}</value></Data>'
                "</ExtendedData>",
                "<Polygon><outerBoundaryIs><LinearRing>",
                f"<coordinates>{coords}</coordinates>",
                "</LinearRing></outerBoundaryIs></Polygon>",
                "</Placemark>",
            ]
        )
    lines.extend(["</Document>", "</kml>", ""])
    return "\n".join(lines)


def write_grid_kml(grid: DensityGrid, overlay_png: str) -> str:
    """KML wrapping a density grid as a GroundOverlay referencing a PNG."""
    lon0, lat0, lon1, lat1 = grid.bounds
    return "\n".join(
        [
            '<?xml version="1.0" encoding="UTF-8"?>',
            '<kml xmlns="http://www.opengis.net/kml/2.2">',
            "<Document>",
            "<GroundOverlay>",
            "<name>building density</name>",
            f"<Icon><href>{_kml_escape(overlay_png)}</href></Icon>",
            "<LatLonBox>",
            f"<north>{_fmt(lat1)}</north><south>{_fmt(lat0)}</south>",
            f"<east>{_fmt(lon1)}</east><west>{_fmt(lon0)}</west>",
            "</LatLonBox>",
            "</GroundOverlay>",
            "</Document>",
            "</kml>",
            "",
        ]
    )


def package_kmz(kml: str, path: str | Path, assets: dict[str, bytes] | None = None) -> Path:
    """Zip the document (plus binary assets) with doc.kml as first entry."""
    path = Path(path)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        info = zipfile.ZipInfo("doc.kml", date_time=_KMZ_DATE)
        info.compress_type = zipfile.ZIP_DEFLATED
        zf.writestr(info, kml.encode("utf-8"))
        for name in sorted(assets or {}):
            info = zipfile.ZipInfo(name, date_time=_KMZ_DATE)
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, assets[name])
    return path


def write_geojson(detections) -> str:
    """FeatureCollection with one polygon Feature per detection."""
    features = []
    for det in _sorted_detections(detections):
        ring = [[lon, lat] for lon, lat in det.polygon]
        ring.append(ring[0])
        features.append(
            {
                "type": "Feature",
                "geometry": {"type": "Polygon", "coordinates": [ring]},
                "properties": {
                    "score": det.score,
                    "tile_id": det.tile_id,
                    "x": det.x,
                    "y": det.y,
                },
            }
        )
    doc = {"type": "FeatureCollection", "features": features}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def _heat_rgb(t: np.ndarray) -> np.ndarray:
    """Black-red-yellow-white ramp on [0, 1] (monotone per channel)."""
    r = np.clip(3.0 * t, 0.0, 1.0)
    g = np.clip(3.0 * t - 1.0, 0.0, 1.0)
    b = np.clip(3.0 * t - 2.0, 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)


def _png_chunk(tag: bytes, payload: bytes) -> bytes:
    crc = zlib.crc32(tag + payload) & 0xFFFFFFFF
    return struct.pack(">I", len(payload)) + tag + payload + struct.pack(">I", crc)


def _encode_png(rgb8: np.ndarray) -> bytes:
    """Minimal fixed-layout RGB PNG encoder; bit-identical across runs."""
    h, w, _ = rgb8.shape
    raw = b"".join(b"\x00" + rgb8[r].tobytes() for r in range(h))
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    return b"".join(
        [
            b"\x89PNG\r\n\x1a\n",
            _png_chunk(b"IHDR", ihdr),
            _png_chunk(b"IDAT", zlib.compress(raw, 9)),
            _png_chunk(b"IEND", b""),
        ]
    )


def write_png_heatmap(grid: DensityGrid, path: str | Path, scale: int = 8) -> Path:
    """Render grid counts through the heat ramp, max count at full white.

    Rows are flipped so north ends up at the top of the image. A zero-max
    grid renders all black, which is a valid (if dull) answer.
    """
    path = Path(path)
    top = float(grid.counts.max())
    t = grid.counts / top if top > 0 else np.zeros_like(grid.counts, dtype=float)
    rgb = _heat_rgb(t[::-1])  # row 0 of the grid is the southern edge
    rgb8 = np.round(rgb * 255.0).astype(np.uint8)
    rgb8 = np.repeat(np.repeat(rgb8, scale, axis=0), scale, axis=1)
    path.write_bytes(_encode_png(rgb8))
    return path
