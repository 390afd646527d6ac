"""Synthetic satellite-scene generation with exact ground truth.

Scenes are built from three ingredients: a low-frequency value-noise
background (no straight edges), thin high-contrast linear features (roads,
tracks, field boundaries) that exercise the straight-edge proposal without
being buildings, and axis-aligned rectangular or L-shaped buildings whose
footprints are recorded exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geo import (
    PATCH_SIZE,
    GeoTransform,
    Patch,
    RasterTile,
    ValidationError,
)

NOISE_KINDS = ("gaussian", "salt_pepper", "stripe")

# A window is labeled positive when at least this many building-mask pixels
# are visible inside it: a 12 px square of roof, roughly the smallest piece
# a human labeler would call a building rather than edge clutter. Corner
# slivers below the floor land in the negative class on purpose; a sliver
# can barely move a mean over 4096 pixels, so keeping such windows positive
# caps recall for any model read out through global average pooling.
MIN_LABEL_AREA = 128


@dataclass(frozen=True)
class StyleParams:
    """Country-style knobs: how buildings and clutter look in one region."""

    name: str = "default"
    size_range: tuple[float, float] = (10.0, 28.0)
    aspect_range: tuple[float, float] = (0.6, 1.8)
    contrast_range: tuple[float, float] = (0.2, 0.5)
    lshape_fraction: float = 0.3
    texture_scale: float = 96.0
    dark_fraction: float = 0.5
    road_count_range: tuple[int, int] = (10, 16)
    road_width_range: tuple[float, float] = (2.0, 3.5)
    road_contrast_range: tuple[float, float] = (0.18, 0.38)
    road_length_range: tuple[float, float] = (0.15, 0.45)
    # Flat building-sized patches that are not buildings (bare pads, lots,
    # outcrops), stamped with the polarity opposite the style's buildings.
    pad_density: float = 0.0  # per 1e6 px, like building_density
    pad_contrast_range: tuple[float, float] = (0.12, 0.2)
    # Fraction of buildings drawn as perimeter walls around an open court:
    # only the wall pixels are building, the interior stays ground.
    hollow_fraction: float = 0.0
    # Fraction of buildings rotated off the pixel axes (15 to 75 degrees).
    rotated_fraction: float = 0.0

    def __post_init__(self) -> None:
        for fname in (
            "size_range",
            "aspect_range",
            "contrast_range",
            "road_count_range",
            "road_width_range",
            "road_contrast_range",
            "road_length_range",
            "pad_contrast_range",
        ):
            lo, hi = getattr(self, fname)
            if lo > hi:
                raise ValidationError(f"StyleParams.{fname}: min > max")
        if not 0.0 <= self.lshape_fraction <= 1.0:
            raise ValidationError("StyleParams.lshape_fraction outside [0, 1]")
        if not 0.0 <= self.dark_fraction <= 1.0:
            raise ValidationError("StyleParams.dark_fraction outside [0, 1]")
        if self.texture_scale <= 0:
            raise ValidationError("StyleParams.texture_scale must be > 0")
        if self.pad_density < 0:
            raise ValidationError("StyleParams.pad_density must be >= 0")
        if not 0.0 <= self.hollow_fraction <= 1.0:
            raise ValidationError("StyleParams.hollow_fraction outside [0, 1]")
        if not 0.0 <= self.rotated_fraction <= 1.0:
            raise ValidationError("StyleParams.rotated_fraction outside [0, 1]")


# Three fictional regions spanning the appearance axes that matter:
# A is bright high-contrast suburbs, B mixes both polarities, C is dark
# low-contrast fabric where most buildings sit rotated off the pixel
# axes. Size floors sit well above the labeling area floor: a building
# smaller than ~17 px a side barely moves the pooled mask probability,
# which turns its windows into coin flips for any model read out through
# global average pooling. C stays the hard style; its contrast floor
# keeps buildings above the default edge-magnitude threshold, and the
# rotated majority is what a model trained mostly on A and B tends to
# miss until it is tuned on C itself.
STYLE_PRESETS: dict[str, StyleParams] = {
    "A": StyleParams(
        name="A",
        size_range=(18.0, 34.0),
        contrast_range=(0.3, 0.5),
        dark_fraction=0.0,
        texture_scale=110.0,
    ),
    "B": StyleParams(name="B", size_range=(17.0, 32.0)),
    "C": StyleParams(
        name="C",
        size_range=(18.0, 30.0),
        contrast_range=(0.21, 0.32),
        dark_fraction=1.0,
        lshape_fraction=0.3,
        texture_scale=70.0,
        rotated_fraction=0.6,
    ),
}


def style(name: str) -> StyleParams:
    """Look up a named style preset."""
    try:
        return STYLE_PRESETS[name]
    except KeyError:
        raise ValidationError(
            f"unknown style {name!r}; presets: {sorted(STYLE_PRESETS)}"
        ) from None


@dataclass(frozen=True)
class NoiseSpec:
    """Sensor/enhancement noise model: gaussian, salt_pepper or stripe."""

    kind: str
    strength: float

    def __post_init__(self) -> None:
        if self.kind not in NOISE_KINDS:
            raise ValidationError(
                f"NoiseSpec.kind must be one of {NOISE_KINDS}, got {self.kind!r}"
            )
        if self.strength < 0:
            raise ValidationError("NoiseSpec.strength must be >= 0")


@dataclass(frozen=True)
class CloudSpec:
    coverage: float
    blob_scale: float = 128.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.coverage <= 1.0:
            raise ValidationError("CloudSpec.coverage outside [0, 1]")
        if self.blob_scale <= 0:
            raise ValidationError("CloudSpec.blob_scale must be > 0")


@dataclass(frozen=True)
class SceneSpec:
    width: int
    height: int
    country_style: StyleParams = field(default_factory=StyleParams)
    building_density: float = 5.0  # buildings per 1000x1000 px
    noise: NoiseSpec | None = None
    cloud: CloudSpec | None = None
    rng_seed: int = 0

    def __post_init__(self) -> None:
        problems = []
        if self.width < PATCH_SIZE:
            problems.append(f"width {self.width} < {PATCH_SIZE}")
        if self.height < PATCH_SIZE:
            problems.append(f"height {self.height} < {PATCH_SIZE}")
        if self.building_density < 0:
            problems.append(f"building_density {self.building_density} < 0")
        if problems:
            raise ValidationError("invalid SceneSpec: " + "; ".join(problems))


@dataclass(frozen=True)
class Footprint:
    """One building: bounding box, polygon outline and rasterized pixels."""

    box: tuple[int, int, int, int]  # x0, y0, x1, y1 (exclusive)
    polygon: tuple[tuple[float, float], ...]
    submask: np.ndarray  # bool mask of shape (y1-y0, x1-x0)
    # Per-pixel fill fraction for footprints whose outline cuts through
    # pixels (rotated buildings). None means the submask is exact and the
    # stamp is a hard fill; imaging blur has nothing to soften there.
    coverage: np.ndarray | None = None

    @property
    def area(self) -> int:
        return int(self.submask.sum())

    def pixels_in_window(self, x0: int, y0: int, x1: int, y1: int) -> int:
        """Count footprint pixels inside the half-open window box."""
        bx0, by0, bx1, by1 = self.box
        ix0, iy0 = max(bx0, x0), max(by0, y0)
        ix1, iy1 = min(bx1, x1), min(by1, y1)
        if ix0 >= ix1 or iy0 >= iy1:
            return 0
        sub = self.submask[iy0 - by0 : iy1 - by0, ix0 - bx0 : ix1 - bx0]
        return int(sub.sum())


@dataclass(frozen=True)
class GroundTruth:
    footprints: tuple[Footprint, ...]
    mask: np.ndarray  # bool, (height, width)

    def window_contains_building(
        self, x: int, y: int, size: int = PATCH_SIZE, min_fraction: float = 0.5
    ) -> bool:
        """True if the window holds >= min_fraction of some footprint's area."""
        for fp in self.footprints:
            if fp.pixels_in_window(x, y, x + size, y + size) >= min_fraction * fp.area:
                return True
        return False

    def window_has_building(
        self, x: int, y: int, size: int = PATCH_SIZE, min_area_px: int = MIN_LABEL_AREA
    ) -> bool:
        """True if at least min_area_px building pixels fall inside the window.

        This is the patch labeling rule. Unlike the containment rule above
        it depends only on what is visible inside the window, never on how
        much of a clipped building lies outside it, so a classifier that
        sees just the window pixels can in principle learn it exactly.
        """
        h, w = self.mask.shape
        x0, y0 = max(0, x), max(0, y)
        x1, y1 = min(w, x + size), min(h, y + size)
        if x0 >= x1 or y0 >= y1:
            return False
        return int(self.mask[y0:y1, x0:x1].sum()) >= min_area_px


def _smoothstep(t: np.ndarray) -> np.ndarray:
    return t * t * (3.0 - 2.0 * t)


def value_noise(
    height: int, width: int, grid: float, rng: np.random.Generator
) -> np.ndarray:
    """Smoothstep-interpolated random lattice noise in [0, 1]."""
    grid = max(2.0, float(grid))
    gh = int(height / grid) + 2
    gw = int(width / grid) + 2
    g = rng.random((gh, gw))
    y = np.arange(height)[:, None] / grid
    x = np.arange(width)[None, :] / grid
    yi = np.floor(y).astype(int)
    xi = np.floor(x).astype(int)
    fy = _smoothstep(y - yi)
    fx = _smoothstep(x - xi)
    n0 = g[yi, xi] * (1 - fx) + g[yi, xi + 1] * fx
    n1 = g[yi + 1, xi] * (1 - fx) + g[yi + 1, xi + 1] * fx
    return n0 * (1 - fy) + n1 * fy


def octave_noise(
    height: int,
    width: int,
    base_scale: float,
    rng: np.random.Generator,
    octaves: int = 4,
    gain: float = 0.5,
) -> np.ndarray:
    """Octave-summed value noise normalized to [0, 1]."""
    out = np.zeros((height, width))
    amp = 1.0
    total = 0.0
    scale = base_scale
    for _ in range(octaves):
        out += amp * value_noise(height, width, scale, rng)
        total += amp
        amp *= gain
        scale = max(2.0, scale / 2.0)
    out /= total
    lo, hi = out.min(), out.max()
    if hi - lo < 1e-12:
        return np.zeros_like(out)
    return (out - lo) / (hi - lo)


def _draw_road(
    img: np.ndarray, rng: np.random.Generator, style: StyleParams
) -> None:
    """Stamp one linear feature (road/track) with a contrast offset."""
    h, w = img.shape
    frac = rng.uniform(*style.road_length_range)
    length = frac * min(w, h)
    angle = rng.uniform(0.0, math.pi)
    cx = rng.uniform(0, w)
    cy = rng.uniform(0, h)
    dx, dy = math.cos(angle), math.sin(angle)
    x0, y0 = cx - dx * length / 2, cy - dy * length / 2
    x1, y1 = cx + dx * length / 2, cy + dy * length / 2
    width_px = rng.uniform(*style.road_width_range)
    contrast = rng.uniform(*style.road_contrast_range)
    sign = -1.0 if rng.random() < 0.5 else 1.0

    pad = width_px + 2.0
    bx0 = max(0, int(math.floor(min(x0, x1) - pad)))
    bx1 = min(w, int(math.ceil(max(x0, x1) + pad)))
    by0 = max(0, int(math.floor(min(y0, y1) - pad)))
    by1 = min(h, int(math.ceil(max(y0, y1) + pad)))
    if bx0 >= bx1 or by0 >= by1:
        return
    ys, xs = np.mgrid[by0:by1, bx0:bx1]
    # distance from pixel center to the segment
    px = xs + 0.5 - x0
    py = ys + 0.5 - y0
    seg_len2 = (x1 - x0) ** 2 + (y1 - y0) ** 2
    t = np.clip((px * (x1 - x0) + py * (y1 - y0)) / max(seg_len2, 1e-9), 0.0, 1.0)
    dist = np.hypot(px - t * (x1 - x0), py - t * (y1 - y0))
    inside = dist <= width_px / 2.0
    region = img[by0:by1, bx0:bx1]
    region[inside] = np.clip(region[inside] + sign * contrast, 0.0, 1.0)


def _stamp_pads(
    img: np.ndarray, rng: np.random.Generator, style: StyleParams
) -> list[tuple[int, int, int, int]]:
    """Stamp flat non-building patches; returns their boxes.

    Pads use the polarity opposite the style's dominant building sign, so
    in a dark-building region they read as bright slabs. They are clutter,
    not truth: nothing here touches the footprint list or mask.
    """
    h, w = img.shape
    n_pads = int(rng.poisson(style.pad_density * w * h / 1e6))
    sign = 1.0 if style.dark_fraction >= 0.5 else -1.0
    boxes: list[tuple[int, int, int, int]] = []
    for _ in range(n_pads):
        for _attempt in range(50):
            size = rng.uniform(style.size_range[0], style.size_range[1] * 1.8)
            aspect = rng.uniform(*style.aspect_range)
            pw = max(6, int(round(size * math.sqrt(aspect))))
            ph = max(6, int(round(size / math.sqrt(aspect))))
            if pw + 2 >= w or ph + 2 >= h:
                continue
            x0 = int(rng.integers(1, w - pw - 1))
            y0 = int(rng.integers(1, h - ph - 1))
            box = (x0, y0, x0 + pw, y0 + ph)
            if any(_box_overlap_frac(box, b) > 0.2 for b in boxes):
                continue
            local = img[y0 : y0 + ph, x0 : x0 + pw]
            level = float(np.clip(float(local.mean()) + sign * rng.uniform(*style.pad_contrast_range), 0.02, 0.98))
            local[:, :] = level
            boxes.append(box)
            break
    return boxes


def _building_shape(
    rng: np.random.Generator, style: StyleParams
) -> tuple[int, int, str, float, float, float]:
    """Draw (bw, bh, kind, notch_fx, notch_fy, angle) for one building."""
    size = rng.uniform(*style.size_range)
    aspect = rng.uniform(*style.aspect_range)
    bw = max(4, int(round(size * math.sqrt(aspect))))
    bh = max(4, int(round(size / math.sqrt(aspect))))
    u_rot = rng.random()
    u_court = rng.random()
    u_lshape = rng.random()
    angle = rng.uniform(math.radians(15.0), math.radians(75.0))
    if u_rot < style.rotated_fraction:
        kind = "rotated"
    elif u_court < style.hollow_fraction:
        kind = "court"
    elif u_lshape < style.lshape_fraction:
        kind = "lshape"
    else:
        kind = "rect"
    notch_fx = rng.uniform(0.3, 0.55)
    notch_fy = rng.uniform(0.3, 0.55)
    return bw, bh, kind, notch_fx, notch_fy, angle


WALL_PX = 3  # courtyard wall thickness


def _footprint_extent(bw: int, bh: int, kind: str, angle: float) -> tuple[int, int]:
    """Axis-aligned bounding size of the (possibly rotated) building."""
    if kind != "rotated":
        return bw, bh
    c, s = abs(math.cos(angle)), abs(math.sin(angle))
    return int(math.ceil(bw * c + bh * s)), int(math.ceil(bw * s + bh * c))


def _make_footprint(
    x0: int,
    y0: int,
    bw: int,
    bh: int,
    kind: str,
    notch_fx: float,
    notch_fy: float,
    angle: float = 0.0,
) -> Footprint:
    if kind == "rotated":
        ew, eh = _footprint_extent(bw, bh, kind, angle)
        c, s = math.cos(angle), math.sin(angle)
        # Supersample the inside test so tilted walls render with the
        # partial-pixel coverage a sensor would record. A hard staircase
        # would scatter edge orientations and is not what blur-limited
        # imagery looks like.
        ss = 4
        ys, xs = np.mgrid[0 : eh * ss, 0 : ew * ss]
        dx = (xs + 0.5) / ss - ew / 2.0
        dy = (ys + 0.5) / ss - eh / 2.0
        u = dx * c + dy * s
        v = -dx * s + dy * c
        inside = (np.abs(u) <= bw / 2.0) & (np.abs(v) <= bh / 2.0)
        alpha = inside.reshape(eh, ss, ew, ss).mean(axis=(1, 3))
        sub = alpha > 0.5
        sub.setflags(write=False)
        alpha.setflags(write=False)
        cx, cy = x0 + ew / 2.0, y0 + eh / 2.0
        poly = tuple(
            (cx + ux * c - vy * s, cy + ux * s + vy * c)
            for ux, vy in ((-bw / 2, -bh / 2), (bw / 2, -bh / 2), (bw / 2, bh / 2), (-bw / 2, bh / 2))
        )
        return Footprint(
            box=(x0, y0, x0 + ew, y0 + eh), polygon=poly, submask=sub, coverage=alpha
        )
    x1, y1 = x0 + bw, y0 + bh
    sub = np.ones((bh, bw), dtype=bool)
    poly = ((x0, y0), (x1, y0), (x1, y1), (x0, y1))
    if kind == "lshape":
        nw = max(2, int(round(bw * notch_fx)))
        nh = max(2, int(round(bh * notch_fy)))
        nw = min(nw, bw - 2)
        nh = min(nh, bh - 2)
        sub[:nh, bw - nw :] = False  # notch cut from the top-right corner
        poly = (
            (x0, y0),
            (x1 - nw, y0),
            (x1 - nw, y0 + nh),
            (x1, y0 + nh),
            (x1, y1),
            (x0, y1),
        )
    elif kind == "court" and bw > 2 * WALL_PX + 1 and bh > 2 * WALL_PX + 1:
        sub[WALL_PX : bh - WALL_PX, WALL_PX : bw - WALL_PX] = False
    sub.setflags(write=False)
    return Footprint(box=(x0, y0, x1, y1), polygon=tuple((float(a), float(b)) for a, b in poly), submask=sub)


def _box_overlap_frac(a: tuple[int, int, int, int], b: tuple[int, int, int, int]) -> float:
    ix = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter == 0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / min(area_a, area_b)


def generate_scene(
    spec: SceneSpec,
    tile_id: str | None = None,
    origin: tuple[float, float] | None = None,
) -> tuple[RasterTile, GroundTruth]:
    """Render one scene and its exact ground truth.

    Deterministic for a fixed ``spec.rng_seed``; ``tile_id`` and geographic
    ``origin`` are presentation knobs that do not affect pixel content.
    """
    w, h = spec.width, spec.height
    style = spec.country_style
    seeds = np.random.SeedSequence(spec.rng_seed).spawn(4)
    rng_bg = np.random.default_rng(seeds[0])
    rng_feat = np.random.default_rng(seeds[1])

    img = 0.35 + 0.3 * octave_noise(h, w, style.texture_scale, rng_bg)

    n_roads = int(rng_feat.integers(style.road_count_range[0], style.road_count_range[1] + 1))
    for _ in range(n_roads):
        _draw_road(img, rng_feat, style)

    pad_boxes = _stamp_pads(img, rng_feat, style) if style.pad_density > 0 else []

    n_buildings = int(rng_feat.poisson(spec.building_density * w * h / 1e6))
    footprints: list[Footprint] = []
    for _ in range(n_buildings):
        placed = False
        for _attempt in range(100):
            bw, bh, kind, nfx, nfy, angle = _building_shape(rng_feat, style)
            ew, eh = _footprint_extent(bw, bh, kind, angle)
            if ew + 2 >= w or eh + 2 >= h:
                continue
            x0 = int(rng_feat.integers(1, w - ew - 1))
            y0 = int(rng_feat.integers(1, h - eh - 1))
            box = (x0, y0, x0 + ew, y0 + eh)
            if any(_box_overlap_frac(box, fp.box) > 0.2 for fp in footprints):
                continue
            if any(_box_overlap_frac(box, pb) > 0.2 for pb in pad_boxes):
                continue
            fp = _make_footprint(x0, y0, bw, bh, kind, nfx, nfy, angle)
            contrast = rng_feat.uniform(*style.contrast_range)
            sign = -1.0 if rng_feat.random() < style.dark_fraction else 1.0
            local = img[y0 : y0 + eh, x0 : x0 + ew]
            base = float(local.mean())
            level = float(np.clip(base + sign * contrast, 0.02, 0.98))
            if fp.coverage is None:
                local[fp.submask] = level
            else:
                a = fp.coverage
                local[:, :] = local * (1.0 - a) + level * a
            footprints.append(fp)
            placed = True
            break
        if not placed:
            # crowded scene: this Poisson draw could not be placed
            continue

    mask = np.zeros((h, w), dtype=bool)
    for fp in footprints:
        x0, y0, x1, y1 = fp.box
        mask[y0:y1, x0:x1] |= fp.submask
    mask.setflags(write=False)

    img = np.clip(img, 0.0, 1.0)
    lon0, lat0 = origin if origin is not None else (0.0, 0.0)
    transform = GeoTransform(lon0, lat0, 1e-4, -1e-4)
    tile = RasterTile(
        id=tile_id or f"scene-{spec.rng_seed:08d}",
        pixels=img,
        transform=transform,
        meta={"country": style.name, "cloud": False},
    )
    truth = GroundTruth(footprints=tuple(footprints), mask=mask)

    if spec.noise is not None and spec.noise.strength > 0:
        tile = apply_noise(tile, spec.noise, seed=int(seeds[2].generate_state(1)[0]))
    if spec.cloud is not None and spec.cloud.coverage > 0:
        tile, _ = apply_cloud(tile, spec.cloud, seed=int(seeds[3].generate_state(1)[0]))
    return tile, truth


def noisy_pixels(pixels: np.ndarray, noise: NoiseSpec, rng: np.random.Generator) -> np.ndarray:
    """Corrupt a pixel array with one kind of sensor noise, clipped to [0, 1]."""
    if noise.kind == "gaussian":
        if noise.strength == 0:
            return pixels
        out = pixels + rng.normal(0.0, noise.strength, size=pixels.shape)
    elif noise.kind == "salt_pepper":
        out = np.array(pixels)
        hit = rng.random(pixels.shape) < noise.strength
        salt = rng.random(pixels.shape) < 0.5
        out[hit & salt] = 1.0
        out[hit & ~salt] = 0.0
    elif noise.kind == "stripe":
        width = pixels.shape[1]
        offsets = rng.normal(0.0, noise.strength, size=width)
        if pixels.ndim == 2:
            out = pixels + offsets[None, :]
        else:
            out = pixels + offsets[None, :, None]
    else:  # pragma: no cover - NoiseSpec validation rejects this earlier
        raise ValidationError(f"unknown noise kind {noise.kind!r}")
    return np.clip(out, 0.0, 1.0)


def apply_noise(tile: RasterTile, noise: NoiseSpec, seed: int) -> RasterTile:
    """Add one kind of synthetic sensor noise; output clipped to [0, 1]."""
    out = noisy_pixels(tile.pixels, noise, np.random.default_rng(seed))
    if out is tile.pixels:
        return tile
    return tile.with_pixels(out)


def apply_cloud(
    tile: RasterTile, cloud: CloudSpec, seed: int
) -> tuple[RasterTile, np.ndarray]:
    """Whiten a cloud-shaped fraction of the tile; returns (tile, mask)."""
    if cloud.coverage == 0:
        return tile, np.zeros((tile.height, tile.width), dtype=bool)
    rng = np.random.default_rng(seed)
    fld = octave_noise(tile.height, tile.width, cloud.blob_scale, rng, octaves=3)
    if cloud.coverage >= 1.0:
        mask = np.ones((tile.height, tile.width), dtype=bool)
    else:
        thresh = np.quantile(fld, 1.0 - cloud.coverage)
        mask = fld >= thresh
    weight = np.zeros_like(fld)
    weight[mask] = 0.9 + 0.1 * fld[mask]
    if tile.pixels.ndim == 3:
        weight = weight[..., None]
    out = tile.pixels + weight * (1.0 - tile.pixels)
    meta = dict(tile.meta)
    meta["cloud"] = True
    meta["cloud_coverage"] = float(mask.mean())
    return tile.with_pixels(np.clip(out, 0.0, 1.0), meta=meta), mask


def tile_to_patches(tile: RasterTile, stride: int):
    """Yield ((x, y), Patch) for every 64x64 window on the stride grid."""
    if stride < 1:
        raise ValidationError("stride must be >= 1")
    if tile.width < PATCH_SIZE or tile.height < PATCH_SIZE:
        raise ValidationError(
            f"tile {tile.width}x{tile.height} smaller than {PATCH_SIZE}x{PATCH_SIZE}"
        )
    from .geo import to_luminance

    px = to_luminance(tile.pixels)
    for y in range(0, tile.height - PATCH_SIZE + 1, stride):
        for x in range(0, tile.width - PATCH_SIZE + 1, stride):
            yield (x, y), Patch(
                tile_id=tile.id,
                x=x,
                y=y,
                pixels=px[y : y + PATCH_SIZE, x : x + PATCH_SIZE],
            )


def extract_patch(tile: RasterTile, x: int, y: int) -> Patch:
    """Cut one 64x64 patch at (x, y); window must lie inside the tile."""
    from .geo import to_luminance

    if x < 0 or y < 0 or x + PATCH_SIZE > tile.width or y + PATCH_SIZE > tile.height:
        raise ValidationError(
            f"window ({x},{y}) not inside tile {tile.width}x{tile.height}"
        )
    px = to_luminance(tile.pixels)
    return Patch(tile_id=tile.id, x=x, y=y, pixels=px[y : y + PATCH_SIZE, x : x + PATCH_SIZE])
