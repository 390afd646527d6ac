"""Straight-edge candidate proposal.

Finds straight high-gradient segments with a Sobel pass plus
orientation-coherent region growing, then emits 64x64 candidate windows
through two channels. The first is pixel-centered: every edge pixel of a
qualifying component snaps to the grid origin that puts it at least 24 px
inside its window, so compact features (a lone building) are proposed as
a handful of windows that each hold the whole footprint instead of a fan
of clipped views. The second is a coarse 64-px lattice over the dilated
bounding box, added only for components whose bounding-box diagonal
reaches LATTICE_DIAG; it exists because a long tilted segment owns a
bounding box whose empty corners sit too far from any edge pixel for the
first channel to reach. Both channels are monotone functions of the
edge-pixel set (pixels map to fixed origins; the diagonal and the box
only grow as pixels join), so lowering the magnitude threshold can only
add candidates, never remove them.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .geo import PATCH_SIZE, RasterTile, ValidationError, to_luminance

GRID = 16
DILATION = 8
COLLINEARITY_RMS = 1.5
# Pixel-centered windows keep a 24 px margin around their pixel, which
# covers the dilated box of any straight segment shorter than about
# 2*sqrt(2)*(24-8) = 45 px at the worst angle (45 degrees). Components
# with a longer diagonal add lattice windows over their box instead.
LATTICE_DIAG = 40.0


@dataclass(frozen=True)
class ProposalParams:
    mag_threshold: float = 0.5
    min_length: float = 6.0
    min_support: int = 6
    orientation_tolerance: float = 0.3  # radians

    def __post_init__(self) -> None:
        bad = [
            name
            for name in ("mag_threshold", "min_length", "min_support", "orientation_tolerance")
            if getattr(self, name) <= 0
        ]
        if bad:
            raise ValidationError("ProposalParams must be positive: " + ", ".join(bad))


@dataclass(frozen=True)
class GradientField:
    magnitude: np.ndarray
    orientation: np.ndarray  # radians in [0, pi)

    def __post_init__(self) -> None:
        if self.magnitude.shape != self.orientation.shape:
            raise ValidationError("magnitude/orientation shape mismatch")
        if not np.all(np.isfinite(self.magnitude)):
            raise ValidationError("non-finite gradient magnitude")


@dataclass(frozen=True)
class EdgeSegment:
    """A straight run of edge pixels.

    ``endpoints`` are sub-pixel (x, y) coordinates of the segment ends on
    its principal line; ``bbox`` is the integer pixel bounding box
    (x0, y0, x1, y1), exclusive on the high side.
    """

    endpoints: tuple[tuple[float, float], tuple[float, float]]
    orientation: float
    support: int
    bbox: tuple[int, int, int, int]

    @property
    def length(self) -> float:
        (x0, y0), (x1, y1) = self.endpoints
        return math.hypot(x1 - x0, y1 - y0) + 1.0


@dataclass(frozen=True)
class CandidateMask:
    tile_id: str
    x: int
    y: int
    score: float | None = None
    source: str = "proposal"

    def __post_init__(self) -> None:
        if self.source not in ("proposal", "exhaustive"):
            raise ValidationError(f"unknown candidate source {self.source!r}")
        if self.x % GRID or self.y % GRID:
            raise ValidationError(f"window origin ({self.x},{self.y}) off the {GRID} px grid")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class ProposalResult:
    masks: list[CandidateMask]
    covered_fraction: float


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def gradient_map(tile: RasterTile | np.ndarray) -> GradientField:
    """3x3 Sobel magnitude and orientation with replicate padding.

    Orientation is the gradient direction folded into [0, pi); an edge and
    its contrast-reversed twin share one orientation.
    """
    img = tile.pixels if isinstance(tile, RasterTile) else tile
    img = to_luminance(np.asarray(img, dtype=np.float64))
    p = np.pad(img, 1, mode="edge")
    gx = (
        (p[:-2, 2:] + 2.0 * p[1:-1, 2:] + p[2:, 2:])
        - (p[:-2, :-2] + 2.0 * p[1:-1, :-2] + p[2:, :-2])
    )
    gy = (
        (p[2:, :-2] + 2.0 * p[2:, 1:-1] + p[2:, 2:])
        - (p[:-2, :-2] + 2.0 * p[:-2, 1:-1] + p[:-2, 2:])
    )
    mag = np.hypot(gx, gy)
    ori = np.mod(np.arctan2(gy, gx), math.pi)
    return GradientField(magnitude=mag, orientation=ori)


def _orient_dist(a: float | np.ndarray, b: float) -> float | np.ndarray:
    """Angular distance between orientations with period pi."""
    return np.abs(np.mod((a - b) + math.pi / 2, math.pi) - math.pi / 2)


def _circular_mean(oris: np.ndarray) -> float:
    s = np.sin(2.0 * oris).sum()
    c = np.cos(2.0 * oris).sum()
    return float(np.mod(math.atan2(s, c) / 2.0, math.pi))


_NEIGHBORS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


def _grow_components(
    edge: np.ndarray, ori: np.ndarray, tol: float
) -> list[np.ndarray]:
    """8-connected chains of edge pixels with pairwise-coherent orientation.

    A neighbor joins when its orientation sits within ``tol`` of the pixel
    it is reached from. The pairwise rule makes membership a pure graph
    property of the edge-pixel set, so lowering the magnitude threshold
    can only grow or merge components, never shrink them.
    """
    h, w = edge.shape
    visited = np.zeros_like(edge, dtype=bool)
    comps = []
    ys, xs = np.nonzero(edge)
    for sy, sx in zip(ys.tolist(), xs.tolist()):
        if visited[sy, sx]:
            continue
        visited[sy, sx] = True
        members = [(sy, sx)]
        queue = deque(members)
        while queue:
            cy, cx = queue.popleft()
            for dy, dx in _NEIGHBORS:
                ny, nx = cy + dy, cx + dx
                if 0 <= ny < h and 0 <= nx < w and edge[ny, nx] and not visited[ny, nx]:
                    if _orient_dist(ori[ny, nx], ori[cy, cx]) <= tol:
                        visited[ny, nx] = True
                        members.append((ny, nx))
                        queue.append((ny, nx))
        comps.append(np.array(members, dtype=np.int64))
    return comps


def _principal_axes(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Centroid plus unit major/minor axes of an (N, 2) (y, x) point set."""
    centroid = pts.mean(axis=0)
    d = pts - centroid
    cov = d.T @ d / len(pts)
    evals, evecs = np.linalg.eigh(cov)  # ascending eigenvalues
    major = evecs[:, 1]
    minor = evecs[:, 0]
    return centroid, major, minor


def _split_collinear(
    pts: np.ndarray, oris: np.ndarray, params: ProposalParams
) -> list[EdgeSegment]:
    """Turn one coherent component into straight segments.

    Components that fail the RMS line test split at the median of their
    minor-axis projection and recurse; fragments below the support or
    length floors are dropped.
    """
    if len(pts) < params.min_support:
        return []
    centroid, major, minor = _principal_axes(pts)
    d = pts - centroid
    t = d @ major
    extent = float(t.max() - t.min()) + 1.0
    if extent < params.min_length:
        return []
    perp = d @ minor
    rms = float(np.sqrt(np.mean(perp**2)))
    if rms <= COLLINEARITY_RMS:
        lo, hi = float(t.min()), float(t.max())
        p0 = centroid + lo * major
        p1 = centroid + hi * major
        x0i = int(pts[:, 1].min())
        y0i = int(pts[:, 0].min())
        x1i = int(pts[:, 1].max()) + 1
        y1i = int(pts[:, 0].max()) + 1
        return [
            EdgeSegment(
                endpoints=(
                    (float(p0[1]), float(p0[0])),
                    (float(p1[1]), float(p1[0])),
                ),
                orientation=_circular_mean(oris),
                support=len(pts),
                bbox=(x0i, y0i, x1i, y1i),
            )
        ]
    med = float(np.median(perp))
    left = perp <= med
    if left.all() or not left.any():
        order = np.argsort(perp, kind="stable")
        half = len(pts) // 2
        left = np.zeros(len(pts), dtype=bool)
        left[order[:half]] = True
    out = _split_collinear(pts[left], oris[left], params)
    out += _split_collinear(pts[~left], oris[~left], params)
    return out


def _edge_components(
    g: GradientField, params: ProposalParams
) -> list[np.ndarray]:
    edge = g.magnitude >= params.mag_threshold
    if not edge.any():
        return []
    return _grow_components(edge, g.orientation, params.orientation_tolerance)


def detect_straight_edges(
    g: GradientField, params: ProposalParams | None = None
) -> list[EdgeSegment]:
    """Straight edge segments from a gradient field, most-supported first."""
    params = params or ProposalParams()
    segments: list[EdgeSegment] = []
    for pts in _edge_components(g, params):
        oris = g.orientation[pts[:, 0], pts[:, 1]]
        segments.extend(_split_collinear(pts, oris, params))
    segments.sort(key=lambda s: (-s.support, s.bbox))
    return segments


def _axis_origins(lo: int, hi: int, extent: int) -> set[int]:
    """Origins of a 64-px window lattice jointly covering [lo, hi).

    Origins clamp to stay inside a tile of the given extent. Widening
    the interval only touches more lattice cells, so the output grows
    monotonically with the input span.
    """
    max_origin = ((extent - PATCH_SIZE) // GRID) * GRID
    lo = max(lo, 0)
    hi = min(hi, extent)
    out: set[int] = set()
    o = (lo // PATCH_SIZE) * PATCH_SIZE
    while o < hi:
        out.add(min(max(o, 0), max_origin))
        o += PATCH_SIZE
    return out


def propose_masks(
    tile: RasterTile, params: ProposalParams | None = None
) -> ProposalResult:
    """Candidate windows covering all straight-edge segments in a tile.

    Every segment's bounding box, dilated by 8 px and clipped to the
    tile, ends up inside the union of returned windows. Emission works
    from edge-pixel components rather than the split segments: a
    component needs ``min_support`` pixels and a bounding-box diagonal of
    ``min_length``, both floors that only pass more easily as the
    component grows, so the candidate set is monotone in the threshold.
    Every reported segment lives inside a component that clears both
    floors. Short components emit only pixel-centered windows (each edge
    pixel at least 24 px from every window border, enough to wrap the
    8 px dilation of any segment the component can hold); components
    with a diagonal of LATTICE_DIAG or more also emit a 64-px lattice
    over their dilated box, whose far corners pixel-centered windows
    cannot reach.
    """
    if tile.width < PATCH_SIZE or tile.height < PATCH_SIZE:
        raise ValidationError(
            f"tile {tile.width}x{tile.height} smaller than {PATCH_SIZE}x{PATCH_SIZE}"
        )
    params = params or ProposalParams()
    max_x = ((tile.width - PATCH_SIZE) // GRID) * GRID
    max_y = ((tile.height - PATCH_SIZE) // GRID) * GRID
    snap = PATCH_SIZE // 2 - GRID // 2
    origins: set[tuple[int, int]] = set()
    for pts in _edge_components(gradient_map(tile), params):
        if len(pts) < params.min_support:
            continue
        x0 = int(pts[:, 1].min())
        y0 = int(pts[:, 0].min())
        x1 = int(pts[:, 1].max()) + 1
        y1 = int(pts[:, 0].max()) + 1
        diag = math.hypot(x1 - x0, y1 - y0)
        if diag < params.min_length:
            continue
        ox = np.clip((pts[:, 1] - snap) // GRID * GRID, 0, max_x)
        oy = np.clip((pts[:, 0] - snap) // GRID * GRID, 0, max_y)
        origins.update(zip(ox.tolist(), oy.tolist()))
        if diag >= LATTICE_DIAG:
            xs = _axis_origins(x0 - DILATION, x1 + DILATION, tile.width)
            ys = _axis_origins(y0 - DILATION, y1 + DILATION, tile.height)
            origins.update((x, y) for x in xs for y in ys)
    covered = np.zeros((tile.height, tile.width), dtype=bool)
    for x, y in origins:
        covered[y : y + PATCH_SIZE, x : x + PATCH_SIZE] = True
    masks = [
        CandidateMask(tile_id=tile.id, x=x, y=y, source="proposal")
        for x, y in sorted(origins, key=lambda o: (o[1], o[0]))
    ]
    return ProposalResult(masks=masks, covered_fraction=float(covered.mean()))


def exhaustive_masks(tile: RasterTile, stride: int = GRID) -> list[CandidateMask]:
    """Every grid-aligned window: the no-proposal baseline."""
    if stride % GRID:
        raise ValidationError(f"stride must be a multiple of {GRID}")
    return [
        CandidateMask(tile_id=tile.id, x=x, y=y, source="exhaustive")
        for y in range(0, tile.height - PATCH_SIZE + 1, stride)
        for x in range(0, tile.width - PATCH_SIZE + 1, stride)
    ]
