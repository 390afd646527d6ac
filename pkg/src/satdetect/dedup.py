"""Overlap suppression for scored candidate windows.

Windows that overlap by more than the IoU threshold are assumed to see
the same building; the survivor is the one whose central 32x32 region
carries the highest mean building probability.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geo import PATCH_SIZE, ValidationError
from .proposal import CandidateMask

Box = tuple[float, float, float, float]  # x0, y0, x1, y1

CENTER_HALF = PATCH_SIZE // 4  # central 32x32 of a 64x64 window


@dataclass(frozen=True)
class ScoredMask:
    """A classified candidate window ready for suppression and export."""

    tile_id: str
    x: int
    y: int
    score: float
    center_score: float
    source: str = "proposal"

    def __post_init__(self) -> None:
        if self.x % 16 or self.y % 16 or self.x < 0 or self.y < 0:
            raise ValidationError(
                f"window origin ({self.x}, {self.y}) off the 16-pixel grid"
            )
        for fname in ("score", "center_score"):
            v = getattr(self, fname)
            if not np.isfinite(v) or not 0.0 <= v <= 1.0:
                raise ValidationError(f"ScoredMask.{fname} {v!r} outside [0, 1]")

    @classmethod
    def from_candidate(
        cls, cand: CandidateMask, score: float, center_score: float
    ) -> ScoredMask:
        return cls(
            tile_id=cand.tile_id,
            x=cand.x,
            y=cand.y,
            score=score,
            center_score=center_score,
            source=cand.source,
        )

    @property
    def box(self) -> Box:
        return (self.x, self.y, self.x + PATCH_SIZE, self.y + PATCH_SIZE)


def center_score_of(pixel_probs: np.ndarray) -> float:
    """Mean probability over the central 32x32 of a 64x64 pixel map."""
    if pixel_probs.shape != (PATCH_SIZE, PATCH_SIZE):
        raise ValidationError(f"expected 64x64 pixel map, got {pixel_probs.shape}")
    c = CENTER_HALF
    return float(pixel_probs[c : PATCH_SIZE - c, c : PATCH_SIZE - c].mean())


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two axis-aligned boxes."""
    if a[2] <= a[0] or a[3] <= a[1] or b[2] <= b[0] or b[3] <= b[1]:
        raise ValidationError(f"degenerate box in iou: {a}, {b}")
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def _priority(m: ScoredMask):
    return (-m.center_score, -m.score, m.x, m.y)


def dedup_masks(
    masks: list[ScoredMask], iou_threshold: float = 0.3
) -> list[ScoredMask]:
    """Greedy suppression: keep the best-centered mask, drop its overlaps.

    Masks are visited by descending center score (ties: higher score,
    then window origin); one is kept when its IoU with every kept mask
    from the same tile stays at or below the threshold. Output keeps the
    visiting order, so it is sorted by center score descending.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValidationError(f"iou_threshold {iou_threshold} outside (0, 1]")
    kept: list[ScoredMask] = []
    for m in sorted(masks, key=_priority):
        if all(
            k.tile_id != m.tile_id or iou(m.box, k.box) <= iou_threshold
            for k in kept
        ):
            kept.append(m)
    return kept
