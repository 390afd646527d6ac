"""Sampling policies, PR curves with confidence intervals, noisy labelers.

Measurement machinery for a heavily skewed classification problem:
windows are drawn either uniformly over tile area or from the proposal
distribution, precision/recall come with Wilson and bootstrap intervals,
and labeler noise is simulated to study consensus labeling.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from .geo import PATCH_SIZE, Patch, RasterTile, ValidationError
from .proposal import ProposalParams, propose_masks
from .scene import GroundTruth, extract_patch

LABELS = ("building", "background")
POLICIES = ("train", "test")
SAMPLING_POLICIES = ("raw_uniform", "proposal_conditioned")


@dataclass(frozen=True)
class LabelRecord:
    patch_id: str
    label: str
    labeler_id: str
    policy: str
    timestamp: float = field(default_factory=time.time)

    def __post_init__(self) -> None:
        if self.label not in LABELS:
            raise ValidationError(f"label must be one of {LABELS}, got {self.label!r}")
        if self.policy not in POLICIES:
            raise ValidationError(f"policy must be one of {POLICIES}, got {self.policy!r}")

    def to_dict(self) -> dict:
        return {
            "patch_id": self.patch_id,
            "label": self.label,
            "labeler_id": self.labeler_id,
            "policy": self.policy,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, d: dict) -> LabelRecord:
        return cls(
            patch_id=d["patch_id"],
            label=d["label"],
            labeler_id=d["labeler_id"],
            policy=d["policy"],
            timestamp=float(d["timestamp"]),
        )


@dataclass(frozen=True)
class ConfidenceInterval:
    lo: float
    hi: float
    point: float
    level: float
    method: str

    def __post_init__(self) -> None:
        if not (0.0 <= self.lo <= self.point <= self.hi <= 1.0):
            raise ValidationError(
                f"interval must satisfy 0 <= lo <= point <= hi <= 1, "
                f"got ({self.lo}, {self.point}, {self.hi})"
            )
        if self.method not in ("wilson", "bootstrap"):
            raise ValidationError(f"unknown CI method {self.method!r}")


@dataclass(frozen=True)
class PRCurve:
    thresholds: np.ndarray  # strictly increasing
    precision: np.ndarray
    recall: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray


def splitmix64(seed: int, n: int) -> list[int]:
    """First n values of the splitmix64 stream; cheap independent seeds."""
    mask = (1 << 64) - 1
    x = seed & mask
    out = []
    for _ in range(n):
        x = (x + 0x9E3779B97F4A7C15) & mask
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        out.append(z ^ (z >> 31))
    return out


def sample_test_masks(
    tiles: list[RasterTile],
    policy: str,
    n: int,
    seed: int,
    params: ProposalParams | None = None,
) -> list[Patch]:
    """Draw n window patches under a sampling policy, i.i.d. per seed.

    raw_uniform picks a tile then a window origin uniformly; the
    proposal-conditioned policy draws uniformly from the pooled proposal
    outputs of all tiles.
    """
    if n < 1:
        raise ValidationError(f"sample size must be >= 1, got {n}")
    if policy not in SAMPLING_POLICIES:
        raise ValidationError(f"policy must be one of {SAMPLING_POLICIES}")
    if not tiles:
        raise ValidationError("no tiles to sample from")
    rng = np.random.default_rng(seed)
    by_id = {t.id: t for t in tiles}
    if policy == "raw_uniform":
        out = []
        for _ in range(n):
            tile = tiles[int(rng.integers(len(tiles)))]
            x = int(rng.integers(0, tile.width - PATCH_SIZE + 1))
            y = int(rng.integers(0, tile.height - PATCH_SIZE + 1))
            out.append(extract_patch(tile, x, y))
        return out
    candidates = []
    for tile in tiles:
        candidates.extend(propose_masks(tile, params).masks)
    if not candidates:
        raise ValidationError("proposal produced no candidates to sample from")
    picks = rng.integers(0, len(candidates), size=n)
    return [
        extract_patch(by_id[candidates[i].tile_id], candidates[i].x, candidates[i].y)
        for i in picks
    ]


def pr_curve(scores, labels) -> PRCurve:
    """Precision/recall over every unique score threshold (ascending).

    A sample counts as predicted positive when its score is >= the
    threshold, so the lowest threshold predicts everything positive and
    recall decreases monotonically from 1 as the threshold rises.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValidationError("scores and labels must be equal-length 1-D arrays")
    if not np.all(np.isfinite(scores)):
        raise ValidationError("non-finite scores")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("pr_curve needs at least one sample of each class")
    order = np.argsort(scores, kind="stable")
    s_sorted = scores[order]
    y_sorted = pos[order].astype(np.int64)
    # walking the sorted array: below index i everything is predicted negative
    boundaries = np.nonzero(np.diff(s_sorted))[0] + 1
    starts = np.concatenate(([0], boundaries))  # first index of each unique score
    thresholds = s_sorted[starts]
    lost_tp = np.concatenate(([0], np.cumsum(y_sorted)))[starts]  # positives below t
    lost_n = starts  # total samples below t
    tp = n_pos - lost_tp
    fn = lost_tp
    fp = (len(labels) - lost_n) - tp
    tn = lost_n - lost_tp
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return PRCurve(
        thresholds=thresholds,
        precision=precision,
        recall=recall,
        tp=tp,
        fp=fp,
        fn=fn,
        tn=tn,
    )


def fscore(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def best_fscore(curve: PRCurve) -> tuple[float, float]:
    """(threshold, F1) maximizing F1; ties resolve toward higher precision."""
    denom = curve.precision + curve.recall
    f = np.zeros_like(denom)
    nz = denom > 0
    f[nz] = 2.0 * curve.precision[nz] * curve.recall[nz] / denom[nz]
    best = 0
    for i in range(1, len(f)):
        if f[i] > f[best] or (f[i] == f[best] and curve.precision[i] > curve.precision[best]):
            best = i
    return float(curve.thresholds[best]), float(f[best])


def wilson_ci(successes: int, n: int, level: float = 0.95) -> ConfidenceInterval:
    """Wilson score interval for a binomial proportion."""
    if n < 1:
        raise ValidationError("wilson_ci needs n >= 1")
    if not 0 <= successes <= n:
        raise ValidationError(f"successes {successes} outside [0, {n}]")
    if not 0.0 <= level < 1.0:
        raise ValidationError(f"level {level} outside [0, 1)")
    z = NormalDist().inv_cdf((1.0 + level) / 2.0)
    p = successes / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = (z / denom) * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n))
    return ConfidenceInterval(
        lo=min(max(0.0, center - half), p),
        hi=max(min(1.0, center + half), p),
        point=p,
        level=level,
        method="wilson",
    )


def bootstrap_fscore_ci(
    scores,
    labels,
    b: int = 1000,
    level: float = 0.95,
    seed: int = 0,
) -> ConfidenceInterval:
    """Percentile bootstrap of the best F-score over resampled pairs.

    Single-class resamples have no defined F-score and are redrawn; a draw
    budget of 10x the requested resamples guards against inputs so skewed
    that valid resamples are vanishingly rare.
    """
    if b < 100:
        raise ValidationError("bootstrap needs b >= 100")
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    _, point_f = best_fscore(pr_curve(scores, labels))
    n = len(scores)
    order = np.argsort(-scores, kind="stable")
    y_sorted = (labels[order] == 1).astype(np.int64)
    s_sorted = scores[order]
    # inclusive end position of each unique-score group, descending order
    ends = np.append(np.nonzero(np.diff(s_sorted))[0], n - 1)
    rng = np.random.default_rng(seed)
    collected = np.empty(b)
    got = 0
    drawn = 0
    while got < b:
        if drawn >= 10 * b:  # pragma: no cover - needs near-total degeneracy
            raise ValidationError(
                "bootstrap draw budget exhausted; sample too degenerate"
            )
        w = rng.multinomial(n, np.full(n, 1.0 / n), size=b)[:, order]
        drawn += b
        tp_cum = np.cumsum(w * y_sorted, axis=1)[:, ends]
        pred_cum = np.cumsum(w, axis=1)[:, ends]
        p_tot = tp_cum[:, -1]
        valid = (p_tot > 0) & (p_tot < n)
        with np.errstate(invalid="ignore", divide="ignore"):
            f = 2.0 * tp_cum / (pred_cum + p_tot[:, None])
        take = f.max(axis=1)[valid][: b - got]
        collected[got : got + len(take)] = take
        got += len(take)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(collected, [alpha, 1.0 - alpha])
    return ConfidenceInterval(
        lo=float(min(lo, point_f)),
        hi=float(max(hi, point_f)),
        point=point_f,
        level=level,
        method="bootstrap",
    )


def simulate_labeler(truth, accuracy: float, seed: int) -> np.ndarray:
    """Labels from one annotator who is right with the given probability."""
    if not 0.0 <= accuracy <= 1.0:
        raise ValidationError(f"accuracy {accuracy} outside [0, 1]")
    truth = np.asarray(truth).astype(np.int64)
    rng = np.random.default_rng(seed)
    flip = rng.random(truth.shape) > accuracy
    return np.where(flip, 1 - truth, truth)


def consensus(labels: np.ndarray) -> np.ndarray:
    """Majority vote across k labelers; k must be odd."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValidationError("consensus expects a (k, n) label matrix")
    k = labels.shape[0]
    if k % 2 == 0:
        raise ValidationError(f"consensus needs an odd labeler count, got {k}")
    return (labels.sum(axis=0) * 2 > k).astype(np.int64)


@dataclass
class EvalReport:
    """Patch-level and detection-level quality numbers for one model run.

    Patch metrics are computed on a sample stratified to a fixed negative
    skew so numbers stay comparable across runs; detection metrics come
    from the full propose/classify/dedup chain matched against footprints.
    Fields are None when undefined (no positives, no detections).
    """

    policy: str
    n_patches: int
    negative_skew: float
    positive_rate: float
    best_threshold: float | None
    best_f: float | None
    precision: float | None
    recall: float | None
    precision_ci: ConfidenceInterval | None
    recall_ci: ConfidenceInterval | None
    n_detections: int
    n_footprints: int
    detection_precision: float | None
    detection_recall: float | None
    detection_f: float | None
    empty_positive: bool
    # full curve kept for CSV export; omitted from to_dict and comparisons
    curve: PRCurve | None = field(default=None, compare=False)

    def to_dict(self) -> dict:
        def ci(c):
            return None if c is None else {"lo": c.lo, "hi": c.hi, "level": c.level}

        d = {
            k: getattr(self, k) for k in self.__dataclass_fields__ if k != "curve"
        }
        d["precision_ci"] = ci(self.precision_ci)
        d["recall_ci"] = ci(self.recall_ci)
        return d


def match_detections(
    detections, truth: GroundTruth, min_fraction: float = 0.5
) -> tuple[int, int, int]:
    """One-to-one greedy match of detections to footprints; (tp, fp, fn).

    Detections are visited best score first; each claims the unmatched
    footprint with the largest contained fraction, provided at least
    min_fraction of that footprint falls inside the window.
    """
    order = sorted(detections, key=lambda m: (-m.score, m.x, m.y))
    used = set()
    tp = 0
    for det in order:
        best_j = -1
        best_frac = 0.0
        for j, fp in enumerate(truth.footprints):
            if j in used:
                continue
            frac = fp.pixels_in_window(
                det.x, det.y, det.x + PATCH_SIZE, det.y + PATCH_SIZE
            ) / fp.area
            if frac >= min_fraction and frac > best_frac:
                best_j, best_frac = j, frac
        if best_j >= 0:
            used.add(best_j)
            tp += 1
    return tp, len(order) - tp, len(truth.footprints) - tp


def _candidate_pool(tiles, policy, n, rng, params):
    """(tile_id, x, y) triples a policy would consider labeling."""
    if policy == "proposal_conditioned":
        pool = []
        for tile in tiles:
            pool.extend((m.tile_id, m.x, m.y) for m in propose_masks(tile, params).masks)
        return pool
    pool = []
    for _ in range(max(n * 4, 1000)):
        tile = tiles[int(rng.integers(len(tiles)))]
        x = int(rng.integers(0, tile.width - PATCH_SIZE + 1))
        y = int(rng.integers(0, tile.height - PATCH_SIZE + 1))
        pool.append((tile.id, x, y))
    return pool


def evaluate_pipeline(
    model,
    scenes,
    policy: str = "proposal_conditioned",
    n: int = 2000,
    seed: int = 0,
    negative_skew: float = 0.93,
    denoiser=None,
    params: ProposalParams | None = None,
    iou_threshold: float = 0.3,
) -> EvalReport:
    """Score a classifier against labeled scenes.

    scenes is a list of (tile, truth) pairs. When a denoiser is supplied
    it runs ahead of everything else, so proposals and classification both
    see the restored imagery, which is how it would sit in production.
    """
    from .dedup import ScoredMask, center_score_of, dedup_masks
    from .models import classify_batch, denoise

    if not scenes:
        raise ValidationError("no scenes to evaluate on")
    if policy not in SAMPLING_POLICIES:
        raise ValidationError(f"policy must be one of {SAMPLING_POLICIES}")
    if not 0.0 <= negative_skew < 1.0:
        raise ValidationError(f"negative_skew {negative_skew} outside [0, 1)")
    if n < 10:
        raise ValidationError(f"patch sample size must be >= 10, got {n}")
    pool_seed, strat_seed, boot_seed = splitmix64(seed, 3)
    tiles = [t for t, _ in scenes]
    if denoiser is not None:
        tiles = [denoise(denoiser, t) for t in tiles]
    truth_by_id = {t.id: g for t, g in scenes}
    tile_by_id = {t.id: t for t in tiles}
    n_footprints = sum(len(g.footprints) for _, g in scenes)

    pool = _candidate_pool(tiles, policy, n, np.random.default_rng(pool_seed), params)
    pool_labels = np.array(
        [
            1 if truth_by_id[tid].window_has_building(x, y) else 0
            for tid, x, y in pool
        ],
        dtype=np.int64,
    )
    positive_rate = float(pool_labels.mean()) if len(pool) else 0.0
    pos_pool = np.nonzero(pool_labels == 1)[0]
    neg_pool = np.nonzero(pool_labels == 0)[0]
    empty_positive = len(pos_pool) == 0 or len(neg_pool) == 0

    best_threshold = best_f = precision = recall = None
    precision_ci = recall_ci = curve = None
    if not empty_positive:
        rng = np.random.default_rng(strat_seed)
        n_pos = max(1, round(n * (1.0 - negative_skew)))
        take = np.concatenate(
            [
                rng.choice(pos_pool, size=n_pos, replace=True),
                rng.choice(neg_pool, size=n - n_pos, replace=True),
            ]
        )
        pixels = np.stack(
            [
                tile_by_id[pool[i][0]].pixels[
                    pool[i][2] : pool[i][2] + PATCH_SIZE,
                    pool[i][1] : pool[i][1] + PATCH_SIZE,
                ]
                for i in take
            ]
        )
        labels = pool_labels[take]
        scores, _ = classify_batch(model, pixels)
        curve = pr_curve(scores, labels)
        best_threshold, best_f = best_fscore(curve)
        at = int(np.searchsorted(curve.thresholds, best_threshold))
        tp, fp, fn = int(curve.tp[at]), int(curve.fp[at]), int(curve.fn[at])
        precision = tp / (tp + fp)
        recall = tp / (tp + fn)
        precision_ci = wilson_ci(tp, tp + fp)
        recall_ci = wilson_ci(tp, tp + fn)

    # detection stage always runs on proposal output, whatever the patch policy
    tau = best_threshold if best_threshold is not None else model.threshold
    det_tp = det_fp = det_fn = 0
    n_detections = 0
    for tile in tiles:
        masks = propose_masks(tile, params).masks
        if not masks:
            det_fn += len(truth_by_id[tile.id].footprints)
            continue
        pixels = np.stack(
            [
                tile.pixels[m.y : m.y + PATCH_SIZE, m.x : m.x + PATCH_SIZE]
                for m in masks
            ]
        )
        scores, maps = classify_batch(model, pixels)
        scored = [
            ScoredMask(
                tile_id=m.tile_id,
                x=m.x,
                y=m.y,
                score=float(scores[i]),
                center_score=center_score_of(maps[i]),
            )
            for i, m in enumerate(masks)
        ]
        kept = [m for m in dedup_masks(scored, iou_threshold) if m.score >= tau]
        n_detections += len(kept)
        tp, fp, fn = match_detections(kept, truth_by_id[tile.id])
        det_tp, det_fp, det_fn = det_tp + tp, det_fp + fp, det_fn + fn

    detection_precision = det_tp / n_detections if n_detections else None
    detection_recall = det_tp / n_footprints if n_footprints else None
    detection_f = (
        fscore(detection_precision, detection_recall)
        if detection_precision is not None and detection_recall is not None
        else None
    )
    return EvalReport(
        policy=policy,
        n_patches=n if not empty_positive else 0,
        negative_skew=negative_skew,
        positive_rate=positive_rate,
        best_threshold=best_threshold,
        best_f=best_f,
        precision=precision,
        recall=recall,
        precision_ci=precision_ci,
        recall_ci=recall_ci,
        n_detections=n_detections,
        n_footprints=n_footprints,
        detection_precision=detection_precision,
        detection_recall=detection_recall,
        detection_f=detection_f,
        empty_positive=empty_positive,
        curve=curve,
    )
