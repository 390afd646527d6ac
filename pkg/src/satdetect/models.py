"""Patch classifier, denoiser, and the training loops behind them.

The classifier is a small symmetric encoder/decoder convnet whose sigmoid
pixel map is averaged into a single patch score, so one set of weights
serves both window classification and coarse segmentation. Training labels
are weak: a window is marked positive when at least half of some footprint
falls inside it, nothing is hand-drawn at the pixel level.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .geo import PATCH_SIZE, Patch, RasterTile, ValidationError, to_luminance
from .scene import NoiseSpec, noisy_pixels
from .tensornet import (
    Adam,
    Conv2d,
    DivergenceError,
    MaxPool2x2,
    Network,
    Relu,
    Sigmoid,
    Unpool2x2,
    load_checkpoint,
    save_checkpoint,
)

_PROB_EPS = 1e-6
_PIXELS_PER_PATCH = PATCH_SIZE * PATCH_SIZE


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    lr: float = 1e-3
    batch: int = 32
    seed: int = 0
    class_balance: float = 0.5

    def __post_init__(self) -> None:
        problems = []
        if self.epochs < 0:
            problems.append(f"epochs must be >= 0, got {self.epochs}")
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            problems.append(f"lr must be finite and >= 0, got {self.lr}")
        if self.batch < 1:
            problems.append(f"batch must be >= 1, got {self.batch}")
        if not 0.0 < self.class_balance < 1.0:
            problems.append(
                f"class_balance must be in (0, 1), got {self.class_balance}"
            )
        if problems:
            raise ValidationError("; ".join(problems))


@dataclass(frozen=True)
class WeakLabeledPatch:
    patch: Patch
    label: int  # 1 building, 0 background
    style: str
    policy: str = "train"

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise ValidationError(f"label must be 0 or 1, got {self.label!r}")
        if self.policy not in ("train", "test"):
            raise ValidationError(f"policy must be train or test, got {self.policy!r}")


class WeakLabelDataset:
    """An in-memory list of weakly labeled patches with basic bookkeeping."""

    def __init__(self, items: list[WeakLabeledPatch]):
        self.items = list(items)

    def __len__(self) -> int:
        return len(self.items)

    def styles(self) -> list[str]:
        return sorted({it.style for it in self.items})

    def labels(self) -> np.ndarray:
        return np.array([it.label for it in self.items], dtype=np.int64)

    def pixels(self) -> np.ndarray:
        return np.stack([it.patch.pixels for it in self.items])[:, None, :, :]

    def subset(self, indices) -> "WeakLabelDataset":
        return WeakLabelDataset([self.items[i] for i in indices])


@dataclass
class ClassifierModel:
    network: Network
    threshold: float = 0.5
    manifest: dict = field(default_factory=dict)


@dataclass
class DenoiseModel:
    network: Network
    manifest: dict = field(default_factory=dict)


class Classification(NamedTuple):
    pixel_probs: np.ndarray  # (64, 64) in [0, 1]
    mask_prob: float


@dataclass(frozen=True)
class SegmentationResult:
    mask: np.ndarray  # bool (64, 64)
    mask_prob: float
    pixel_threshold: float
    filtered: bool


def build_classifier_network(seed: int = 0, dtype=np.float64) -> Network:
    """Encoder of three conv/relu/pool stages, mirrored unpooling decoder."""
    layers = [
        Conv2d(1, 8, 3, pad=1),
        Relu(),
        MaxPool2x2(),
        Conv2d(8, 8, 3, pad=1),
        Relu(),
        MaxPool2x2(),
        Conv2d(8, 8, 3, pad=1),
        Relu(),
        MaxPool2x2(),
        Unpool2x2(pool=8),
        Conv2d(8, 8, 3, pad=1),
        Unpool2x2(pool=5),
        Conv2d(8, 8, 3, pad=1),
        Unpool2x2(pool=2),
        Conv2d(8, 8, 3, pad=1),
        Conv2d(8, 1, 3, pad=1),
        Sigmoid(),
    ]
    return Network(layers, input_shape=(1, PATCH_SIZE, PATCH_SIZE), dtype=dtype, seed=seed)


def build_denoiser_network(seed: int = 0, dtype=np.float64) -> Network:
    """Three plain conv layers predicting a residual correction image."""
    layers = [
        Conv2d(1, 8, 3, pad=1),
        Relu(),
        Conv2d(8, 8, 3, pad=1),
        Relu(),
        Conv2d(8, 1, 3, pad=1),
    ]
    return Network(layers, input_shape=(1, PATCH_SIZE, PATCH_SIZE), dtype=dtype, seed=seed)


def _check_training_data(data: WeakLabelDataset) -> None:
    if len(data) == 0:
        raise ValidationError("training data is empty")
    bad_policy = [it.policy for it in data.items if it.policy != "train"]
    if bad_policy:
        raise ValidationError(
            f"{len(bad_policy)} records carry a non-train policy; "
            "test-policy labels must never reach a training loop"
        )
    labels = data.labels()
    if labels.min() == labels.max():
        raise ValidationError("training data must contain both classes")


def _mask_probs_from_maps(pixel_maps: np.ndarray) -> np.ndarray:
    return pixel_maps.mean(axis=(1, 2, 3))


def _standardize(x: np.ndarray) -> np.ndarray:
    """Per-window standardization, (n, 1, 64, 64) in, same shape out.

    The classifier should react to contrast shape, not to the absolute
    brightness of a region, so every window is shifted and scaled by its
    own statistics before it reaches the network. The std floor stops
    blank windows from amplifying into pure noise. Training treats the
    per-window statistics as constants.
    """
    m = x.mean(axis=(2, 3), keepdims=True)
    s = x.std(axis=(2, 3), keepdims=True)
    return (x - m) / np.maximum(s, 0.05)


def _train_loop(
    net: Network, data: WeakLabelDataset, cfg: TrainConfig, rng_tag: int
) -> list[dict]:
    """Class-balanced minibatch BCE training; returns per-epoch history."""
    x_all = _standardize(data.pixels()).astype(net.dtype)
    y_all = data.labels().astype(np.float64)
    pos_idx = np.nonzero(y_all == 1)[0]
    neg_idx = np.nonzero(y_all == 0)[0]
    opt = Adam(net, lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, rng_tag])
    steps = max(1, math.ceil(len(data) / cfg.batch))
    n_pos = max(1, round(cfg.batch * cfg.class_balance))
    n_pos = min(n_pos, cfg.batch - 1)
    history = []
    for epoch in range(cfg.epochs):
        losses = []
        correct = 0
        seen = 0
        for _ in range(steps):
            take = np.concatenate(
                [
                    rng.choice(pos_idx, size=n_pos, replace=True),
                    rng.choice(neg_idx, size=cfg.batch - n_pos, replace=True),
                ]
            )
            x = x_all[take]
            y = y_all[take]
            out, cache = net.forward(x)
            p = np.clip(_mask_probs_from_maps(out), _PROB_EPS, 1.0 - _PROB_EPS)
            loss = float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            # dL/dp for mean BCE, then spread evenly across the pixel map
            dp = (p - y) / (p * (1 - p)) / len(y)
            grad = np.broadcast_to(
                dp[:, None, None, None] / _PIXELS_PER_PATCH, out.shape
            ).astype(net.dtype)
            grads = net.backward(cache, grad)
            opt.step(grads)
            losses.append(loss)
            correct += int(((p >= 0.5) == (y == 1)).sum())
            seen += len(y)
        history.append(
            {
                "epoch": epoch,
                "loss": float(np.mean(losses)),
                "acc": correct / seen,
            }
        )
    return history


def train_classifier(
    data: WeakLabelDataset, cfg: TrainConfig | None = None
) -> tuple[ClassifierModel, list[dict]]:
    """Train a fresh classifier on weak labels.

    Batches are resampled to the configured class balance so the heavy
    negative skew of proposal output does not drown the positives. With
    epochs=0 the initialized but untrained model is returned.
    """
    cfg = cfg or TrainConfig()
    _check_training_data(data)
    net = build_classifier_network(seed=cfg.seed)
    history = _train_loop(net, data, cfg, rng_tag=1)
    manifest = {
        "styles": data.styles(),
        "n_train": len(data),
        "epochs": cfg.epochs,
        "seed": cfg.seed,
        "class_balance": cfg.class_balance,
    }
    return ClassifierModel(network=net, threshold=0.5, manifest=manifest), history


def fine_tune(
    model: ClassifierModel, data: WeakLabelDataset, cfg: TrainConfig | None = None
) -> tuple[ClassifierModel, list[dict]]:
    """Continue training a copy of the model on data from known styles.

    Styles absent from the model manifest are rejected; fine-tuning is for
    specializing within what the model has seen, not silent domain moves.
    """
    cfg = cfg or TrainConfig(epochs=2)
    _check_training_data(data)
    known = set(model.manifest.get("styles", []))
    unknown = sorted(set(data.styles()) - known)
    if unknown:
        raise ValidationError(
            f"fine-tune styles {unknown} not in model manifest styles {sorted(known)}"
        )
    net = copy.deepcopy(model.network)
    history = _train_loop(net, data, cfg, rng_tag=2)
    manifest = dict(model.manifest)
    manifest["finetuned_on"] = data.styles()
    manifest["finetune_epochs"] = cfg.epochs
    return ClassifierModel(network=net, threshold=model.threshold, manifest=manifest), history


def classify_batch(
    model: ClassifierModel, pixels: np.ndarray, chunk: int = 256
) -> tuple[np.ndarray, np.ndarray]:
    """Score a stack of (n, 64, 64) patches; returns (mask_probs, pixel_maps)."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[1:] != (PATCH_SIZE, PATCH_SIZE):
        raise ValidationError(
            f"expected (n, {PATCH_SIZE}, {PATCH_SIZE}) pixels, got {pixels.shape}"
        )
    maps = np.empty(pixels.shape, dtype=np.float64)
    for i in range(0, len(pixels), chunk):
        x = _standardize(pixels[i : i + chunk, None, :, :]).astype(model.network.dtype)
        out, _ = model.network.forward(x)
        maps[i : i + chunk] = out[:, 0]
    return maps.mean(axis=(1, 2)), maps


def classify_patch(model: ClassifierModel, patch: Patch) -> Classification:
    """Pixel probabilities and their mean for one window."""
    probs, maps = classify_batch(model, patch.pixels[None])
    return Classification(pixel_probs=maps[0], mask_prob=float(probs[0]))


def active_sample(
    model: ClassifierModel,
    pool: list[Patch],
    band: tuple[float, float] = (0.3, 0.7),
    k: int = 100,
) -> list[Patch]:
    """Pick the k pool patches the model is least sure about.

    Keeps only scores inside the band and orders them by distance from the
    decision threshold, closest first, so a labeling session spends its
    budget where a flipped label moves the boundary most.
    """
    lo, hi = band
    if not lo < model.threshold < hi:
        raise ValidationError(
            f"band ({lo}, {hi}) must straddle the threshold {model.threshold}"
        )
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if not pool:
        return []
    probs, _ = classify_batch(model, np.stack([p.pixels for p in pool]))
    inside = [(abs(float(p) - model.threshold), i) for i, p in enumerate(probs) if lo <= p <= hi]
    inside.sort(key=lambda t: (t[0], t[1]))
    return [pool[i] for _, i in inside[:k]]


def segment(
    model: ClassifierModel,
    patch: Patch,
    pixel_threshold: float = 0.5,
    filter_threshold: float | None = None,
) -> SegmentationResult:
    """Threshold the pixel map into a footprint mask.

    If the whole-window score falls below filter_threshold the window is
    treated as background and the mask comes back empty. A pixel_threshold
    at or above 1.0 also yields an empty mask: sigmoid output never reaches
    it, so the result is decided without scanning.
    """
    if not 0.0 < pixel_threshold:
        raise ValidationError(f"pixel_threshold must be > 0, got {pixel_threshold}")
    if filter_threshold is not None and not 0.0 < filter_threshold < 1.0:
        raise ValidationError(
            f"filter_threshold must be in (0, 1), got {filter_threshold}"
        )
    cls = classify_patch(model, patch)
    filtered = filter_threshold is not None and cls.mask_prob < filter_threshold
    if filtered or pixel_threshold >= 1.0:
        mask = np.zeros((PATCH_SIZE, PATCH_SIZE), dtype=bool)
    else:
        mask = cls.pixel_probs >= pixel_threshold
    return SegmentationResult(
        mask=mask,
        mask_prob=cls.mask_prob,
        pixel_threshold=pixel_threshold,
        filtered=filtered,
    )


def _patch_windows(tiles: list[RasterTile], count: int, rng: np.random.Generator) -> np.ndarray:
    out = np.empty((count, PATCH_SIZE, PATCH_SIZE), dtype=np.float64)
    for i in range(count):
        tile = tiles[int(rng.integers(len(tiles)))]
        gray = to_luminance(tile.pixels)
        x = int(rng.integers(0, tile.width - PATCH_SIZE + 1))
        y = int(rng.integers(0, tile.height - PATCH_SIZE + 1))
        out[i] = gray[y : y + PATCH_SIZE, x : x + PATCH_SIZE]
    return out


def train_denoiser(
    tiles: list[RasterTile],
    noise_specs: list[NoiseSpec],
    cfg: TrainConfig | None = None,
    windows_per_epoch: int = 512,
) -> DenoiseModel:
    """Fit the residual denoiser on clean/corrupted window pairs.

    Every batch draws clean windows from the tiles and corrupts them with
    one of the configured noise kinds; the network learns the correction
    that maps the corrupted window back to the clean one.
    """
    cfg = cfg or TrainConfig(epochs=4, lr=3e-3)
    if not tiles:
        raise ValidationError("no tiles to train the denoiser on")
    if not noise_specs:
        raise ValidationError("at least one noise spec is required")
    net = build_denoiser_network(seed=cfg.seed)
    opt = Adam(net, lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 3])
    for epoch in range(cfg.epochs):
        clean = _patch_windows(tiles, windows_per_epoch, rng)
        for i in range(0, windows_per_epoch, cfg.batch):
            target = clean[i : i + cfg.batch]
            spec = noise_specs[int(rng.integers(len(noise_specs)))]
            noisy = noisy_pixels(target, spec, rng)
            x = noisy[:, None, :, :]
            out, cache = net.forward(x)
            restored = x + out
            err = restored - target[:, None, :, :]
            loss = float(np.mean(err * err))
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite denoiser loss at epoch {epoch}")
            grad = 2.0 * err / err.size
            grads = net.backward(cache, grad)
            opt.step(grads)
    manifest = {
        "noise_kinds": sorted({s.kind for s in noise_specs}),
        "epochs": cfg.epochs,
        "seed": cfg.seed,
    }
    return DenoiseModel(network=net, manifest=manifest)


def denoise(model: DenoiseModel, tile: RasterTile) -> RasterTile:
    """Run the residual denoiser over a whole tile in one shot.

    The network is fully convolutional, so layers are applied directly to
    the (1, 1, H, W) tile tensor instead of stitching window outputs.
    Multi-band tiles are collapsed to luminance first.
    """
    gray = to_luminance(tile.pixels)
    x = gray[None, None, :, :].astype(model.network.dtype)
    out = x
    for layer in model.network.layers:
        out = layer.forward(out, {})
    restored = np.clip(x + out, 0.0, 1.0)
    return tile.with_pixels(restored[0, 0])


def cloud_filter(tile: RasterTile) -> bool:
    """True when the tile is worth processing (not flagged or mostly white)."""
    if tile.meta.get("cloud"):
        return False
    white = float((to_luminance(tile.pixels) >= 0.9).mean())
    return white <= 0.5


def save_classifier(model: ClassifierModel, path) -> None:
    save_checkpoint(
        model.network,
        path,
        meta={
            "kind": "classifier",
            "threshold": model.threshold,
            "manifest": model.manifest,
        },
    )


def load_classifier(path) -> ClassifierModel:
    net, meta = load_checkpoint(path)
    if meta.get("kind") != "classifier":
        raise ValidationError(f"{path}: checkpoint kind {meta.get('kind')!r} is not a classifier")
    return ClassifierModel(
        network=net,
        threshold=float(meta.get("threshold", 0.5)),
        manifest=dict(meta.get("manifest", {})),
    )


def save_denoiser(model: DenoiseModel, path) -> None:
    save_checkpoint(model.network, path, meta={"kind": "denoiser", "manifest": model.manifest})


def load_denoiser(path) -> DenoiseModel:
    net, meta = load_checkpoint(path)
    if meta.get("kind") != "denoiser":
        raise ValidationError(f"{path}: checkpoint kind {meta.get('kind')!r} is not a denoiser")
    return DenoiseModel(network=net, manifest=dict(meta.get("manifest", {})))
