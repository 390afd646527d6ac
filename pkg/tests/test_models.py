"""Classifier training, segmentation, denoising, scene-level filters."""
import numpy as np
import pytest

from satdetect.geo import Patch, RasterTile, ValidationError
from satdetect.models import (
    TrainConfig,
    WeakLabelDataset,
    WeakLabeledPatch,
    active_sample,
    build_classifier_network,
    build_denoiser_network,
    classify_batch,
    classify_patch,
    cloud_filter,
    denoise,
    fine_tune,
    segment,
    train_classifier,
    train_denoiser,
)
from satdetect.scene import NoiseSpec, SceneSpec, apply_noise, generate_scene, style


def blob_patch(rng, tile="t", idx=0):
    """Bright square on a mid-gray field; trivially separable positive."""
    px = np.full((64, 64), 0.4) + rng.normal(0, 0.02, (64, 64))
    s = int(rng.integers(14, 26))
    x0 = int(rng.integers(8, 56 - s))
    y0 = int(rng.integers(8, 56 - s))
    px[y0 : y0 + s, x0 : x0 + s] = 0.85
    return Patch(tile_id=tile, x=0, y=idx * 64, pixels=np.clip(px, 0, 1))


def flat_patch(rng, tile="t", idx=0):
    px = 0.4 + rng.normal(0, 0.02, (64, 64))
    return Patch(tile_id=tile, x=64, y=idx * 64, pixels=np.clip(px, 0, 1))


def toy_dataset(n=120, seed=0, style_name="A"):
    rng = np.random.default_rng(seed)
    items = []
    for i in range(n // 2):
        items.append(WeakLabeledPatch(blob_patch(rng, idx=i), 1, style_name))
        items.append(WeakLabeledPatch(flat_patch(rng, idx=i), 0, style_name))
    return WeakLabelDataset(items)


@pytest.fixture(scope="module")
def toy_model():
    cfg = TrainConfig(epochs=5, lr=1e-2, batch=16, seed=1)
    model, history = train_classifier(toy_dataset(n=120), cfg)
    return model, history


# -- config and dataset plumbing ----------------------------------------


def test_train_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(epochs=-1)
    with pytest.raises(ValidationError):
        TrainConfig(lr=-0.1)
    with pytest.raises(ValidationError):
        TrainConfig(batch=0)
    with pytest.raises(ValidationError):
        TrainConfig(class_balance=1.0)


def test_weak_label_validation():
    rng = np.random.default_rng(0)
    p = flat_patch(rng)
    with pytest.raises(ValidationError):
        WeakLabeledPatch(p, 2, "A")
    with pytest.raises(ValidationError):
        WeakLabeledPatch(p, 1, "A", policy="evaluation")


def test_dataset_bookkeeping():
    ds = toy_dataset(n=20)
    assert len(ds) == 20
    assert ds.styles() == ["A"]
    assert ds.labels().sum() == 10
    assert ds.pixels().shape == (20, 1, 64, 64)


def test_training_rejects_test_policy_records():
    ds = toy_dataset(n=20)
    ds.items[3] = WeakLabeledPatch(ds.items[3].patch, ds.items[3].label, "A", policy="test")
    with pytest.raises(ValidationError, match="policy"):
        train_classifier(ds, TrainConfig(epochs=1))


def test_training_rejects_single_class():
    rng = np.random.default_rng(0)
    ds = WeakLabelDataset(
        [WeakLabeledPatch(flat_patch(rng, idx=i), 0, "A") for i in range(10)]
    )
    with pytest.raises(ValidationError, match="both classes"):
        train_classifier(ds, TrainConfig(epochs=1))


# -- training -----------------------------------------------------------


def test_network_output_is_probability_map():
    net = build_classifier_network(seed=0)
    out, _ = net.forward(np.random.default_rng(0).random((2, 1, 64, 64)))
    assert out.shape == (2, 1, 64, 64)
    assert out.min() > 0.0 and out.max() < 1.0


def test_toy_training_learns(toy_model):
    model, history = toy_model
    assert len(history) == 5
    assert history[-1]["loss"] < history[0]["loss"]
    assert history[-1]["acc"] >= 0.95
    rng = np.random.default_rng(999)
    pos = np.stack([blob_patch(rng).pixels for _ in range(20)])
    neg = np.stack([flat_patch(rng).pixels for _ in range(20)])
    p_pos, _ = classify_batch(model, pos)
    p_neg, _ = classify_batch(model, neg)
    assert (p_pos > 0.5).mean() >= 0.95
    assert (p_neg < 0.5).mean() >= 0.95


def test_zero_epochs_returns_untrained_model():
    model, history = train_classifier(toy_dataset(n=20), TrainConfig(epochs=0))
    assert history == []
    assert model.manifest["epochs"] == 0


def test_training_deterministic():
    cfg = TrainConfig(epochs=1, lr=1e-3, batch=16, seed=7)
    m1, h1 = train_classifier(toy_dataset(n=40), cfg)
    m2, h2 = train_classifier(toy_dataset(n=40), cfg)
    assert h1 == h2
    for (n1, a1), (n2, a2) in zip(m1.network.parameters(), m2.network.parameters()):
        assert n1 == n2
        assert np.array_equal(a1, a2)


def test_manifest_records_styles():
    model, _ = train_classifier(toy_dataset(n=20), TrainConfig(epochs=0))
    assert model.manifest["styles"] == ["A"]
    assert model.manifest["n_train"] == 20


# -- classification ------------------------------------------------------


def test_mask_prob_is_exact_pixel_mean(toy_model):
    model, _ = toy_model
    rng = np.random.default_rng(5)
    for i in range(10):
        p = blob_patch(rng, idx=i) if i % 2 else flat_patch(rng, idx=i)
        cls = classify_patch(model, p)
        assert cls.mask_prob == np.mean(cls.pixel_probs)


def test_classify_batch_shape_validation(toy_model):
    model, _ = toy_model
    with pytest.raises(ValidationError):
        classify_batch(model, np.zeros((3, 32, 32)))


def test_classify_batch_matches_single(toy_model):
    model, _ = toy_model
    rng = np.random.default_rng(6)
    patches = [blob_patch(rng, idx=i) for i in range(5)]
    probs, maps = classify_batch(model, np.stack([p.pixels for p in patches]))
    for i, p in enumerate(patches):
        one = classify_patch(model, p)
        assert one.mask_prob == probs[i]
        assert np.array_equal(one.pixel_probs, maps[i])


# -- fine-tuning ----------------------------------------------------------


def test_fine_tune_rejects_unknown_style(toy_model):
    model, _ = toy_model
    with pytest.raises(ValidationError, match="styles"):
        fine_tune(model, toy_dataset(n=10, style_name="Z"), TrainConfig(epochs=1))


def test_fine_tune_lr_zero_is_identity(toy_model):
    model, _ = toy_model
    tuned, _ = fine_tune(model, toy_dataset(n=20), TrainConfig(epochs=1, lr=0.0, batch=8))
    for (_, a1), (_, a2) in zip(
        model.network.parameters(), tuned.network.parameters()
    ):
        assert np.array_equal(a1, a2)


def test_fine_tune_leaves_original_untouched(toy_model):
    model, _ = toy_model
    before = [a.copy() for _, a in model.network.parameters()]
    fine_tune(model, toy_dataset(n=20), TrainConfig(epochs=1, lr=1e-3, batch=8))
    for (_, a), saved in zip(model.network.parameters(), before):
        assert np.array_equal(a, saved)


def test_fine_tune_marks_manifest(toy_model):
    model, _ = toy_model
    tuned, _ = fine_tune(model, toy_dataset(n=20), TrainConfig(epochs=1, lr=0.0, batch=8))
    assert tuned.manifest["finetuned_on"] == ["A"]


# -- active sampling -------------------------------------------------------


def test_active_sample_orders_by_uncertainty(toy_model):
    model, _ = toy_model
    rng = np.random.default_rng(11)
    # a sweep from pure noise to a crisp blob crosses the whole score range,
    # so some pool members must land inside the band
    pool = []
    for i, alpha in enumerate(np.linspace(0.0, 1.0, 40)):
        blob = blob_patch(rng, idx=i).pixels
        flat = flat_patch(rng, idx=i).pixels
        mixed = np.clip(alpha * blob + (1 - alpha) * flat, 0, 1)
        pool.append(Patch(tile_id="t", x=0, y=i * 64, pixels=mixed))
    picked = active_sample(model, pool, band=(0.05, 0.95), k=10)
    assert 1 <= len(picked) <= 10
    probs, _ = classify_batch(model, np.stack([p.pixels for p in picked]))
    dists = [abs(float(p) - model.threshold) for p in probs]
    assert dists == sorted(dists)
    for p in probs:
        assert 0.05 <= p <= 0.95


def test_active_sample_band_must_straddle_threshold(toy_model):
    model, _ = toy_model
    with pytest.raises(ValidationError):
        active_sample(model, [], band=(0.6, 0.9), k=5)
    with pytest.raises(ValidationError):
        active_sample(model, [], band=(0.1, 0.4), k=5)


def test_active_sample_empty_pool(toy_model):
    model, _ = toy_model
    assert active_sample(model, [], band=(0.2, 0.8), k=5) == []


# -- segmentation -----------------------------------------------------------


def test_segment_masks_follow_pixel_map(toy_model):
    model, _ = toy_model
    rng = np.random.default_rng(12)
    p = blob_patch(rng)
    res = segment(model, p, pixel_threshold=0.5)
    cls = classify_patch(model, p)
    assert np.array_equal(res.mask, cls.pixel_probs >= 0.5)
    assert not res.filtered
    assert res.mask_prob == cls.mask_prob


def test_segment_threshold_at_or_above_one_is_empty(toy_model):
    model, _ = toy_model
    p = blob_patch(np.random.default_rng(13))
    res = segment(model, p, pixel_threshold=1.0)
    assert not res.mask.any()


def test_segment_filter_threshold_blanks_background(toy_model):
    model, _ = toy_model
    p = flat_patch(np.random.default_rng(14))
    res = segment(model, p, filter_threshold=0.5)
    if res.mask_prob < 0.5:
        assert res.filtered and not res.mask.any()
    p2 = blob_patch(np.random.default_rng(14))
    res2 = segment(model, p2, filter_threshold=0.1)
    assert not res2.filtered


def test_segment_validation(toy_model):
    model, _ = toy_model
    p = flat_patch(np.random.default_rng(15))
    with pytest.raises(ValidationError):
        segment(model, p, pixel_threshold=0.0)
    with pytest.raises(ValidationError):
        segment(model, p, filter_threshold=1.5)


# -- denoiser -----------------------------------------------------------------


def psnr(clean, other):
    mse = float(np.mean((clean - other) ** 2))
    return 10.0 * np.log10(1.0 / mse)


@pytest.fixture(scope="module")
def denoise_setup():
    train_tiles = [
        generate_scene(SceneSpec(width=256, height=256, country_style=style("B"), rng_seed=s))[0]
        for s in (100, 101)
    ]
    model = train_denoiser(
        train_tiles,
        [NoiseSpec("gaussian", 0.1)],
        TrainConfig(epochs=8, lr=5e-3, batch=32, seed=2),
        windows_per_epoch=256,
    )
    clean, _ = generate_scene(
        SceneSpec(width=256, height=256, country_style=style("B"), rng_seed=555)
    )
    noisy = apply_noise(clean, NoiseSpec("gaussian", 0.1), seed=9)
    return model, clean, noisy


def test_denoiser_improves_psnr(denoise_setup):
    model, clean, noisy = denoise_setup
    restored = denoise(model, noisy)
    before = psnr(clean.pixels, noisy.pixels)
    after = psnr(clean.pixels, restored.pixels)
    assert after > before + 1.0


def test_denoise_full_tile_shape_and_range(denoise_setup):
    model, _, noisy = denoise_setup
    out = denoise(model, noisy)
    assert out.pixels.shape == noisy.pixels.shape
    assert out.id == noisy.id
    assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0


def test_denoise_deterministic(denoise_setup):
    model, _, noisy = denoise_setup
    a = denoise(model, noisy)
    b = denoise(model, noisy)
    assert np.array_equal(a.pixels, b.pixels)


def test_denoiser_network_output_matches_input_grid():
    net = build_denoiser_network(seed=0)
    out, _ = net.forward(np.zeros((1, 1, 64, 64)))
    assert out.shape == (1, 1, 64, 64)


def test_train_denoiser_validation():
    with pytest.raises(ValidationError):
        train_denoiser([], [NoiseSpec("gaussian", 0.1)])
    tile = generate_scene(SceneSpec(width=128, height=128, rng_seed=1))[0]
    with pytest.raises(ValidationError):
        train_denoiser([tile], [])


# -- scene filters ----------------------------------------------------------


def test_cloud_filter_keeps_clean_tiles():
    tile, _ = generate_scene(SceneSpec(width=128, height=128, rng_seed=3))
    assert cloud_filter(tile)


def test_cloud_filter_drops_flagged_meta():
    tile, _ = generate_scene(SceneSpec(width=128, height=128, rng_seed=3))
    flagged = tile.with_pixels(tile.pixels, meta={**tile.meta, "cloud": True})
    assert not cloud_filter(flagged)


def test_cloud_filter_drops_mostly_white():
    px = np.full((128, 128), 0.97)
    px[:30, :] = 0.4
    tile = RasterTile(id="w", pixels=px)
    assert not cloud_filter(tile)
