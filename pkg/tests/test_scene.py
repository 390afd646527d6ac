import math

import numpy as np
import pytest

from satdetect.geo import PATCH_SIZE, ValidationError
from satdetect.scene import (
    CloudSpec,
    NoiseSpec,
    SceneSpec,
    StyleParams,
    apply_cloud,
    apply_noise,
    generate_scene,
    tile_to_patches,
)


def poisson_cdf(k: int, lam: float) -> float:
    """Exact Poisson CDF by direct summation (oracle, no scipy)."""
    term = math.exp(-lam)
    total = term
    for i in range(1, k + 1):
        term *= lam / i
        total += term
    return total


def test_spec_validation_lists_offending_fields():
    with pytest.raises(ValidationError) as err:
        SceneSpec(width=10, height=2000, building_density=-1)
    msg = str(err.value)
    assert "width" in msg and "building_density" in msg


def test_noise_spec_validation():
    with pytest.raises(ValidationError):
        NoiseSpec(kind="speckle", strength=0.1)
    with pytest.raises(ValidationError):
        NoiseSpec(kind="gaussian", strength=-0.1)
    with pytest.raises(ValidationError):
        CloudSpec(coverage=1.5)


def test_generate_scene_deterministic():
    spec = SceneSpec(width=256, height=256, building_density=40, rng_seed=99)
    t1, g1 = generate_scene(spec)
    t2, g2 = generate_scene(spec)
    assert np.array_equal(t1.pixels, t2.pixels)
    assert len(g1.footprints) == len(g2.footprints)
    assert np.array_equal(g1.mask, g2.mask)


def test_generate_scene_seed_changes_content():
    base = SceneSpec(width=256, height=256, building_density=40, rng_seed=1)
    other = SceneSpec(width=256, height=256, building_density=40, rng_seed=2)
    t1, _ = generate_scene(base)
    t2, _ = generate_scene(other)
    assert not np.array_equal(t1.pixels, t2.pixels)


def test_building_count_matches_poisson():
    """Mean count over many seeds must sit inside an exact 99% interval."""
    density = 30.0
    lam = density * 512 * 512 / 1e6  # 7.86 buildings per tile
    n_scenes = 60
    counts = []
    for seed in range(n_scenes):
        spec = SceneSpec(width=512, height=512, building_density=density, rng_seed=seed)
        _, truth = generate_scene(spec)
        counts.append(len(truth.footprints))
    total = sum(counts)
    # sum of n_scenes iid Poisson(lam) is Poisson(n*lam); walk the CDF for
    # a central 99.9% interval (placement rejection can only lower counts,
    # so allow a small deficit below the lower bound)
    big_lam = n_scenes * lam
    lo = 0
    while poisson_cdf(lo, big_lam) < 0.0005:
        lo += 1
    hi = lo
    while poisson_cdf(hi, big_lam) < 0.9995:
        hi += 1
    assert total <= hi
    assert total >= lo - 0.05 * big_lam


def test_footprints_match_mask():
    spec = SceneSpec(width=384, height=384, building_density=60, rng_seed=5)
    _, truth = generate_scene(spec)
    assert len(truth.footprints) > 0
    rebuilt = np.zeros_like(truth.mask)
    for fp in truth.footprints:
        x0, y0, x1, y1 = fp.box
        assert 0 <= x0 < x1 <= 384 and 0 <= y0 < y1 <= 384
        assert fp.submask.shape == (y1 - y0, x1 - x0)
        rebuilt[y0:y1, x0:x1] |= fp.submask
    assert np.array_equal(rebuilt, truth.mask)


def test_footprint_window_counting():
    spec = SceneSpec(width=256, height=256, building_density=50, rng_seed=8)
    _, truth = generate_scene(spec)
    fp = truth.footprints[0]
    x0, y0, x1, y1 = fp.box
    assert fp.pixels_in_window(x0, y0, x1, y1) == fp.area
    assert fp.pixels_in_window(x1, y1, x1 + 10, y1 + 10) == 0
    # half-window should count a strict subset
    half = fp.pixels_in_window(x0, y0, (x0 + x1) // 2, y1)
    assert 0 <= half <= fp.area


def test_lshape_footprint_area_below_box():
    style = StyleParams(lshape_fraction=1.0)
    spec = SceneSpec(
        width=256, height=256, country_style=style, building_density=60, rng_seed=3
    )
    _, truth = generate_scene(spec)
    assert truth.footprints
    for fp in truth.footprints:
        x0, y0, x1, y1 = fp.box
        assert fp.area < (x1 - x0) * (y1 - y0)
        assert len(fp.polygon) == 6


def shoelace(polygon):
    """Polygon area, the classic cross-product sum (oracle for rasters)."""
    total = 0.0
    for (ax, ay), (bx, by) in zip(polygon, polygon[1:] + polygon[:1]):
        total += ax * by - bx * ay
    return abs(total) / 2.0


def test_rotated_footprint_polygon_matches_raster():
    style = StyleParams(rotated_fraction=1.0)
    spec = SceneSpec(
        width=256, height=256, country_style=style, building_density=60, rng_seed=9
    )
    _, truth = generate_scene(spec)
    assert truth.footprints
    for fp in truth.footprints:
        assert len(fp.polygon) == 4
        x0, y0, x1, y1 = fp.box
        xs = [p[0] for p in fp.polygon]
        ys = [p[1] for p in fp.polygon]
        assert x0 - 0.5 <= min(xs) and max(xs) <= x1 + 0.5
        assert y0 - 0.5 <= min(ys) and max(ys) <= y1 + 0.5
        # pixel count should track the exact outline area
        assert abs(fp.area - shoelace(fp.polygon)) <= 0.08 * shoelace(fp.polygon)
        # and the outline should be genuinely tilted, no axis-parallel edge
        ring = fp.polygon + fp.polygon[:1]
        for (ax, ay), (bx, by) in zip(ring, ring[1:]):
            assert abs(ax - bx) > 0.5 and abs(ay - by) > 0.5


def test_rotated_building_flat_core_soft_rim():
    style = StyleParams(rotated_fraction=1.0)
    spec = SceneSpec(
        width=256, height=256, country_style=style, building_density=60, rng_seed=14
    )
    tile, truth = generate_scene(spec)
    assert truth.footprints
    for fp in truth.footprints:
        assert fp.coverage is not None
        core = fp.coverage >= 1.0
        rim = (fp.coverage > 0.0) & (fp.coverage < 1.0)
        assert core.sum() > 0.5 * fp.area
        assert rim.any()  # tilted walls always cut through pixels
        x0, y0, x1, y1 = fp.box
        assert tile.pixels[y0:y1, x0:x1][core].std() < 0.02


def test_court_footprint_open_in_the_middle():
    style = StyleParams(hollow_fraction=1.0)
    spec = SceneSpec(
        width=256, height=256, country_style=style, building_density=60, rng_seed=11
    )
    _, truth = generate_scene(spec)
    assert truth.footprints
    for fp in truth.footprints:
        h, w = fp.submask.shape
        assert fp.submask[0].all() and fp.submask[-1].all()
        assert not fp.submask[h // 2, w // 2]
        assert fp.area < w * h


def test_pads_render_without_entering_truth():
    plain = SceneSpec(width=256, height=256, building_density=0, rng_seed=17)
    padded = SceneSpec(
        width=256,
        height=256,
        country_style=StyleParams(pad_density=40.0),
        building_density=0,
        rng_seed=17,
    )
    tile_plain, truth_plain = generate_scene(plain)
    tile_padded, truth_padded = generate_scene(padded)
    assert not truth_plain.footprints and not truth_padded.footprints
    assert not truth_padded.mask.any()
    assert (tile_plain.pixels != tile_padded.pixels).any()


def test_buildings_visible_against_background():
    spec = SceneSpec(width=256, height=256, building_density=60, rng_seed=12)
    tile, truth = generate_scene(spec)
    for fp in truth.footprints:
        x0, y0, x1, y1 = fp.box
        inside = tile.pixels[y0:y1, x0:x1][fp.submask]
        # buildings are flat-ish: tiny spread compared to textured ground
        assert inside.std() < 0.02


def test_gaussian_noise_statistics():
    spec = SceneSpec(width=256, height=256, building_density=0, rng_seed=21)
    tile, _ = generate_scene(spec)
    noisy = apply_noise(tile, NoiseSpec("gaussian", 0.1), seed=17)
    diff = noisy.pixels - tile.pixels
    # interior pixels rarely clip for this background; measure central band
    core = diff[(tile.pixels > 0.3) & (tile.pixels < 0.7)]
    assert 0.09 < core.std() < 0.11
    assert abs(core.mean()) < 0.01


def test_gaussian_zero_strength_is_identity():
    spec = SceneSpec(width=128, height=128, building_density=0, rng_seed=1)
    tile, _ = generate_scene(spec)
    out = apply_noise(tile, NoiseSpec("gaussian", 0.0), seed=5)
    assert np.array_equal(out.pixels, tile.pixels)


def test_salt_pepper_full_rate_saturates():
    spec = SceneSpec(width=128, height=128, building_density=0, rng_seed=2)
    tile, _ = generate_scene(spec)
    out = apply_noise(tile, NoiseSpec("salt_pepper", 1.0), seed=5)
    assert np.all((out.pixels == 0.0) | (out.pixels == 1.0))
    rate = float((out.pixels == 1.0).mean())
    assert 0.45 < rate < 0.55


def test_salt_pepper_rate():
    spec = SceneSpec(width=256, height=256, building_density=0, rng_seed=2)
    tile, _ = generate_scene(spec)
    out = apply_noise(tile, NoiseSpec("salt_pepper", 0.2), seed=9)
    changed = (out.pixels == 0.0) | (out.pixels == 1.0)
    assert 0.17 < changed.mean() < 0.23


def test_stripe_noise_is_columnar():
    spec = SceneSpec(width=128, height=128, building_density=0, rng_seed=3)
    tile, _ = generate_scene(spec)
    out = apply_noise(tile, NoiseSpec("stripe", 0.05), seed=4)
    diff = out.pixels - tile.pixels
    unclipped_cols = 0
    for c in range(diff.shape[1]):
        col = diff[:, c]
        if np.all((out.pixels[:, c] > 0) & (out.pixels[:, c] < 1)):
            assert col.std() < 1e-12
            unclipped_cols += 1
    assert unclipped_cols > 100


def test_noise_output_stays_in_range():
    spec = SceneSpec(width=128, height=128, building_density=0, rng_seed=3)
    tile, _ = generate_scene(spec)
    for kind, s in [("gaussian", 0.5), ("salt_pepper", 0.5), ("stripe", 0.5)]:
        out = apply_noise(tile, NoiseSpec(kind, s), seed=1)
        assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0


def test_cloud_coverage_fraction():
    spec = SceneSpec(width=512, height=512, building_density=0, rng_seed=6)
    tile, _ = generate_scene(spec)
    clouded, mask = apply_cloud(tile, CloudSpec(coverage=0.3), seed=11)
    frac = mask.mean()
    assert 0.25 < frac < 0.35
    assert clouded.meta["cloud"] is True
    # clouded pixels are whitened, never darkened
    assert np.all(clouded.pixels[mask] >= tile.pixels[mask])
    assert np.all(clouded.pixels[mask] >= 0.9 * (1 - tile.pixels[mask]) + tile.pixels[mask] - 1e-9)
    assert np.array_equal(clouded.pixels[~mask], tile.pixels[~mask])


def test_cloud_zero_coverage():
    spec = SceneSpec(width=128, height=128, building_density=0, rng_seed=6)
    tile, _ = generate_scene(spec)
    out, mask = apply_cloud(tile, CloudSpec(coverage=0.0), seed=1)
    assert not mask.any()
    assert np.array_equal(out.pixels, tile.pixels)
    assert out.meta["cloud"] is False


def test_scene_spec_cloud_flag_propagates():
    spec = SceneSpec(
        width=128, height=128, building_density=0, rng_seed=6,
        cloud=CloudSpec(coverage=0.4),
    )
    tile, _ = generate_scene(spec)
    assert tile.meta["cloud"] is True


def test_patch_grid_count_formula():
    rng = np.random.default_rng(13)
    for _ in range(20):
        w = int(rng.integers(64, 300))
        h = int(rng.integers(64, 300))
        stride = int(rng.integers(1, 80))
        spec = SceneSpec(width=w, height=h, building_density=0, rng_seed=0)
        tile, _ = generate_scene(spec)
        patches = list(tile_to_patches(tile, stride))
        expected = ((w - PATCH_SIZE) // stride + 1) * ((h - PATCH_SIZE) // stride + 1)
        assert len(patches) == expected
        for (x, y), p in patches:
            assert p.pixels.shape == (PATCH_SIZE, PATCH_SIZE)
            assert x % stride == 0 and y % stride == 0


def test_patch_contents_match_tile():
    spec = SceneSpec(width=200, height=150, building_density=20, rng_seed=4)
    tile, _ = generate_scene(spec)
    for (x, y), p in tile_to_patches(tile, 48):
        assert np.array_equal(p.pixels, tile.pixels[y : y + 64, x : x + 64])


def test_tile_to_patches_rejects_small_tiles():
    spec = SceneSpec(width=64, height=64, building_density=0, rng_seed=0)
    tile, _ = generate_scene(spec)
    small = tile.with_pixels(tile.pixels[:32, :32])
    with pytest.raises(ValidationError):
        list(tile_to_patches(small, 16))


def test_style_presets_differ():
    bright = StyleParams(name="A", dark_fraction=0.0, contrast_range=(0.3, 0.5))
    dark = StyleParams(name="C", dark_fraction=1.0, contrast_range=(0.08, 0.15))
    sa = SceneSpec(width=256, height=256, country_style=bright, building_density=80, rng_seed=7)
    sc = SceneSpec(width=256, height=256, country_style=dark, building_density=80, rng_seed=7)
    ta, ga = generate_scene(sa)
    tc, gc = generate_scene(sc)

    def mean_exceedance(tile, truth):
        vals = []
        for fp in truth.footprints:
            x0, y0, x1, y1 = fp.box
            body = tile.pixels[y0:y1, x0:x1][fp.submask].mean()
            ring = tile.pixels[max(0, y0 - 3) : y1 + 3, max(0, x0 - 3) : x1 + 3].mean()
            vals.append(body - ring)
        return np.mean(vals)

    assert mean_exceedance(ta, ga) > 0.15
    assert mean_exceedance(tc, gc) < -0.03


def hand_truth(boxes, size=(128, 128)):
    """Ground truth with solid rectangular footprints at given boxes."""
    from satdetect.scene import Footprint, GroundTruth

    mask = np.zeros(size, dtype=bool)
    fps = []
    for x0, y0, x1, y1 in boxes:
        sub = np.ones((y1 - y0, x1 - x0), dtype=bool)
        poly = ((float(x0), float(y0)), (float(x1), float(y0)),
                (float(x1), float(y1)), (float(x0), float(y1)))
        fps.append(Footprint(box=(x0, y0, x1, y1), polygon=poly, submask=sub))
        mask[y0:y1, x0:x1] = True
    return GroundTruth(footprints=tuple(fps), mask=mask)


def test_containment_rule_half_of_footprint():
    truth = hand_truth([(5, 5, 15, 15)])
    assert truth.window_contains_building(0, 0)  # fully inside
    # window starting at x=11 sees a 4px-wide strip: 40 of 100 px < half
    assert not truth.window_contains_building(11, 0)
    # at x=10 exactly half the building is visible
    assert truth.window_contains_building(10, 0)


def test_pixel_rule_counts_visible_area():
    truth = hand_truth([(56, 0, 76, 10)])
    # strip of 8x10 = 80 px visible: below the floor
    assert not truth.window_has_building(0, 0)
    # shift right: whole 200 px building visible
    assert truth.window_has_building(12, 0)


def test_pixel_rule_exact_boundary():
    # a 16x8 roof corner is exactly MIN_LABEL_AREA px: the smallest positive
    from satdetect.scene import MIN_LABEL_AREA

    assert MIN_LABEL_AREA == 16 * 8
    truth = hand_truth([(48, 0, 64, 8)])
    assert truth.window_has_building(0, 0)
    shifted = hand_truth([(49, 0, 65, 8)])  # one column slips outside
    assert not shifted.window_has_building(0, 0)


def test_pixel_rule_aggregates_across_footprints():
    # two 8x8 sheds reach 128 px together; neither alone does
    truth = hand_truth([(0, 0, 8, 8), (20, 20, 28, 28)])
    assert truth.window_has_building(0, 0)
    only_one = hand_truth([(0, 0, 8, 8)])
    assert not only_one.window_has_building(0, 0)


def test_pixel_rule_matches_mask_slice_on_random_scene():
    from satdetect.scene import MIN_LABEL_AREA

    spec = SceneSpec(width=256, height=256, building_density=60, rng_seed=31)
    _, truth = generate_scene(spec)
    rng = np.random.default_rng(5)
    hits = 0
    for _ in range(200):
        x = int(rng.integers(0, 256 - 64))
        y = int(rng.integers(0, 256 - 64))
        want = int(truth.mask[y : y + 64, x : x + 64].sum()) >= MIN_LABEL_AREA
        assert truth.window_has_building(x, y) == want
        hits += want
    assert 0 < hits < 200  # the scene must exercise both outcomes
