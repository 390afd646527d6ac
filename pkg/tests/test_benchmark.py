"""Benchmark recipes, exact rate measurement, and weak-label harvesting."""
import numpy as np
import pytest

from satdetect.benchmark import (
    BENCHMARK_DENSITY,
    BENCHMARK_SIZE,
    _positive_origin_count,
    benchmark_specs,
    generate_scenes,
    harvest_specs,
    harvest_weak_labels,
    measure_rates,
)
from satdetect.scene import MIN_LABEL_AREA, SceneSpec, generate_scene


def test_benchmark_specs_shape():
    specs = benchmark_specs(50)
    assert len(specs) == 50
    assert all(s.width == BENCHMARK_SIZE for s in specs)
    assert all(s.building_density == BENCHMARK_DENSITY for s in specs)
    names = [s.country_style.name for s in specs[:6]]
    assert names == ["A", "B", "C", "A", "B", "C"]
    assert len({s.rng_seed for s in specs}) == 50


def test_benchmark_specs_deterministic():
    assert benchmark_specs(5) == benchmark_specs(5)


def test_harvest_specs_grouped_by_style():
    specs = harvest_specs(("A", "C"), per_style=4)
    assert len(specs) == 8
    assert [s.country_style.name for s in specs] == ["A"] * 4 + ["C"] * 4
    assert len({s.rng_seed for s in specs}) == 8


def test_positive_origin_count_matches_brute_force():
    spec = SceneSpec(width=160, height=160, building_density=80, rng_seed=9)
    tile, truth = generate_scene(spec)
    brute = 0
    for y in range(160 - 63):
        for x in range(160 - 63):
            if truth.mask[y : y + 64, x : x + 64].sum() >= MIN_LABEL_AREA:
                brute += 1
    assert _positive_origin_count(truth, 160, 160) == brute
    assert brute > 0


def test_positive_origin_count_empty_scene():
    spec = SceneSpec(width=128, height=128, building_density=0, rng_seed=1)
    _, truth = generate_scene(spec)
    assert _positive_origin_count(truth, 128, 128) == 0


def test_measure_rates_fields_and_ranges():
    scenes = generate_scenes(benchmark_specs(3))
    r = measure_rates(scenes)
    assert 0 <= r["raw_rate"] <= 1
    assert 0 <= r["conditioned_rate"] <= 1
    assert 0 <= r["covered_fraction"] <= 1
    assert 0 <= r["footprint_recall"] <= 1
    assert r["n_candidates"] > 0
    if r["raw_rate"] > 0:
        assert r["skew_reduction"] == pytest.approx(
            r["conditioned_rate"] / r["raw_rate"]
        )


def test_measure_rates_empty_input():
    r = measure_rates([])
    assert r["raw_rate"] == 0.0
    assert r["footprint_recall"] == 1.0


def test_harvest_labels_match_ground_truth():
    scenes = generate_scenes(harvest_specs(("B",), per_style=2))
    data = harvest_weak_labels(scenes)
    assert len(data) > 0
    truth_by_id = {t.id: g for t, g in scenes}
    for item in data.items:
        want = truth_by_id[item.patch.tile_id].window_has_building(
            item.patch.x, item.patch.y
        )
        assert item.label == int(want)
        assert item.style == "B"
        assert item.policy == "train"
    labels = data.labels()
    assert 0 < labels.mean() < 1  # both classes present in the harvest
