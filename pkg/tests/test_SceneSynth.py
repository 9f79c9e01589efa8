import dataclasses

import numpy as np
import pytest
from scipy import ndimage

from terra_ssl.Errors import ConfigurationError, ContractError, SynthesisError
from terra_ssl.Raster import TerrainField
from terra_ssl.SceneSynth import (BUILDING, GROUND, StructureLayer, SynthConfig, compose_scene, generate_scenes,
                                  generate_terrain, load_scene, place_structures, save_scene, slope_degrees,
                                  synthesize_scene)


def test_terrain_is_deterministic():
    config = SynthConfig(size_px=256, seed=7)
    np.testing.assert_array_equal(generate_terrain(config).heights, generate_terrain(config).heights)


def test_terrain_depends_on_seed():
    a = generate_terrain(SynthConfig(size_px=64, seed=1)).heights
    b = generate_terrain(SynthConfig(size_px=64, seed=2)).heights
    assert not np.array_equal(a, b)


def test_zero_amplitude_terrain_is_flat():
    terrain = generate_terrain(SynthConfig(size_px=64, terrain_amplitude_m=0.0))
    assert (terrain.heights == 0).all()


def test_terrain_range_follows_amplitude():
    heights = generate_terrain(SynthConfig(size_px=256, terrain_amplitude_m=50.0, terrain_roughness=2.0, seed=7)).heights
    span = float(heights.max()) - float(heights.min())
    assert 10.0 <= span <= 50.0 + 1e-3


def test_terrain_has_no_spikes():
    config = SynthConfig(size_px=128, seed=5)
    amplitude, _ = config.terrain_parameters()
    dy, dx = np.gradient(generate_terrain(config).heights.astype(np.float64))
    assert np.abs(dy).max() <= amplitude / 4
    assert np.abs(dx).max() <= amplitude / 4


def test_terrain_regimes():
    assert SynthConfig(terrain_regime='mountainous').terrain_parameters() == (120.0, 1.8)
    assert SynthConfig(terrain_amplitude_m=12.0, terrain_roughness=2.5).terrain_parameters() == (12.0, 2.5)


@pytest.mark.parametrize('kwargs', [
    {'size_px': 16},
    {'terrain_regime': 'lunar'},
    {'building_density': -1.0},
    {'building_height_m': (5.0, 2.0)},
    {'resolution_m': 0.0},
])
def test_invalid_configuration(kwargs):
    with pytest.raises(ConfigurationError):
        SynthConfig(**kwargs)


def test_empty_structure_layer():
    config = SynthConfig(size_px=64, building_density=0.0, vegetation_density=0.0)
    layer = place_structures(generate_terrain(config), config)
    assert (layer.add_heights == 0).all()
    assert (layer.footprint == 0).all()
    assert (layer.kind_map == GROUND).all()


def test_building_count():
    config = SynthConfig(size_px=512, building_density=20 / 0.262144, seed=11)
    layer = place_structures(generate_terrain(config), config)
    _, count = ndimage.label(layer.footprint, structure=np.ones((3, 3)))
    assert 15 <= count <= 25


def test_structures_rise_above_terrain(small_synth):
    layer = place_structures(generate_terrain(small_synth), small_synth)
    assert layer.footprint.any()
    assert (layer.add_heights[layer.footprint == 1] > 0).all()
    assert (layer.add_heights[layer.kind_map == GROUND] == 0).all()


def test_scene_invariants_on_seeded_scenes(small_synth):
    for scene in generate_scenes(small_synth, 20):
        assert (scene.dsm.heights >= scene.dtm.heights).all()
        assert (scene.ndsm.heights >= 0).all()
        np.testing.assert_array_equal(scene.ndsm.heights, scene.dsm.heights - scene.dtm.heights)
        assert (scene.ndsm.heights[scene.footprint == 1] > 0).all()


def test_scenes_are_reproducible(small_synth):
    a = generate_scenes(small_synth, 2)
    b = generate_scenes(small_synth, 2)
    for x, y in zip(a, b):
        assert x.scene_id == y.scene_id
        np.testing.assert_array_equal(x.dsm.heights, y.dsm.heights)
        np.testing.assert_array_equal(x.footprint, y.footprint)


def test_buildings_prefer_gentle_slopes():
    config = SynthConfig(size_px=128, terrain_regime='urban', building_density=300.0, vegetation_density=0.0, seed=21)
    under, overall = [], []
    for scene in generate_scenes(config, 10):
        slope = slope_degrees(scene.dtm.heights, scene.resolution_m)
        under.append(slope[scene.footprint == 1])
        overall.append(slope.ravel())
    assert np.concatenate(under).mean() <= np.concatenate(overall).mean()


def test_compose_with_empty_layer():
    terrain = generate_terrain(SynthConfig(size_px=32, seed=4))
    zeros = np.zeros(terrain.shape)
    scene = compose_scene(terrain, StructureLayer(zeros, zeros, zeros))
    np.testing.assert_array_equal(scene.dsm.heights, scene.dtm.heights)
    assert (scene.ndsm.heights == 0).all()


def test_single_building_on_flat_terrain():
    terrain = TerrainField(np.zeros((32, 32)), seed=0)
    footprint = np.zeros((32, 32), dtype=np.uint8)
    footprint[10:20, 12:18] = 1
    layer = StructureLayer(10.0 * footprint, footprint, np.where(footprint, BUILDING, GROUND))
    scene = compose_scene(terrain, layer)
    np.testing.assert_array_equal(scene.dsm.heights, 10.0 * footprint)


def test_compose_rejects_shape_mismatch():
    terrain = TerrainField(np.zeros((32, 32)))
    zeros = np.zeros((40, 40))
    with pytest.raises(ContractError):
        compose_scene(terrain, StructureLayer(zeros, zeros, zeros))


def test_structure_layer_contract():
    footprint = np.zeros((32, 32))
    footprint[0, 0] = 1
    with pytest.raises(ContractError):
        StructureLayer(np.zeros((32, 32)), footprint, np.where(footprint, BUILDING, GROUND))


def test_impossible_density_fails():
    config = SynthConfig(size_px=32, building_density=1e5, building_size_m=(20.0, 30.0), max_attempts=20)
    with pytest.raises(SynthesisError, match='building_density'):
        place_structures(generate_terrain(config), config)


def test_save_load_round_trip(tmp_path, small_synth):
    scene = synthesize_scene(dataclasses.replace(small_synth, seed=8), scene_id='round-trip')
    save_scene(scene, tmp_path / 'round-trip', small_synth)

    assert (tmp_path / 'round-trip' / 'dtm.f32').stat().st_size == 4 * 64 * 64
    assert (tmp_path / 'round-trip' / 'footprint.u8').stat().st_size == 64 * 64

    loaded = load_scene(tmp_path / 'round-trip')
    assert loaded.scene_id == 'round-trip'
    assert loaded.resolution_m == scene.resolution_m
    for name in ('dtm', 'dsm', 'ndsm'):
        np.testing.assert_array_equal(getattr(loaded, name).heights, getattr(scene, name).heights)
    np.testing.assert_array_equal(loaded.footprint, scene.footprint)
    np.testing.assert_array_equal(loaded.kind_map, scene.kind_map)
