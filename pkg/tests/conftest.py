import os

os.environ.setdefault('TF_CPP_MIN_LOG_LEVEL', '3')

import matplotlib
matplotlib.use('Agg')

import numpy as np
import pytest

from terra_ssl.Dataset import DatasetConfig, build_manifest
from terra_ssl.Network import ModelConfig
from terra_ssl.Raster import TerrainField
from terra_ssl.SceneSynth import BUILDING, StructureLayer, SynthConfig, compose_scene, generate_scenes
from terra_ssl.Utils import enable_determinism


def make_scene(n, seed=0, scene_id='scene-a'):
    "Scene with a bumpy terrain around 100 m and a few 6x6 buildings of 6 m."
    rng = np.random.default_rng(seed)
    terrain = TerrainField(rng.uniform(100.0, 110.0, (n, n)), resolution_m=1.0, kind='dtm', seed=seed)
    footprint = np.zeros((n, n), dtype=bool)
    for _ in range(max(1, n // 16)):
        r, c = rng.integers(0, n - 8, size=2)
        footprint[r:r + 6, c:c + 6] = True
    layer = StructureLayer(
        add_heights=np.where(footprint, 6.0, 0.0),
        footprint=footprint,
        kind_map=np.where(footprint, BUILDING, 0),
    )
    return compose_scene(terrain, layer, scene_id=scene_id)


@pytest.fixture(scope='session', autouse=True)
def deterministic():
    enable_determinism(0)


@pytest.fixture
def scene_factory():
    return make_scene


@pytest.fixture(scope='session')
def small_synth():
    return SynthConfig(
        size_px=64, terrain_regime='urban', building_density=2000.0, vegetation_density=500.0,
        building_size_m=(4.0, 12.0), seed=3,
    )


@pytest.fixture(scope='session')
def small_scenes(small_synth):
    return generate_scenes(small_synth, 6)


@pytest.fixture(scope='session')
def small_dataset():
    return DatasetConfig(scene_count=6, tile_px=32, stride_px=32, split_fractions=(0.6, 0.2, 0.2))


@pytest.fixture(scope='session')
def pretext_manifest(small_scenes, small_dataset):
    return build_manifest(small_scenes, small_dataset, 'pretext', seed=0)


@pytest.fixture(scope='session')
def segmentation_manifest(small_scenes, small_dataset):
    return build_manifest(small_scenes, small_dataset, 'segmentation', seed=0)


@pytest.fixture
def tiny_config():
    return ModelConfig(base_width=4, depth=2, se_reduction=2)


@pytest.fixture
def tiny_config64():
    return ModelConfig(base_width=4, depth=2, se_reduction=2, dtype='float64')
