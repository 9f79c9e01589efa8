import dataclasses

import numpy as np
import pytest
from scipy import ndimage

from terra_ssl.Dataset import (DatasetManifest, NoiseSpec, TileRecord, assemble_tiles, build_manifest, corrupt_mask,
                               inject_label_noise, make_splits, normalize_tile, read_manifest, rescale_scene,
                               subsample_labels, tile_scene, write_manifest)
from terra_ssl.Errors import ConfigurationError, ContractError, DataError
from terra_ssl.SceneSynth import save_scene


def record(tile_id, scene_id, task='segmentation', size=2):
    return TileRecord(tile_id, scene_id, 0, 0, task, np.zeros((size, size), dtype=np.float32), np.zeros((size, size), dtype=np.uint8))


def records_of(n_scenes, per_scene=1):
    return [record(f"s{i:03d}_t{j}", f"s{i:03d}") for i in range(n_scenes) for j in range(per_scene)]


#############################################################################################
## Tiling and normalization
#############################################################################################

@pytest.mark.parametrize('size', [256, 300])
def test_tile_count(scene_factory, size):
    assert len(tile_scene(scene_factory(size), 128, 128, 'segmentation')) == 4


def test_overlapping_tiles(scene_factory):
    assert len(tile_scene(scene_factory(256), 128, 64, 'pretext')) == 9


def test_tile_windows(scene_factory):
    scene = scene_factory(96)
    for tile in tile_scene(scene, 32, 32, 'segmentation'):
        window = (slice(tile.row, tile.row + 32), slice(tile.col, tile.col + 32))
        np.testing.assert_array_equal(tile.target, scene.footprint[window])
        np.testing.assert_array_equal(tile.input, scene.ndsm.heights[window])
    for tile in tile_scene(scene, 32, 32, 'pretext'):
        window = (slice(tile.row, tile.row + 32), slice(tile.col, tile.col + 32))
        np.testing.assert_array_equal(tile.input, scene.dsm.heights[window])
        np.testing.assert_array_equal(tile.target, scene.dtm.heights[window])


def test_tile_larger_than_scene(scene_factory):
    with pytest.raises(ConfigurationError):
        tile_scene(scene_factory(64), 128, 128, 'pretext')


def test_reassembly_reproduces_interior(scene_factory):
    scene = scene_factory(300)
    canvas = assemble_tiles(tile_scene(scene, 128, 128, 'pretext'), scene.shape)
    np.testing.assert_array_equal(canvas[:256, :256], scene.dsm.heights[:256, :256])
    assert np.isnan(canvas[256:, :]).all()
    assert np.isnan(canvas[:, 256:]).all()


def test_constant_tile_normalization():
    tile = TileRecord('t', 's', 0, 0, 'pretext', np.full((8, 8), 42.0), np.full((8, 8), 42.0))
    normalized = normalize_tile(tile)
    assert (normalized.input == 0).all()
    assert normalized.scale == 1.0
    assert normalized.offset == 42.0


def test_minshift_normalization():
    heights = np.linspace(100.0, 120.0, 64).reshape(8, 8)
    tile = TileRecord('t', 's', 0, 0, 'pretext', heights, heights - 1.0)
    normalized = normalize_tile(tile)
    assert normalized.offset == 100.0
    assert normalized.scale == 20.0
    assert normalized.input.min() == 0.0
    assert normalized.input.max() == 1.0


def test_pretext_pair_shares_frame(scene_factory):
    scene = scene_factory(64)
    raw = tile_scene(scene, 32, 32, 'pretext')
    for tile, normalized in zip(raw, (normalize_tile(t) for t in raw)):
        ndsm = tile.input.astype(np.float64) - tile.target.astype(np.float64)
        np.testing.assert_allclose(normalized.input - normalized.target, ndsm / normalized.scale, rtol=1e-5, atol=1e-6)


def test_segmentation_masks_are_untouched(scene_factory):
    tile = tile_scene(scene_factory(64), 32, 32, 'segmentation')[0]
    np.testing.assert_array_equal(normalize_tile(tile).target, tile.target)


def test_global_normalization():
    tile = TileRecord('t', 's', 0, 0, 'pretext', np.full((4, 4), 40.0), np.full((4, 4), 10.0))
    normalized = normalize_tile(tile, mode='global', offset=10.0, scale=30.0)
    assert (normalized.input == 1.0).all()
    assert (normalized.target == 0.0).all()


def test_non_finite_tile():
    heights = np.zeros((4, 4))
    heights[1, 1] = np.nan
    with pytest.raises(DataError):
        normalize_tile(TileRecord('t', 's', 0, 0, 'pretext', heights, np.zeros((4, 4))))


def test_rescale_scene(scene_factory):
    scene = scene_factory(64)
    rescaled = rescale_scene(scene, 2.0)
    assert rescaled.shape == (128, 128)
    assert rescaled.resolution_m == 0.5
    assert set(np.unique(rescaled.footprint)) <= {0, 1}
    np.testing.assert_array_equal(rescaled.ndsm.heights, rescaled.dsm.heights - rescaled.dtm.heights)


#############################################################################################
## Splits and label budgets
#############################################################################################

def test_split_sizes():
    manifest = make_splits(records_of(10, per_scene=3), (0.8, 0.1, 0.1), seed=0)
    assert [len(manifest.scene_ids(s)) for s in ('train', 'val', 'test')] == [8, 1, 1]
    assert len(manifest.split('train')) == 24


def test_splits_are_deterministic():
    a = make_splits(records_of(10, per_scene=3), (0.8, 0.1, 0.1), seed=4)
    b = make_splits(records_of(10, per_scene=3), (0.8, 0.1, 0.1), seed=4)
    assert a.splits == b.splits


def test_scene_level_disjointness(segmentation_manifest):
    seen = {}
    for r in segmentation_manifest.records:
        assert seen.setdefault(r.scene_id, segmentation_manifest.splits[r.tile_id]) == segmentation_manifest.splits[r.tile_id]
    scene_sets = [set(segmentation_manifest.scene_ids(s)) for s in ('train', 'val', 'test')]
    assert not (scene_sets[0] & scene_sets[1] or scene_sets[0] & scene_sets[2] or scene_sets[1] & scene_sets[2])


def test_too_few_scenes():
    with pytest.raises(ConfigurationError):
        make_splits(records_of(2), (0.8, 0.1, 0.1))


def test_fractions_must_sum_to_one():
    with pytest.raises(ConfigurationError):
        make_splits(records_of(10), (0.8, 0.3, 0.1))


def test_segmentation_labels_default_to_train(segmentation_manifest):
    assert segmentation_manifest.labeled == {r.tile_id for r in segmentation_manifest.split('train')}


def test_labeled_tiles_must_be_train(segmentation_manifest):
    val_id = segmentation_manifest.split('val')[0].tile_id
    with pytest.raises(ContractError):
        dataclasses.replace(segmentation_manifest, labeled={val_id})


def test_label_budget_of_table_one():
    manifest = make_splits(records_of(100, per_scene=25), (1.0, 0.0, 0.0), seed=0)
    assert len(manifest.split('train')) == 2500
    one = subsample_labels(manifest, 0.01, seed=3)
    ten = subsample_labels(manifest, 0.1, seed=3)
    full = subsample_labels(manifest, 1.0, seed=3)
    assert len(one.labeled) == 25
    assert len(ten.labeled) == 250
    assert len(full.labeled) == 2500
    assert one.labeled <= ten.labeled <= full.labeled
    assert one.label_fraction == 0.01


def test_label_budget_is_deterministic(segmentation_manifest):
    a = subsample_labels(segmentation_manifest, 0.5, seed=1)
    b = subsample_labels(segmentation_manifest, 0.5, seed=1)
    assert a.labeled == b.labeled
    assert len(a.labeled) == 8
    assert a.labeled <= {r.tile_id for r in a.split('train')}
    assert len(a.records) == len(segmentation_manifest.records)


def test_invalid_label_budget(segmentation_manifest, pretext_manifest):
    with pytest.raises(ConfigurationError):
        subsample_labels(segmentation_manifest, 0.0)
    with pytest.raises(ConfigurationError):
        subsample_labels(segmentation_manifest, 1.5)
    with pytest.raises(ConfigurationError):
        subsample_labels(pretext_manifest, 0.5)


#############################################################################################
## Label noise
#############################################################################################

def test_noop_noise(segmentation_manifest):
    noisy = inject_label_noise(segmentation_manifest, NoiseSpec())
    for before, after in zip(segmentation_manifest.records, noisy.records):
        np.testing.assert_array_equal(before.target, after.target)
        assert after.clean_target is None


def test_remove_every_building(segmentation_manifest):
    noisy = inject_label_noise(segmentation_manifest, NoiseSpec(p_remove_building=1.0, seed=2))
    for before, after in zip(segmentation_manifest.records, noisy.records):
        assert not after.target.any()
        np.testing.assert_array_equal(after.clean_target, before.target)
        np.testing.assert_array_equal(after.input, before.input)


def test_noise_never_touches_inputs(segmentation_manifest):
    spec = NoiseSpec(p_remove_building=0.5, p_add_phantom_building=0.5, max_shift_px=2, p_boundary_erode_dilate=0.5, seed=9)
    noisy = inject_label_noise(segmentation_manifest, spec)
    for before, after in zip(segmentation_manifest.records, noisy.records):
        np.testing.assert_array_equal(after.input, before.input)
        np.testing.assert_array_equal(after.scoring_target, before.target)
    assert sum(noisy.noise_log.values()) > 0


def test_noise_does_not_depend_on_tile_order(segmentation_manifest):
    spec = NoiseSpec(p_remove_building=0.3, max_shift_px=2, seed=5)
    reversed_manifest = dataclasses.replace(segmentation_manifest, records=list(reversed(segmentation_manifest.records)))
    a = {r.tile_id: r.target for r in inject_label_noise(segmentation_manifest, spec).records}
    b = {r.tile_id: r.target for r in inject_label_noise(reversed_manifest, spec).records}
    for tile_id, target in a.items():
        np.testing.assert_array_equal(target, b[tile_id])


def test_noise_restricted_to_splits(segmentation_manifest):
    noisy = inject_label_noise(segmentation_manifest, NoiseSpec(p_remove_building=1.0), splits=['test'])
    for r in noisy.records:
        assert (r.clean_target is not None) == (noisy.splits[r.tile_id] == 'test')


def test_phantom_rate():
    mask = np.zeros((64, 64), dtype=np.uint8)
    for i in range(4):
        for j in range(5):
            mask[4 + 12 * i:7 + 12 * i, 4 + 12 * j:7 + 12 * j] = 1
    assert ndimage.label(mask)[1] == 20

    spec = NoiseSpec(p_add_phantom_building=0.5)
    counts = [corrupt_mask(mask, spec, np.random.default_rng(seed))[1]['phantoms'] for seed in range(200)]
    assert 9.0 <= np.mean(counts) <= 11.0


def test_shift_translates_mask():
    mask = np.zeros((16, 16), dtype=np.uint8)
    mask[6:10, 6:10] = 1
    noisy, stats = corrupt_mask(mask, NoiseSpec(max_shift_px=3), np.random.default_rng(0))
    assert noisy.sum() == mask.sum() or stats['shifted'] == 0


def test_noise_spec_validation():
    with pytest.raises(ConfigurationError):
        NoiseSpec(p_remove_building=1.5)
    with pytest.raises(ConfigurationError):
        NoiseSpec(max_shift_px=-1)


#############################################################################################
## Manifest files
#############################################################################################

def test_manifest_round_trip(tmp_path, small_scenes, small_dataset):
    for scene in small_scenes:
        save_scene(scene, tmp_path / 'scenes' / scene.scene_id)
    manifest = subsample_labels(build_manifest(small_scenes, small_dataset, 'segmentation', seed=0), 0.5, seed=0)
    write_manifest(manifest, tmp_path / 'segmentation_manifest.tsv', small_dataset.tile_px)

    loaded = read_manifest(tmp_path / 'segmentation_manifest.tsv', tmp_path / 'scenes')
    assert loaded.task == 'segmentation'
    assert loaded.label_fraction == 0.5
    assert loaded.splits == manifest.splits
    assert loaded.labeled == manifest.labeled
    for a, b in zip(manifest.records, loaded.records):
        assert a.tile_id == b.tile_id
        np.testing.assert_array_equal(a.input, b.input)
        np.testing.assert_array_equal(a.target, b.target)


def test_pretext_manifest_round_trip(tmp_path, small_scenes, small_dataset, pretext_manifest):
    for scene in small_scenes:
        save_scene(scene, tmp_path / 'scenes' / scene.scene_id)
    write_manifest(pretext_manifest, tmp_path / 'pretext_manifest.tsv', small_dataset.tile_px)
    loaded = read_manifest(tmp_path / 'pretext_manifest.tsv', tmp_path / 'scenes')
    for a, b in zip(pretext_manifest.records, loaded.records):
        assert (a.offset, a.scale) == (b.offset, b.scale)
        np.testing.assert_array_equal(a.input, b.input)
        np.testing.assert_array_equal(a.target, b.target)


def test_manifest_arrays(segmentation_manifest, pretext_manifest):
    x, y = segmentation_manifest.arrays(segmentation_manifest.split('train'))
    assert x.shape == (16, 32, 32, 1) and x.dtype == np.float32
    assert y.shape == (16, 32, 32) and y.dtype == np.int32
    x, y = pretext_manifest.arrays(pretext_manifest.split('val'))
    assert x.shape == y.shape == (4, 32, 32, 1)


def test_manifest_requires_a_split_per_tile():
    records = records_of(2)
    with pytest.raises(ContractError):
        DatasetManifest(records, {records[0].tile_id: 'train'}, 'segmentation')
