import dataclasses

import numpy as np
import pandas as pd
import pytest

from terra_ssl.Dataset import NoiseSpec
from terra_ssl.Errors import ConfigurationError, MissingArtifactError
from terra_ssl.Experiment import (EvalConfig, ReportConfig, block_shuffle, collect_runs, compare_inits, evaluate,
                                  make_proxy_init, pretext_evaluation, proxy_manifest, run_name, save_gallery,
                                  shift_benchmark, shift_manifest)
from terra_ssl.Network import ModelConfig, build_model
from terra_ssl.Trainer import FinetuneConfig, PretrainConfig, pretrain
from terra_ssl.Utils import derive_rng

TINY = ModelConfig(base_width=4, depth=2, se_reduction=2)
TINY_SEG = dataclasses.replace(TINY, head='segmentation')
PRETRAIN = PretrainConfig(learning_rate=1e-3, max_epochs=2)
FINETUNE = FinetuneConfig(learning_rate=1e-3, max_epochs=2)


def test_run_name():
    assert run_name('terrain', 0.1, 2) == 'finetune-terrain-0.1-s2'
    assert run_name('random', 1.0, 0) == 'finetune-random-1-s0'


#############################################################################################
## Proxy task
#############################################################################################

def test_block_shuffle_keeps_blocks():
    tile = np.arange(32 * 32, dtype=np.float32).reshape(32, 32)
    shuffled = block_shuffle(tile, 8, derive_rng(0, 'test'))
    assert not np.array_equal(shuffled, tile)

    def blocks(a):
        return sorted(a[i:i + 8, j:j + 8].tobytes() for i in range(0, 32, 8) for j in range(0, 32, 8))

    assert blocks(shuffled) == blocks(tile)
    np.testing.assert_array_equal(shuffled, block_shuffle(tile, 8, derive_rng(0, 'test')))
    with pytest.raises(ConfigurationError):
        block_shuffle(tile, 5, derive_rng(0, 'test'))


def test_proxy_manifest(pretext_manifest, segmentation_manifest):
    proxy = proxy_manifest(pretext_manifest, block_px=8)
    assert proxy.splits == pretext_manifest.splits
    for record, original in zip(proxy.records, pretext_manifest.records):
        np.testing.assert_array_equal(record.input, record.target)
        np.testing.assert_array_equal(np.sort(record.input, axis=None), np.sort(original.input, axis=None))
    with pytest.raises(ConfigurationError):
        proxy_manifest(segmentation_manifest)


#############################################################################################
## Evaluation
#############################################################################################

def all_background(params):
    params = params.copy()
    params['head_seg_logits/kernel'][...] = 0.0
    params['head_seg_logits/bias'][...] = (10.0, -10.0)
    return params


def test_oracle_evaluation_is_perfect(segmentation_manifest):
    report = evaluate(build_model(TINY_SEG), segmentation_manifest, 'test', oracle=True)
    assert report.targets == ['clean']
    assert report.aggregate('clean') == {'iou': 1.0, 'biou': 1.0, 'score': 1.0}


def test_background_predictions(segmentation_manifest):
    report = evaluate(all_background(build_model(TINY_SEG)), segmentation_manifest, 'test')
    records = {r.tile_id: r for r in segmentation_manifest.split('test')}
    for row in report.tiles.itertuples():
        expected = 0.0 if records[row.tile_id].target.any() else 1.0
        assert row.iou == expected


def test_noisy_and_clean_scoring(segmentation_manifest):
    noise = NoiseSpec(p_remove_building=1.0)
    report = evaluate(build_model(TINY_SEG), segmentation_manifest, 'test', noise=noise, oracle=True)
    assert report.targets == ['clean', 'noisy']
    clean, noisy = report.aggregate('clean'), report.aggregate('noisy')
    assert clean['score'] == 1.0
    assert clean['iou'] >= noisy['iou']
    assert noisy['iou'] < 1.0


def test_evaluation_contracts(segmentation_manifest, pretext_manifest):
    with pytest.raises(ConfigurationError):
        evaluate(build_model(TINY), segmentation_manifest)
    with pytest.raises(ConfigurationError):
        evaluate(build_model(TINY_SEG), pretext_manifest)
    with pytest.raises(ConfigurationError):
        pretext_evaluation(build_model(TINY_SEG), pretext_manifest)


def test_pretext_evaluation(pretext_manifest):
    report = pretext_evaluation(build_model(TINY), pretext_manifest, 'val')
    assert report.targets == ['structures']
    assert np.isfinite(report.extra['reconstruction_loss'])
    assert len(report.tiles) == len(pretext_manifest.split('val'))
    assert report.tiles['score'].between(0, 1).all()


def test_galleries(tmp_path, segmentation_manifest, pretext_manifest):
    save_gallery(build_model(TINY_SEG), segmentation_manifest.split('test')[:2], tmp_path / 'seg.png')
    save_gallery(build_model(TINY), pretext_manifest.split('test')[:2], tmp_path / 'recon.png')
    save_gallery(build_model(TINY), [], tmp_path / 'none.png')
    assert (tmp_path / 'seg.png').exists()
    assert (tmp_path / 'recon.png').exists()
    assert not (tmp_path / 'none.png').exists()


#############################################################################################
## Initialization comparison
#############################################################################################

@pytest.fixture(scope='module')
def inits(pretext_manifest):
    terrain = pretrain(build_model(TINY), pretext_manifest, PRETRAIN).params
    proxy = make_proxy_init(pretext_manifest, TINY, PRETRAIN)
    return {'random': build_model(TINY_SEG), 'proxy': proxy, 'terrain': terrain}


@pytest.fixture(scope='module')
def comparison(inits, segmentation_manifest, tmp_path_factory):
    run_root = tmp_path_factory.mktemp('runs')
    report_config = ReportConfig(fractions=(0.25, 0.5, 1.0), seeds=(0,))
    report = compare_inits(inits, segmentation_manifest, FINETUNE, EvalConfig(), report_config, run_root=run_root)
    return report, run_root


def test_proxy_init_differs_from_terrain_init(inits):
    proxy, terrain = inits['proxy'], inits['terrain']
    assert proxy.provenance == 'proxy-pretrained'
    assert terrain.provenance == 'terrain-pretrained'
    kernels = [name for name in proxy if name.endswith('_conv/kernel')]
    changed = sum(int((proxy[n] != terrain[n]).sum()) for n in kernels)
    total = sum(proxy[n].size for n in kernels)
    assert changed / total > 0.99


def test_comparison_table(comparison):
    report, _ = comparison
    table = report.table()
    assert len(table) == 9
    assert set(table.index.get_level_values('init')) == {'random', 'proxy', 'terrain'}
    for split in ('val', 'test'):
        np.testing.assert_allclose(table[f'{split}_score'], (table[f'{split}_iou'] + table[f'{split}_biou']) / 2)
    assert ((table >= 0) & (table <= 1)).all().all()

    losses = report.epoch_losses(1)
    assert losses[('proxy', 1.0)] != losses[('terrain', 1.0)]


def test_run_directories(comparison, tmp_path):
    report, run_root = comparison
    run_dir = run_root / 'finetune-terrain-0.5-s0'
    for name in ('run.json', 'metrics.tsv', 'report.tsv', 'gallery.png', 'checkpoint'):
        assert (run_dir / name).exists()

    collected = collect_runs(sorted(run_root.glob('finetune-*')))
    pd.testing.assert_frame_equal(collected.table(), report.table(), atol=1e-5)

    report.save(tmp_path / 'report')
    assert (tmp_path / 'report' / 'report.txt').exists()
    assert (tmp_path / 'report' / 'train_loss_0.5.png').exists()


def test_missing_runs(tmp_path, inits, segmentation_manifest):
    with pytest.raises(MissingArtifactError):
        collect_runs([])
    (tmp_path / 'partial').mkdir()
    with pytest.raises(MissingArtifactError):
        collect_runs([tmp_path / 'partial'])
    with pytest.raises(MissingArtifactError):
        compare_inits({'random': inits['random']}, segmentation_manifest, FINETUNE, EvalConfig(), ReportConfig(seeds=(0,)))


#############################################################################################
## Distribution shift
#############################################################################################

def test_shift_manifest(small_scenes, small_dataset):
    manifest = shift_manifest(small_scenes, small_dataset, ReportConfig(), seed=0)
    assert len(manifest.records) == 6 * 16
    assert all(r.clean_target is not None for r in manifest.records)
    assert set(manifest.noise_log) == {'removed', 'phantoms', 'shifted', 'morphed'}


def test_shift_benchmark(small_scenes, small_dataset):
    report_config = ReportConfig(inits=('random',), seeds=(0,))
    report = shift_benchmark({'random': build_model(TINY_SEG)}, small_scenes, small_dataset, FINETUNE, EvalConfig(), report_config)
    test_rows = report.runs[report.runs['split'] == 'test']
    assert set(test_rows['target']) == {'clean', 'noisy'}
    assert len(report.table('noisy')) == 1
