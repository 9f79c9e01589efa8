from pathlib import Path

import pytest

from terra_ssl import cli
from terra_ssl.Errors import NumericError

SMOKE = str(Path(__file__).resolve().parent.parent / 'configs' / 'smoke.yaml')


def run(*argv, out):
    return cli.main([*argv, '--config', SMOKE, '--out', str(out)])


def test_gen_data_is_reproducible(tmp_path, capsys):
    assert run('gen-data', out=tmp_path / 'a') == 0
    printed = capsys.readouterr().out
    assert 'pretext: 24 tiles (train 16, val 4, test 4)' in printed
    assert 'segmentation: 24 tiles' in printed

    assert run('gen-data', out=tmp_path / 'b') == 0
    for name in ('pretext_manifest.tsv', 'segmentation_manifest.tsv'):
        assert (tmp_path / 'a' / 'data' / name).read_bytes() == (tmp_path / 'b' / 'data' / name).read_bytes()
    scenes = sorted((tmp_path / 'a' / 'data' / 'scenes').iterdir())
    assert len(scenes) == 6
    for scene in scenes:
        other = tmp_path / 'b' / 'data' / 'scenes' / scene.name
        assert (scene / 'dsm.f32').read_bytes() == (other / 'dsm.f32').read_bytes()


def test_gen_data_logs_seed_override(tmp_path, monkeypatch, caplog):
    monkeypatch.setenv('TERRA_SSL_SYNTH__SEED', '7')
    assert run('gen-data', out=tmp_path) == 0
    assert 'synth.seed=7 is replaced by the global seed 0' in caplog.text


def test_eval_seeds_the_session(tmp_path, monkeypatch):
    assert run('gen-data', out=tmp_path) == 0
    seeds = []
    monkeypatch.setattr(cli, 'enable_determinism', seeds.append)
    assert run('eval', '--oracle', out=tmp_path) == 0
    assert seeds == [0]


def test_malformed_configuration(tmp_path, capsys):
    path = tmp_path / 'bad.yaml'
    path.write_text("dataset:\n  tile_size: 64\n")
    assert cli.main(['gen-data', '--config', str(path), '--out', str(tmp_path)]) == 1
    assert 'dataset.tile_size' in capsys.readouterr().err


def test_usage_errors(tmp_path):
    assert cli.main(['fly']) == 1
    assert cli.main(['pretrain', '--init', 'imagenet']) == 1


def test_missing_manifest(tmp_path, capsys):
    assert run('pretrain', out=tmp_path) == 2
    assert 'gen-data' in capsys.readouterr().err


def test_numeric_failure_exit_code(tmp_path, monkeypatch):
    def diverge(config, args):
        raise NumericError("training loss is nan")

    monkeypatch.setitem(cli.COMMANDS, 'gen-data', diverge)
    assert run('gen-data', out=tmp_path) == 3


def test_report_without_runs(tmp_path):
    assert run('report', out=tmp_path) == 2
    assert cli.main(['report', str(tmp_path / 'nope'), '--config', SMOKE, '--out', str(tmp_path)]) == 2


def test_full_pipeline(tmp_path, capsys):
    out = tmp_path / 'out'
    assert run('gen-data', out=out) == 0
    assert run('pretrain', out=out) == 0
    assert (out / 'checkpoints' / 'terrain' / 'manifest.txt').exists()
    assert (out / 'checkpoints' / 'terrain.h5').exists()
    assert (out / 'runs' / 'pretrain-terrain-s0' / 'config.yaml').exists()

    assert run('pretrain', '--init', 'proxy', out=out) == 0
    assert (out / 'checkpoints' / 'proxy' / 'manifest.txt').exists()

    assert run('finetune', '--init', 'terrain', '--label-fraction', '0.5', out=out) == 0
    run_dir = out / 'runs' / 'finetune-terrain-0.5-s0'
    for name in ('run.json', 'config.yaml', 'metrics.tsv', 'report.tsv', 'gallery.png'):
        assert (run_dir / name).exists()

    assert run('eval', '--init', 'terrain', '--label-fraction', '0.5', out=out) == 0
    assert (run_dir / 'eval-test.tsv').exists()

    capsys.readouterr()
    assert run('eval', '--oracle', out=out) == 0
    assert '1.000' in capsys.readouterr().out

    assert run('report', out=out) == 0
    assert (out / 'report' / 'report.txt').exists()
    assert (out / 'report' / 'runs.tsv').exists()
