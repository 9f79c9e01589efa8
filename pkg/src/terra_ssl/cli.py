"""
Command line: `terra-ssl gen-data|pretrain|finetune|eval|report`.

Exit codes: 0 success, 1 usage or configuration error, 2 missing artifact, 3 numeric failure.

Artifacts below the output root:

* `data/scenes/<scene_id>/`, `data/pretext_manifest.tsv`, `data/segmentation_manifest.tsv`
* `checkpoints/terrain/`, `checkpoints/proxy/` (and `.h5` exports)
* `runs/pretrain-<init>-s<seed>/`, `runs/finetune-<init>-<fraction>-s<seed>/`
* `report/`
"""
import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import matplotlib
import pandas as pd

from .Config import ExperimentConfig, load_noise_spec
from .Dataset import build_manifest, inject_label_noise, read_manifest, write_manifest
from .Errors import ConfigurationError, ContractError, MissingArtifactError, NumericError, TerraError
from .Experiment import (INITS, collect_runs, evaluate, make_proxy_init, pretext_evaluation, run_finetune, run_name,
                         save_gallery)
from .Network import ModelParameters, build_model
from .SceneSynth import generate_scenes, save_scene
from .Trainer import pretrain, training_summary
from .Utils import configure_logging, enable_determinism

logger = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigurationError(message)


def data_dir(config):
    return config.root / 'data'


def load_manifest(config, task):
    path = data_dir(config) / f"{task}_manifest.tsv"
    if not path.exists():
        raise MissingArtifactError(f"manifest {path} does not exist (run gen-data first).")
    return read_manifest(path, data_dir(config) / 'scenes')


def load_init(config, init):
    "Initial parameters of a fine-tuning run."
    if init == 'random':
        return build_model(dataclasses.replace(config.model, head='segmentation'), config.seed)
    return ModelParameters.load(config.root / 'checkpoints' / init)


#############################################################################################
## Commands
#############################################################################################

def cmd_gen_data(config, args):
    "Generates the scenes and the pretext / segmentation manifests."
    root = data_dir(config)
    if config.synth.seed != config.seed:
        logger.warning("synth.seed=%d is replaced by the global seed %d.", config.synth.seed, config.seed)
    synth = dataclasses.replace(config.synth, seed=config.seed)
    scenes = generate_scenes(synth, config.dataset.scene_count)
    for scene in scenes:
        save_scene(scene, root / 'scenes' / scene.scene_id, synth)

    for task in ('pretext', 'segmentation'):
        manifest = build_manifest(scenes, config.dataset, task, seed=config.seed)
        manifest.summary()
        write_manifest(manifest, root / f"{task}_manifest.tsv", config.dataset.tile_px)
        counts = ", ".join(f"{split} {len(manifest.split(split))}" for split in ('train', 'val', 'test'))
        print(f"{task}: {len(manifest.records)} tiles ({counts})")

    config.save_yaml(root / 'config.yaml')
    print(f"{len(scenes)} scenes written to {root / 'scenes'}")
    return 0


def cmd_pretrain(config, args):
    "Terrain pretraining (DSM -> DTM) or the proxy pretraining."
    init = args.init or 'terrain'
    if init not in ('terrain', 'proxy'):
        raise ConfigurationError("pretrain --init must be terrain or proxy.")
    enable_determinism(config.seed)

    manifest = load_manifest(config, 'pretext')
    model_config = dataclasses.replace(config.model, head='reconstruction')
    run_dir = config.root / 'runs' / f"pretrain-{init}-s{config.seed}"
    config.save_yaml(run_dir / 'config.yaml')

    if init == 'terrain':
        params = pretrain(build_model(model_config, config.seed), manifest, config.pretrain, config.losses, seed=config.seed, run_dir=run_dir).params
    else:
        params = make_proxy_init(manifest, model_config, config.pretrain, config.losses, seed=config.seed, block_px=config.report.proxy_block_px, run_dir=run_dir)

    checkpoint = config.root / 'checkpoints' / init
    params.save(checkpoint)
    params.save_h5(checkpoint.with_suffix('.h5'))
    training_summary(_read_history(run_dir), run_dir / 'plots', title=f"{init} pretraining")

    if manifest.split('test'):
        report = pretext_evaluation(params, manifest, 'test', config.eval.structure_threshold_m, config.losses, config.eval.batch_size)
        report.save(run_dir / 'pretext_report.tsv')
        save_gallery(params, manifest.split('test')[:config.eval.gallery_count], run_dir / 'gallery.png', config.eval.batch_size)
        metrics = report.aggregate()
        print(f"test reconstruction loss {report.extra['reconstruction_loss']:.5f}, "
              f"structure IoU {metrics['iou']:.3f}, bIoU {metrics['biou']:.3f}")
    print(f"{init} checkpoint written to {checkpoint}")
    return 0


def cmd_finetune(config, args):
    "Fine-tuning of one (init, label fraction) cell."
    init = args.init or config.finetune.init
    fraction = args.label_fraction if args.label_fraction is not None else config.finetune.label_fraction
    if init not in INITS:
        raise ConfigurationError(f"--init must be one of {INITS}.")
    enable_determinism(config.seed)

    manifest = load_manifest(config, 'segmentation')
    if args.noise:
        manifest = inject_label_noise(manifest, load_noise_spec(args.noise, seed=config.seed))
    params = load_init(config, init)

    _, summary = run_finetune(
        init, params, manifest, config.finetune, config.eval, fraction, config.seed,
        config.losses, run_root=config.root / 'runs',
    )
    run_dir = config.root / 'runs' / run_name(init, fraction, config.seed)
    config.save_yaml(run_dir / 'config.yaml')
    print(summary.to_string(index=False, float_format=lambda v: f"{v:.3f}"))
    print(f"run written to {run_dir}")
    return 0


def cmd_eval(config, args):
    "Evaluation of a fine-tuned checkpoint (or of the oracle)."
    init = args.init or config.finetune.init
    fraction = args.label_fraction if args.label_fraction is not None else config.finetune.label_fraction
    enable_determinism(config.seed)
    manifest = load_manifest(config, 'segmentation')
    noise = load_noise_spec(args.noise, seed=config.seed) if args.noise else None

    run_dir = config.root / 'runs' / run_name(init, fraction, config.seed)
    if args.oracle:
        params = build_model(dataclasses.replace(config.model, head='segmentation'), config.seed)
    else:
        params = ModelParameters.load(run_dir / 'checkpoint')

    for split in config.eval.splits:
        if not manifest.split(split):
            continue
        report = evaluate(params, manifest, split, noise=noise, oracle=args.oracle, d=config.eval.boundary_px, batch_size=config.eval.batch_size)
        if not args.oracle:
            report.save(run_dir / f"eval-{split}.tsv")
        print(report.summary().to_string(index=False, float_format=lambda v: f"{v:.3f}"))
    return 0


def cmd_report(config, args):
    "Comparison table and curves from fine-tuning runs."
    run_dirs = [Path(d) for d in args.runs] if args.runs else sorted((config.root / 'runs').glob('finetune-*'))
    if not run_dirs:
        raise MissingArtifactError(f"no fine-tuning run found in {config.root / 'runs'}.")
    for run_dir in run_dirs:
        if not run_dir.is_dir():
            raise MissingArtifactError(f"run directory {run_dir} does not exist.")

    comparison = collect_runs(run_dirs)
    out = config.root / 'report'
    comparison.save(out)
    print(comparison.table().to_string(float_format=lambda v: f"{v:.3f}"))
    if 'noisy' in set(comparison.runs['target']):
        print(comparison.table('noisy').to_string(float_format=lambda v: f"{v:.3f}"))
    print(f"report written to {out}")
    return 0


def _read_history(run_dir):
    path = Path(run_dir) / 'metrics.tsv'
    if not path.exists():
        raise MissingArtifactError(f"metric log {path} does not exist.")
    return pd.read_csv(path, sep='\t')


COMMANDS = {
    'gen-data': cmd_gen_data,
    'pretrain': cmd_pretrain,
    'finetune': cmd_finetune,
    'eval': cmd_eval,
    'report': cmd_report,
}


def make_parser():
    parser = _Parser(prog='terra-ssl', description="Terrain-aware self-supervised pretraining for building segmentation.")
    sub = parser.add_subparsers(dest='command', required=True, parser_class=_Parser)
    for name, command in COMMANDS.items():
        p = sub.add_parser(name, help=command.__doc__)
        p.add_argument('--config', help="YAML configuration file.")
        p.add_argument('--seed', type=int, help="global seed.")
        p.add_argument('--out', help="output root directory.")
        p.add_argument('-v', '--verbose', action='count', default=0, help="-v for info, -vv for debug messages.")
        if name in ('pretrain', 'finetune', 'eval'):
            p.add_argument('--init', choices=INITS, help="initialization.")
        if name in ('finetune', 'eval'):
            p.add_argument('--label-fraction', type=float, help="share of labeled training tiles.")
            p.add_argument('--noise', help="YAML label-noise specification.")
        if name == 'eval':
            p.add_argument('--oracle', action='store_true', help="score the ground truth itself (pipeline check).")
        if name == 'report':
            p.add_argument('runs', nargs='*', help="run directories (default: every fine-tuning run).")
    return parser


def main(argv=None):
    matplotlib.use('Agg')
    try:
        args = make_parser().parse_args(argv)
        configure_logging(args.verbose)
        config = ExperimentConfig.from_yaml(args.config)
        if args.seed is not None:
            config = config.replace(seed=args.seed)
        if args.out is not None:
            config = config.replace(output_root=args.out)
        return COMMANDS[args.command](config, args)
    except (ConfigurationError, ContractError) as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except MissingArtifactError as exc:
        logger.error("%s", exc)
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        logger.error("%s", exc)
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (TerraError, OSError) as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
