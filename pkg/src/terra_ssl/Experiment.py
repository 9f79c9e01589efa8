"""
Experiment protocols built on top of the training loops: the proxy initialization, evaluation, the comparison of initializations under label budgets and the distribution-shift benchmark.

A fine-tuning run directory `finetune-<init>-<fraction>-s<seed>/` holds:

* `run.json`: init, label fraction, seed and provenance.
* `config.yaml`: resolved configuration (written by the command line).
* `metrics.tsv`: one row per epoch.
* `report.tsv`: aggregate IoU / bIoU / Score per split and target kind.
* `checkpoint/`: best-validation parameters.
* `plots/`, `gallery.png`: curves and predicted masks.
"""
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Tuple

import numpy as np
import pandas as pd
import matplotlib.pyplot as plt

from .Dataset import NoiseSpec, build_manifest, inject_label_noise, rescale_scene, subsample_labels
from .Errors import ConfigurationError, MissingArtifactError
from .Losses import LossWeights, reconstruction_loss
from .Metrics import MetricsReport, score, score_tiles, structure_removal_masks
from .Network import build_model, forward
from .Trainer import finetune, pretrain, training_summary
from .Utils import derive_rng

logger = logging.getLogger(__name__)

INITS = ('random', 'proxy', 'terrain')
PROVENANCE_OF_INIT = {'random': 'random', 'proxy': 'proxy-pretrained', 'terrain': 'terrain-pretrained'}


@dataclass
class EvalConfig:
    """
    :param boundary_px: boundary thickness d of the bIoU (default: 2).
    :param splits: splits evaluated after fine-tuning.
    :param structure_threshold_m: threshold of the structure-removal masks of the pretext evaluation.
    :param gallery_count: number of tiles shown in the prediction galleries.
    """
    boundary_px: int = 2
    splits: Tuple[str, ...] = ('val', 'test')
    structure_threshold_m: float = 1.0
    gallery_count: int = 4
    batch_size: int = 8
    oracle: bool = False

    def __post_init__(self):
        self.splits = tuple(self.splits)
        if self.boundary_px < 1:
            raise ConfigurationError("eval.boundary_px must be >= 1.")
        if not self.structure_threshold_m > 0:
            raise ConfigurationError("eval.structure_threshold_m must be > 0.")


@dataclass
class ReportConfig:
    """
    Grid of the initialization comparison and parameters of the shift benchmark.

    :param inits: initializations to compare.
    :param fractions: label fractions.
    :param seeds: fine-tuning seeds; tables report the median over seeds.
    :param proxy_block_px: block size of the shuffled textures of the proxy task.
    :param shift_factor: resolution change of the shift benchmark.
    """
    inits: Tuple[str, ...] = INITS
    fractions: Tuple[float, ...] = (0.01, 0.1, 1.0)
    seeds: Tuple[int, ...] = (0, 1, 2)
    proxy_block_px: int = 8
    shift_factor: float = 2.0
    shift_p_remove: float = 0.15
    shift_p_add: float = 0.1
    shift_max_px: int = 3
    shift_p_boundary: float = 0.0

    def __post_init__(self):
        self.inits = tuple(self.inits)
        self.fractions = tuple(float(f) for f in self.fractions)
        self.seeds = tuple(int(s) for s in self.seeds)
        if any(i not in INITS for i in self.inits):
            raise ConfigurationError(f"report.inits must be taken from {INITS}.")
        if not self.seeds:
            raise ConfigurationError("report.seeds must not be empty.")

    def shift_noise(self, seed=0):
        return NoiseSpec(self.shift_p_remove, self.shift_p_add, self.shift_max_px, self.shift_p_boundary, seed=seed)


def run_name(init, fraction, seed):
    return f"finetune-{init}-{fraction:g}-s{seed}"


#############################################################################################
## Proxy initialization
#############################################################################################

def block_shuffle(tile, block_px, rng):
    "Permutes the (block_px x block_px) blocks of a tile: local texture is kept, the scene layout is destroyed."
    h, w = tile.shape
    if h % block_px or w % block_px:
        raise ConfigurationError(f"tile of {h}x{w} pixels cannot be cut in {block_px}-pixel blocks.")
    blocks = tile.reshape(h // block_px, block_px, w // block_px, block_px).swapaxes(1, 2).reshape(-1, block_px, block_px)
    blocks = blocks[rng.permutation(len(blocks))]
    return blocks.reshape(h // block_px, w // block_px, block_px, block_px).swapaxes(1, 2).reshape(h, w)


def proxy_manifest(manifest, block_px=8, seed=0):
    """
    Unrelated reconstruction task: identity autoencoding of block-shuffled tiles.

    :param manifest: pretext DatasetManifest providing the textures.
    """
    if manifest.task != 'pretext':
        raise ConfigurationError("the proxy task is built from a pretext manifest.")
    records = []
    for record in manifest.records:
        shuffled = block_shuffle(record.input, block_px, derive_rng(seed, 'proxy', record.tile_id))
        records.append(dataclasses.replace(record, input=shuffled, target=shuffled.copy()))
    return dataclasses.replace(manifest, records=records)


def make_proxy_init(manifest, model_config, config, loss_weights=None, seed=0, block_px=8, run_dir=None):
    """
    Pretrains the architecture on the proxy task with the step budget of the terrain pretraining.

    :param manifest: pretext DatasetManifest.
    :param model_config: ModelConfig with a reconstruction head.
    :param config: PretrainConfig.
    :return: ModelParameters with provenance 'proxy-pretrained'.
    """
    params = build_model(model_config, seed)
    result = pretrain(
        params, proxy_manifest(manifest, block_px, seed), config, loss_weights,
        seed=seed, run_dir=run_dir, provenance='proxy-pretrained',
    )
    return result.params


#############################################################################################
## Evaluation
#############################################################################################

def predict_masks(params, x, batch_size=8):
    "Building masks (argmax of the logits) of a batch of tiles."
    logits, _ = forward(params, x, batch_size=batch_size)
    return np.argmax(logits, axis=-1) == 1


def evaluate(params, manifest, split='test', noise=None, oracle=False, d=2, batch_size=8):
    """
    Scores a segmentation network on one split.

    When label noise is given (or already present in the manifest), every tile is scored against both the noisy and the clean masks.

    :param params: ModelParameters with a segmentation head.
    :param manifest: segmentation DatasetManifest.
    :param split: 'train', 'val' or 'test'.
    :param noise: NoiseSpec applied to the split before scoring (optional).
    :param oracle: replace the predictions by the clean masks (pipeline check).
    :param d: boundary thickness of the bIoU.
    """
    if params.config.head != 'segmentation':
        raise ConfigurationError("evaluation needs a segmentation head.")
    if manifest.task != 'segmentation':
        raise ConfigurationError("evaluation needs a segmentation manifest.")
    if noise is not None:
        manifest = inject_label_noise(manifest, noise, splits=[split])
    records = manifest.split(split)
    if not records:
        raise ConfigurationError(f"split {split!r} has no tile.")

    x, clean = manifest.arrays(records, clean=True)
    predictions = clean == 1 if oracle else predict_masks(params, x, batch_size)
    ids = [r.tile_id for r in records]

    tables = [score_tiles(predictions, clean == 1, ids, d=d, target='clean')]
    if any(r.clean_target is not None for r in records):
        _, noisy = manifest.arrays(records)
        tables.append(score_tiles(predictions, noisy == 1, ids, d=d, target='noisy'))

    report = MetricsReport(pd.concat(tables, ignore_index=True), split=split)
    for target in report.targets:
        logger.info("Evaluation on %s (%s masks): %s", split, target, {k: round(v, 4) for k, v in report.aggregate(target).items()})
    return report


def pretext_evaluation(params, manifest, split='test', threshold=1.0, loss_weights=None, batch_size=8):
    """
    Evaluates a reconstruction network: mean reconstruction loss, and IoU / bIoU of the structure-removal masks (pixels where the predicted terrain lies more than `threshold` meters below the DSM, against the same threshold on the true nDSM).

    :return: MetricsReport with the mean loss in `extra['reconstruction_loss']`.
    """
    if params.config.head != 'reconstruction':
        raise ConfigurationError("pretext evaluation needs a reconstruction head.")
    records = manifest.split(split)
    if not records:
        raise ConfigurationError(f"split {split!r} has no tile.")

    x, y = manifest.arrays(records)
    prediction, _ = forward(params, x, batch_size=batch_size)
    loss = float(reconstruction_loss(y.astype(prediction.dtype), prediction, loss_weights or LossWeights()))

    preds, refs = [], []
    for record, pred in zip(records, prediction[..., 0]):
        dsm = record.input * record.scale + record.offset
        dtm = record.target * record.scale + record.offset
        p, r = structure_removal_masks(dsm, dtm, pred * record.scale + record.offset, threshold)
        preds.append(p)
        refs.append(r)

    report = MetricsReport(score_tiles(preds, refs, [r.tile_id for r in records], target='structures'), split=split)
    report.extra['reconstruction_loss'] = loss
    logger.info("Pretext evaluation on %s: loss %.5f, %s", split, loss, report.aggregate())
    return report


#############################################################################################
## Runs and comparison reports
#############################################################################################

def run_finetune(init_name, init_params, manifest, finetune_config, eval_config, fraction, seed,
                 loss_weights=None, run_root=None, test_manifest=None):
    """
    One cell of the comparison: label budget, fine-tuning, evaluation on the requested splits, run directory.

    :param test_manifest: manifest used for the evaluation (default: `manifest`).
    :return: (TrainResult, summary DataFrame with one row per split and target kind).
    """
    if init_params.provenance != PROVENANCE_OF_INIT.get(init_name, init_params.provenance):
        logger.warning("Init %s has provenance %s, expected %s.", init_name, init_params.provenance, PROVENANCE_OF_INIT[init_name])
    budget = subsample_labels(manifest, fraction, seed)
    config = dataclasses.replace(finetune_config, label_fraction=fraction, init=init_name)
    run_dir = Path(run_root) / run_name(init_name, fraction, seed) if run_root is not None else None

    result = finetune(init_params, budget, config, loss_weights, seed=seed, run_dir=run_dir)
    summaries = []
    for split in eval_config.splits:
        evaluated = test_manifest if (test_manifest is not None and split == 'test') else budget
        if not evaluated.split(split):
            logger.warning("Split %s is empty, not evaluated.", split)
            continue
        report = evaluate(result.params, evaluated, split, oracle=eval_config.oracle, d=eval_config.boundary_px, batch_size=eval_config.batch_size)
        summaries.append(report.summary())
    summary = pd.concat(summaries, ignore_index=True) if summaries else pd.DataFrame()

    if run_dir is not None:
        write_run(run_dir, {
            'init': init_name, 'fraction': fraction, 'seed': seed, 'provenance': result.params.provenance,
            'labeled_tiles': len(budget.labeled),
        }, result.history, summary)
        save_gallery(result.params, evaluated_records(test_manifest or budget, eval_config), run_dir / 'gallery.png', eval_config.batch_size)
    return result, summary


def evaluated_records(manifest, eval_config):
    "First tiles of the last evaluated split, for galleries."
    for split in reversed(eval_config.splits):
        records = manifest.split(split)
        if records:
            return records[:eval_config.gallery_count]
    return []


def write_run(run_dir, info, history, summary):
    "Writes run.json, metrics.tsv, report.tsv and the curves of a fine-tuning run."
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / 'run.json').write_text(json.dumps(info, indent=1), encoding='utf-8')
    history.to_csv(run_dir / 'metrics.tsv', sep='\t', index=False)
    summary.to_csv(run_dir / 'report.tsv', sep='\t', index=False, float_format='%.6f')
    training_summary(history, run_dir / 'plots', title=f"{info['init']} init, {info['fraction']:g} labels")


@dataclass
class ComparisonReport:
    """
    Results of a grid of fine-tuning runs.

    :param runs: one row per (init, fraction, seed, split, target) with iou, biou, score.
    :param histories: epoch histories keyed by (init, fraction, seed).
    """
    runs: pd.DataFrame
    histories: Dict[tuple, pd.DataFrame] = field(default_factory=dict)

    def table(self, target='clean'):
        """
        Median over seeds. One row per (init, fraction); for each split the IoU, bIoU and Score columns. Score cells are recomputed as the mean of the IoU and bIoU cells.
        """
        df = self.runs[self.runs['target'] == target]
        if df.empty:
            raise ConfigurationError(f"no run scored against {target!r} masks.")
        medians = df.groupby(['init', 'fraction', 'split'])[['iou', 'biou']].median().reset_index()
        medians['score'] = [score(i, b) for i, b in zip(medians['iou'], medians['biou'])]
        table = medians.pivot_table(index=['init', 'fraction'], columns='split', values=['iou', 'biou', 'score'])
        table.columns = [f"{split}_{metric}" for metric, split in table.columns]
        ordered = [f"{s}_{m}" for s in ('val', 'test', 'train') for m in ('iou', 'biou', 'score') if f"{s}_{m}" in table.columns]
        return table[ordered]

    def epoch_losses(self, epoch=1):
        "Median training loss of a given epoch per (init, fraction)."
        rows = []
        for (init, fraction, seed), history in self.histories.items():
            match = history[history['epoch'] == epoch]
            if not match.empty:
                rows.append({'init': init, 'fraction': fraction, 'seed': seed, 'train_loss': float(match['train_loss'].iloc[0])})
        df = pd.DataFrame(rows, columns=['init', 'fraction', 'seed', 'train_loss'])
        return df.groupby(['init', 'fraction'])['train_loss'].median()

    def save(self, directory, target='clean'):
        "Writes runs.tsv, report.tsv (machine readable), report.txt (human readable) and the curves."
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.runs.to_csv(directory / 'runs.tsv', sep='\t', index=False, float_format='%.6f')
        table = self.table(target)
        table.to_csv(directory / 'report.tsv', sep='\t', float_format='%.6f')
        (directory / 'report.txt').write_text(table.to_string(float_format=lambda v: f"{v:.3f}") + "\n", encoding='utf-8')
        plot_curves(self.histories, directory)
        logger.info("Comparison table (%s masks):\n%s", target, table.to_string(float_format=lambda v: f"{v:.3f}"))


def plot_curves(histories, directory):
    """
    One figure per label fraction and quantity (training loss, validation IoU, validation bIoU), one median curve per initialization.
    """
    directory = Path(directory)
    frames = []
    for (init, fraction, seed), history in histories.items():
        frames.append(history.assign(init=init, fraction=fraction, seed=seed))
    if not frames:
        return
    df = pd.concat(frames, ignore_index=True)

    for quantity in ('train_loss', 'val_iou', 'val_biou'):
        if quantity not in df:
            continue
        for fraction, group in df.groupby('fraction'):
            plt.figure()
            for init, curves in group.groupby('init'):
                median = curves.groupby('epoch')[quantity].median()
                plt.plot(median.index, median.values, label=init)
            plt.xlabel("Epochs")
            plt.ylabel(quantity)
            plt.title(f"{quantity} with {fraction:g} of the labels")
            plt.legend()
            plt.savefig(directory / f"{quantity}_{fraction:g}.png")
            plt.close()


def compare_inits(inits, manifest, finetune_config, eval_config, report_config, loss_weights=None, run_root=None, test_manifest=None):
    """
    Fine-tunes every initialization with every label fraction and seed of `report_config`.

    :param inits: dictionary init name -> ModelParameters.
    :param manifest: clean segmentation DatasetManifest (label budgets are drawn from it).
    :param test_manifest: manifest evaluated on its test split (default: `manifest`).
    :return: ComparisonReport.
    """
    missing = [name for name in report_config.inits if name not in inits]
    if missing:
        raise MissingArtifactError(f"missing initializations: {', '.join(missing)}.")

    rows, histories = [], {}
    for name in report_config.inits:
        for fraction in report_config.fractions:
            for seed in report_config.seeds:
                logger.info("Fine-tuning %s init with %g of the labels, seed %d.", name, fraction, seed)
                result, summary = run_finetune(
                    name, inits[name], manifest, finetune_config, eval_config, fraction, seed,
                    loss_weights, run_root, test_manifest,
                )
                histories[(name, fraction, seed)] = result.history
                for row in summary.to_dict('records'):
                    rows.append({'init': name, 'fraction': fraction, 'seed': seed, **row})

    return ComparisonReport(pd.DataFrame(rows), histories)


def collect_runs(run_dirs):
    """
    Rebuilds a ComparisonReport from fine-tuning run directories.

    :param run_dirs: iterable of directories containing run.json, metrics.tsv and report.tsv.
    """
    rows, histories = [], {}
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        for name in ('run.json', 'metrics.tsv', 'report.tsv'):
            if not (run_dir / name).exists():
                raise MissingArtifactError(f"{run_dir} has no {name}.")
        info = json.loads((run_dir / 'run.json').read_text(encoding='utf-8'))
        key = (info['init'], float(info['fraction']), int(info['seed']))
        histories[key] = pd.read_csv(run_dir / 'metrics.tsv', sep='\t')
        for row in pd.read_csv(run_dir / 'report.tsv', sep='\t').to_dict('records'):
            rows.append({'init': key[0], 'fraction': key[1], 'seed': key[2], **row})
    if not rows:
        raise MissingArtifactError("no metric log found.")
    return ComparisonReport(pd.DataFrame(rows), histories)


#############################################################################################
## Distribution shift
#############################################################################################

def shift_manifest(scenes, dataset_config, report_config, seed=0):
    """
    Shifted benchmark: every scene is resampled by `shift_factor` and all masks receive the label noise of `report_config`.
    """
    shifted = [rescale_scene(scene, report_config.shift_factor) for scene in scenes]
    manifest = build_manifest(shifted, dataset_config, 'segmentation', seed=seed)
    return inject_label_noise(manifest, report_config.shift_noise(seed))


def shift_benchmark(inits, scenes, dataset_config, finetune_config, eval_config, report_config, loss_weights=None, run_root=None, fraction=1.0, seed=0):
    """
    Fine-tunes and evaluates every initialization on the shifted benchmark (noisy labels, changed resolution). Test tiles are scored against both noisy and clean masks.

    :return: ComparisonReport.
    """
    manifest = shift_manifest(scenes, dataset_config, report_config, seed)
    manifest.summary()
    grid = dataclasses.replace(report_config, fractions=(fraction,))
    return compare_inits(inits, manifest, finetune_config, eval_config, grid, loss_weights, run_root)


#############################################################################################
## Galleries
#############################################################################################

def save_gallery(params, records, path, batch_size=8):
    """
    Saves a figure with one row per tile: input, label and prediction (segmentation), or DSM, DTM and predicted DTM (reconstruction).
    """
    if not records:
        return
    x = np.stack([r.input for r in records])[..., None].astype(params.config.dtype)
    logits, _ = forward(params, x, batch_size=batch_size)
    if params.config.head == 'segmentation':
        outputs = np.argmax(logits, axis=-1)
        titles = ("nDSM", "label", "prediction")
    else:
        outputs = logits[..., 0]
        titles = ("DSM", "DTM", "predicted DTM")

    fig, axes = plt.subplots(len(records), 3, figsize=(9, 3 * len(records)), squeeze=False)
    for row, (record, output) in enumerate(zip(records, outputs)):
        for col, image in enumerate((record.input, record.scoring_target, output)):
            axes[row, col].imshow(image, cmap='gray' if col else 'terrain')
            axes[row, col].set_axis_off()
            if row == 0:
                axes[row, col].set_title(titles[col])
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
