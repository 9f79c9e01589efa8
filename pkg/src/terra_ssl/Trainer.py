"""
Optimization loops: pretext pretraining (DSM -> DTM) and segmentation fine-tuning.

Both loops share the same machinery: a custom `tf.GradientTape` step with optional global-norm clipping, a plateau learning-rate scheduler, best-validation snapshots and a resumable `TrainState`. Batches are drawn from a per-epoch permutation derived from (seed, epoch), so a run is reproducible and can be resumed at any epoch boundary.
"""
import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
import matplotlib.pyplot as plt
from tqdm import tqdm

os.environ.setdefault('TF_CPP_MIN_LOG_LEVEL', '3')
import tensorflow as tf

from .Errors import ConfigurationError, MissingArtifactError, NumericError
from .Losses import LossWeights, default_extractor, inverse_frequency_weights, reconstruction_loss, segmentation_loss
from .Metrics import score_tiles
from .Network import ModelParameters, Network, transfer_weights
from .Utils import NpEncoder, derive_rng

logger = logging.getLogger(__name__)

OPTIMIZERS = ('adam', 'rmsprop')
MONITORS = ('val', 'train')


@dataclass
class PretrainConfig:
    """
    Optimization of the pretext task.

    :param learning_rate: initial learning rate (default: 1e-6).
    :param weight_decay: decoupled weight decay (default: 1e-8).
    :param batch_size: tiles per step (default: 4).
    :param max_epochs: number of epochs; no early stopping, the best validation snapshot is kept (default: 60).
    :param clip_norm: maximum global gradient norm, None to disable (default: 1.0).
    :param plateau_patience: epochs without improvement of the monitored loss before the learning rate is multiplied by `plateau_factor`.
    :param plateau_monitor: 'val' or 'train' loss.
    """
    optimizer: str = 'adam'
    learning_rate: float = 1e-6
    weight_decay: float = 1e-8
    batch_size: int = 4
    max_epochs: int = 60
    clip_norm: Optional[float] = 1.0
    plateau_factor: float = 0.1
    plateau_patience: int = 10
    plateau_min_delta: float = 1e-5
    plateau_monitor: str = 'val'
    rho: float = 0.9
    momentum: float = 0.0
    progress: bool = False

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}.")
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be >= 0.")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0.")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigurationError("batch_size and max_epochs must be >= 1.")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigurationError("clip_norm must be > 0 (or null to disable clipping).")
        if not 0 < self.plateau_factor < 1 or self.plateau_patience < 1:
            raise ConfigurationError("plateau_factor must be in (0, 1) and plateau_patience >= 1.")
        if self.plateau_monitor not in MONITORS:
            raise ConfigurationError(f"plateau_monitor must be one of {MONITORS}.")


@dataclass
class FinetuneConfig(PretrainConfig):
    """
    Optimization of the segmentation task. RMSprop with a squared-gradient smoothing constant `rho` of 0.999; with `momentum_reading=True` the 0.999 is used as heavy-ball momentum instead (and `rho` keeps the Keras default of 0.9).

    :param label_fraction: share of training tiles whose labels are used.
    :param init: 'random', 'proxy' or 'terrain'.
    :param boundary_px: boundary thickness of the validation bIoU.
    """
    optimizer: str = 'rmsprop'
    max_epochs: int = 40
    clip_norm: Optional[float] = None
    plateau_patience: int = 15
    rho: float = 0.999
    momentum_reading: bool = False
    label_fraction: float = 1.0
    init: str = 'terrain'
    boundary_px: int = 2

    def __post_init__(self):
        super().__post_init__()
        if not 0 < self.label_fraction <= 1:
            raise ConfigurationError("finetune.label_fraction must be in (0, 1].")
        if self.init not in ('random', 'proxy', 'terrain'):
            raise ConfigurationError("finetune.init must be random, proxy or terrain.")


def make_optimizer(config):
    "Keras optimizer of a loop configuration."
    if config.optimizer == 'adam':
        return tf.keras.optimizers.Adam(learning_rate=config.learning_rate, weight_decay=config.weight_decay or None)
    rho, momentum = config.rho, config.momentum
    if getattr(config, 'momentum_reading', False):
        rho, momentum = 0.9, config.rho
    return tf.keras.optimizers.RMSprop(
        learning_rate=config.learning_rate, rho=rho, momentum=momentum, epsilon=1e-8, weight_decay=config.weight_decay or None,
    )


def clip_gradients(gradients, clip_norm):
    """
    Rescales the gradients so that their global norm is at most `clip_norm`.

    :return: (clipped gradients, global norm before clipping).
    """
    if clip_norm is None:
        return gradients, tf.linalg.global_norm(gradients)
    return tf.clip_by_global_norm(gradients, clip_norm)


class PlateauScheduler(object):
    """
    Multiplies the learning rate by `factor` when the monitored loss has not improved by more than `min_delta` for `patience` epochs.
    """

    def __init__(self, lr, factor=0.1, patience=10, min_delta=1e-5):
        self.lr = float(lr)
        self.factor = factor
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.wait = 0

    def step(self, value):
        if value < self.best - self.min_delta:
            self.best = value
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                old = self.lr
                self.lr = self.lr * self.factor
                self.wait = 0
                logger.warning("Loss stagnated for %d epochs: learning rate %.3g -> %.3g.", self.patience, old, self.lr)
        return self.lr

    def state(self):
        return {'lr': self.lr, 'best': self.best, 'wait': self.wait}

    def restore(self, state):
        self.lr, self.best, self.wait = float(state['lr']), float(state['best']), int(state['wait'])


@dataclass
class TrainState:
    """
    Everything needed to continue a run at an epoch boundary: counters, scheduler state, best validation loss and the metric history. Parameters and optimizer slots are stored next to it.
    """
    seed: int = 0
    step: int = 0
    epoch: int = 0
    best_val_loss: float = math.inf
    lr: float = 0.0
    scheduler: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def save(self, path):
        Path(path).write_text(json.dumps(dataclasses.asdict(self), cls=NpEncoder, indent=1), encoding='utf-8')

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(f"training state {path} does not exist.")
        return cls(**json.loads(path.read_text(encoding='utf-8')))


@dataclass
class TrainResult:
    """
    :param params: best-validation parameters.
    :param final_params: parameters after the last epoch.
    :param history: one row per epoch (epoch, step, lr, train_loss, val_loss and validation metrics for segmentation).
    """
    params: ModelParameters
    final_params: ModelParameters
    history: pd.DataFrame
    state: TrainState


#############################################################################################
## Generic loop
#############################################################################################

def _batches(n, batch_size, seed, epoch):
    order = derive_rng(seed, 'batches', epoch).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _save_optimizer(optimizer, path):
    np.savez(path, *[np.array(v.numpy()) for v in optimizer.variables])


def _load_optimizer(optimizer, variables, path):
    optimizer.build(variables)
    with np.load(path) as data:
        values = [data[f"arr_{i}"] for i in range(len(data.files))]
    if len(values) != len(optimizer.variables):
        raise MissingArtifactError(f"{path} does not match the optimizer.")
    for variable, value in zip(optimizer.variables, values):
        variable.assign(value)


def _run(params, train, val, loss_fn, config, seed, provenance, run_dir=None, resume=False, evaluate_fn=None):
    """
    Shared optimization loop.

    :param params: initial ModelParameters.
    :param train: (x, y) training arrays.
    :param val: (x, y) validation arrays or None.
    :param loss_fn: callable(y, logits) -> scalar tensor.
    :param evaluate_fn: optional callable(logits, y) -> dict of validation metrics.
    """
    network = Network(params.config)
    network.set_parameters(params)
    x_train, y_train = train
    network.check_input(x_train[:1])

    monitor = config.plateau_monitor
    if val is None and monitor == 'val':
        logger.warning("No validation tiles: the scheduler and the snapshots monitor the training loss.")
        monitor = 'train'

    optimizer = make_optimizer(config)
    scheduler = PlateauScheduler(config.learning_rate, config.plateau_factor, config.plateau_patience, config.plateau_min_delta)
    state = TrainState(seed=seed, lr=config.learning_rate)
    best = params.copy()
    variables = network.trainable_variables

    optimizer.build(variables)

    state_dir = Path(run_dir) / 'state' if run_dir is not None else None
    if resume and state_dir is not None and (state_dir / 'state.json').exists():
        state = TrainState.load(state_dir / 'state.json')
        scheduler.restore(state.scheduler)
        network.set_parameters(ModelParameters.load(state_dir / 'last'))
        _load_optimizer(optimizer, variables, state_dir / 'optimizer.npz')
        best = ModelParameters.load(Path(run_dir) / 'checkpoint')
        logger.info("Resuming at epoch %d (step %d).", state.epoch + 1, state.step)

    @tf.function(reduce_retracing=True)
    def train_step(x, y):
        with tf.GradientTape() as tape:
            logits = network(x, training=True)
            loss = loss_fn(y, logits)
        gradients = tape.gradient(loss, variables)
        gradients, norm = clip_gradients(gradients, config.clip_norm)
        optimizer.apply_gradients(zip(gradients, variables))
        return loss, norm

    @tf.function(reduce_retracing=True)
    def eval_step(x, y):
        logits = network(x, training=False)
        return loss_fn(y, logits), logits

    def validate():
        x_val, y_val = val
        total, logits = 0.0, []
        for start in range(0, len(x_val), config.batch_size):
            xb, yb = x_val[start:start + config.batch_size], y_val[start:start + config.batch_size]
            loss, out = eval_step(tf.constant(xb), tf.constant(yb))
            total += float(loss) * len(xb)
            logits.append(out.numpy())
        metrics = {'val_loss': total / len(x_val)}
        if evaluate_fn is not None:
            metrics.update(evaluate_fn(np.concatenate(logits), y_val))
        return metrics

    for epoch in range(state.epoch + 1, config.max_epochs + 1):
        optimizer.learning_rate = scheduler.lr
        total = 0.0
        batches = _batches(len(x_train), config.batch_size, seed, epoch)
        # a zero learning rate also fixes the batch-norm moving statistics
        frozen = [v.numpy() for v in network.statistics] if scheduler.lr == 0 else None
        for idx in tqdm(batches, desc=f"epoch {epoch}", leave=False, disable=not config.progress):
            loss, norm = train_step(tf.constant(x_train[idx]), tf.constant(y_train[idx]))
            loss = float(loss)
            if not math.isfinite(loss):
                raise NumericError(
                    f"training loss is {loss} at epoch {epoch}, step {state.step + 1} "
                    f"(learning rate {scheduler.lr:.3g}, gradient norm {float(norm):.3g})."
                )
            total += loss * len(idx)
            state.step += 1
        if frozen is not None:
            for variable, value in zip(network.statistics, frozen):
                variable.assign(value)

        row = {'epoch': epoch, 'step': state.step, 'lr': scheduler.lr, 'train_loss': total / len(x_train)}
        if val is not None:
            row.update(validate())
            if not math.isfinite(row['val_loss']):
                raise NumericError(f"validation loss is {row['val_loss']} at epoch {epoch}.")

        monitored = row['val_loss'] if monitor == 'val' else row['train_loss']
        if monitored < state.best_val_loss:
            state.best_val_loss = monitored
            best = network.get_parameters(provenance)
            if run_dir is not None:
                best.save(Path(run_dir) / 'checkpoint', step=state.step, metrics=row)

        logger.info(
            "Epoch %d: lr %.3g, train loss %.6f%s", epoch, scheduler.lr, row['train_loss'],
            "".join(f", {k} {v:.4f}" for k, v in row.items() if k.startswith('val_')),
        )

        scheduler.step(monitored)
        state.epoch = epoch
        state.lr = scheduler.lr
        state.scheduler = scheduler.state()
        state.history.append(row)

        if state_dir is not None:
            state_dir.mkdir(parents=True, exist_ok=True)
            network.get_parameters(provenance).save(state_dir / 'last', step=state.step)
            _save_optimizer(optimizer, state_dir / 'optimizer.npz')
            state.save(state_dir / 'state.json')
            pd.DataFrame(state.history).to_csv(Path(run_dir) / 'metrics.tsv', sep='\t', index=False)

    return TrainResult(
        params=ModelParameters(best.config, best.items(), provenance),
        final_params=network.get_parameters(provenance),
        history=pd.DataFrame(state.history),
        state=state,
    )


#############################################################################################
## Pretext pretraining and fine-tuning
#############################################################################################

def pretrain(params, manifest, config, loss_weights=None, seed=0, run_dir=None, provenance='terrain-pretrained', resume=False):
    """
    Trains a reconstruction network to predict the DTM from the DSM.

    Minimizes `reconstruction_loss`, clips the gradients, decays the learning rate on plateaus and keeps the parameters with the lowest validation loss.

    :param params: ModelParameters with a reconstruction head.
    :param manifest: pretext DatasetManifest.
    :param config: PretrainConfig.
    :param loss_weights: LossWeights.
    :param seed: seed of the batch order.
    :param run_dir: directory receiving the best checkpoint, the metric log and the resumable state (optional).
    :param provenance: provenance of the returned parameters.
    :param resume: continue from the state stored in `run_dir`.
    """
    if params.config.head != 'reconstruction':
        raise ConfigurationError("pretraining needs a reconstruction head.")
    if manifest.task != 'pretext':
        raise ConfigurationError("pretraining needs a pretext manifest.")
    loss_weights = loss_weights or LossWeights()
    extractor = default_extractor(loss_weights)

    def loss_fn(y, logits):
        return reconstruction_loss(y, logits, loss_weights, extractor)

    train_records = manifest.split('train')
    if not train_records:
        raise ConfigurationError("the pretext manifest has no training tile.")
    val_records = manifest.split('val')
    train = manifest.arrays(train_records)
    val = manifest.arrays(val_records) if val_records else None
    train, val = _cast(train, params.config.dtype), _cast(val, params.config.dtype)

    logger.info("Pretraining on %d tiles (%d validation tiles).", len(train_records), len(val_records))
    return _run(params, train, val, loss_fn, config, seed, provenance, run_dir, resume)


def finetune(init, manifest, config, loss_weights=None, seed=0, run_dir=None, resume=False):
    """
    Trains all parameters on the labeled training tiles of a segmentation manifest with weighted cross-entropy + DICE.

    A reconstruction network is first given a fresh segmentation head with `transfer_weights()`.

    :param init: ModelParameters (any head, any provenance).
    :param manifest: segmentation DatasetManifest.
    :param config: FinetuneConfig.
    :param loss_weights: LossWeights; class weights default to the inverse pixel frequency of the labeled tiles.
    :param seed: seed of the batch order and of the new head.
    :param run_dir: output directory (optional).
    """
    if manifest.task != 'segmentation':
        raise ConfigurationError("fine-tuning needs a segmentation manifest.")
    labeled = manifest.labeled_records()
    if not labeled:
        raise ConfigurationError("the manifest has no labeled training tile.")
    if init.config.head != 'segmentation':
        init = transfer_weights(init, 'segmentation', seed=seed)

    loss_weights = loss_weights or LossWeights()
    train = _cast(manifest.arrays(labeled), init.config.dtype)
    class_weights = loss_weights.class_weights or inverse_frequency_weights(train[1], init.config.num_classes)
    logger.info("Fine-tuning on %d labeled tiles, class weights %s.", len(labeled), tuple(round(w, 4) for w in class_weights))

    def loss_fn(y, logits):
        return segmentation_loss(logits, y, loss_weights, class_weights)

    def evaluate_fn(logits, y):
        predictions = np.argmax(logits, axis=-1) == 1
        tiles = score_tiles(predictions, y == 1, range(len(y)), d=config.boundary_px)
        return {'val_iou': tiles['iou'].mean(), 'val_biou': tiles['biou'].mean(), 'val_score': tiles['score'].mean()}

    val_records = manifest.split('val')
    val = _cast(manifest.arrays(val_records), init.config.dtype) if val_records else None
    return _run(init, train, val, loss_fn, config, seed, init.provenance, run_dir, resume, evaluate_fn)


def _cast(arrays, dtype):
    if arrays is None:
        return None
    x, y = arrays
    if y.dtype.kind == 'f':
        y = y.astype(dtype)
    return x.astype(dtype), y


def training_summary(history, save_path, title=None):
    """
    Plots the loss (and segmentation metrics when present) against epochs.

    :param history: DataFrame returned in `TrainResult.history` or read from `metrics.tsv`.
    :param save_path: directory receiving `loss.png` and `metrics.png`.
    """
    save_path = Path(save_path)
    save_path.mkdir(parents=True, exist_ok=True)

    plt.figure()
    plt.plot(history['epoch'], history['train_loss'], label="training")
    if 'val_loss' in history:
        plt.plot(history['epoch'], history['val_loss'], label="validation")
    plt.xlabel("Epochs")
    plt.ylabel("loss")
    plt.title(title or "Training performance")
    plt.legend()
    plt.savefig(save_path / "loss.png")
    plt.close()

    if 'val_iou' in history:
        plt.figure()
        plt.plot(history['epoch'], history['val_iou'], label="IoU")
        plt.plot(history['epoch'], history['val_biou'], label="bIoU")
        plt.xlabel("Epochs")
        plt.ylabel("validation metric")
        plt.ylim(0.0, 1.0)
        plt.title(title or "Validation metrics")
        plt.legend()
        plt.savefig(save_path / "metrics.png")
        plt.close()
