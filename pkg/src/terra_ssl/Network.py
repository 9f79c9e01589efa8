"""
Residual encoder-decoder with skip connections and squeeze-and-excitation gates, with exchangeable reconstruction and segmentation heads.

Parameters live outside of Keras in a `ModelParameters` container (ordered name -> array map), so that they can be initialized portably, transferred between heads, checkpointed and compared bit-exactly. A Keras model is built on demand for a given `ModelConfig` and the parameters are assigned to it by name (`layer_name/weight_name`).

Tensors are channels-last: a tile is (H, W, C), a batch (N, H, W, C).
"""
import dataclasses
import json
import logging
import os
import threading
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

os.environ.setdefault('TF_CPP_MIN_LOG_LEVEL', '3')
import tensorflow as tf

from .Errors import ConfigurationError, MissingArtifactError, ShapeError, TransferError, DataError
from .Raster import read_key_values, write_key_values
from .Utils import config_hash, derive_rng

logger = logging.getLogger(__name__)

HEADS = ('reconstruction', 'segmentation')
PROVENANCES = ('random', 'proxy-pretrained', 'terrain-pretrained')
ACTIVATIONS = ('relu', 'lrelu', 'prelu')
HEAD_PREFIX = 'head_'

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9


@dataclass
class ModelConfig:
    """
    Architecture of the network.

    :param in_channels: number of input channels (1 for elevation tiles).
    :param base_width: number of feature maps of the stem; encoder stage i has `base_width * 2**i` feature maps.
    :param depth: number of down-sampling stages. Input tiles must be divisible by `2**depth`.
    :param blocks_per_stage: residual blocks per encoder stage.
    :param se_reduction: reduction ratio of the squeeze-and-excitation gates.
    :param head: 'reconstruction' (one output channel) or 'segmentation' (`num_classes` logits).
    :param num_classes: number of segmentation classes.
    :param activation: 'relu', 'lrelu' or 'prelu'.
    :param dtype: 'float32', or 'float64' for gradient checks.
    """
    in_channels: int = 1
    base_width: int = 16
    depth: int = 4
    blocks_per_stage: int = 1
    se_reduction: int = 16
    head: str = 'reconstruction'
    num_classes: int = 2
    activation: str = 'relu'
    dtype: str = 'float32'

    def __post_init__(self):
        if self.in_channels < 1:
            raise ConfigurationError("model.in_channels must be >= 1.")
        if self.base_width < 4:
            raise ConfigurationError(f"model.base_width must be >= 4, got {self.base_width}.")
        if self.depth < 2:
            raise ConfigurationError(f"model.depth must be >= 2, got {self.depth}.")
        if self.blocks_per_stage < 1:
            raise ConfigurationError("model.blocks_per_stage must be >= 1.")
        if self.se_reduction < 1 or self.base_width % self.se_reduction != 0:
            raise ConfigurationError(
                f"model.se_reduction={self.se_reduction} must divide model.base_width={self.base_width}."
            )
        if self.head not in HEADS:
            raise ConfigurationError(f"model.head must be one of {HEADS}, got {self.head!r}.")
        if self.head == 'segmentation' and self.num_classes < 2:
            raise ConfigurationError("model.num_classes must be >= 2 for segmentation.")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"model.activation must be one of {ACTIVATIONS}.")
        if self.dtype not in ('float32', 'float64'):
            raise ConfigurationError("model.dtype must be float32 or float64.")

    def width(self, level):
        "Number of feature maps at a given resolution level (0 = full resolution)."
        return self.base_width * 2 ** level

    @property
    def out_channels(self):
        return 1 if self.head == 'reconstruction' else self.num_classes

    @property
    def divisor(self):
        return 2 ** self.depth

    def without_head(self):
        "Dictionary of every field that must match for a weight transfer."
        d = dataclasses.asdict(self)
        d.pop('head')
        d.pop('num_classes')
        return d


@dataclass
class FeatureMaps:
    """
    Intermediate activations of a forward pass.

    :param encoder: stem output followed by the output of each encoder stage (spatial dims halve, channels double).
    :param decoder: output of each decoder level, from the coarsest to full resolution.
    """
    encoder: list
    decoder: list


#############################################################################################
## Parameters
#############################################################################################

class ModelParameters(OrderedDict):
    """
    Ordered map from `layer_name/weight_name` to numpy arrays, tagged with the configuration and the provenance of the weights.

    The provenance ('random', 'proxy-pretrained' or 'terrain-pretrained') is set at construction and cannot be changed afterwards.
    """

    def __init__(self, config, tensors=(), provenance='random'):
        super().__init__(tensors)
        if provenance not in PROVENANCES:
            raise ConfigurationError(f"provenance must be one of {PROVENANCES}, got {provenance!r}.")
        self.config = config
        self._provenance = provenance

    @property
    def provenance(self):
        return self._provenance

    @property
    def config_hash(self):
        return config_hash(self.config)

    def head_names(self):
        return [name for name in self if name.startswith(HEAD_PREFIX)]

    def body_names(self):
        return [name for name in self if not name.startswith(HEAD_PREFIX)]

    def copy(self):
        return ModelParameters(self.config, ((k, v.copy()) for k, v in self.items()), self.provenance)

    def check(self):
        "Raises a ShapeError when the tensors do not match the layer table of the configuration."
        expected = layer_table(self.config)
        if list(expected) != list(self) or any(tuple(self[k].shape) != v for k, v in expected.items()):
            raise ShapeError("parameter shapes are inconsistent with the model configuration.")
        return self

    def save(self, directory, step=0, metrics=None):
        """
        Writes a directory checkpoint: `manifest.txt` (config, config hash, provenance, step, metric snapshot, tensor list) and one `.bin` blob per tensor.

        A blob starts with a little-endian uint32 `ndim` followed by `ndim` uint32 dimensions, then the values as little-endian float32.

        :param directory: destination directory (created if needed).
        :param step: optimizer step count recorded in the manifest.
        :param metrics: dictionary of scalar metrics recorded in the manifest.
        """
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, value in self.items():
            with open(directory / _blob_name(name), 'wb') as f:
                np.array([value.ndim, *value.shape], dtype='<u4').tofile(f)
                np.ascontiguousarray(value, dtype='<f4').tofile(f)
        write_key_values(directory / 'manifest.txt', {
            'config': json.dumps(dataclasses.asdict(self.config), sort_keys=True),
            'config_hash': self.config_hash,
            'provenance': self.provenance,
            'step': int(step),
            'metrics': json.dumps(metrics or {}, sort_keys=True),
            'tensors': ",".join(self),
        })

    @classmethod
    def load(cls, directory):
        """
        Reads a checkpoint written by `save()`.

        :param directory: checkpoint directory.
        """
        directory = Path(directory)
        if not (directory / 'manifest.txt').exists():
            raise MissingArtifactError(f"no checkpoint in {directory}.")
        values = read_key_values(directory / 'manifest.txt')
        config = ModelConfig(**json.loads(values['config']))
        if config_hash(config) != values['config_hash']:
            raise DataError(f"config hash mismatch in {directory}.")

        params = cls(config, provenance=values['provenance'])
        for name in values['tensors'].split(','):
            path = directory / _blob_name(name)
            if not path.exists():
                raise MissingArtifactError(f"tensor blob {path} does not exist.")
            raw = path.read_bytes()
            ndim = int(np.frombuffer(raw, dtype='<u4', count=1)[0])
            shape = tuple(int(d) for d in np.frombuffer(raw, dtype='<u4', count=ndim, offset=4))
            data = np.frombuffer(raw, dtype='<f4', offset=4 * (ndim + 1))
            if data.size != int(np.prod(shape)):
                raise DataError(f"{path} holds {data.size} values, expected {shape}.")
            params[name] = data.reshape(shape).astype(config.dtype)
        return params.check()

    def save_h5(self, filename):
        """
        Saves the parameters and their configuration in a single hdf5 file.

        :param filename: path to the .h5 file.
        """
        import h5py

        with h5py.File(filename, mode='w') as f:
            f.attrs['config'] = json.dumps(dataclasses.asdict(self.config), sort_keys=True)
            f.attrs['provenance'] = self.provenance
            f.attrs['tensors'] = json.dumps(list(self))
            for name, value in self.items():
                f.create_dataset(name, data=value)

    @classmethod
    def from_h5(cls, filename):
        """
        Creates parameters from a saved HDF5 file (using `save_h5()`).

        :param filename: path to the .h5 file.
        """
        import h5py

        if not Path(filename).exists():
            raise MissingArtifactError(f"{filename} does not exist.")
        with h5py.File(filename, mode='r') as f:
            config = ModelConfig(**json.loads(f.attrs['config']))
            params = cls(config, provenance=str(f.attrs['provenance']))
            for name in json.loads(f.attrs['tensors']):
                params[name] = np.array(f[name])
        return params.check()


def _blob_name(name):
    return name.replace('/', '__') + '.bin'


def checkpoint_metadata(directory):
    "Step count and metric snapshot recorded in a checkpoint manifest."
    values = read_key_values(Path(directory) / 'manifest.txt')
    return {
        'step': int(values['step']),
        'provenance': values['provenance'],
        'config_hash': values['config_hash'],
        'metrics': json.loads(values['metrics']),
    }


#############################################################################################
## Layer table and initialization
#############################################################################################

def _conv_bn_entries(table, name, config, cin, cout, kernel=3, act=True):
    table[f"{name}_conv/kernel"] = (kernel, kernel, cin, cout)
    for weight in ('gamma', 'beta', 'moving_mean', 'moving_variance'):
        table[f"{name}_bn/{weight}"] = (cout,)
    if act and config.activation == 'prelu':
        table[f"{name}_act/alpha"] = (1, 1, cout)


def _se_entries(table, prefix, channels, reduction):
    hidden = channels // reduction
    table[f"{prefix}_se_reduce/kernel"] = (channels, hidden)
    table[f"{prefix}_se_reduce/bias"] = (hidden,)
    table[f"{prefix}_se_expand/kernel"] = (hidden, channels)
    table[f"{prefix}_se_expand/bias"] = (channels,)


def layer_table(config):
    """
    Analytic list of every tensor of the network: ordered dictionary `name -> shape`.

    Convolutions followed by batch normalization carry no bias; batch normalization contributes its scale, shift and moving statistics.

    :param config: ModelConfig.
    """
    table = OrderedDict()
    _conv_bn_entries(table, 'stem', config, config.in_channels, config.width(0))

    for i in range(1, config.depth + 1):
        width = config.width(i)
        _conv_bn_entries(table, f'enc{i}_down', config, config.width(i - 1), width)
        for b in range(config.blocks_per_stage):
            _conv_bn_entries(table, f'enc{i}_block{b}_a', config, width, width)
            _conv_bn_entries(table, f'enc{i}_block{b}_b', config, width, width, act=False)
            if config.activation == 'prelu':
                table[f'enc{i}_block{b}_act/alpha'] = (1, 1, width)
        _se_entries(table, f'enc{i}', width, config.se_reduction)

    for i in reversed(range(config.depth)):
        width = config.width(i)
        _conv_bn_entries(table, f'dec{i}_a', config, config.width(i + 1) + width, width)
        _conv_bn_entries(table, f'dec{i}_b', config, width, width)
        _se_entries(table, f'dec{i}', width, config.se_reduction)

    if config.head == 'reconstruction':
        table['head_recon_conv/kernel'] = (1, 1, config.width(0), 1)
        table['head_recon_conv/bias'] = (1,)
    else:
        _conv_bn_entries(table, 'head_seg', config, config.width(0), config.width(0))
        table['head_seg_logits/kernel'] = (1, 1, config.width(0), config.num_classes)
        table['head_seg_logits/bias'] = (config.num_classes,)
    return table


def count_parameters(config, trainable_only=False):
    """
    Number of scalars in the network, computed from `layer_table()`.

    :param config: ModelConfig.
    :param trainable_only: exclude the batch normalization moving statistics.
    """
    return int(sum(
        np.prod(shape) for name, shape in layer_table(config).items()
        if not (trainable_only and name.split('/')[-1].startswith('moving_'))
    ))


def init_tensor(name, shape, seed, dtype='float32'):
    """
    Deterministic initial value of one tensor: He-normal kernels (fan-in scaling), zero biases and shifts, unit scales and variances, PReLU slopes at 0.25.
    """
    weight = name.split('/')[-1]
    if weight == 'kernel':
        fan_in = int(np.prod(shape[:-1]))
        value = derive_rng(seed, name).normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    elif weight in ('gamma', 'moving_variance'):
        value = np.ones(shape)
    elif weight == 'alpha':
        value = np.full(shape, 0.25)
    else:
        value = np.zeros(shape)
    return value.astype(dtype)


def build_model(config, seed=0):
    """
    Randomly initialized parameters for a configuration. Identical seeds give bit-identical parameters.

    :param config: ModelConfig.
    :param seed: initialization seed.
    """
    return ModelParameters(
        config,
        ((name, init_tensor(name, shape, seed, config.dtype)) for name, shape in layer_table(config).items()),
        provenance='random',
    )


def transfer_weights(source, target_head, seed=0, target_config=None):
    """
    Copies every non-head tensor of `source` (batch normalization statistics included) into a network with another head, whose weights are freshly initialized.

    The provenance of the source is kept.

    :param source: ModelParameters.
    :param target_head: 'reconstruction' or 'segmentation'.
    :param seed: initialization seed of the new head.
    :param target_config: full configuration of the target, which may only differ from the source in the head. Defaults to the source configuration with the new head.
    """
    if target_config is None:
        target_config = dataclasses.replace(source.config, head=target_head)
    if target_config.head != target_head:
        raise TransferError(f"target config has head {target_config.head!r}, expected {target_head!r}.")
    if target_config.without_head() != source.config.without_head():
        mismatch = sorted(k for k, v in target_config.without_head().items() if source.config.without_head()[k] != v)
        raise TransferError(f"source and target configs differ beyond the head: {', '.join(mismatch)}.")

    tensors = OrderedDict()
    for name, shape in layer_table(target_config).items():
        if name.startswith(HEAD_PREFIX):
            tensors[name] = init_tensor(name, shape, seed, target_config.dtype)
        else:
            if name not in source or tuple(source[name].shape) != shape:
                raise TransferError(f"source parameters have no tensor {name} of shape {shape}.")
            tensors[name] = source[name].copy()

    logger.debug("Transferred %d tensors into a %s network.", len(source.body_names()), target_head)
    return ModelParameters(target_config, tensors, provenance=source.provenance)


#############################################################################################
## Keras graph
#############################################################################################

def activation_layer(activation, name=None, dtype=None):
    if activation == 'lrelu':
        return tf.keras.layers.LeakyReLU(negative_slope=0.01, name=name, dtype=dtype)
    elif activation == 'prelu':
        return tf.keras.layers.PReLU(shared_axes=[1, 2], name=name, dtype=dtype)
    elif activation == 'relu':
        return tf.keras.layers.ReLU(name=name, dtype=dtype)
    raise ConfigurationError("The activation function must be either relu, prelu or lrelu.")


def _conv_bn_act(x, filters, name, config, strides=1, act=True):
    x = tf.keras.layers.Conv2D(filters, 3, strides=strides, padding='same', use_bias=False, name=f"{name}_conv", dtype=config.dtype)(x)
    x = tf.keras.layers.BatchNormalization(epsilon=BN_EPSILON, momentum=BN_MOMENTUM, name=f"{name}_bn", dtype=config.dtype)(x)
    if act:
        x = activation_layer(config.activation, name=f"{name}_act", dtype=config.dtype)(x)
    return x


def se_block(features, reduction, prefix='se', dtype='float32'):
    """
    Squeeze-and-excitation: per-channel spatial average, two dense maps (C -> C/r with a rectifier, C/r -> C with a logistic), then each channel is scaled by its gate in (0, 1).

    :param features: Keras tensor (N, H, W, C).
    :param reduction: reduction ratio r, must divide C.
    :param prefix: prefix of the layer names.
    """
    channels = int(features.shape[-1])
    if reduction < 1 or channels % reduction != 0:
        raise ConfigurationError(f"SE reduction {reduction} does not divide {channels} channels.")
    gates = tf.keras.layers.GlobalAveragePooling2D(name=f"{prefix}_se_squeeze", dtype=dtype)(features)
    gates = tf.keras.layers.Dense(channels // reduction, activation='relu', name=f"{prefix}_se_reduce", dtype=dtype)(gates)
    gates = tf.keras.layers.Dense(channels, activation='sigmoid', name=f"{prefix}_se_expand", dtype=dtype)(gates)
    gates = tf.keras.layers.Reshape((1, 1, channels), name=f"{prefix}_se_reshape", dtype=dtype)(gates)
    return tf.keras.layers.Multiply(name=f"{prefix}_se_scale", dtype=dtype)([features, gates])


def _create_model(config):
    "Builds the Keras graph. Returns the model and a model exposing the feature maps."
    inputs = tf.keras.layers.Input((None, None, config.in_channels), dtype=config.dtype, name='tile')

    x = _conv_bn_act(inputs, config.width(0), 'stem', config)
    encoder = [x]
    for i in range(1, config.depth + 1):
        width = config.width(i)
        x = _conv_bn_act(x, width, f'enc{i}_down', config, strides=2)
        for b in range(config.blocks_per_stage):
            y = _conv_bn_act(x, width, f'enc{i}_block{b}_a', config)
            y = _conv_bn_act(y, width, f'enc{i}_block{b}_b', config, act=False)
            x = tf.keras.layers.Add(name=f'enc{i}_block{b}_add', dtype=config.dtype)([x, y])
            x = activation_layer(config.activation, name=f'enc{i}_block{b}_act', dtype=config.dtype)(x)
        x = se_block(x, config.se_reduction, prefix=f'enc{i}', dtype=config.dtype)
        encoder.append(x)

    decoder = []
    for i in reversed(range(config.depth)):
        x = tf.keras.layers.UpSampling2D(2, name=f'dec{i}_up', dtype=config.dtype)(x)
        x = tf.keras.layers.Concatenate(name=f'dec{i}_concat', dtype=config.dtype)([x, encoder[i]])
        x = _conv_bn_act(x, config.width(i), f'dec{i}_a', config)
        x = _conv_bn_act(x, config.width(i), f'dec{i}_b', config)
        x = se_block(x, config.se_reduction, prefix=f'dec{i}', dtype=config.dtype)
        decoder.append(x)

    if config.head == 'reconstruction':
        outputs = tf.keras.layers.Conv2D(1, 1, name='head_recon_conv', dtype=config.dtype)(x)
    else:
        x = _conv_bn_act(x, config.width(0), 'head_seg', config)
        outputs = tf.keras.layers.Conv2D(config.num_classes, 1, name='head_seg_logits', dtype=config.dtype)(x)

    model = tf.keras.Model(inputs, outputs, name=f"terra_{config.head}")
    features = tf.keras.Model(inputs, [outputs] + encoder + decoder, name=f"terra_{config.head}_features")
    return model, features


def weight_name(layer, weight):
    "`layer_name/weight_name` key of a Keras variable."
    return f"{layer.name}/{weight.name.split('/')[-1].split(':')[0]}"


class Network(object):
    """
    Keras realization of a ModelConfig. Parameters are pushed with `set_parameters()` and read back with `get_parameters()`.
    """

    def __init__(self, config):
        self.config = config
        self.model, self.features = _create_model(config)
        self._variables = OrderedDict()
        for layer in self.model.layers:
            for weight in layer.weights:
                self._variables[weight_name(layer, weight)] = weight

        expected = layer_table(config)
        if set(expected) != set(self._variables):
            missing = sorted(set(expected) ^ set(self._variables))
            raise ShapeError(f"Keras graph and layer table disagree on: {', '.join(missing[:5])}.")

    @property
    def trainable_variables(self):
        return self.model.trainable_variables

    @property
    def statistics(self):
        "Batch-norm moving means and variances."
        return self.model.non_trainable_variables

    def set_parameters(self, params):
        if params.config_hash != config_hash(self.config):
            raise TransferError("parameters were built for another configuration.")
        for name, variable in self._variables.items():
            variable.assign(params[name])

    def get_parameters(self, provenance='random'):
        table = layer_table(self.config)
        return ModelParameters(
            self.config,
            ((name, np.array(self._variables[name].numpy())) for name in table),
            provenance=provenance,
        )

    def check_input(self, x):
        "Raises a ShapeError when the spatial dims are not divisible by 2**depth."
        h, w = x.shape[1], x.shape[2]
        if h % self.config.divisor or w % self.config.divisor:
            raise ShapeError(f"input of {h}x{w} pixels is not divisible by {self.config.divisor} (depth {self.config.depth}).")
        if x.shape[3] != self.config.in_channels:
            raise ShapeError(f"input has {x.shape[3]} channels, expected {self.config.in_channels}.")

    def __call__(self, x, training=False):
        return self.model(x, training=training)


NETWORK_CACHE_SIZE = 4
_LOCAL = threading.local()


def get_network(config):
    """
    Network for a configuration, cached per thread so that concurrent evaluation-mode callers never share a Keras model. At most `NETWORK_CACHE_SIZE` networks are kept per thread, the least recently used is dropped first.
    """
    cache = getattr(_LOCAL, 'networks', None)
    if cache is None:
        cache = _LOCAL.networks = OrderedDict()
    key = config_hash(config)
    if key in cache:
        cache.move_to_end(key)
    else:
        cache[key] = Network(config)
        while len(cache) > NETWORK_CACHE_SIZE:
            cache.popitem(last=False)
    return cache[key]


def as_batch(x, in_channels=1):
    "Brings a tile (H, W), (H, W, C) or a batch (N, H, W, C) to a 4-D batch."
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None, :, :, None]
    elif x.ndim == 3 and x.shape[-1] == in_channels:
        x = x[None]
    elif x.ndim == 3:
        x = x[..., None]
    if x.ndim != 4:
        raise ShapeError(f"cannot interpret an array of shape {x.shape} as tiles.")
    return x


def forward(params, x, batch_size=8):
    """
    Evaluation-mode forward pass.

    :param params: ModelParameters.
    :param x: tile (H, W) / (H, W, C) or batch (N, H, W, C); H and W divisible by `2**depth`.
    :param batch_size: number of tiles per call.
    :return: (logits, FeatureMaps). Logits have the spatial shape of the input and 1 (reconstruction) or `num_classes` (segmentation) channels; a single tile in gives a single tile out.
    """
    single = np.ndim(x) == 2 or (np.ndim(x) == 3 and np.shape(x)[-1] == params.config.in_channels)
    x = as_batch(x, params.config.in_channels).astype(params.config.dtype)
    network = get_network(params.config)
    network.check_input(x)
    network.set_parameters(params)

    outputs = []
    for start in range(0, len(x), batch_size):
        results = network.features(x[start:start + batch_size], training=False)
        outputs.append([r.numpy() for r in results])
    results = [np.concatenate(parts) for parts in zip(*outputs)]

    depth = params.config.depth
    logits = results[0]
    features = FeatureMaps(encoder=results[1:depth + 2], decoder=results[depth + 2:])
    if single:
        logits = logits[0]
        features = FeatureMaps([f[0] for f in features.encoder], [f[0] for f in features.decoder])
    return logits, features
