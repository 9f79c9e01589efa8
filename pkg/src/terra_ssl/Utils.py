import dataclasses
import hashlib
import json
import logging
import os

import numpy as np

logger = logging.getLogger(__name__)


class NpEncoder(json.JSONEncoder):
    def default(self, obj):
        if isinstance(obj, np.integer):
            return int(obj)
        if isinstance(obj, np.floating):
            return float(obj)
        if isinstance(obj, np.bool_):
            return bool(obj)
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if dataclasses.is_dataclass(obj):
            return dataclasses.asdict(obj)
        return super(NpEncoder, self).default(obj)


def to_json(obj):
    "Canonical JSON text (sorted keys, numpy aware)."
    return json.dumps(obj, cls=NpEncoder, sort_keys=True)


def config_hash(config):
    """
    Short SHA-256 digest of a configuration dataclass or dictionary.

    :param config: dataclass instance or JSON-serializable dictionary.
    """
    if dataclasses.is_dataclass(config):
        config = dataclasses.asdict(config)
    return hashlib.sha256(to_json(config).encode("utf-8")).hexdigest()[:16]


def derive_rng(seed, *keys):
    """
    Independent numpy generator for a (seed, key...) tuple.

    String keys are hashed so that the stream of a scene or tile does not depend on the order in which it is processed.
    """
    entropy = [int(seed)]
    for key in keys:
        if isinstance(key, str):
            entropy.append(int(hashlib.sha256(key.encode("utf-8")).hexdigest()[:8], 16))
        else:
            entropy.append(int(key))
    return np.random.default_rng(entropy)


def configure_logging(verbosity=1):
    """
    Configures the root logger: 0 = WARNING, 1 = INFO, 2 = DEBUG.

    :param verbosity: verbosity level.
    """
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG
    logging.basicConfig(
        level=level,
        format="%(asctime)s - %(levelname)s - %(message)s",
        datefmt="%H:%M:%S",
    )


def enable_determinism(seed, single_threaded=True):
    """
    Seeds python, numpy and tensorflow and switches tensorflow to deterministic kernels.

    Thread pools can only be resized before tensorflow executes its first op; later calls keep the current pools and log it.

    :param seed: global seed.
    :param single_threaded: restrict intra/inter op parallelism to one thread.
    """
    os.environ.setdefault('TF_CPP_MIN_LOG_LEVEL', '3')
    import tensorflow as tf

    if single_threaded:
        try:
            tf.config.threading.set_intra_op_parallelism_threads(1)
            tf.config.threading.set_inter_op_parallelism_threads(1)
        except RuntimeError:
            logger.debug("Tensorflow already initialized, thread pools unchanged.")

    tf.keras.utils.set_random_seed(int(seed))
    tf.config.experimental.enable_op_determinism()
