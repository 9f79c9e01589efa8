"""
Training objectives.

* Pretext task: smooth-L1 + perceptual distance measured by a frozen random convolutional stack.
* Segmentation: class-weighted cross-entropy + DICE.

All losses are differentiable tensorflow functions returning a scalar. Shape and range contracts are checked when executing eagerly.
"""
import logging
import os
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

os.environ.setdefault('TF_CPP_MIN_LOG_LEVEL', '3')
import tensorflow as tf

from .Errors import ConfigurationError, ContractError, NumericError

logger = logging.getLogger(__name__)

PERCEPTUAL_SEED = 1234
PERCEPTUAL_WIDTHS = (8, 16, 32, 64)
NORM_EPSILON = 1e-20


@dataclass
class LossWeights:
    """
    Weights of the loss terms.

    :param lambda_perceptual: weight of the perceptual distance in the reconstruction loss (default: 1.0).
    :param smooth_l1_beta: transition point of the smooth-L1 loss (default: 1.0).
    :param class_weights: cross-entropy weight of each class (background, building). None uses the inverse pixel frequency of the labeled tiles.
    :param dice_eps: smoothing constant of the DICE loss (default: 1.0).
    :param dice_weight: weight of the DICE term in the segmentation loss (default: 1.0).
    """
    lambda_perceptual: float = 1.0
    smooth_l1_beta: float = 1.0
    class_weights: Optional[Tuple[float, ...]] = None
    dice_eps: float = 1.0
    dice_weight: float = 1.0
    perceptual_widths: Tuple[int, ...] = PERCEPTUAL_WIDTHS
    perceptual_seed: int = PERCEPTUAL_SEED

    def __post_init__(self):
        if self.class_weights is not None:
            self.class_weights = tuple(float(w) for w in self.class_weights)
            if any(not w > 0 for w in self.class_weights):
                raise ConfigurationError("losses.class_weights must all be > 0.")
        self.perceptual_widths = tuple(int(w) for w in self.perceptual_widths)
        for name in ('lambda_perceptual', 'dice_eps', 'dice_weight'):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"losses.{name} must be >= 0.")
        if not self.smooth_l1_beta > 0:
            raise ConfigurationError("losses.smooth_l1_beta must be > 0.")


def _check_same_shape(a, b, what):
    if tf.executing_eagerly() and tuple(a.shape) != tuple(b.shape):
        raise ContractError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ.")


def _as_images(x):
    "Adds batch and channel dimensions to single-channel tiles."
    x = tf.convert_to_tensor(x)
    if x.shape.rank == 2:
        x = x[None, :, :, None]
    elif x.shape.rank == 3:
        x = x[..., None]
    return x


#############################################################################################
## Pretext task
#############################################################################################

def smooth_l1(y, y_pred, beta=1.0):
    """
    Smooth-L1 loss averaged over all pixels: `0.5 r**2 / beta` where `|r| < beta`, `|r| - 0.5 beta` elsewhere.

    :param y: ground truth.
    :param y_pred: prediction of the same shape.
    :param beta: transition point (> 0).
    """
    if not beta > 0:
        raise ConfigurationError(f"beta must be > 0, got {beta}.")
    y_pred = tf.convert_to_tensor(y_pred)
    y = tf.cast(tf.convert_to_tensor(y), y_pred.dtype)
    _check_same_shape(y, y_pred, "smooth_l1")

    residual = tf.abs(y - y_pred)
    loss = tf.where(residual < beta, 0.5 * tf.square(residual) / beta, residual - 0.5 * beta)
    return tf.reduce_mean(loss)


class PerceptualExtractor(object):
    """
    Frozen feature stack for the perceptual distance: stages of {3x3 convolution, rectifier, 2x average pooling}.

    Kernels are drawn once from `numpy.random.default_rng(seed)` with He-normal scaling, biases are zero. The features of a stage are taken after the rectifier, before pooling.

    :param widths: number of feature maps per stage (default: (8, 16, 32, 64)).
    :param seed: seed of the kernels (default: 1234).
    :param layer_weights: weight of each stage in the distance (default: 1 for all).
    :param in_channels: number of input channels.
    """

    def __init__(self, widths=PERCEPTUAL_WIDTHS, seed=PERCEPTUAL_SEED, layer_weights=None, in_channels=1):
        self.widths = tuple(int(w) for w in widths)
        self.seed = seed
        self.layer_weights = tuple(float(w) for w in (layer_weights or (1.0,) * len(self.widths)))
        if len(self.layer_weights) != len(self.widths):
            raise ConfigurationError("one perceptual weight per stage is needed.")

        rng = np.random.default_rng(seed)
        kernels = []
        cin = in_channels
        for width in self.widths:
            kernel = rng.standard_normal((3, 3, cin, width)) * np.sqrt(2.0 / (9 * cin))
            kernel.setflags(write=False)
            kernels.append(kernel)
            cin = width
        self._kernels = tuple(kernels)
        self._cache = {}

    @property
    def kernels(self):
        return self._kernels

    def _constants(self, dtype):
        if dtype not in self._cache:
            with tf.init_scope():
                self._cache[dtype] = [tf.constant(k, dtype=dtype) for k in self._kernels]
        return self._cache[dtype]

    def features(self, x):
        """
        Activations of each stage for a batch of single-channel images (N, H, W, 1).
        """
        x = _as_images(x)
        kernels = self._constants(x.dtype)
        features = []
        for i, kernel in enumerate(kernels):
            x = tf.nn.relu(tf.nn.conv2d(x, kernel, strides=1, padding='SAME'))
            features.append(x)
            if i < len(kernels) - 1:
                x = tf.nn.avg_pool2d(x, ksize=2, strides=2, padding='VALID')
        return features


def normalize_channels(features):
    "Scales each pixel's feature vector to unit length."
    return features / tf.sqrt(tf.reduce_sum(tf.square(features), axis=-1, keepdims=True) + NORM_EPSILON)


def perceptual_distance(x, x_star, extractor):
    """
    Sum over stages of the mean squared difference between channel-normalized features of two images.

    :param x: image (H, W), (N, H, W) or (N, H, W, 1).
    :param x_star: image of the same shape.
    :param extractor: PerceptualExtractor.
    """
    x_star = _as_images(x_star)
    x = tf.cast(_as_images(x), x_star.dtype)
    _check_same_shape(x, x_star, "perceptual_distance")

    distance = tf.constant(0.0, dtype=x.dtype)
    for weight, fx, fy in zip(extractor.layer_weights, extractor.features(x), extractor.features(x_star)):
        diff = normalize_channels(fx) - normalize_channels(fy)
        distance += weight * tf.reduce_mean(tf.square(diff))

    if tf.executing_eagerly() and not np.isfinite(distance.numpy()):
        raise NumericError("perceptual distance is not finite.")
    return distance


_EXTRACTORS = {}


def default_extractor(weights=None):
    "Shared PerceptualExtractor for a LossWeights configuration."
    weights = weights or LossWeights()
    key = (weights.perceptual_widths, weights.perceptual_seed)
    if key not in _EXTRACTORS:
        _EXTRACTORS[key] = PerceptualExtractor(weights.perceptual_widths, weights.perceptual_seed)
    return _EXTRACTORS[key]


def reconstruction_loss(y, y_pred, weights=None, extractor=None):
    """
    Pretext objective: `smooth_l1 + lambda_perceptual * perceptual_distance`.

    :param y: target terrain (N, H, W, 1).
    :param y_pred: predicted terrain.
    :param weights: LossWeights.
    :param extractor: PerceptualExtractor (default: the shared one for `weights`).
    """
    weights = weights or LossWeights()
    loss = smooth_l1(y, y_pred, weights.smooth_l1_beta)
    if weights.lambda_perceptual > 0:
        extractor = extractor or default_extractor(weights)
        loss = loss + weights.lambda_perceptual * perceptual_distance(y, y_pred, extractor)
    return loss


#############################################################################################
## Segmentation
#############################################################################################

def inverse_frequency_weights(masks, num_classes=2):
    """
    Class weights `N / (C * N_c)` from a stack of label masks. Absent classes get weight 1.

    :param masks: integer array of class indices.
    :param num_classes: number of classes C.
    """
    masks = np.asarray(masks)
    counts = np.bincount(masks.ravel().astype(np.int64), minlength=num_classes)[:num_classes]
    total = counts.sum()
    return tuple(float(total / (num_classes * c)) if c > 0 else 1.0 for c in counts)


def weighted_cross_entropy(logits, mask, class_weights):
    """
    Mean over pixels of the negative log-likelihood of the target class, scaled by the weight of that class. Computed from log-softmax.

    :param logits: (N, H, W, C) class scores.
    :param mask: (N, H, W) integer class indices.
    :param class_weights: sequence of C positive weights.
    """
    logits = tf.convert_to_tensor(logits)
    num_classes = logits.shape[-1]
    if tf.executing_eagerly():
        mask_np = np.asarray(mask)
        if tuple(mask_np.shape) != tuple(logits.shape[:-1]):
            raise ContractError(f"mask {mask_np.shape} does not match logits {tuple(logits.shape)}.")
        if mask_np.size and (mask_np.min() < 0 or mask_np.max() >= num_classes):
            raise ContractError(f"class index out of range [0, {num_classes}).")
        if len(class_weights) != num_classes:
            raise ContractError(f"{len(class_weights)} class weights for {num_classes} classes.")

    mask = tf.cast(mask, tf.int32)
    log_probs = tf.nn.log_softmax(logits, axis=-1)
    nll = -tf.gather(log_probs, mask, axis=-1, batch_dims=mask.shape.rank)
    pixel_weights = tf.gather(tf.constant(class_weights, dtype=logits.dtype), mask)
    return tf.reduce_mean(pixel_weights * nll)


def dice_loss(probabilities, mask, eps=1.0):
    """
    `1 - (2 sum(p q) + eps) / (sum(p) + sum(q) + eps)`, sums over all pixels.

    :param probabilities: building probabilities in [0, 1].
    :param mask: binary target of the same shape.
    :param eps: smoothing constant (>= 0).
    """
    if eps < 0:
        raise ConfigurationError(f"eps must be >= 0, got {eps}.")
    probabilities = tf.convert_to_tensor(probabilities)
    mask = tf.cast(tf.convert_to_tensor(mask), probabilities.dtype)
    _check_same_shape(probabilities, mask, "dice_loss")

    intersection = tf.reduce_sum(probabilities * mask)
    total = tf.reduce_sum(probabilities) + tf.reduce_sum(mask)
    return 1.0 - (2.0 * intersection + eps) / (total + eps)


def segmentation_loss(logits, mask, weights, class_weights):
    """
    Fine-tuning objective: weighted cross-entropy + `dice_weight` * DICE on the building probability.

    :param logits: (N, H, W, C) class scores.
    :param mask: (N, H, W) class indices.
    :param weights: LossWeights.
    :param class_weights: resolved class weights.
    """
    loss = weighted_cross_entropy(logits, mask, class_weights)
    if weights.dice_weight > 0:
        probabilities = tf.nn.softmax(logits, axis=-1)[..., 1]
        loss = loss + weights.dice_weight * dice_loss(probabilities, mask, weights.dice_eps)
    return loss
