"""Per-pixel losses summed over space (unnormalized by default).

Label maps are integer arrays of shape (n, h, w) with values in
``[0, n_cl)`` or :data:`IGNORE`.  Ignored pixels and pixels dropped by a
sampling mask contribute neither loss nor gradient.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidLabelError, InvalidParameterError, ShapeError
from .tensor import channel_argmax

IGNORE = 255


@dataclass
class LossConfig:
    kind: str = "softmax_sum"        # or "sigmoid_ce"
    class_weights: np.ndarray = None
    sample_keep_p: float = 1.0
    normalize: bool = False
    null_background: bool = False    # sigmoid_ce only: no score channel for class 0

    def __post_init__(self):
        if self.kind not in ("softmax_sum", "sigmoid_ce"):
            raise InvalidParameterError(f"unknown loss kind {self.kind!r}")
        if not 0.0 < self.sample_keep_p <= 1.0:
            raise InvalidParameterError(f"keep probability must lie in (0, 1], got {self.sample_keep_p}")
        if self.class_weights is not None:
            self.class_weights = np.asarray(self.class_weights, dtype=np.float64)
            if (self.class_weights < 0).any():
                raise InvalidParameterError("class weights must be nonnegative")
        if self.null_background and self.kind != "sigmoid_ce":
            raise InvalidParameterError("the null background model needs the sigmoid cross-entropy loss")


def _pixel_weights(scores, labels, n_cl, cfg, mask):
    """Per-pixel weight (n, h, w): class weight, zero on ignored or masked pixels."""
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    n, _, h, w = scores.shape
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels {labels.shape} do not match scores {scores.shape}")
    valid = labels != IGNORE
    bad = valid & ((labels < 0) | (labels >= n_cl))
    if bad.any():
        raise InvalidLabelError(f"label {labels[bad].flat[0]} outside [0, {n_cl})")
    safe = np.where(valid, labels, 0).astype(np.int64)
    if cfg.class_weights is None:
        weight = valid.astype(np.float64)
    else:
        if cfg.class_weights.shape != (n_cl,):
            raise ShapeError(f"need {n_cl} class weights, got {cfg.class_weights.shape}")
        weight = np.where(valid, cfg.class_weights[safe], 0.0)
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape != weight.shape:
            raise ShapeError(f"sampling mask {mask.shape} does not match labels {weight.shape}")
        weight = weight * mask
    return safe, weight


def _normalizer(cfg, weight):
    if not cfg.normalize:
        return 1.0
    return max(float(np.count_nonzero(weight)), 1.0)


def softmax_loss(scores, labels, cfg=None, mask=None):
    """Sum over kept pixels of ``w[label] * -log softmax(scores)[label]``."""
    cfg = cfg or LossConfig()
    n, n_cl, h, w = scores.shape
    safe, weight = _pixel_weights(scores, labels, n_cl, cfg, mask)
    shifted = scores - scores.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    picked = np.take_along_axis(shifted, safe[:, None], axis=1)[:, 0]
    nll = log_z - picked
    norm = _normalizer(cfg, weight)
    loss = float((weight * nll).sum() / norm)
    prob = np.exp(shifted - log_z[:, None])
    onehot = np.zeros_like(prob)
    np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
    grad = (prob - onehot) * (weight / norm)[:, None]
    return loss, grad


def sigmoid_targets(labels, n_channels, null_background=False):
    """Binary per-class targets (n, n_channels, h, w) from a label map.

    With ``null_background`` channel ``k`` stands for class ``k + 1`` and
    background pixels are negative for every channel.
    """
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    first = 1 if null_background else 0
    classes = np.arange(first, first + n_channels).reshape(1, -1, 1, 1)
    return (labels[:, None] == classes).astype(np.float64)


def sigmoid_ce_loss(scores, labels, cfg=None, mask=None):
    """Binary cross-entropy of sigmoid(scores) against per-class targets,
    summed over kept pixels and channels."""
    cfg = cfg or LossConfig(kind="sigmoid_ce")
    n, n_ch, h, w = scores.shape
    n_cl = n_ch + 1 if cfg.null_background else n_ch
    _, weight = _pixel_weights(scores, labels, n_cl, cfg, mask)
    t = sigmoid_targets(labels, n_ch, cfg.null_background)
    # log(1 + e^s) - t*s, written to stay finite for large |s|
    per_term = np.maximum(scores, 0.0) - t * scores + np.log1p(np.exp(-np.abs(scores)))
    norm = _normalizer(cfg, weight)
    loss = float((per_term * weight[:, None]).sum() / norm)
    sig = np.where(scores >= 0, 1.0 / (1.0 + np.exp(-np.abs(scores))),
                   np.exp(-np.abs(scores)) / (1.0 + np.exp(-np.abs(scores))))
    grad = (sig - t) * (weight / norm)[:, None]
    return loss, grad


def compute_loss(scores, labels, cfg, mask=None):
    if cfg.kind == "softmax_sum":
        return softmax_loss(scores, labels, cfg, mask)
    return sigmoid_ce_loss(scores, labels, cfg, mask)


def null_background_infer(class_scores):
    """Labels from foreground-only scores with background pinned at score 0."""
    n, _, h, w = class_scores.shape
    padded = np.concatenate([np.zeros((n, 1, h, w)), class_scores], axis=1)
    return channel_argmax(padded)


def predict(scores, null_background=False):
    return null_background_infer(scores) if null_background else channel_argmax(scores)


def sample_loss_mask(dims, keep_p, rng_seed=None):
    """Independent Bernoulli(keep_p) keep-mask over final-layer cells (n, h, w)."""
    if not 0.0 < keep_p <= 1.0:
        raise InvalidParameterError(f"keep probability must lie in (0, 1], got {keep_p}")
    dims = tuple(dims)
    if keep_p == 1.0:
        return np.ones(dims)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    return (rng.random(dims) < keep_p).astype(np.float64)
