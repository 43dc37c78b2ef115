"""SGD with momentum, gradient accumulation and the batch/momentum equivalence.

One update sums the loss gradient over ``k`` images and applies

    v <- -lr * (grad + weight_decay * theta) + momentum * v
    theta <- theta + v

with the learning rate doubled (by default) for biases.  The arithmetic is
written so it also runs on ``Fraction`` object arrays, which the tests use
to unroll the recurrence exactly.
"""

import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import apply_mask, augment
from .errors import DivergenceError, InvalidParameterError, ShapeError
from .losses import LossConfig, compute_loss, predict, sample_loss_mask
from .metrics import ConfusionMatrix, accumulate, compute_metrics

REGIMES = {
    # name: (batch size k, momentum p)
    "accum": (20, 0.9),
    "online": (1, 0.9),
    "heavy": (1, 0.99),
}


@dataclass
class OptimConfig:
    learning_rate: float
    momentum: float = 0.99
    batch_size: int = 1
    accumulate: bool = False        # one forward/backward per image instead of per batch
    weight_decay: float = 5e-4
    bias_lr_multiplier: float = 2.0
    lr_schedule: list = field(default_factory=lambda: [(0, 1.0)])   # (first update, multiplier)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidParameterError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise InvalidParameterError(f"momentum must lie in [0, 1), got {self.momentum}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise InvalidParameterError(f"batch size must be a positive integer, got {self.batch_size}")
        if self.weight_decay < 0:
            raise InvalidParameterError("weight decay must be nonnegative")
        starts = [s for s, _ in self.lr_schedule]
        if not starts or starts[0] != 0 or starts != sorted(starts):
            raise InvalidParameterError("lr schedule must start at update 0 and be sorted")

    @classmethod
    def regime(cls, name, learning_rate, **kw):
        if name not in REGIMES:
            raise InvalidParameterError(f"unknown regime {name!r}; choose from {sorted(REGIMES)}")
        k, p = REGIMES[name]
        return cls(learning_rate, momentum=p, batch_size=k, accumulate=(name == "accum"), **kw)

    def multiplier(self, update):
        """Schedule multiplier in force at ``update`` (0-based)."""
        mult = 1.0
        for start, m in self.lr_schedule:
            if update >= start:
                mult = m
        return mult


def init_velocity(params):
    """Zero velocity for a name -> array mapping (object arrays stay object)."""
    return {k: np.zeros_like(v) for k, v in params.items()}


def sgd_momentum_step(params, grads, velocity, cfg, lr_multiplier=1, is_bias=None, frozen=()):
    """One update; returns new ``(params, velocity)`` dicts without mutating the inputs."""
    is_bias = is_bias or {}
    new_params, new_velocity = {}, {}
    for name, theta in params.items():
        if name in frozen:
            new_params[name], new_velocity[name] = theta, velocity[name]
            continue
        grad, v = grads[name], velocity[name]
        if np.shape(grad) != np.shape(theta) or np.shape(v) != np.shape(theta):
            raise ShapeError(f"parameter {name!r}: grad {np.shape(grad)} / velocity "
                             f"{np.shape(v)} do not match {np.shape(theta)}")
        lr = cfg.learning_rate * lr_multiplier
        if is_bias.get(name, False):
            lr = lr * cfg.bias_lr_multiplier
        v = -lr * (grad + cfg.weight_decay * theta) + cfg.momentum * v
        new_params[name], new_velocity[name] = theta + v, v
    return new_params, new_velocity


def step_graph(g, velocity, cfg, lr_multiplier=1.0):
    """Apply :func:`sgd_momentum_step` to a graph's learnable parameters in place."""
    learn = {k: p for k, p in g.params.items() if p.learnable}
    params = {k: p.value for k, p in learn.items()}
    grads = {k: p.grad for k, p in learn.items()}
    vel = {k: velocity.get(k, np.zeros_like(p.value)) for k, p in learn.items()}
    is_bias = {k: p.is_bias for k, p in learn.items()}
    new_params, new_vel = sgd_momentum_step(params, grads, vel, cfg, lr_multiplier, is_bias)
    for k, p in learn.items():
        p.value = new_params[k]
    velocity.update(new_vel)
    return velocity


def equivalent_momentum(p, k, k_prime):
    """Momentum p' for batch size k' with ``p**(1/k) == p'**(1/k')``."""
    if not 0 < p < 1:
        raise InvalidParameterError(f"momentum must lie in (0, 1), got {p}")
    if k <= 0 or k_prime <= 0:
        raise InvalidParameterError("batch sizes must be positive")
    return p ** (k_prime / k)


def effective_coefficients(p, k, horizon):
    """Weight of the j-th most recent example's gradient in the current step: p**(j // k)."""
    if horizon < 1:
        raise InvalidParameterError("horizon must be at least 1")
    return [p ** (j // k) for j in range(horizon)]


# -- training loop ---------------------------------------------------------------------


@dataclass
class Snapshot:
    iteration: int
    loss: float
    pixel_acc: float
    mean_acc: float
    mean_iu: float
    fw_iu: float
    seconds: float

    def line(self):
        return (f"{self.iteration:8d} {self.loss:14.6f} {self.pixel_acc:8.4f} {self.mean_acc:8.4f} "
                f"{self.mean_iu:8.4f} {self.fw_iu:8.4f} {self.seconds:10.2f}")

    def key(self):
        """Everything but wall-clock time, for reproducibility checks."""
        return (self.iteration, self.loss, self.pixel_acc, self.mean_acc, self.mean_iu, self.fw_iu)


LOG_HEADER = f"{'iter':>8} {'loss':>14} {'pix_acc':>8} {'mean_acc':>8} {'mean_iu':>8} {'fw_iu':>8} {'seconds':>10}"


@dataclass
class TrainLog:
    snapshots: list = field(default_factory=list)
    losses: list = field(default_factory=list)      # per-update training loss
    best_iu: float = -1.0
    best_iteration: int = 0
    best_params: dict = None
    updates: int = 0
    images_seen: int = 0
    seconds: float = 0.0

    def iterations_to(self, mean_iu):
        """First snapshot iteration with validation mean IU >= ``mean_iu`` (or None)."""
        for s in self.snapshots:
            if s.mean_iu >= mean_iu:
                return s.iteration
        return None

    def seconds_to(self, mean_iu):
        """Training seconds (validation passes excluded) to the first snapshot reaching ``mean_iu``."""
        for s in self.snapshots:
            if s.mean_iu >= mean_iu:
                return s.seconds
        return None

    def text(self):
        return "\n".join([LOG_HEADER] + [s.line() for s in self.snapshots]) + "\n"


def prepare(samples, mean=None, mask_mode="none", scale=1.0):
    """Stack samples into an (n, c, h, w) input and (n, h, w) labels.

    The input is ``(image - mean) * scale``.  fg_only and bg_only masking
    zero the hidden pixels of this normalized input, so they read as the
    dataset mean and carry no signal; shape_only replaces the image by the
    binary foreground mask before normalizing.
    """
    if mask_mode == "shape_only":
        samples = [apply_mask(s, mask_mode) for s in samples]
    x = np.stack([s.image for s in samples]).astype(np.float64)
    if mean is not None:
        x = x - np.asarray(mean, dtype=np.float64).reshape(1, -1, 1, 1)
    if scale != 1.0:
        x = x * scale
    y = np.stack([s.label for s in samples])
    if mask_mode in ("fg_only", "bg_only"):
        x = np.stack([apply_mask(replace(s, image=xi), mask_mode).image for s, xi in zip(samples, x)])
    elif mask_mode not in ("none", "shape_only"):
        raise InvalidParameterError(f"unknown mask mode {mask_mode!r}")
    return x, y


def _fit_labels(labels, out_hw):
    h, w = out_hw
    if labels.shape[1] < h or labels.shape[2] < w:
        raise ShapeError(f"net output {out_hw} is larger than the label maps {labels.shape[1:]}")
    return labels[:, :h, :w]


def n_classes_of(g, loss_cfg):
    n = g.channels(g.output)
    return n + 1 if loss_cfg.null_background else n


def evaluate(g, samples, loss_cfg=None, mean=None, mask_mode="none", batch=50, input_scale=1.0):
    """Confusion matrix of the net's predictions over ``samples``."""
    loss_cfg = loss_cfg or LossConfig()
    cm = ConfusionMatrix(n_classes_of(g, loss_cfg))
    for start in range(0, len(samples), batch):
        x, y = prepare(samples[start:start + batch], mean, mask_mode, input_scale)
        scores = g.forward(x, keep=False)
        accumulate(cm, predict(scores, loss_cfg.null_background), _fit_labels(y, scores.shape[2:]))
    return cm


def train(g, samples, loss_cfg, optim_cfg, updates, val_samples=None, snapshot_every=200,
          seed=0, mean=None, mask_mode="none", mirror=False, jitter=0, shuffle=True,
          log_path=None, stop_at_iu=None, lr_multiplier=None, input_scale=1.0):
    """Train ``g`` in place for ``updates`` parameter updates.

    Each update consumes ``batch_size`` images (``ceil(batch_size / keep_p)``
    when loss sampling is on).  Images are taken in a per-epoch permutation
    drawn from ``default_rng([seed, epoch])``, or in stored order when
    ``shuffle`` is false.  Augmentation of the i-th image drawn uses
    ``default_rng([seed, 1, i])`` and the loss mask of update t uses
    ``default_rng([seed, 2, t])``.  Validation metrics are taken every
    ``snapshot_every`` updates; the parameters with the best mean IU are
    kept in the log.  ``stop_at_iu`` ends training at the first snapshot
    reaching that validation mean IU.
    """
    if not samples:
        raise InvalidParameterError("training set is empty")
    if lr_multiplier is None:
        lr_multiplier = g.meta.get("lr_schedule", [(0, 1.0)])[-1][1]
    k = optim_cfg.batch_size
    per_update = int(math.ceil(k / loss_cfg.sample_keep_p - 1e-9))
    velocity = {}
    log = TrainLog()
    log_file = Path(log_path) if log_path else None
    if log_file:
        log_file.write_text(LOG_HEADER + "\n")
    order, epoch, cursor, drawn = None, -1, 0, 0
    running, running_n = 0.0, 0
    start = time.perf_counter()
    eval_seconds = 0.0          # snapshot times count training only, not validation
    n = len(samples)

    def next_sample():
        nonlocal order, epoch, cursor, drawn
        if order is None or cursor >= n:
            epoch += 1
            cursor = 0
            order = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
        s = samples[order[cursor]]
        cursor += 1
        if mirror or jitter:
            s = augment(s, mirror, jitter, seed=[seed, 1, drawn])
        drawn += 1
        return s

    for t in range(updates):
        batch = [next_sample() for _ in range(per_update)]
        g.zero_grads()
        total = 0.0
        chunks = [batch[i:i + 1] for i in range(len(batch))] if optim_cfg.accumulate else [batch]
        mask_rng = np.random.default_rng([seed, 2, t])
        for chunk in chunks:
            x, y = prepare(chunk, mean, mask_mode, input_scale)
            scores = g.forward(x, train=True, seed=seed * 1_000_003 + t)
            y = _fit_labels(y, scores.shape[2:])
            mask = None
            if loss_cfg.sample_keep_p < 1.0:
                mask = sample_loss_mask((scores.shape[0],) + scores.shape[2:], loss_cfg.sample_keep_p, mask_rng)
            value, grad = compute_loss(scores, y, loss_cfg, mask)
            if not np.isfinite(value):
                raise DivergenceError(f"loss became {value} at update {t}; "
                                      "lower the learning rate or rescale the streams")
            g.backward(grad)
            total += value
        step_graph(g, velocity, optim_cfg, lr_multiplier * optim_cfg.multiplier(t))
        log.losses.append(total)
        running += total
        running_n += 1
        log.updates = t + 1
        log.images_seen += len(batch)
        last = t + 1 == updates
        if val_samples is not None and ((t + 1) % snapshot_every == 0 or last):
            t_eval = time.perf_counter()
            elapsed = t_eval - start - eval_seconds
            m = compute_metrics(evaluate(g, val_samples, loss_cfg, mean, mask_mode,
                                              input_scale=input_scale))
            eval_seconds += time.perf_counter() - t_eval
            snap = Snapshot(t + 1, running / running_n, m.pixel_acc, m.mean_acc, m.mean_iu, m.fw_iu, elapsed)
            running, running_n = 0.0, 0
            log.snapshots.append(snap)
            if log_file:
                with log_file.open("a") as fh:
                    fh.write(snap.line() + "\n")
            if m.mean_iu > log.best_iu:
                log.best_iu, log.best_iteration = m.mean_iu, t + 1
                log.best_params = g.values()
            if stop_at_iu is not None and m.mean_iu >= stop_at_iu:
                break
    log.seconds = time.perf_counter() - start
    return log


def restore_best(g, log):
    if log.best_params is None:
        return g
    for name, value in log.best_params.items():
        g.params[name].value = value.copy()
    return g
