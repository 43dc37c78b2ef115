"""Shared protocol for the toy training experiments (used by the CLI and the tests).

A run trains a net on the synthetic shapes set, either all at once or in
stages that add one skip at a time (single-stream first, then each finer
stream), and reports test metrics after every stage.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .data import ShapesConfig, dataset_mean, make_splits
from .losses import LossConfig
from .metrics import compute_metrics
from .skipnet import BackboneSpec, SkipSpec, apply_stream_scales, build, calibrate_stream_scales, upgrade
from .training import OptimConfig, REGIMES, evaluate, prepare, train

# Inputs are (image - mean) * INPUT_SCALE.  Images live in [0, 1]; this gain
# puts the first layer in the range where from-scratch SGD makes progress
# (chosen from baseline runs, see the notes).
INPUT_SCALE = 20.0

# Per-regime learning rates.  All three give the same per-image step size in
# the long run: lr * k / (1 - p) = 1e-5.
DEFAULT_LR = {"heavy": 1e-7, "online": 1e-6, "accum": 5e-8}

TOY_SKIPS = [SkipSpec("pool2"), SkipSpec("pool1")]
STAGE_NAMES = ("32s", "16s", "8s")


@dataclass
class RunConfig:
    regime: str = "heavy"
    learning_rate: float = None
    stages: tuple = (2000, 1000, 1000)     # updates per stage; one entry per stream
    lr_drop: float = 1.0
    seed: int = 0
    input_scale: float = INPUT_SCALE
    mask_mode: str = "none"
    loss: LossConfig = field(default_factory=LossConfig)
    snapshot_every: int = 500
    mirror: bool = False
    jitter: int = 0
    shuffle: bool = True

    def optim(self):
        lr = self.learning_rate if self.learning_rate is not None else DEFAULT_LR[self.regime]
        return OptimConfig.regime(self.regime, lr)

    @property
    def total_updates(self):
        return sum(self.stages)


@dataclass
class StageResult:
    name: str
    graph: object
    log: object
    test: object          # Metrics on the test split


@dataclass
class Toy:
    splits: dict
    mean: np.ndarray

    @classmethod
    def make(cls, cfg=None, sizes=None):
        splits = make_splits(cfg or ShapesConfig(), sizes)
        return cls(splits, dataset_mean(splits["train"]))


def n_outputs(loss_cfg, n_cl=5):
    return n_cl - 1 if loss_cfg.null_background else n_cl


def test_metrics(g, toy, run, mask_mode=None, split="test"):
    mode = run.mask_mode if mask_mode is None else mask_mode
    cm = evaluate(g, toy.splits[split], run.loss, toy.mean, mode, input_scale=run.input_scale)
    return compute_metrics(cm)


def _train(g, toy, run, updates, seed, stop_at_iu=None):
    return train(g, toy.splits["train"], run.loss, run.optim(), updates,
                 val_samples=toy.splits["val"], snapshot_every=run.snapshot_every, seed=seed,
                 mean=toy.mean, mask_mode=run.mask_mode, mirror=run.mirror, jitter=run.jitter,
                 shuffle=run.shuffle, input_scale=run.input_scale, stop_at_iu=stop_at_iu)


def train_staged(toy, run, spec=None, skips=TOY_SKIPS, n_cl=5):
    """Single-stream net, then one upgrade per skip; returns a StageResult per stage.

    Stage ``i`` trains for ``run.stages[i]`` updates with data seed
    ``[run.seed, i]``; the net is initialized from ``run.seed``.
    """
    spec = spec or BackboneSpec()
    if len(run.stages) != len(skips) + 1:
        raise ValueError(f"need {len(skips) + 1} stage lengths, got {len(run.stages)}")
    g = build(spec, [], n_outputs(run.loss, n_cl), seed=run.seed)
    results = []
    for i, updates in enumerate(run.stages):
        if i > 0:
            g = upgrade(g, skips[i - 1], run.lr_drop)
        log = _train(g, toy, run, updates, seed=run.seed * 1000 + i)
        name = STAGE_NAMES[i] if i < len(STAGE_NAMES) else f"stage{i}"
        results.append(StageResult(name, g, log, test_metrics(g, toy, run)))
        g = g.copy()
    return results


def train_direct(toy, run, spec=None, skips=TOY_SKIPS, n_cl=5, calibrate=False, stop_at_iu=None):
    """All-at-once training of the full net for ``run.total_updates`` updates."""
    spec = spec or BackboneSpec()
    g = build(spec, [replace(s) for s in skips], n_outputs(run.loss, n_cl), seed=run.seed)
    if calibrate and skips:
        x, _ = prepare(toy.splits["train"][:16], toy.mean, run.mask_mode, run.input_scale)
        apply_stream_scales(g, calibrate_stream_scales(g, x))
    log = _train(g, toy, run, run.total_updates, seed=run.seed * 1000, stop_at_iu=stop_at_iu)
    return StageResult("direct", g, log, test_metrics(g, toy, run))


def budget_stages(run, regime):
    """Stage lengths giving ``regime`` the same number of image gradients as ``run``."""
    k_from = REGIMES[run.regime][0]
    k_to = REGIMES[regime][0]
    return tuple(max(1, n * k_from // k_to) for n in run.stages)
