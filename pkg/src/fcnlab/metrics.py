"""Segmentation metrics over confusion counts and the resolution upper bound."""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidLabelError, ShapeError, UndefinedMetricError
from .losses import IGNORE


class ConfusionMatrix:
    """``counts[i, j]``: pixels of true class ``i`` predicted as class ``j``."""

    def __init__(self, n_cl, counts=None):
        self.n_cl = int(n_cl)
        if counts is None:
            counts = np.zeros((self.n_cl, self.n_cl), dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)
        if self.counts.shape != (self.n_cl, self.n_cl) or (self.counts < 0).any():
            raise ShapeError(f"confusion counts must be a nonnegative {n_cl}x{n_cl} matrix")

    def __add__(self, other):
        if other.n_cl != self.n_cl:
            raise ShapeError("cannot add confusion matrices of different sizes")
        return ConfusionMatrix(self.n_cl, self.counts + other.counts)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def copy(self):
        return ConfusionMatrix(self.n_cl, self.counts.copy())


def accumulate(cm, predicted, truth):
    """Add every non-ignored pixel of ``truth`` to ``cm`` (in place) and return it."""
    predicted, truth = np.asarray(predicted), np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ShapeError(f"prediction {predicted.shape} and truth {truth.shape} differ")
    keep = truth != IGNORE
    t, p = truth[keep].astype(np.int64), predicted[keep].astype(np.int64)
    for name, arr in (("truth", t), ("prediction", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= cm.n_cl):
            raise InvalidLabelError(f"{name} class id outside [0, {cm.n_cl})")
    cm.counts += np.bincount(t * cm.n_cl + p, minlength=cm.n_cl ** 2).reshape(cm.n_cl, cm.n_cl)
    return cm


@dataclass
class Metrics:
    pixel_acc: float
    mean_acc: float
    mean_iu: float
    fw_iu: float
    per_class_iu: np.ndarray

    def row(self):
        return (self.pixel_acc, self.mean_acc, self.mean_iu, self.fw_iu)


def compute_metrics(cm, exclude_background=False):
    """Pixel accuracy, mean accuracy, mean IU and frequency-weighted IU.

    Classes absent from both truth and prediction have no defined IU and are
    left out of the means.  ``exclude_background`` drops class 0 from the
    three class-averaged metrics; pixel accuracy always covers every class.
    Per-class IU is NaN where undefined.
    """
    n = cm.counts.astype(np.float64)
    if n.sum() == 0:
        raise UndefinedMetricError("confusion matrix is empty")
    diag = np.diag(n)
    t = n.sum(axis=1)
    union = t + n.sum(axis=0) - diag
    with np.errstate(divide="ignore", invalid="ignore"):
        acc = np.where(t > 0, diag / t, np.nan)
        iu = np.where(union > 0, diag / union, np.nan)
    classes = np.arange(cm.n_cl) >= (1 if exclude_background else 0)
    acc_sel = acc[classes & ~np.isnan(acc)]
    iu_ok = classes & ~np.isnan(iu)
    if not iu_ok.any():
        raise UndefinedMetricError("no class has a defined IU")
    pixel_acc = diag.sum() / t.sum()
    mean_acc = acc_sel.mean() if acc_sel.size else float("nan")
    mean_iu = iu[iu_ok].mean()
    weight = t[iu_ok]
    fw_iu = (weight * iu[iu_ok]).sum() / weight.sum() if weight.sum() > 0 else float("nan")
    return Metrics(float(pixel_acc), float(mean_acc), float(mean_iu), float(fw_iu), iu)


def downsample_mode(label, f):
    """Most frequent non-ignored label in each f x f cell (ties to the lowest id).

    Partial cells at the bottom/right edges use the pixels they have; cells
    with only ignored pixels become IGNORE.
    """
    label = np.asarray(label)
    h, w = label.shape
    ch, cw = -(-h // f), -(-w // f)
    cell = (np.arange(h)[:, None] // f) * cw + (np.arange(w)[None, :] // f)
    keep = label != IGNORE
    n_lab = int(label[keep].max()) + 1 if keep.any() else 1
    votes = np.bincount(cell[keep] * n_lab + label[keep].astype(np.int64),
                        minlength=ch * cw * n_lab).reshape(ch * cw, n_lab)
    out = np.argmax(votes, axis=1)
    out[votes.sum(axis=1) == 0] = IGNORE
    return out.reshape(ch, cw)


def upsample_nearest(coarse, f, shape):
    return np.repeat(np.repeat(coarse, f, axis=0), f, axis=1)[:shape[0], :shape[1]]


def iu_upper_bound(truths, f, n_cl):
    """Mean IU obtained by predicting the f-times downsampled then re-enlarged truth."""
    cm = ConfusionMatrix(n_cl)
    for truth in truths:
        truth = np.asarray(truth)
        approx = upsample_nearest(downsample_mode(truth, f), f, truth.shape)
        accumulate(cm, approx, truth)
    return compute_metrics(cm).mean_iu
