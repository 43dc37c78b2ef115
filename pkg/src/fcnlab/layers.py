"""Forward and backward passes for the local layer types.

Every layer computes ``y[i, j] = f(x[s*i + d*di, s*j + d*dj])`` over a
``k x k`` window.  Convolution is cross-correlation (no kernel flip) and
padding is zero-fill, the same amount on every side.

Summation order inside each output pixel is fixed (bias first, then kernel
taps in row-major order), so results do not depend on batch layout.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError, ShapeError


def output_size(size, kernel, stride=1, pad=0, dilation=1):
    """Number of window positions along one axis, or raise if none fit."""
    extent = (kernel - 1) * dilation + 1
    padded = size + 2 * pad
    if extent > padded:
        raise ShapeError(
            f"kernel extent {extent} larger than padded input {padded}"
        )
    return (padded - extent) // stride + 1


def _window(xp, i, j, dilation, stride, out_h, out_w):
    """View of the padded input seen by kernel tap (i, j) at every output pixel."""
    r0, c0 = i * dilation, j * dilation
    return xp[:, :,
              r0:r0 + stride * (out_h - 1) + 1:stride,
              c0:c0 + stride * (out_w - 1) + 1:stride]


def _pad(x, pad, value=0.0):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)


# -- convolution -------------------------------------------------------------

@dataclass
class ConvParams:
    weights: np.ndarray          # (out_c, in_c, k_h, k_w)
    bias: np.ndarray             # (out_c,)
    stride: int = 1
    pad: int = 0
    dilation: int = 1

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 4 or min(self.weights.shape) < 1:
            raise ShapeError(f"conv weights must be (out_c, in_c, k_h, k_w), got {self.weights.shape}")
        if self.bias is None:
            self.bias = np.zeros(self.weights.shape[0])
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.bias.shape[0] != self.weights.shape[0]:
            raise ShapeError(f"bias length {self.bias.shape[0]} != out_c {self.weights.shape[0]}")
        if self.stride < 1 or self.dilation < 1 or self.pad < 0:
            raise InvalidParameterError(
                f"need stride >= 1, dilation >= 1, pad >= 0 (got {self.stride}, {self.dilation}, {self.pad})"
            )

    @property
    def kernel_size(self):
        return self.weights.shape[2], self.weights.shape[3]


def conv_output_shape(x_shape, p):
    n, c, h, w = x_shape
    oc, ic, kh, kw = p.weights.shape
    if c != ic:
        raise ShapeError(f"input has {c} channels, kernel expects {ic}")
    return (n, oc,
            output_size(h, kh, p.stride, p.pad, p.dilation),
            output_size(w, kw, p.stride, p.pad, p.dilation))


def conv2d_forward(x, p):
    n, oc, oh, ow = conv_output_shape(x.shape, p)
    xp = _pad(x, p.pad)
    w = p.weights
    out = np.empty((n, oc, oh, ow), dtype=np.result_type(x, w))
    out[...] = p.bias.reshape(1, oc, 1, 1)
    kh, kw = p.kernel_size
    for i in range(kh):
        for j in range(kw):
            patch = _window(xp, i, j, p.dilation, p.stride, oh, ow)
            # (oc, c) x (n, c, oh, ow) -> (oc, n, oh, ow)
            out += np.tensordot(w[:, :, i, j], patch, axes=([1], [1])).transpose(1, 0, 2, 3)
    return out


def conv2d_backward(x, p, grad_out):
    """Gradients of ``sum(grad_out * conv2d_forward(x, p))`` w.r.t. x, weights, bias."""
    expected = conv_output_shape(x.shape, p)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out dims {grad_out.shape} != forward output dims {expected}")
    _, _, oh, ow = expected
    xp = _pad(x, p.pad)
    w = p.weights
    grad_xp = np.zeros(xp.shape, dtype=np.result_type(x, w))
    grad_w = np.zeros_like(w)
    kh, kw = p.kernel_size
    for i in range(kh):
        for j in range(kw):
            patch = _window(xp, i, j, p.dilation, p.stride, oh, ow)
            grad_w[:, :, i, j] = np.tensordot(grad_out, patch, axes=([0, 2, 3], [0, 2, 3]))
            gpatch = _window(grad_xp, i, j, p.dilation, p.stride, oh, ow)
            gpatch += np.tensordot(w[:, :, i, j], grad_out, axes=([0], [1])).transpose(1, 0, 2, 3)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    if p.pad:
        h, wd = x.shape[2:]
        grad_x = grad_xp[:, :, p.pad:p.pad + h, p.pad:p.pad + wd].copy()
    else:
        grad_x = grad_xp
    return grad_x, grad_w, grad_b


def convolutionalize(fc_weights, fc_bias, input_dims):
    """Recast a fully connected layer as a convolution covering its whole input.

    ``fc_weights`` is (n_out, c*h*w) acting on the row-major flattening of a
    (c, h, w) input.  The returned kernel reproduces the fc output at spatial
    position (0, 0) of an exactly sized input and slides over larger ones.
    """
    fc_weights = np.asarray(fc_weights, dtype=np.float64)
    c, h, w = (int(d) for d in input_dims)
    if fc_weights.ndim != 2 or fc_weights.shape[1] != c * h * w:
        raise ShapeError(
            f"fc matrix {fc_weights.shape} does not match input dims {(c, h, w)}"
        )
    n_out = fc_weights.shape[0]
    bias = np.zeros(n_out) if fc_bias is None else np.asarray(fc_bias, dtype=np.float64)
    return ConvParams(fc_weights.reshape(n_out, c, h, w).copy(), bias.copy(), stride=1, pad=0)


# -- pooling -----------------------------------------------------------------

@dataclass
class PoolParams:
    kind: str = "max"            # "max" or "average"
    kernel: int = 2
    stride: int = 2
    pad: int = 0
    dilation: int = 1

    def __post_init__(self):
        if self.kind not in ("max", "average"):
            raise InvalidParameterError(f"unknown pooling kind {self.kind!r}")
        if self.kernel < 1 or self.stride < 1 or self.dilation < 1 or self.pad < 0:
            raise InvalidParameterError(f"invalid pooling geometry {self}")
        if self.pad >= (self.kernel - 1) * self.dilation + 1:
            raise InvalidParameterError("pooling pad must be smaller than the window extent")


def pool_output_shape(x_shape, p):
    n, c, h, w = x_shape
    return (n, c,
            output_size(h, p.kernel, p.stride, p.pad, p.dilation),
            output_size(w, p.kernel, p.stride, p.pad, p.dilation))


def _valid_counts(x_shape, p, oh, ow):
    """Number of non-padding inputs in each pooling window, shape (1, 1, oh, ow)."""
    ones = _pad(np.ones((1, 1) + tuple(x_shape[2:])), p.pad)
    counts = np.zeros((1, 1, oh, ow))
    for i in range(p.kernel):
        for j in range(p.kernel):
            counts += _window(ones, i, j, p.dilation, p.stride, oh, ow)
    return counts


def pool_forward(x, p):
    """Return ``(y, switches)``.

    For max pooling ``switches`` holds, per output, the row-major tap index
    ``di * kernel + dj`` of the first maximal input; for average pooling it is
    None.  Padding is -inf for max and is left out of the average denominator.
    """
    n, c, oh, ow = pool_output_shape(x.shape, p)
    k = p.kernel
    if p.kind == "max":
        xp = _pad(x, p.pad, value=-np.inf)
        best = np.full((n, c, oh, ow), -np.inf, dtype=x.dtype)
        switches = np.zeros((n, c, oh, ow), dtype=np.int64)
        for t in range(k * k):
            v = _window(xp, t // k, t % k, p.dilation, p.stride, oh, ow)
            better = v > best
            best[better] = v[better]
            switches[better] = t
        if np.isneginf(best).any():
            raise ShapeError("a pooling window lies entirely in the padding")
        return best, switches
    xp = _pad(x, p.pad)
    total = np.zeros((n, c, oh, ow), dtype=x.dtype)
    for t in range(k * k):
        total += _window(xp, t // k, t % k, p.dilation, p.stride, oh, ow)
    return total / _valid_counts(x.shape, p, oh, ow), None


def pool_backward(grad_out, p, x_shape, switches=None):
    expected = pool_output_shape(x_shape, p)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out dims {grad_out.shape} != pooled dims {expected}")
    _, _, oh, ow = expected
    k = p.kernel
    h, w = x_shape[2:]
    grad_xp = np.zeros((x_shape[0], x_shape[1], h + 2 * p.pad, w + 2 * p.pad), dtype=grad_out.dtype)
    if p.kind == "max":
        if switches is None or switches.shape != grad_out.shape:
            raise ShapeError("max-pool backward needs the switches of the matching forward call")
        for t in range(k * k):
            g = _window(grad_xp, t // k, t % k, p.dilation, p.stride, oh, ow)
            g += np.where(switches == t, grad_out, 0.0)
    else:
        spread = grad_out / _valid_counts(x_shape, p, oh, ow)
        for t in range(k * k):
            g = _window(grad_xp, t // k, t % k, p.dilation, p.stride, oh, ow)
            g += spread
    if p.pad:
        return grad_xp[:, :, p.pad:p.pad + h, p.pad:p.pad + w].copy()
    return grad_xp


# -- elementwise -------------------------------------------------------------

def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(x, grad_out):
    return np.where(x > 0, grad_out, 0.0)


@dataclass
class DropoutParams:
    rate: float = 0.5
    mode: str = "train"

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise InvalidParameterError(f"dropout rate must lie in [0, 1), got {self.rate}")
        if self.mode not in ("train", "test"):
            raise InvalidParameterError(f"unknown dropout mode {self.mode!r}")


def dropout_forward(x, p, rng_seed=None):
    """Return ``(y, mask)``; the mask already carries the 1/(1-rate) scaling."""
    if p.mode == "test" or p.rate == 0.0:
        return x.copy(), None
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    mask = (rng.random(x.shape) >= p.rate) / (1.0 - p.rate)
    return x * mask, mask


def dropout_backward(grad_out, mask):
    if mask is None:
        return grad_out.copy()
    return grad_out * mask
