"""Dense output from strided nets: filter dilation, shift-and-stitch, and
learnable upsampling by transposed (fractionally strided) convolution."""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError, ShapeError
from .layers import ConvParams, conv2d_forward


def dilate_filter(kernel, s):
    """Insert ``s - 1`` zeros between the taps of ``kernel`` along both spatial axes.

    Works on any array whose last two axes are spatial.  Original tap
    ``(i, j)`` lands at ``(s*i, s*j)``.
    """
    if s < 1 or int(s) != s:
        raise InvalidParameterError(f"dilation must be an integer >= 1, got {s}")
    s = int(s)
    kernel = np.asarray(kernel)
    kh, kw = kernel.shape[-2:]
    out = np.zeros(kernel.shape[:-2] + ((kh - 1) * s + 1, (kw - 1) * s + 1), dtype=kernel.dtype)
    out[..., ::s, ::s] = kernel
    return out


# -- upsampling ------------------------------------------------------------------

@dataclass
class UpsampleParams:
    factor: int
    kernel: np.ndarray           # (c, 1, k, k), one filter per channel
    learnable: bool = True

    def __post_init__(self):
        if self.factor < 1 or int(self.factor) != self.factor:
            raise InvalidParameterError(f"upsampling factor must be an integer >= 1, got {self.factor}")
        self.kernel = np.asarray(self.kernel, dtype=np.float64)
        k = upsample_kernel_size(self.factor)
        if self.kernel.ndim != 4 or self.kernel.shape[1] != 1 or self.kernel.shape[2:] != (k, k):
            raise ShapeError(f"upsampling kernel must be (c, 1, {k}, {k}), got {self.kernel.shape}")

    @property
    def channels(self):
        return self.kernel.shape[0]


def upsample_kernel_size(f):
    return 2 * f - f % 2


def bilinear_profile(f):
    """1-D interpolation weights for center-aligned ``f``x upsampling."""
    size = upsample_kernel_size(f)
    center = f - 1 if size % 2 == 1 else f - 0.5
    return 1.0 - np.abs(np.arange(size) - center) / f


def bilinear_kernel(f, channels):
    """Bilinear interpolation as an :class:`UpsampleParams` with uncoupled channels.

    The weight of an input on an output depends only on their relative
    offset: the row weight uses the fractional part of i/f and the column
    weight the fractional part of j/f (the same rule on both axes).
    """
    if f < 1 or int(f) != f:
        raise InvalidParameterError(f"upsampling factor must be an integer >= 1, got {f}")
    prof = bilinear_profile(int(f))
    k2 = np.outer(prof, prof)
    kernel = np.repeat(k2[None, None], channels, axis=0)
    return UpsampleParams(int(f), kernel)


def _trim(f):
    """Leading and trailing rows dropped from the full transposed convolution."""
    margin = upsample_kernel_size(f) - f
    before = margin // 2
    return before, margin - before


def upsample_forward(x, p):
    """Transposed convolution with stride ``f``, trimmed to exactly ``f`` times the input.

    Input pixel ``i`` ends up centered on output coordinate ``f*i + (f-1)/2``.
    """
    n, c, h, w = x.shape
    if c != p.channels:
        raise ShapeError(f"input has {c} channels, upsampling kernel has {p.channels}")
    f = p.factor
    k = p.kernel.shape[2]
    full = np.zeros((n, c, (h - 1) * f + k, (w - 1) * f + k), dtype=np.result_type(x, p.kernel))
    for a in range(k):
        for b in range(k):
            full[:, :, a:a + f * (h - 1) + 1:f, b:b + f * (w - 1) + 1:f] += (
                x * p.kernel[:, 0, a, b].reshape(1, c, 1, 1)
            )
    before, _ = _trim(f)
    return full[:, :, before:before + f * h, before:before + f * w].copy()


def _untrim(grad_out, f, h, w, k):
    before, _ = _trim(f)
    n, c = grad_out.shape[:2]
    full = np.zeros((n, c, (h - 1) * f + k, (w - 1) * f + k), dtype=grad_out.dtype)
    full[:, :, before:before + f * h, before:before + f * w] = grad_out
    return full


def upsample_backward(x, p, grad_out):
    """Return ``(grad_x, grad_kernel)``.  ``grad_x`` is the stride-f convolution
    of ``grad_out`` with the same per-channel kernel."""
    n, c, h, w = x.shape
    f = p.factor
    if grad_out.shape != (n, c, f * h, f * w):
        raise ShapeError(f"grad_out dims {grad_out.shape} != upsampled dims {(n, c, f * h, f * w)}")
    k = p.kernel.shape[2]
    full = _untrim(grad_out, f, h, w, k)
    grad_x = np.zeros_like(x, dtype=full.dtype)
    grad_k = np.zeros_like(p.kernel)
    for a in range(k):
        for b in range(k):
            g = full[:, :, a:a + f * (h - 1) + 1:f, b:b + f * (w - 1) + 1:f]
            grad_x += g * p.kernel[:, 0, a, b].reshape(1, c, 1, 1)
            grad_k[:, 0, a, b] = np.einsum("nchw,nchw->c", g, x)
    return grad_x, grad_k


def strided_conv(y, p, in_hw):
    """Stride-f per-channel convolution that is the adjoint of :func:`upsample_forward`.

    Built from the generic convolution so it can serve as an independent
    check of the upsampling layer.
    """
    h, w = in_hw
    f = p.factor
    k = p.kernel.shape[2]
    full = _untrim(y, f, h, w, k)
    out = []
    for ch in range(p.channels):
        cp = ConvParams(p.kernel[ch:ch + 1], np.zeros(1), stride=f)
        out.append(conv2d_forward(full[:, ch:ch + 1], cp))
    return np.concatenate(out, axis=1)


# -- shift-and-stitch --------------------------------------------------------------

def total_stride(g):
    s = g.field(g.output).eff_stride
    if s.denominator != 1:
        raise InvalidParameterError(f"net has fractional total stride {s}")
    return int(s)


def shift_and_stitch(g, x, f=None):
    """Dense output of a stride-``f`` net by running it on all ``f*f`` shifted inputs.

    The run on the input shifted by ``(a, b)`` supplies dense outputs
    ``(a + f*u, b + f*v)``.  Reference implementation: ``f*f`` forward passes.
    """
    stride = total_stride(g)
    if f is None:
        f = stride
    if f != stride:
        raise InvalidParameterError(f"net has total stride {stride}, not {f}")
    runs = {}
    for a in range(f):
        for b in range(f):
            try:
                runs[a, b] = g.forward(x[:, :, a:, b:])
            except Exception as exc:  # shifted input too small for the net
                if not _is_shape_failure(exc):
                    raise
    if not runs:
        raise ShapeError("input is too small for every shift")
    dense_h = max(a + f * (y.shape[2] - 1) for (a, _), y in runs.items()) + 1
    dense_w = max(b + f * (y.shape[3] - 1) for (_, b), y in runs.items()) + 1
    n, c = next(iter(runs.values())).shape[:2]
    out = np.full((n, c, dense_h, dense_w), np.nan)
    for (a, b), y in runs.items():
        out[:, :, a::f, b::f][:, :, :y.shape[2], :y.shape[3]] = y
    if np.isnan(out).any():
        raise ShapeError("shifted outputs do not tile a dense grid")
    return out


def _is_shape_failure(exc):
    while exc is not None:
        if isinstance(exc, ShapeError):
            return True
        exc = exc.__cause__
    return False


def rarefy(g, explicit_filters=True):
    """Stride-1 copy of a chain net that computes the shift-and-stitch output.

    Layer by layer, each stride is set to one and every later layer is
    dilated by the accumulated stride.  With ``explicit_filters`` the
    convolution kernels are enlarged with :func:`dilate_filter` instead of
    using the dilation parameter; pooling always uses its dilation parameter.
    """
    from .graph import Conv, Pool

    dense = g.copy()
    m = 1
    for node in dense.chain_nodes():
        op = node.op
        if isinstance(op, Conv):
            d = op.dilation * m
            param = dense.params[op.weight]
            if explicit_filters and d > 1:
                param.value = dilate_filter(param.value, d)
                param.grad = np.zeros_like(param.value)
                op.kernel = param.value.shape[2]
                op.dilation = 1
            else:
                op.dilation = d
            op.pad *= m
            m *= op.stride
            op.stride = 1
        elif isinstance(op, Pool):
            p = op.params
            op.params = type(p)(p.kind, p.kernel, 1, p.pad * m, p.dilation * m)
            m *= p.stride
        else:
            desc = op.descriptor()
            if desc is None or desc.stride != 1 or desc.extent != 1:
                raise InvalidParameterError(f"cannot rarefy layer {node.name!r} of kind {op.kind}")
    return dense
