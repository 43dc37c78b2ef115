"""Dense (n, c, h, w) arrays.

Tensors are plain float64 numpy arrays in C order. Operations here never
mutate their inputs.
"""

import numpy as np

from .errors import ShapeError

DEFAULT_DTYPE = np.float64
_MAX_ELEMENTS = 2**40


def _check_dims(dims):
    dims = tuple(int(d) for d in dims)
    if len(dims) != 4:
        raise ShapeError(f"expected 4 dims (n, c, h, w), got {dims}")
    if any(d < 1 for d in dims):
        raise ShapeError(f"all dims must be >= 1, got {dims}")
    total = 1
    for d in dims:
        total *= d
    if total > _MAX_ELEMENTS:
        raise ShapeError(f"dims {dims} overflow the element limit")
    return dims


def as_tensor(x, dtype=None):
    """Validate ``x`` as a 4-D tensor and return it as a contiguous array."""
    arr = np.ascontiguousarray(x, dtype=dtype or DEFAULT_DTYPE)
    _check_dims(arr.shape)
    return arr


def new_filled(dims, value, dtype=DEFAULT_DTYPE):
    return np.full(_check_dims(dims), value, dtype=dtype)


def zeros(dims, dtype=DEFAULT_DTYPE):
    return new_filled(dims, 0.0, dtype)


def elementwise_add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"cannot add tensors of dims {a.shape} and {b.shape}")
    return a + b


def crop(x, offset_h, offset_w, out_h, out_w):
    n, c, h, w = x.shape
    if offset_h < 0 or offset_w < 0 or out_h < 1 or out_w < 1:
        raise ShapeError(f"invalid crop window ({offset_h}, {offset_w}, {out_h}, {out_w})")
    if offset_h + out_h > h or offset_w + out_w > w:
        raise ShapeError(
            f"crop window ({offset_h}+{out_h}, {offset_w}+{out_w}) exceeds input {h}x{w}"
        )
    return x[:, :, offset_h:offset_h + out_h, offset_w:offset_w + out_w].copy()


def channel_argmax(x):
    """Per-pixel index of the highest scoring channel, ties to the lowest index.

    Returns an integer array of shape (n, h, w).
    """
    if x.ndim != 4 or x.shape[1] < 1:
        raise ShapeError(f"expected (n, c, h, w) with c >= 1, got {x.shape}")
    # np.argmax already returns the first occurrence of the maximum.
    return np.argmax(x, axis=1).astype(np.int64)
