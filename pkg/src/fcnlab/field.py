"""Receptive field, stride and alignment arithmetic.

Coordinates follow one convention throughout: pixel centers sit at integer
positions, and a layer whose window spans ``k_eff`` input pixels centers its
output on ``(k_eff - 1) / 2 - pad_before`` (in its own input grid).  A
:class:`ComposedField` records, for a whole path, the receptive field size,
the effective stride, and the input coordinate of output pixel 0's field
center.  All quantities are exact rationals because upsampling introduces
fractional strides.
"""

from dataclasses import dataclass
from fractions import Fraction
from functools import reduce

import numpy as np

from .errors import AlignmentError, InvalidParameterError


def _frac(v):
    return v if isinstance(v, Fraction) else Fraction(v)


@dataclass(frozen=True)
class FieldDescriptor:
    """Geometry of one layer.

    ``stride`` may be a fraction (``1/f`` for upsampling) and ``pad_before``
    may be negative (a crop of ``c`` pixels is a padding of ``-c``).
    """

    kernel: int = 1
    stride: Fraction = Fraction(1)
    pad_before: Fraction = Fraction(0)
    dilation: int = 1

    def __post_init__(self):
        object.__setattr__(self, "stride", _frac(self.stride))
        object.__setattr__(self, "pad_before", _frac(self.pad_before))
        if self.kernel < 1 or self.dilation < 1 or self.stride <= 0:
            raise InvalidParameterError(f"invalid field descriptor {self}")

    @property
    def extent(self):
        return (self.kernel - 1) * self.dilation + 1

    @classmethod
    def upsample(cls, factor):
        """Descriptor of center-aligned ``factor``x upsampling.

        Output pixel ``o`` sits at input coordinate ``(o - (f - 1)/2) / f``
        and reads at most two neighbouring inputs along each axis.
        """
        f = int(factor)
        if f < 1:
            raise InvalidParameterError(f"upsampling factor must be >= 1, got {factor}")
        if f == 1:
            return cls()
        return cls(kernel=2, stride=Fraction(1, f),
                   pad_before=Fraction(1, 2) + Fraction(f - 1, 2 * f))

    @classmethod
    def crop(cls, offset):
        return cls(pad_before=-_frac(offset))

    def as_field(self):
        return ComposedField(self.extent, self.stride,
                             Fraction(self.extent - 1, 2) - self.pad_before)


@dataclass(frozen=True)
class ComposedField:
    rf_size: Fraction = Fraction(1)
    eff_stride: Fraction = Fraction(1)
    offset: Fraction = Fraction(0)

    def __post_init__(self):
        for name in ("rf_size", "eff_stride", "offset"):
            object.__setattr__(self, name, _frac(getattr(self, name)))

    def __str__(self):
        return f"rf {_fmt(self.rf_size)} stride {_fmt(self.eff_stride)} offset {_fmt(self.offset)}"


IDENTITY = ComposedField()


def _fmt(q):
    q = Fraction(q)
    return str(q.numerator) if q.denominator == 1 else f"{float(q):g}"


def compose_fields(outer, inner):
    """Field of ``outer`` applied after ``inner`` (both already composed)."""
    return ComposedField(
        inner.rf_size + (outer.rf_size - 1) * inner.eff_stride,
        outer.eff_stride * inner.eff_stride,
        inner.offset + outer.offset * inner.eff_stride,
    )


def compose(outer, inner=IDENTITY):
    """Apply the layer ``outer`` on top of the composed field ``inner``."""
    return compose_fields(outer.as_field(), inner)


def _fold(descriptors):
    return reduce(lambda acc, d: compose(d, acc), descriptors, IDENTITY)


def chain(descriptors):
    descriptors = list(descriptors)
    if not descriptors:
        raise InvalidParameterError("cannot chain an empty descriptor list")
    return _fold(descriptors)


def crop_offset(path_a, path_b):
    """Pixels to crop from the start of stream ``a`` so it aligns with ``b``.

    Both paths start at the same input and must end at the same effective
    stride.  A negative result means ``b`` is the stream to crop.  Returns the
    same value for both axes since descriptors are square.
    """
    fa, fb = _fold(path_a), _fold(path_b)
    if fa.eff_stride != fb.eff_stride:
        raise AlignmentError(
            f"streams end at different strides ({fa.eff_stride} vs {fb.eff_stride})"
        )
    shift = (fb.offset - fa.offset) / fa.eff_stride
    if shift.denominator != 1:
        raise AlignmentError(
            f"required crop {shift} is not an integer; padding choices are inconsistent"
        )
    return int(shift), int(shift)


# -- reference nets ------------------------------------------------------------

def _conv(k, s=1, pad=0, d=1):
    return FieldDescriptor(k, s, pad, d)


def vgg16_descriptors():
    """13 3x3 convolutions in five blocks, 2x2 pools, then fc6 (7x7) and two 1x1."""
    out = []
    for n_convs in (2, 2, 3, 3, 3):
        out += [_conv(3, 1, 1)] * n_convs
        out.append(_conv(2, 2))
    return out + [_conv(7), _conv(1), _conv(1)]


def alexnet_descriptors():
    return [
        _conv(11, 4), _conv(3, 2),
        _conv(5, 1, 2), _conv(3, 2),
        _conv(3, 1, 1), _conv(3, 1, 1), _conv(3, 1, 1), _conv(3, 2),
        _conv(6), _conv(1), _conv(1),
    ]


# -- empirical probe -------------------------------------------------------------

@dataclass
class FieldProbe:
    """Input rectangle (inclusive bounds) that influences one output pixel."""

    output_pixel: tuple
    top: int
    left: int
    bottom: int
    right: int
    stride: Fraction = None       # measured center spacing of adjacent outputs
    clipped: bool = False         # rectangle touches the input border

    @property
    def rf_size(self):
        return self.bottom - self.top + 1

    @property
    def center(self):
        return (Fraction(self.top + self.bottom, 2), Fraction(self.left + self.right, 2))

    @property
    def offset(self):
        """Input coordinate of output pixel 0's field center (rows)."""
        if self.stride is None:
            return None
        return self.center[0] - self.output_pixel[0] * self.stride


def _changed_lines(g, x, axis, pixels, delta, chunk):
    """Indices of rows (axis=2) or columns (axis=3) whose perturbation moves each pixel."""
    y0 = g.forward(x)
    size = x.shape[axis]
    hits = [[] for _ in pixels]
    for start in range(0, size, chunk):
        idx = range(start, min(start + chunk, size))
        batch = np.repeat(x, len(idx), axis=0)
        for b, line in enumerate(idx):
            if axis == 2:
                batch[b, :, line, :] += delta
            else:
                batch[b, :, :, line] += delta
        y = g.forward(batch)
        for p, (i, j) in enumerate(pixels):
            moved = np.any(y[:, :, i, j] != y0[0, :, i, j], axis=1)
            hits[p].extend(line for b, line in enumerate(idx) if moved[b])
    return hits


def probe_field(g, output_pixel, input_hw, channels=None, seed=0, delta=1.0, chunk=64):
    """Measure the receptive field of ``output_pixel`` by perturbing the input.

    Whole rows and whole columns are perturbed one at a time, which recovers
    the rectangle exactly for square-window layers.  The graph must be
    deterministic and sensitive to every input it reads (e.g. positive
    weights on positive inputs).  The stride is measured from the field of
    the next output pixel down, when it exists.
    """
    if channels is None:
        channels = g.input_channels()
    rng = np.random.default_rng(seed)
    h, w = input_hw
    x = 1.0 + rng.random((1, channels, h, w))
    oi, oj = output_pixel
    out_h = g.forward(x).shape[2]
    pixels = [(oi, oj)] + ([(oi + 1, oj)] if oi + 1 < out_h else [])
    rows = _changed_lines(g, x, 2, pixels, delta, chunk)
    cols = _changed_lines(g, x, 3, pixels[:1], delta, chunk)
    if not rows[0] or not cols[0]:
        raise InvalidParameterError(f"output pixel {output_pixel} is insensitive to every input")
    top, bottom, left, right = min(rows[0]), max(rows[0]), min(cols[0]), max(cols[0])
    stride = None
    if len(pixels) > 1 and rows[1]:
        stride = Fraction(min(rows[1]) + max(rows[1]), 2) - Fraction(top + bottom, 2)
    clipped = top == 0 or left == 0 or bottom == h - 1 or right == w - 1
    return FieldProbe((oi, oj), top, left, bottom, right, stride, clipped)
