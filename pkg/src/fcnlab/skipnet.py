"""Single-stream and skip segmentation nets, plus the plain-text net description format.

A net is a backbone chain ending in a zero-initialized 1x1 score layer,
followed by a decoder that climbs back to input resolution one
stride-changing layer at a time.  Each climb is a bilinear-initialized
transposed convolution.  A skip scores a pooled tap with a zero-initialized
1x1 convolution and adds it to the decoder stream where the strides match.
Upsamplers that feed a fusion are learnable; the remaining ones form the
fixed final interpolation.

Because the decoder is always the same cascade, adding a zero-initialized
skip changes nothing but a ``+ 0`` in the forward pass, so the upgraded net
reproduces its predecessor bit for bit.
"""

from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import AlignmentError, CalibrationError, InvalidParameterError, ParseError
from .field import FieldDescriptor, crop_offset
from .graph import Scale

# -- specs -------------------------------------------------------------------------


@dataclass
class LayerLine:
    name: str
    kind: str            # conv, maxpool, avgpool, relu, dropout
    kernel: int = 1
    stride: int = 1
    pad: int = 0
    dilation: int = 1
    channels: int = 0
    tap: bool = False
    rate: float = 0.5    # dropout only

    def descriptor(self):
        return FieldDescriptor(self.kernel, self.stride, self.pad, self.dilation)


@dataclass
class SkipSpec:
    tap: str
    scale: float = 1.0
    factor: int = 2      # upsampling that brings the coarser stream to this tap's stride

    def __post_init__(self):
        if not self.scale > 0:
            raise InvalidParameterError(f"stream scale must be positive, got {self.scale}")
        if int(self.factor) != self.factor or self.factor < 2:
            raise InvalidParameterError(f"skip factor must be an integer >= 2, got {self.factor}")
        self.factor = int(self.factor)


@dataclass
class BackboneSpec:
    """Stages of ``(conv count, channels, pool)``; 3x3 pad-1 convs and 2x2/2 max pools.

    The head is ``fc6`` (``head_kernel`` square, same padding) and a 1x1
    ``fc7``, each followed by ReLU and optional dropout.
    """

    stages: list = field(default_factory=lambda: [(2, 16, True), (2, 32, True), (2, 64, True)])
    head_channels: int = 64
    head_kernel: int = 3
    dropout: float = 0.0
    in_channels: int = 3

    def __post_init__(self):
        if not self.stages:
            raise InvalidParameterError("backbone needs at least one stage")
        if self.head_kernel % 2 == 0:
            raise InvalidParameterError("head kernel must be odd to keep same-size output")

    @property
    def taps(self):
        return [f"pool{i}" for i, (_, _, pool) in enumerate(self.stages, 1) if pool]

    @property
    def total_stride(self):
        return 2 ** len(self.taps)

    def layers(self, truncate=None):
        """Backbone as description lines; ``truncate`` ends it at a pool tap
        and drops the head (the shallower single-stream baselines)."""
        if truncate is not None and truncate not in self.taps:
            raise InvalidParameterError(f"unknown tap {truncate!r}; taps are {self.taps}")
        out = []
        for i, (n_convs, channels, pool) in enumerate(self.stages, 1):
            for j in range(1, n_convs + 1):
                out.append(LayerLine(f"conv{i}_{j}", "conv", 3, 1, 1, 1, channels))
                out.append(LayerLine(f"relu{i}_{j}", "relu", channels=channels))
            if pool:
                out.append(LayerLine(f"pool{i}", "maxpool", 2, 2, 0, 1, channels, tap=True))
                if truncate == f"pool{i}":
                    return out
        k = self.head_kernel
        for name, kernel in (("6", k), ("7", 1)):
            out.append(LayerLine(f"fc{name}", "conv", kernel, 1, (kernel - 1) // 2, 1, self.head_channels))
            out.append(LayerLine(f"relu{name}", "relu", channels=self.head_channels))
            if self.dropout > 0:
                out.append(LayerLine(f"drop{name}", "dropout", channels=self.head_channels, rate=self.dropout))
        return out


@dataclass
class NetDescription:
    in_channels: int
    n_classes: int
    layers: list
    skips: list = field(default_factory=list)

    @property
    def taps(self):
        return [line.name for line in self.layers if line.tap]

    def descriptors(self, upto=None):
        out = []
        for line in self.layers:
            if line.kind not in ("relu", "dropout"):
                out.append(line.descriptor())
            if line.name == upto:
                return out
        if upto is not None:
            raise InvalidParameterError(f"no layer named {upto!r}")
        return out


# -- description files -----------------------------------------------------------------

LAYER_KINDS = ("conv", "maxpool", "avgpool", "relu", "dropout")


def parse_net(text, path=None):
    """Parse a net description.

    Lines: ``input C``, ``classes N``, layers ``name kind k s pad dilation
    channels [tap] [rate=R]`` and skips ``skip tap scale factor``.  ``#``
    starts a comment.  Errors report the byte offset of the offending line.
    """
    in_channels, n_classes = 3, None
    layers, skips = [], []
    offset = 0
    for raw in text.splitlines(keepends=True):
        line_offset, offset = offset, offset + len(raw.encode("utf-8"))
        tokens = raw.split("#", 1)[0].split()
        if not tokens:
            continue

        def fail(msg):
            raise ParseError(msg, line_offset, path)

        def ints(values):
            try:
                return [int(v) for v in values]
            except ValueError:
                fail(f"expected integers, got {' '.join(values)!r}")

        head = tokens[0]
        if head in ("input", "classes"):
            if len(tokens) != 2:
                fail(f"'{head}' takes one integer")
            (value,) = ints(tokens[1:])
            if value < 1:
                fail(f"'{head}' must be positive")
            if head == "input":
                in_channels = value
            else:
                n_classes = value
        elif head == "skip":
            if len(tokens) != 4:
                fail("skip lines are 'skip tap scale factor'")
            try:
                skips.append(SkipSpec(tokens[1], float(tokens[2]), int(tokens[3])))
            except (ValueError, InvalidParameterError) as exc:
                fail(f"bad skip line: {exc}")
        else:
            if len(tokens) < 7:
                fail("layer lines are 'name kind k s pad dilation channels [tap]'")
            name, kind = tokens[:2]
            if kind not in LAYER_KINDS:
                fail(f"unknown layer kind {kind!r}")
            k, s, pad, d, c = ints(tokens[2:7])
            if k < 1 or s < 1 or d < 1 or pad < 0 or c < 0:
                fail("kernel, stride and dilation must be positive, pad and channels nonnegative")
            entry = LayerLine(name, kind, k, s, pad, d, c)
            for extra in tokens[7:]:
                if extra == "tap":
                    entry.tap = True
                elif extra.startswith("rate="):
                    try:
                        entry.rate = float(extra[5:])
                    except ValueError:
                        fail(f"bad dropout rate {extra!r}")
                else:
                    fail(f"unexpected token {extra!r}")
            if any(line.name == name for line in layers):
                fail(f"duplicate layer name {name!r}")
            layers.append(entry)
    if not layers:
        raise ParseError("net description has no layers", 0, path)
    desc = NetDescription(in_channels, n_classes, layers, skips)
    for skip in skips:
        if skip.tap not in desc.taps:
            raise ParseError(f"skip refers to unknown tap {skip.tap!r}", None, path)
    return desc


def load_net(path):
    path = Path(path)
    return parse_net(path.read_text(), path)


def format_net(desc):
    lines = [f"input {desc.in_channels}"]
    if desc.n_classes is not None:
        lines.append(f"classes {desc.n_classes}")
    for l in desc.layers:
        text = f"{l.name} {l.kind} {l.kernel} {l.stride} {l.pad} {l.dilation} {l.channels}"
        if l.tap:
            text += " tap"
        if l.kind == "dropout":
            text += f" rate={l.rate:g}"
        lines.append(text)
    lines += [f"skip {s.tap} {s.scale:g} {s.factor}" for s in desc.skips]
    return "\n".join(lines) + "\n"


def bundled_net(name):
    """Path of a net description shipped with the package (``toy``, ``vgg16``, ``alexnet``)."""
    path = Path(__file__).parent / "nets" / f"{name}.net"
    if not path.exists():
        raise InvalidParameterError(f"no bundled net {name!r}")
    return path


def probe_table(desc):
    """(name, field) for every tap and the final layer, using exact field arithmetic."""
    from .field import chain

    names = desc.taps + ([desc.layers[-1].name] if desc.layers[-1].name not in desc.taps else [])
    return [(name, chain(desc.descriptors(upto=name))) for name in names]


# -- construction ----------------------------------------------------------------------


def _add_layers(g, layers, rng, src="data"):
    for line in layers:
        if line.kind == "conv":
            src = g.add_conv(line.name, src, line.channels, line.kernel, line.stride,
                             line.pad, line.dilation, rng=rng)
        elif line.kind in ("maxpool", "avgpool"):
            kind = "max" if line.kind == "maxpool" else "average"
            src = g.add_pool(line.name, src, line.kernel, line.stride, line.pad, kind, line.dilation)
        elif line.kind == "relu":
            src = g.add_relu(line.name, src)
        else:
            src = g.add_dropout(line.name, src, line.rate)
    return src


def build_from_layers(layers, skips, n_cl, in_channels=3, seed=0):
    """Graph from backbone layer lines and skip specs (see module docstring)."""
    from .graph import Graph

    skips = list(skips)
    taps = [line.name for line in layers if line.tap]
    seen = set()
    for s in skips:
        if s.tap not in taps:
            raise InvalidParameterError(f"skip refers to unknown tap {s.tap!r}")
        if s.tap in seen:
            raise InvalidParameterError(f"duplicate skip at tap {s.tap!r}")
        seen.add(s.tap)

    g = Graph()
    g.add_input("data", in_channels)
    rng = np.random.default_rng(seed)
    top = _add_layers(g, layers, rng)
    stream = g.add_conv("score_fr", top, n_cl, 1, init="zero")

    # stride after each stride-changing layer, and the layers' strides in order
    strides, tap_stride, s = [], {}, 1
    for line in layers:
        if line.kind in ("relu", "dropout"):
            continue
        if line.stride > 1:
            strides.append(line.stride)
        s *= line.stride
        if line.tap:
            tap_stride[line.name] = s
    stride = s
    by_stride = {}
    for skip in skips:
        ts = tap_stride[skip.tap]
        if ts in by_stride:
            raise InvalidParameterError(f"taps {by_stride[ts].tap!r} and {skip.tap!r} share stride {ts}")
        if ts >= stride:
            raise InvalidParameterError(f"tap {skip.tap!r} is not finer than the score stream")
        by_stride[ts] = skip
    fusion_strides = sorted(by_stride, reverse=True)

    joined_from = stride
    for step in reversed(strides):
        new_stride = stride // step
        feeds_fusion = any(fs <= new_stride for fs in fusion_strides)
        up = g.add_upsample(f"up_s{new_stride}", stream, step, learnable=feeds_fusion)
        stream = up
        stride = new_stride
        if stride in by_stride:
            skip = by_stride.pop(stride)
            if joined_from // stride != skip.factor:
                raise InvalidParameterError(
                    f"skip at {skip.tap!r} joins a stream {joined_from // stride}x coarser, "
                    f"but its factor is {skip.factor}")
            tap = skip.tap
            scaled = g.add_scale(f"scale_{tap}", tap, skip.scale)
            score = g.add_conv(f"score_{tap}", scaled, n_cl, 1, init="zero")
            oh, ow = crop_offset(g.descriptors_to(score), g.descriptors_to(up))
            if oh < 0 or ow < 0:
                raise AlignmentError(f"stream {tap!r} would need negative crop {oh}")
            crop = g.add_crop(f"crop_{tap}", score, up, (oh, ow))
            stream = g.add_sum(f"fuse_{tap}", [up, crop])
            joined_from = stride
    g.field(g.output)   # raises AlignmentError if any fusion is misaligned
    g.meta.update(n_cl=n_cl, skips=skips, layers=list(layers), seed=seed,
                  in_channels=in_channels, lr_schedule=[(0, 1.0)])
    return g


def build(spec, skips=(), n_cl=5, seed=0, truncate=None):
    """Skip net over a :class:`BackboneSpec`; ``truncate`` builds a shallower
    single-stream baseline ending at that pool."""
    g = build_from_layers(spec.layers(truncate), skips, n_cl, spec.in_channels, seed)
    g.meta.update(spec=spec, truncate=truncate)
    return g


def build_from_description(desc, seed=0, n_cl=None):
    n_cl = n_cl or desc.n_classes
    if n_cl is None:
        raise InvalidParameterError("net description has no 'classes' line")
    return build_from_layers(desc.layers, desc.skips, n_cl, desc.in_channels, seed)


def upgrade(g, new_skip, lr_drop=0.01):
    """Add ``new_skip`` to a net built by this module, carrying every parameter over.

    The new score layer starts at zero, so outputs are unchanged.  ``lr_drop``
    is appended to ``g.meta['lr_schedule']`` as the multiplier of the new stage.
    """
    skips = list(g.meta["skips"])
    if any(s.tap == new_skip.tap for s in skips):
        raise InvalidParameterError(f"net already has a skip at {new_skip.tap!r}")
    new = build_from_layers(g.meta["layers"], skips + [new_skip], g.meta["n_cl"],
                            g.meta["in_channels"], g.meta["seed"])
    for name, param in g.params.items():
        new.params[name].value = param.value.copy()
    schedule = list(g.meta["lr_schedule"])
    stage = len(schedule)
    schedule.append((stage, schedule[-1][1] * lr_drop))
    for key in ("spec", "truncate"):
        if key in g.meta:
            new.meta[key] = g.meta[key]
    new.meta["lr_schedule"] = schedule
    return new


def stage_lr_multiplier(g):
    return g.meta.get("lr_schedule", [(0, 1.0)])[-1][1]


# -- stream scaling ----------------------------------------------------------------------


def _stream_taps(g):
    """(deepest stream input, {skip tap: scale node})."""
    deepest = g.nodes["score_fr"].inputs[0]
    scales = {n.inputs[0]: n.name for n in g.nodes.values() if isinstance(n.op, Scale)}
    return deepest, scales


def calibrate_stream_scales(g, batch):
    """Per-skip scale that equalizes the RMS activation of each tap with the
    deepest stream's scoring input, measured on ``batch`` (at least 8 images)."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.shape[0] < 8:
        raise CalibrationError(f"need at least 8 calibration images, got {batch.shape[0]}")
    deepest, scale_nodes = _stream_taps(g)
    g.forward(batch)

    def rms(name):
        a = g.activation(name)
        return float(np.sqrt(np.mean(a * a)))

    ref = rms(deepest)
    if ref == 0.0:
        raise CalibrationError(f"deepest stream {deepest!r} has zero activation")
    scales = {}
    for tap in scale_nodes:
        r = rms(tap)
        if r == 0.0:
            raise CalibrationError(f"stream {tap!r} has zero activation")
        scales[tap] = ref / r
    return scales


def apply_stream_scales(g, scales):
    _, scale_nodes = _stream_taps(g)
    for tap, value in scales.items():
        if tap not in scale_nodes:
            raise InvalidParameterError(f"net has no stream at {tap!r}")
        g.nodes[scale_nodes[tap]].op.value = float(value)
        for skip in g.meta.get("skips", []):
            if skip.tap == tap:
                skip.scale = float(value)
    return g


def output_stride(g):
    """Stride of the coarsest score stream (before any upsampling)."""
    f = g.field("score_fr").eff_stride
    fused = [n.name for n in g.nodes.values() if n.name.startswith("fuse_")]
    if fused:
        f = g.field(fused[-1]).eff_stride
    return Fraction(f)


def param_count(g):
    return sum(p.value.size for p in g.params.values())
