"""Directed acyclic nets of layers with whole-image forward and reverse-mode
gradients.

Nodes are added in topological order and executed in that order.  Parameter
gradients accumulate (``+=``) across backward calls until
:meth:`Graph.zero_grads`, so several images can be summed into one update.
"""

import copy
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import layers as L
from .errors import AlignmentError, GraphError, InvalidParameterError, ParseError, ShapeError, StateError
from .field import IDENTITY, FieldDescriptor, compose
from .resampling import UpsampleParams, bilinear_kernel, upsample_backward, upsample_forward
from .tensor import crop as crop_tensor


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray = None
    learnable: bool = True
    is_bias: bool = False

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)


# -- ops -------------------------------------------------------------------------

class Op:
    kind = "op"

    def param_names(self):
        return []

    def descriptor(self):
        """Field geometry of this op, or None when it merges several inputs."""
        return FieldDescriptor()

    def forward(self, g, xs, ctx):
        raise NotImplementedError

    def backward(self, g, cache, gy):
        raise NotImplementedError


class Input(Op):
    kind = "input"

    def __init__(self, channels):
        self.channels = channels

    def descriptor(self):
        return None


class Conv(Op):
    kind = "conv"

    def __init__(self, weight, bias, kernel, stride=1, pad=0, dilation=1):
        self.weight, self.bias = weight, bias
        self.kernel = kernel
        self.stride, self.pad, self.dilation = stride, pad, dilation

    def param_names(self):
        return [self.weight, self.bias]

    def conv_params(self, g):
        return L.ConvParams(g.params[self.weight].value, g.params[self.bias].value,
                            self.stride, self.pad, self.dilation)

    def descriptor(self):
        return FieldDescriptor(self.kernel, self.stride, self.pad, self.dilation)

    def forward(self, g, xs, ctx):
        return L.conv2d_forward(xs[0], self.conv_params(g)), xs[0]

    def backward(self, g, x, gy):
        gx, gw, gb = L.conv2d_backward(x, self.conv_params(g), gy)
        for name, grad in ((self.weight, gw), (self.bias, gb)):
            param = g.params[name]
            if param.learnable:
                param.grad += grad
        return [gx]


class Pool(Op):
    kind = "pool"

    def __init__(self, params):
        self.params = params

    def descriptor(self):
        p = self.params
        return FieldDescriptor(p.kernel, p.stride, p.pad, p.dilation)

    def forward(self, g, xs, ctx):
        y, switches = L.pool_forward(xs[0], self.params)
        return y, (xs[0].shape, switches)

    def backward(self, g, cache, gy):
        shape, switches = cache
        return [L.pool_backward(gy, self.params, shape, switches)]


class ReLU(Op):
    kind = "relu"

    def forward(self, g, xs, ctx):
        return L.relu_forward(xs[0]), xs[0]

    def backward(self, g, x, gy):
        return [L.relu_backward(x, gy)]


class Dropout(Op):
    kind = "dropout"

    def __init__(self, rate):
        self.rate = rate

    def forward(self, g, xs, ctx):
        p = L.DropoutParams(self.rate, "train" if ctx.train else "test")
        y, mask = L.dropout_forward(xs[0], p, ctx.rng)
        return y, mask

    def backward(self, g, mask, gy):
        return [L.dropout_backward(gy, mask)]


class Scale(Op):
    kind = "scale"

    def __init__(self, value):
        self.value = float(value)

    def forward(self, g, xs, ctx):
        return xs[0] * self.value, None

    def backward(self, g, cache, gy):
        return [gy * self.value]


class Upsample(Op):
    kind = "upsample"

    def __init__(self, kernel, factor):
        self.kernel, self.factor = kernel, factor

    def param_names(self):
        return [self.kernel]

    def descriptor(self):
        return FieldDescriptor.upsample(self.factor)

    def upsample_params(self, g):
        param = g.params[self.kernel]
        return UpsampleParams(self.factor, param.value, param.learnable)

    def forward(self, g, xs, ctx):
        return upsample_forward(xs[0], self.upsample_params(g)), xs[0]

    def backward(self, g, x, gy):
        param = g.params[self.kernel]
        gx, gk = upsample_backward(x, self.upsample_params(g), gy)
        if param.learnable:
            param.grad += gk
        return [gx]


class Crop(Op):
    """Crop input 0 to the spatial size of input 1, starting at ``offset``."""

    kind = "crop"

    def __init__(self, offset):
        self.offset = tuple(offset)

    def descriptor(self):
        return FieldDescriptor.crop(self.offset[0])

    def forward(self, g, xs, ctx):
        x, ref = xs
        oh, ow = self.offset
        return crop_tensor(x, oh, ow, ref.shape[2], ref.shape[3]), x.shape

    def backward(self, g, shape, gy):
        gx = np.zeros(shape, dtype=gy.dtype)
        oh, ow = self.offset
        gx[:, :, oh:oh + gy.shape[2], ow:ow + gy.shape[3]] = gy
        return [gx, None]


class Sum(Op):
    kind = "sum"

    def descriptor(self):
        return None

    def forward(self, g, xs, ctx):
        y = xs[0]
        for x in xs[1:]:
            if x.shape != y.shape:
                raise ShapeError(f"cannot sum streams of dims {y.shape} and {x.shape}")
            y = y + x
        return y, len(xs)

    def backward(self, g, n, gy):
        return [gy] * n


@dataclass
class Node:
    name: str
    op: Op
    inputs: list = field(default_factory=list)


class _Context:
    def __init__(self, train, rng):
        self.train, self.rng = train, rng


def he_uniform(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# -- graph -----------------------------------------------------------------------

class Graph:
    def __init__(self):
        self.nodes = {}              # insertion order is topological order
        self.params = {}
        self.inputs = []
        self.output = None
        self.meta = {}
        self._outputs = None
        self._caches = None

    # construction

    def add(self, name, op, inputs=()):
        if name in self.nodes:
            raise GraphError("duplicate node name", name)
        inputs = [inputs] if isinstance(inputs, str) else list(inputs)
        for src in inputs:
            if src not in self.nodes:
                raise GraphError(f"input {src!r} is not defined before this node", name)
        self.nodes[name] = Node(name, op, inputs)
        if not isinstance(op, Input):
            self.output = name
        self._outputs = self._caches = None
        return name

    def add_input(self, name="data", channels=3):
        self.inputs.append(name)
        return self.add(name, Input(channels))

    def add_param(self, name, value, learnable=True, is_bias=False):
        if name in self.params:
            raise GraphError(f"duplicate parameter {name!r}")
        self.params[name] = Param(value, learnable=learnable, is_bias=is_bias)
        return name

    def add_conv(self, name, src, out_c, kernel, stride=1, pad=0, dilation=1,
                 rng=None, init="uniform", weights=None, bias=None):
        in_c = self.channels(src)
        shape = (out_c, in_c, kernel, kernel)
        if weights is None:
            if init == "zero":
                weights = np.zeros(shape)
            else:
                weights = he_uniform(rng if rng is not None else np.random.default_rng(), shape)
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != shape:
            raise ShapeError(f"conv {name!r} weights {weights.shape} != {shape}")
        self.add_param(f"{name}.weight", weights)
        self.add_param(f"{name}.bias", np.zeros(out_c) if bias is None else bias, is_bias=True)
        return self.add(name, Conv(f"{name}.weight", f"{name}.bias", kernel, stride, pad, dilation), src)

    def add_pool(self, name, src, kernel=2, stride=2, pad=0, kind="max", dilation=1):
        return self.add(name, Pool(L.PoolParams(kind, kernel, stride, pad, dilation)), src)

    def add_relu(self, name, src):
        return self.add(name, ReLU(), src)

    def add_dropout(self, name, src, rate):
        L.DropoutParams(rate)
        return self.add(name, Dropout(rate), src)

    def add_scale(self, name, src, value):
        return self.add(name, Scale(value), src)

    def add_upsample(self, name, src, factor, learnable=True, kernel=None):
        channels = self.channels(src)
        if kernel is None:
            kernel = bilinear_kernel(factor, channels).kernel
        self.add_param(f"{name}.kernel", kernel, learnable=learnable)
        UpsampleParams(factor, self.params[f"{name}.kernel"].value)
        return self.add(name, Upsample(f"{name}.kernel", factor), src)

    def add_crop(self, name, src, ref, offset=(0, 0)):
        return self.add(name, Crop(offset), [src, ref])

    def add_sum(self, name, srcs):
        return self.add(name, Sum(), srcs)

    def channels(self, name):
        """Channel count produced by node ``name``."""
        node = self.nodes[name]
        op = node.op
        if isinstance(op, Input):
            return op.channels
        if isinstance(op, Conv):
            return self.params[op.weight].value.shape[0]
        return self.channels(node.inputs[0])

    def input_channels(self):
        return self.nodes[self.inputs[0]].op.channels

    def copy(self):
        g = copy.deepcopy(self)
        g._outputs = g._caches = None
        return g

    def chain_nodes(self):
        """Non-input nodes of a line topology, in order; raise for a DAG."""
        out, prev = [], None
        for node in self.nodes.values():
            if isinstance(node.op, Input):
                if prev is not None:
                    raise InvalidParameterError("chain net must have a single leading input")
                prev = node.name
                continue
            if node.inputs != [prev]:
                raise InvalidParameterError(f"node {node.name!r} breaks the chain topology")
            out.append(node)
            prev = node.name
        return out

    # geometry

    def descriptors_to(self, name):
        """Descriptors along the path from the input to ``name`` (first inputs)."""
        path = []
        node = self.nodes[name]
        while not isinstance(node.op, Input):
            d = node.op.descriptor()
            if d is not None:
                path.append(d)
            node = self.nodes[node.inputs[0]]
        return path[::-1]

    def field(self, name, _memo=None):
        memo = {} if _memo is None else _memo
        if name in memo:
            return memo[name]
        node = self.nodes[name]
        if isinstance(node.op, Input):
            result = IDENTITY
        else:
            d = node.op.descriptor()
            if d is None:
                # streams must agree on stride and center; the merged field is
                # the union of the (concentric) input fields
                fields = [self.field(src, memo) for src in node.inputs]
                if any((f.eff_stride, f.offset) != (fields[0].eff_stride, fields[0].offset)
                       for f in fields[1:]):
                    raise AlignmentError(
                        f"node {name!r} merges misaligned streams: " + "; ".join(map(str, fields))
                    )
                result = max(fields, key=lambda f: f.rf_size)
            else:
                result = compose(d, self.field(node.inputs[0], memo))
        memo[name] = result
        return result

    # execution

    def forward(self, inputs, train=False, seed=None, keep=True):
        """Evaluate the graph; ``inputs`` is an array (single input) or a dict.

        Dropout draws from ``default_rng([seed, node_index])`` so runs with the
        same seed are identical.
        """
        if not isinstance(inputs, dict):
            if len(self.inputs) != 1:
                raise GraphError("graph has several inputs; pass a dict")
            inputs = {self.inputs[0]: inputs}
        outputs, caches = {}, {}
        for index, node in enumerate(self.nodes.values()):
            if isinstance(node.op, Input):
                if node.name not in inputs:
                    raise GraphError("missing input tensor", node.name)
                x = np.asarray(inputs[node.name], dtype=np.float64)
                if x.ndim != 4 or x.shape[1] != node.op.channels:
                    raise GraphError(f"expected (n, {node.op.channels}, h, w) input, got {x.shape}", node.name)
                outputs[node.name] = x
                continue
            rng = np.random.default_rng([0 if seed is None else seed, index])
            ctx = _Context(train, rng)
            try:
                y, cache = node.op.forward(self, [outputs[s] for s in node.inputs], ctx)
            except Exception as exc:
                raise GraphError(str(exc), node.name) from exc
            outputs[node.name] = y
            caches[node.name] = cache
        if keep:
            self._outputs, self._caches = outputs, caches
        return outputs[self.output]

    def activation(self, name):
        if self._outputs is None:
            raise StateError("no forward pass has been run")
        return self._outputs[name]

    def backward(self, grad_at_output):
        """Accumulate parameter gradients of ``<grad_at_output, output>``.

        Returns the gradients with respect to the graph inputs.
        """
        if self._outputs is None:
            raise StateError("backward called before forward")
        out = self._outputs[self.output]
        if grad_at_output.shape != out.shape:
            raise ShapeError(f"output grad dims {grad_at_output.shape} != output dims {out.shape}")
        grads = {self.output: grad_at_output}
        for node in reversed(list(self.nodes.values())):
            gy = grads.pop(node.name, None)
            if gy is None:
                continue
            if isinstance(node.op, Input):
                grads[node.name] = gy
                continue
            try:
                gxs = node.op.backward(self, self._caches[node.name], gy)
            except Exception as exc:
                raise GraphError(str(exc), node.name) from exc
            for src, gx in zip(node.inputs, gxs):
                if gx is None:
                    continue
                grads[src] = gx if src not in grads else grads[src] + gx
        return {name: grads.get(name) for name in self.inputs}

    def zero_grads(self):
        for p in self.params.values():
            p.grad[...] = 0.0

    def grads(self):
        return {name: p.grad.copy() for name, p in self.params.items()}

    def values(self):
        return {name: p.value.copy() for name, p in self.params.items()}

    def signature(self):
        """Topology as comparable tuples: (name, kind, inputs) per node."""
        return [(n.name, n.op.kind, tuple(n.inputs)) for n in self.nodes.values()]


# -- checkpoints -----------------------------------------------------------------
#
# Layout (little-endian): 8-byte magic, uint32 version, uint32 parameter count,
# then per parameter: uint32 name length, utf-8 name, uint32 ndim, ndim x uint32
# dims, prod(dims) x float64 values.

MAGIC = b"FCNCKPT\0"
VERSION = 1


def write_checkpoint(path, params):
    """Write a name -> array mapping (or a Graph's parameters) to ``path``."""
    if isinstance(params, Graph):
        params = {k: p.value for k, p in params.params.items()}
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, value in params.items():
        raw = name.encode("utf-8")
        value = np.asarray(value, dtype="<f8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
        chunks.append(value.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path):
    data = Path(path).read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise ParseError(f"truncated checkpoint while reading {what}", pos, path)
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(len(MAGIC), "magic") != MAGIC:
        raise ParseError("bad checkpoint magic", 0, path)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", len(MAGIC), path)
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4, "ndim"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims"))
        size = int(np.prod(dims)) if ndim else 1
        out[name] = np.frombuffer(take(8 * size, "values"), dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(data):
        raise ParseError("trailing bytes after last parameter", pos, path)
    return out


def load_checkpoint(path, g):
    values = read_checkpoint(path)
    for name, param in g.params.items():
        if name not in values:
            raise ParseError(f"checkpoint has no parameter {name!r}", path=path)
        if values[name].shape != param.value.shape:
            raise ShapeError(f"parameter {name!r}: checkpoint dims {values[name].shape} != {param.value.shape}")
        param.value = values[name].copy()
    return g


# -- whole image vs. patch batch ------------------------------------------------------

@dataclass
class PatchReport:
    n_patches: int
    rf_size: int
    stride: int
    max_rel_error: float
    whole_grads: dict
    patch_grads: dict

    @property
    def overlapping(self):
        return self.stride < self.rf_size


def relative_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - b).max() / scale)


def whole_image_equals_patch_batch(g, image, labels, loss=None):
    """Compare one whole-image gradient with the sum over receptive-field patches.

    ``loss(scores, labels) -> (value, grad)`` must be a sum over output pixels
    (the default is the unnormalized softmax loss).  The net must be
    deterministic and unpadded so each output pixel sees exactly its patch.
    """
    from .losses import softmax_loss

    loss = loss or softmax_loss
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image[None]
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    f = g.field(g.output)
    if f.rf_size.denominator != 1 or f.eff_stride.denominator != 1:
        raise InvalidParameterError("net must have integral receptive field and stride")
    rf, stride = int(f.rf_size), int(f.eff_stride)
    start = f.offset - (f.rf_size - 1) / 2
    if start != 0:
        raise InvalidParameterError("net must be unpadded: output pixel 0's field must start at input pixel 0")

    g.zero_grads()
    y = g.forward(image)
    if y.shape[2:] != labels.shape[1:]:
        raise ShapeError(f"labels {labels.shape[1:]} do not match output {y.shape[2:]}")
    _, gy = loss(y, labels)
    g.backward(gy)
    whole = g.grads()

    total = {k: np.zeros_like(v) for k, v in whole.items()}
    oh, ow = y.shape[2:]
    for i in range(oh):
        for j in range(ow):
            patch = image[:, :, i * stride:i * stride + rf, j * stride:j * stride + rf]
            g.zero_grads()
            yp = g.forward(patch)
            _, gp = loss(yp, labels[:, i:i + 1, j:j + 1])
            g.backward(gp)
            for k, p in g.params.items():
                total[k] += p.grad
    g.zero_grads()
    err = max(relative_error(whole[k], total[k]) for k in whole) if whole else 0.0
    return PatchReport(oh * ow, rf, stride, err, whole, total)
