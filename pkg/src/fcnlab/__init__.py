"""fcnlab: a small numpy engine for fully convolutional segmentation nets."""

from .errors import (
    AlignmentError, CalibrationError, DivergenceError, FCNError, GenerationError, GraphError,
    InvalidLabelError, InvalidParameterError, ParseError, ShapeError, StateError,
    UndefinedMetricError,
)
from .tensor import as_tensor, channel_argmax, crop, elementwise_add, new_filled, zeros
from .field import (
    ComposedField, FieldDescriptor, alexnet_descriptors, chain, compose, crop_offset,
    probe_field, vgg16_descriptors,
)
from .graph import Graph, load_checkpoint, read_checkpoint, whole_image_equals_patch_batch, write_checkpoint
from .resampling import bilinear_kernel, rarefy, shift_and_stitch, upsample_backward, upsample_forward
from .losses import IGNORE, LossConfig, null_background_infer, sample_loss_mask, sigmoid_ce_loss, softmax_loss
from .metrics import ConfusionMatrix, accumulate, compute_metrics, iu_upper_bound
from .data import SegSample, ShapesConfig, apply_mask, generate, make_splits
from .training import OptimConfig, effective_coefficients, equivalent_momentum, evaluate, train
from .skipnet import BackboneSpec, SkipSpec, build, load_net, parse_net, upgrade

__version__ = "0.1.0"
