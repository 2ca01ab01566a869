"""XNOR-binarized capsule fully connected layers and their cost model."""

from .binarize import BinarizedTensor, SignPlane, binarize, dequantize, minmax_sign, scale_factor
from .flops import FcStack, bops_to_flops, cost_report, fc_stack_flops, speedup_xnidr, speedup_xnodr
from .routing import (
    MarginLoss,
    ProjectorConfig,
    RoutingState,
    capsfc_forward,
    class_scores,
    dynamic_routing,
    margin_loss,
    squash,
    xnidr_forward,
    xnodr_forward,
)
from .xnor import PackedVector, binary_affine, xnor_conv2d, xnor_popcount_dot

__version__ = "0.1.0"
