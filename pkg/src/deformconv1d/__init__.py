"""1-D deformable depthwise convolution, training harness, and analysis tools."""

from .conv import (
    DeformableConvLayer,
    KernelGeometry,
    OffsetField,
    base_positions,
    conv1d_backward,
    conv1d_forward,
    deformable_backward,
    deformable_forward,
    interpolate,
    offset_forward,
)
from .errors import ConfigError, DivergenceError, FormatError, ShapeError
from .tensorio import read_tensor_file, tensor_read, tensor_write, write_tensor_file

__all__ = [
    "ConfigError",
    "DeformableConvLayer",
    "DivergenceError",
    "FormatError",
    "KernelGeometry",
    "OffsetField",
    "ShapeError",
    "base_positions",
    "conv1d_backward",
    "conv1d_forward",
    "deformable_backward",
    "deformable_forward",
    "interpolate",
    "offset_forward",
    "read_tensor_file",
    "tensor_read",
    "tensor_write",
    "write_tensor_file",
]
