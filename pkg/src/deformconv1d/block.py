"""Convolution block: pointwise/GLU -> deformable depthwise -> batch norm ->
swish -> pointwise, with a residual connection.

The depthwise stage is a deformable convolution; freezing its offsets at zero
turns the block into the plain convolution module it generalizes, bit for bit.
Forward in train mode returns a cache that the manual backward consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .conv import (
    DeformableConvLayer,
    KernelGeometry,
    conv1d_backward,
    conv1d_forward,
    deformable_backward,
    deformable_forward,
    offset_forward,
)
from .errors import ConfigError, ShapeError

_PW_GEO = KernelGeometry(1)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def glu(z: np.ndarray):
    """Gated linear unit over the channel axis: split (a, b) -> a * sigmoid(b)."""
    f2 = z.shape[-1]
    if f2 % 2:
        raise ShapeError(f"GLU needs an even channel count, got {f2}")
    a, b = z[..., : f2 // 2], z[..., f2 // 2:]
    sig = _sigmoid(b)
    return a * sig, (a, sig)


def swish(z: np.ndarray):
    sig = _sigmoid(z)
    return z * sig, sig


@dataclass
class BatchNorm:
    """Per-channel batch normalization over the batch and time axes."""

    channels: int
    dtype: np.dtype = np.float32
    eps: float = 1e-5
    momentum: float = 0.1
    scale: np.ndarray = field(init=False)
    shift: np.ndarray = field(init=False)
    running_mean: np.ndarray = field(init=False)
    running_var: np.ndarray = field(init=False)

    def __post_init__(self):
        dt = np.dtype(self.dtype)
        self.scale = np.ones(self.channels, dtype=dt)
        self.shift = np.zeros(self.channels, dtype=dt)
        self.running_mean = np.zeros(self.channels, dtype=dt)
        self.running_var = np.ones(self.channels, dtype=dt)

    def forward(self, z: np.ndarray, train: bool):
        if train:
            mean = z.mean(axis=(0, 1))
            var = z.var(axis=(0, 1))
            m = np.asarray(self.momentum, dtype=z.dtype)
            self.running_mean[...] = (1 - m) * self.running_mean + m * mean
            self.running_var[...] = (1 - m) * self.running_var + m * var
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + np.asarray(self.eps, dtype=z.dtype))
        x_hat = (z - mean) * inv_std
        out = self.scale * x_hat + self.shift
        return out, (z, mean, inv_std, x_hat)

    def backward(self, grad: np.ndarray, cache):
        z, mean, inv_std, x_hat = cache
        m = z.shape[0] * z.shape[1]
        d_scale = np.einsum("btf,btf->f", grad, x_hat)
        d_shift = np.einsum("btf->f", grad)
        d_xhat = grad * self.scale
        # batch-statistics path: mean and variance both depend on z
        d_var = np.einsum("btf,btf->f", d_xhat, z - mean) * (-0.5) * inv_std ** 3
        d_mean = (-inv_std * np.einsum("btf->f", d_xhat)
                  - d_var * 2.0 / m * np.einsum("btf->f", z - mean))
        d_z = d_xhat * inv_std + d_var * 2.0 / m * (z - mean) + d_mean / m
        return d_z, d_scale, d_shift


class DeformableConvBlock:
    """The convolution module with a learnably-deformed depthwise stage.

    ``freeze_offsets=True`` bypasses the offset prediction entirely and runs
    the regular depthwise convolution; with zero offset parameters the two
    paths produce identical bits, which pins the ablation to the baseline.
    """

    def __init__(self, channels: int, kernel_size: int = 15,
                 deformable_groups: int = 1, lr_mult: float = 1.0,
                 dtype=np.float32, residual: bool = True,
                 boundary: str = "zeros", freeze_offsets: bool = False,
                 dropout: float = 0.0):
        if dropout != 0.0:
            raise ConfigError("dropout is reserved; only 0.0 is supported")
        self.channels = channels
        self.residual = residual
        self.freeze_offsets = freeze_offsets
        self.dtype = np.dtype(dtype)
        f = channels
        self.pw1_weights = np.zeros((2 * f, f, 1), dtype=self.dtype)
        self.pw1_bias = np.zeros(2 * f, dtype=self.dtype)
        self.deform = DeformableConvLayer(
            geometry=KernelGeometry.same_length(kernel_size),
            channels_in=f, channels_out=f, conv_groups=f,
            deformable_groups=deformable_groups, lr_mult=lr_mult,
            boundary=boundary, dtype=self.dtype)
        self.norm = BatchNorm(f, dtype=self.dtype)
        self.pw2_weights = np.zeros((f, f, 1), dtype=self.dtype)
        self.pw2_bias = np.zeros(f, dtype=self.dtype)

    def parameters(self) -> dict:
        params = {
            "pw1.weights": self.pw1_weights,
            "pw1.bias": self.pw1_bias,
            "deform.offset_weights": self.deform.offset_weights,
            "deform.offset_bias": self.deform.offset_bias,
            "deform.output_weights": self.deform.output_weights,
            "deform.output_bias": self.deform.output_bias,
            "norm.scale": self.norm.scale,
            "norm.shift": self.norm.shift,
            "pw2.weights": self.pw2_weights,
            "pw2.bias": self.pw2_bias,
        }
        return params

    def offset_parameter_names(self):
        return ("deform.offset_weights", "deform.offset_bias")

    def init_params(self, scheme: str, seed: int) -> None:
        """"xavier": Glorot-uniform weights, zero biases. "zero_offset": the
        same, with the offset convolution's parameters zeroed afterwards."""
        if scheme not in ("xavier", "zero_offset"):
            raise ConfigError(f"unknown init scheme {scheme!r}")
        rng = np.random.default_rng(seed)

        def glorot(shape):
            fan_in = shape[1] * shape[2]
            fan_out = shape[0] * shape[2]
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-bound, bound, size=shape).astype(self.dtype)

        self.pw1_weights[...] = glorot(self.pw1_weights.shape)
        self.pw1_bias[...] = 0
        self.deform.output_weights[...] = glorot(self.deform.output_weights.shape)
        self.deform.output_bias[...] = 0
        self.deform.offset_weights[...] = glorot(self.deform.offset_weights.shape)
        self.deform.offset_bias[...] = 0
        if scheme == "zero_offset":
            self.deform.offset_weights[...] = 0
        self.pw2_weights[...] = glorot(self.pw2_weights.shape)
        self.pw2_bias[...] = 0
        self.norm.scale[...] = 1
        self.norm.shift[...] = 0
        self.norm.running_mean[...] = 0
        self.norm.running_var[...] = 1

    def forward(self, x: np.ndarray, train: bool = False):
        """Returns (y, cache); cache is None in eval mode."""
        if x.ndim != 3 or x.shape[2] != self.channels:
            raise ShapeError(
                f"x must be [B,T,{self.channels}], got shape {x.shape}")
        y1 = conv1d_forward(x, self.pw1_weights, self.pw1_bias, _PW_GEO)
        gated, (a, sig_b) = glu(y1)
        if self.freeze_offsets:
            offsets = None
            conv_out = conv1d_forward(gated, self.deform.output_weights,
                                      self.deform.output_bias,
                                      self.deform.geometry,
                                      groups=self.deform.conv_groups)
        else:
            offsets = offset_forward(self.deform, gated)
            conv_out = deformable_forward(self.deform, gated, offsets)
        normed, bn_cache = self.norm.forward(conv_out, train)
        activated, sig_s = swish(normed)
        y2 = conv1d_forward(activated, self.pw2_weights, self.pw2_bias, _PW_GEO)
        out = x + y2 if self.residual else y2
        if not train:
            return out, None
        cache = {
            "x": x, "a": a, "sig_b": sig_b, "gated": gated,
            "offsets": offsets, "bn": bn_cache, "normed": normed,
            "sig_s": sig_s, "activated": activated,
        }
        return out, cache

    def backward(self, cache, grad_output: np.ndarray):
        """Chain rule through the whole block; returns (d_x, grads dict)."""
        if cache is None:
            raise RuntimeError("backward requires a cache from a train-mode forward")
        d_act, d_pw2w, d_pw2b = conv1d_backward(
            cache["activated"], self.pw2_weights, _PW_GEO, 1, grad_output)
        normed, sig_s = cache["normed"], cache["sig_s"]
        d_normed = d_act * (sig_s * (1.0 + normed * (1.0 - sig_s)))
        d_conv, d_scale, d_shift = self.norm.backward(d_normed, cache["bn"])
        grads = {
            "pw2.weights": d_pw2w, "pw2.bias": d_pw2b,
            "norm.scale": d_scale, "norm.shift": d_shift,
        }
        if self.freeze_offsets:
            d_gated, d_ow, d_ob = conv1d_backward(
                cache["gated"], self.deform.output_weights,
                self.deform.geometry, self.deform.conv_groups, d_conv)
            grads["deform.output_weights"] = d_ow
            grads["deform.output_bias"] = d_ob
            grads["deform.offset_weights"] = np.zeros_like(
                self.deform.offset_weights)
            grads["deform.offset_bias"] = np.zeros_like(self.deform.offset_bias)
        else:
            dg = deformable_backward(self.deform, cache["gated"],
                                     cache["offsets"], d_conv)
            d_gated = dg["d_x"]
            grads["deform.output_weights"] = dg["d_output_weights"]
            grads["deform.output_bias"] = dg["d_output_bias"]
            grads["deform.offset_weights"] = dg["d_offset_weights"]
            grads["deform.offset_bias"] = dg["d_offset_bias"]
        a, sig_b = cache["a"], cache["sig_b"]
        d_a = d_gated * sig_b
        d_b = d_gated * a * sig_b * (1.0 - sig_b)
        d_y1 = np.concatenate([d_a, d_b], axis=-1)
        d_x, d_pw1w, d_pw1b = conv1d_backward(
            cache["x"], self.pw1_weights, _PW_GEO, 1, d_y1)
        grads["pw1.weights"] = d_pw1w
        grads["pw1.bias"] = d_pw1b
        if self.residual:
            d_x = d_x + grad_output
        return d_x, grads
