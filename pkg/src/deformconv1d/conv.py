"""Regular and deformable 1-D convolution with analytic gradients.

Sequence tensors are laid out ``[batch, time, channels]``. A convolution is a
cross-correlation (no kernel flip) over a position grid

    p0[t, k] = t * stride - padding + k * dilation

with samples outside ``[0, T)`` reading as zero. The deformable variant adds a
predicted fractional offset per output step, deformable group, and kernel tap;
samples at fractional positions are resolved by linear interpolation

    v(p) = x(floor(p)) * (floor(p) - p + 1) + x(floor(p) + 1) * (p - floor(p))

again with out-of-range neighbors reading as zero. With all offsets zero this
reduces exactly (bit for bit) to the regular convolution of the same geometry.

All reductions go through a single einsum contraction with a fixed axis order,
so results are deterministic and independent of worker-thread count; optional
threading only splits the batch dimension of forward passes.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def _check_float(name: str, arr: np.ndarray) -> None:
    if arr.dtype not in _FLOAT_DTYPES:
        raise ShapeError(f"{name} must be float32 or float64, got {arr.dtype}")


@dataclass(frozen=True)
class KernelGeometry:
    """Kernel size, stride, dilation, and per-side zero padding."""

    kernel_size: int
    stride: int = 1
    dilation: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel_size < 1:
            raise ConfigError(f"kernel_size must be >= 1, got {self.kernel_size}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if self.dilation < 1:
            raise ConfigError(f"dilation must be >= 1, got {self.dilation}")
        if self.padding < 0:
            raise ConfigError(f"padding must be >= 0, got {self.padding}")

    def output_length(self, input_length: int) -> int:
        span = self.dilation * (self.kernel_size - 1) + 1
        n = input_length + 2 * self.padding - span
        return max(0, n // self.stride + 1) if n >= 0 else 0

    @staticmethod
    def same_length(kernel_size: int, dilation: int = 1) -> "KernelGeometry":
        """Stride-1 geometry preserving sequence length (odd kernels only)."""
        if kernel_size % 2 == 0:
            raise ConfigError("same-length padding requires an odd kernel size")
        return KernelGeometry(
            kernel_size, stride=1, dilation=dilation,
            padding=dilation * (kernel_size - 1) // 2,
        )


def base_positions(geometry: KernelGeometry, input_length: int) -> np.ndarray:
    """Undeformed sampling grid, shape [T_out, K], float64.

    Entries may be negative or >= input_length; those fall in the implicit
    zero-padding region.
    """
    if input_length < 1:
        raise ShapeError(f"input_length must be >= 1, got {input_length}")
    t_out = geometry.output_length(input_length)
    t = np.arange(t_out, dtype=np.float64) * geometry.stride - geometry.padding
    k = np.arange(geometry.kernel_size, dtype=np.float64) * geometry.dilation
    return t[:, None] + k[None, :]


def interpolate(x_channel, p: float) -> float:
    """Linearly interpolated sample of a 1-D sequence at real position ``p``.

    Samples outside [0, T) read as zero, so the result decays to zero beyond
    the sequence ends instead of clamping.
    """
    x = np.asarray(x_channel, dtype=np.float64)
    t = x.shape[0]
    lo = int(np.floor(p))
    w_hi = p - lo
    v_lo = x[lo] if 0 <= lo < t else 0.0
    v_hi = x[lo + 1] if 0 <= lo + 1 < t else 0.0
    return float(v_lo * (1.0 - w_hi) + v_hi * w_hi)


def _contract_windows(windows: np.ndarray, weights: np.ndarray,
                      bias: np.ndarray, groups: int) -> np.ndarray:
    """Shared contraction: windows [B,T_out,F,K] x weights [N,F/g,K] -> [B,T_out,N].

    Both the regular and the deformable forward feed this exact routine, which
    is what makes the zero-offset reduction bit-exact.
    """
    b, t_out, f, k = windows.shape
    n = weights.shape[0]
    win_g = windows.reshape(b, t_out, groups, f // groups, k)
    w_g = weights.reshape(groups, n // groups, f // groups, k)
    out = np.einsum("btgck,gnck->btgn", win_g, w_g)
    return out.reshape(b, t_out, n) + bias


def _windows_grad(grad_output: np.ndarray, weights: np.ndarray,
                  groups: int) -> np.ndarray:
    """Gradient of the contraction w.r.t. its windows argument."""
    b, t_out, n = grad_output.shape
    f = weights.shape[1] * groups
    k = weights.shape[2]
    g_g = grad_output.reshape(b, t_out, groups, n // groups)
    w_g = weights.reshape(groups, n // groups, f // groups, k)
    d_win = np.einsum("btgn,gnck->btgck", g_g, w_g)
    return d_win.reshape(b, t_out, f, k)


def _weights_grad(grad_output: np.ndarray, windows: np.ndarray,
                  groups: int) -> np.ndarray:
    b, t_out, n = grad_output.shape
    f, k = windows.shape[2], windows.shape[3]
    g_g = grad_output.reshape(b, t_out, groups, n // groups)
    win_g = windows.reshape(b, t_out, groups, f // groups, k)
    d_w = np.einsum("btgn,btgck->gnck", g_g, win_g)
    return d_w.reshape(n, f // groups, k)


def _check_conv_shapes(x, weights, bias, groups):
    if x.ndim != 3:
        raise ShapeError(f"x must be [B,T,F], got shape {x.shape}")
    if weights.ndim != 3:
        raise ShapeError(f"weights must be [N,F/g,K], got shape {weights.shape}")
    n, c_per_g, _ = weights.shape
    f = x.shape[2]
    if groups < 1 or f % groups or n % groups:
        raise ShapeError(
            f"groups={groups} must divide channels in ({f}) and out ({n})")
    if c_per_g != f // groups:
        raise ShapeError(
            f"weights expect {c_per_g * groups} input channels, x has {f}")
    if bias.shape != (n,):
        raise ShapeError(f"bias must be [{n}], got shape {bias.shape}")


def _gather_regular(x: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Integer-grid windows [B,T_out,F,K] with zeros outside [0, T)."""
    t = x.shape[1]
    pos = positions.astype(np.int64)
    valid = (pos >= 0) & (pos < t)
    win = x[:, pos.clip(0, t - 1), :]            # [B, T_out, K, F]
    win = np.where(valid[None, :, :, None], win, x.dtype.type(0))
    return np.ascontiguousarray(win.transpose(0, 1, 3, 2))


def _split_batch(fn, x, threads):
    if threads <= 1 or x.shape[0] <= 1:
        return fn(x)
    # one chunk per example: the partition (hence arithmetic) never depends
    # on the thread count
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(fn, (x[i:i + 1] for i in range(x.shape[0]))))
    return np.concatenate(parts, axis=0)


def conv1d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray,
                   geometry: KernelGeometry, groups: int = 1,
                   threads: int = 1) -> np.ndarray:
    """Grouped 1-D cross-correlation with implicit zero padding.

    x [B,T,F], weights [N,F/g,K], bias [N] -> [B,T_out,N].
    """
    _check_float("x", x)
    _check_conv_shapes(x, weights, bias, groups)
    pos = base_positions(geometry, x.shape[1])

    def run(xb):
        return _contract_windows(_gather_regular(xb, pos), weights, bias, groups)

    return _split_batch(run, x, threads)


def conv1d_backward(x: np.ndarray, weights: np.ndarray,
                    geometry: KernelGeometry, groups: int,
                    grad_output: np.ndarray):
    """Gradients of conv1d_forward; returns (d_x, d_weights, d_bias)."""
    _check_conv_shapes(x, weights, np.zeros(weights.shape[0], x.dtype), groups)
    b, t, f = x.shape
    pos = base_positions(geometry, t).astype(np.int64)
    t_out, k = pos.shape
    if grad_output.shape != (b, t_out, weights.shape[0]):
        raise ShapeError(
            f"grad_output must be [{b},{t_out},{weights.shape[0]}], "
            f"got {grad_output.shape}")

    windows = _gather_regular(x, pos)
    d_bias = np.einsum("btn->n", grad_output)
    d_weights = _weights_grad(grad_output, windows, groups)
    d_win = _windows_grad(grad_output, weights, groups)

    d_x = np.zeros_like(x)
    valid = (pos >= 0) & (pos < t)
    idx_t = np.broadcast_to(pos.clip(0, t - 1)[None, :, None, :], d_win.shape)
    idx_b = np.broadcast_to(
        np.arange(b, dtype=np.int64)[:, None, None, None], d_win.shape)
    idx_f = np.broadcast_to(
        np.arange(f, dtype=np.int64)[None, None, :, None], d_win.shape)
    contrib = np.where(valid[None, :, None, :], d_win, x.dtype.type(0))
    np.add.at(d_x, (idx_b, idx_t, idx_f), contrib)
    return d_x, d_weights, d_bias


@dataclass
class OffsetField:
    """Predicted offsets and the resulting deformed sampling positions.

    Both arrays are [B, T_out, G_d, K]; ``p_prime = p0 + delta_p`` with the
    undeformed grid broadcast over batch and deformable groups.
    """

    delta_p: np.ndarray
    p_prime: np.ndarray


def _init_weight(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    fan_in = shape[1] * shape[2]
    fan_out = shape[0] * shape[2]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class DeformableConvLayer:
    """1-D deformable convolution: offset conv + interpolation + output conv.

    The offset convolution shares the output convolution's geometry and is a
    full (non-grouped) convolution producing ``deformable_groups * K`` offset
    channels; channel slice ``f`` uses the offsets of group
    ``f // (F / deformable_groups)``. ``boundary`` selects how out-of-range
    sampling positions behave: "zeros" (default) reads zeros outside the
    sequence, "clamp" clips positions to [0, T-1].
    """

    geometry: KernelGeometry
    channels_in: int
    channels_out: int
    conv_groups: int = 1
    deformable_groups: int = 1
    lr_mult: float = 1.0
    boundary: str = "zeros"
    dtype: np.dtype = np.float64
    offset_weights: np.ndarray = field(init=False)
    offset_bias: np.ndarray = field(init=False)
    output_weights: np.ndarray = field(init=False)
    output_bias: np.ndarray = field(init=False)
    grads: dict = field(init=False)

    def __post_init__(self):
        f, n, g, gd = (self.channels_in, self.channels_out,
                       self.conv_groups, self.deformable_groups)
        if f % g or n % g:
            raise ConfigError(f"conv_groups={g} must divide F={f} and N={n}")
        if gd < 1 or f % gd:
            raise ConfigError(f"deformable_groups={gd} must divide F={f}")
        if self.lr_mult <= 0:
            raise ConfigError(f"lr_mult must be positive, got {self.lr_mult}")
        if self.boundary not in ("zeros", "clamp"):
            raise ConfigError(f"unknown boundary mode {self.boundary!r}")
        k = self.geometry.kernel_size
        dt = np.dtype(self.dtype)
        self.offset_weights = np.zeros((gd * k, f, k), dtype=dt)
        self.offset_bias = np.zeros(gd * k, dtype=dt)
        self.output_weights = np.zeros((n, f // g, k), dtype=dt)
        self.output_bias = np.zeros(n, dtype=dt)
        self.grads = {name: np.zeros_like(p) for name, p in self.parameters().items()}

    def parameters(self) -> dict:
        return {
            "offset_weights": self.offset_weights,
            "offset_bias": self.offset_bias,
            "output_weights": self.output_weights,
            "output_bias": self.output_bias,
        }

    def offset_parameter_names(self):
        return ("offset_weights", "offset_bias")

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0

    def init_xavier(self, rng: np.random.Generator, zero_offsets: bool) -> None:
        self.output_weights[...] = _init_weight(
            rng, self.output_weights.shape, self.dtype)
        self.output_bias[...] = 0
        if zero_offsets:
            self.offset_weights[...] = 0
        else:
            self.offset_weights[...] = _init_weight(
                rng, self.offset_weights.shape, self.dtype)
        self.offset_bias[...] = 0


def offset_forward(layer: DeformableConvLayer, x: np.ndarray) -> OffsetField:
    """Predict offsets from the input at the undeformed grid positions."""
    if x.shape[2] != layer.channels_in:
        raise ShapeError(
            f"x has {x.shape[2]} channels, layer expects {layer.channels_in}")
    raw = conv1d_forward(x, layer.offset_weights, layer.offset_bias,
                         layer.geometry, groups=1)
    b, t_out, _ = raw.shape
    k = layer.geometry.kernel_size
    delta_p = raw.reshape(b, t_out, layer.deformable_groups, k)
    p0 = base_positions(layer.geometry, x.shape[1]).astype(x.dtype)
    p_prime = p0[None, :, None, :] + delta_p
    return OffsetField(delta_p=delta_p, p_prime=p_prime)


def _gather_deformed(x: np.ndarray, p_prime: np.ndarray, deformable_groups: int,
                     boundary: str):
    """Interpolated windows [B,T_out,F,K] plus the cache backward needs."""
    b, t, f = x.shape
    cpg = f // deformable_groups
    pos = np.repeat(p_prime, cpg, axis=2)        # [B, T_out, F, K]
    if boundary == "clamp":
        # flat beyond the ends: position gradient vanishes where p' leaves
        # [0, T-1); right-limit convention keeps integer p' one-sided
        slope_mask = (pos >= 0.0) & (pos < t - 1.0)
        pos_eff = np.clip(pos, 0.0, np.array(t - 1.0, dtype=x.dtype))
    else:
        slope_mask = np.ones(pos.shape, dtype=bool)
        pos_eff = pos

    lo = np.floor(pos_eff).astype(np.int64)
    w_hi = (pos_eff - lo).astype(x.dtype)
    w_lo = np.asarray(1.0 - w_hi, dtype=x.dtype)

    idx_b = np.broadcast_to(
        np.arange(b, dtype=np.int64)[:, None, None, None], pos.shape)
    idx_f = np.broadcast_to(
        np.arange(f, dtype=np.int64)[None, None, :, None], pos.shape)
    valid_lo = (lo >= 0) & (lo < t)
    valid_hi = (lo + 1 >= 0) & (lo + 1 < t)
    zero = x.dtype.type(0)
    v_lo = np.where(valid_lo, x[idx_b, lo.clip(0, t - 1), idx_f], zero)
    v_hi = np.where(valid_hi, x[idx_b, (lo + 1).clip(0, t - 1), idx_f], zero)
    values = v_lo * w_lo + v_hi * w_hi
    cache = (lo, w_lo, w_hi, valid_lo, valid_hi, v_lo, v_hi, slope_mask,
             idx_b, idx_f)
    return values, cache


def deformable_forward(layer: DeformableConvLayer, x: np.ndarray,
                       offsets: OffsetField, threads: int = 1) -> np.ndarray:
    """Output convolution applied to the input at the deformed positions."""
    _check_float("x", x)
    _check_conv_shapes(x, layer.output_weights, layer.output_bias,
                       layer.conv_groups)
    t_out = layer.geometry.output_length(x.shape[1])
    want = (x.shape[0], t_out, layer.deformable_groups,
            layer.geometry.kernel_size)
    if offsets.p_prime.shape != want:
        raise ShapeError(
            f"offsets.p_prime must be {want}, got {offsets.p_prime.shape}")

    def run_one(i):
        win, _ = _gather_deformed(x[i:i + 1], offsets.p_prime[i:i + 1],
                                  layer.deformable_groups, layer.boundary)
        return _contract_windows(win, layer.output_weights, layer.output_bias,
                                 layer.conv_groups)

    if threads > 1 and x.shape[0] > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run_one, range(x.shape[0])))
        return np.concatenate(parts, axis=0)
    win, _ = _gather_deformed(x, offsets.p_prime, layer.deformable_groups,
                              layer.boundary)
    return _contract_windows(win, layer.output_weights, layer.output_bias,
                             layer.conv_groups)


def deformable_backward(layer: DeformableConvLayer, x: np.ndarray,
                        offsets: OffsetField, grad_output: np.ndarray) -> dict:
    """Exact chain-rule gradients of the deformable convolution.

    Returns d_x, d_output_weights, d_output_bias, d_delta_p, plus the offset
    branch's d_offset_weights and d_offset_bias obtained by pushing d_delta_p
    back through the offset convolution. d_x sums the direct (interpolation)
    and offset-branch contributions.
    """
    b, t, f = x.shape
    gd = layer.deformable_groups
    cpg = f // gd
    values, cache = _gather_deformed(x, offsets.p_prime, gd, layer.boundary)
    (lo, w_lo, w_hi, valid_lo, valid_hi, v_lo, v_hi, slope_mask,
     idx_b, idx_f) = cache

    d_bias = np.einsum("btn->n", grad_output)
    d_weights = _weights_grad(grad_output, values, layer.conv_groups)
    d_win = _windows_grad(grad_output, layer.output_weights, layer.conv_groups)

    zero = x.dtype.type(0)
    d_x = np.zeros_like(x)
    np.add.at(d_x, (idx_b, lo.clip(0, t - 1), idx_f),
              np.where(valid_lo, d_win * w_lo, zero))
    np.add.at(d_x, (idx_b, (lo + 1).clip(0, t - 1), idx_f),
              np.where(valid_hi, d_win * w_hi, zero))

    slope = np.where(slope_mask, v_hi - v_lo, zero)
    d_pos = d_win * slope                         # [B, T_out, F, K]
    d_delta_p = d_pos.reshape(b, d_pos.shape[1], gd, cpg, -1).sum(axis=3)

    d_raw = d_delta_p.reshape(b, d_delta_p.shape[1], -1)
    d_x_offsets, d_off_w, d_off_b = conv1d_backward(
        x, layer.offset_weights, layer.geometry, 1, d_raw)
    d_x += d_x_offsets

    return {
        "d_x": d_x,
        "d_output_weights": d_weights,
        "d_output_bias": d_bias,
        "d_delta_p": d_delta_p,
        "d_offset_weights": d_off_w,
        "d_offset_bias": d_off_b,
    }


def accumulate_layer_grads(layer: DeformableConvLayer, grads: dict) -> None:
    """Add a backward result into the layer's gradient buffers."""
    layer.grads["output_weights"] += grads["d_output_weights"]
    layer.grads["output_bias"] += grads["d_output_bias"]
    layer.grads["offset_weights"] += grads["d_offset_weights"]
    layer.grads["offset_bias"] += grads["d_offset_bias"]
