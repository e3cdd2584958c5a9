"""Forward and backward passes for the network's operations.

Convolution and its transpose are computed by flattening sliding windows
into a column matrix and multiplying (im2col + GEMM).  All accumulation
happens in float64 regardless of the storage dtype; outputs are cast back
to the input dtype, so float32 tensors get stable sums and a float64 input
(used by the gradient-check harness) stays float64 end to end.

Gradients are hand-derived adjoints of the forward definitions:

* conv backward scatters ``W^T @ d_out`` columns back onto the padded input;
* deconv backward gathers windows of the (re-embedded) output gradient,
  which is itself a strided convolution.

The transposed convolution here is the exact adjoint of the convolution
with identical geometry: a conv weight block [C_out, C_in, k1, k2, k3]
reinterpreted as [C_in', C_out', k1, k2, k3] (same memory) satisfies
<conv(x), y> == <x, deconv(y)> for zero bias.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import NonFiniteError, Tensor


def _as_triple(v, name: str) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        t = (int(v),) * 3
    else:
        t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"{name} must be an int or a 3-tuple, got {v!r}")
    return t


@dataclass(frozen=True)
class ConvGeometry:
    """Channel counts, kernel extents, per-axis stride and zero-padding.

    ``stride`` and ``padding`` accept a single int (isotropic) or a 3-tuple
    ordered (depth, height, width), like ``kernel``.
    """

    in_channels: int
    out_channels: int
    kernel: tuple[int, int, int]
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        object.__setattr__(self, "kernel", _as_triple(self.kernel, "kernel"))
        object.__setattr__(self, "stride", _as_triple(self.stride, "stride"))
        object.__setattr__(self, "padding", _as_triple(self.padding, "padding"))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if min(self.kernel) < 1:
            raise ValueError(f"kernel extents must be >= 1, got {self.kernel}")
        if min(self.stride) < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if min(self.padding) < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")

    def conv_output_shape(self, spatial: tuple[int, int, int]) -> tuple[int, int, int]:
        out = []
        for ax, (n, k, s, p) in enumerate(
            zip(spatial, self.kernel, self.stride, self.padding)
        ):
            o = (n + 2 * p - k) // s + 1
            if o < 1:
                raise ValueError(
                    f"conv output extent {o} on axis {ax} "
                    f"(input {n}, kernel {k}, stride {s}, padding {p})"
                )
            out.append(o)
        return tuple(out)

    def deconv_output_shape(self, spatial: tuple[int, int, int]) -> tuple[int, int, int]:
        out = []
        for ax, (n, k, s, p) in enumerate(
            zip(spatial, self.kernel, self.stride, self.padding)
        ):
            o = (n - 1) * s + k - 2 * p
            if o < 1:
                raise ValueError(
                    f"deconv output extent {o} on axis {ax} "
                    f"(input {n}, kernel {k}, stride {s}, padding {p})"
                )
            out.append(o)
        return tuple(out)


@dataclass
class LayerGrads:
    """Gradients of one layer: same shapes as weights, bias, and input."""

    d_weights: Tensor
    d_bias: Tensor
    d_input: Tensor


def _pad3(x: np.ndarray, padding: tuple[int, int, int]) -> np.ndarray:
    if padding == (0, 0, 0):
        return x
    p1, p2, p3 = padding
    return np.pad(x, ((0, 0), (p1, p1), (p2, p2), (p3, p3)))


def _gather_columns(
    padded: np.ndarray,
    kernel: tuple[int, int, int],
    stride: tuple[int, int, int],
    n_positions: tuple[int, int, int],
) -> np.ndarray:
    """Column matrix [C*k1*k2*k3, N] of strided windows, in float64.

    Column order is (c, i, j, k) to match a reshaped weight block; position
    order is row-major over the output grid.
    """
    c = padded.shape[0]
    win = sliding_window_view(padded, kernel, axis=(1, 2, 3))
    win = win[:, :: stride[0], :: stride[1], :: stride[2]]
    win = win[:, : n_positions[0], : n_positions[1], : n_positions[2]]
    # [C, D', H', W', k1, k2, k3] -> [C, k1, k2, k3, D', H', W']
    # order='C' materializes the gather in one pass so the reshape is free
    win = win.transpose(0, 4, 5, 6, 1, 2, 3).astype(np.float64, order="C")
    n = n_positions[0] * n_positions[1] * n_positions[2]
    return win.reshape(c * kernel[0] * kernel[1] * kernel[2], n)


def _scatter_columns(
    cols: np.ndarray,
    channels: int,
    padded_spatial: tuple[int, int, int],
    kernel: tuple[int, int, int],
    stride: tuple[int, int, int],
    n_positions: tuple[int, int, int],
) -> np.ndarray:
    """Adjoint of _gather_columns: accumulate columns back onto a zero array."""
    k1, k2, k3 = kernel
    s1, s2, s3 = stride
    d1, d2, d3 = n_positions
    grid = cols.reshape(channels, k1, k2, k3, d1, d2, d3)
    out = np.zeros((channels,) + padded_spatial, dtype=np.float64)
    for i, j, k in product(range(k1), range(k2), range(k3)):
        out[
            :,
            i : i + s1 * d1 : s1,
            j : j + s2 * d2 : s2,
            k : k + s3 * d3 : s3,
        ] += grid[:, i, j, k]
    return out


def _check_conv_args(x, weights, bias, geom: ConvGeometry, transposed: bool) -> None:
    if x.ndim != 4:
        raise ValueError(f"input must be [C, D, H, W], got shape {x.shape}")
    if transposed:
        expect_w = (geom.in_channels, geom.out_channels) + geom.kernel
    else:
        expect_w = (geom.out_channels, geom.in_channels) + geom.kernel
    if weights.shape != expect_w:
        raise ValueError(f"weights shape {weights.shape} != expected {expect_w}")
    if x.shape[0] != geom.in_channels:
        raise ValueError(f"input has {x.shape[0]} channels, geometry says {geom.in_channels}")
    if bias is not None and bias.shape != (geom.out_channels,):
        raise ValueError(f"bias shape {bias.shape} != ({geom.out_channels},)")


def _conv3d_raw(x, weights, bias, geom: ConvGeometry) -> np.ndarray:
    _check_conv_args(x, weights, bias, geom, transposed=False)
    out_sp = geom.conv_output_shape(x.shape[1:])
    cols = _gather_columns(_pad3(x, geom.padding), geom.kernel, geom.stride, out_sp)
    wmat = weights.reshape(geom.out_channels, -1).astype(np.float64)
    out = wmat @ cols
    if bias is not None:
        out += bias.astype(np.float64)[:, None]
    return out.reshape((geom.out_channels,) + out_sp).astype(x.dtype)


def _conv3d_backward_raw(x, weights, geom: ConvGeometry, d_out):
    _check_conv_args(x, weights, None, geom, transposed=False)
    out_sp = geom.conv_output_shape(x.shape[1:])
    if d_out.shape != (geom.out_channels,) + out_sp:
        raise ValueError(
            f"d_output shape {d_out.shape} != forward output {(geom.out_channels,) + out_sp}"
        )
    padded = _pad3(x, geom.padding)
    cols = _gather_columns(padded, geom.kernel, geom.stride, out_sp)
    g = d_out.reshape(geom.out_channels, -1).astype(np.float64)
    d_b = g.sum(axis=1)
    d_w = g @ cols.T
    d_cols = weights.reshape(geom.out_channels, -1).astype(np.float64).T @ g
    d_pad = _scatter_columns(
        d_cols, geom.in_channels, padded.shape[1:], geom.kernel, geom.stride, out_sp
    )
    p1, p2, p3 = geom.padding
    d1, d2, d3 = x.shape[1:]
    d_x = d_pad[:, p1 : p1 + d1, p2 : p2 + d2, p3 : p3 + d3]
    return (
        d_w.reshape(weights.shape).astype(x.dtype),
        d_b.astype(x.dtype),
        d_x.astype(x.dtype),
    )


def _deconv3d_raw(x, weights, bias, geom: ConvGeometry) -> np.ndarray:
    _check_conv_args(x, weights, bias, geom, transposed=True)
    out_sp = geom.deconv_output_shape(x.shape[1:])
    k1, k2, k3 = geom.kernel
    s1, s2, s3 = geom.stride
    in_sp = x.shape[1:]
    full_sp = tuple((n - 1) * s + k for n, s, k in zip(in_sp, geom.stride, geom.kernel))
    xmat = x.reshape(geom.in_channels, -1).astype(np.float64)
    wmat = weights.reshape(geom.in_channels, -1).astype(np.float64)
    deposits = (wmat.T @ xmat).reshape((geom.out_channels, k1, k2, k3) + in_sp)
    full = np.zeros((geom.out_channels,) + full_sp, dtype=np.float64)
    for i, j, k in product(range(k1), range(k2), range(k3)):
        full[
            :,
            i : i + s1 * in_sp[0] : s1,
            j : j + s2 * in_sp[1] : s2,
            k : k + s3 * in_sp[2] : s3,
        ] += deposits[:, i, j, k]
    p1, p2, p3 = geom.padding
    out = full[:, p1 : p1 + out_sp[0], p2 : p2 + out_sp[1], p3 : p3 + out_sp[2]]
    if bias is not None:
        out = out + bias.astype(np.float64)[:, None, None, None]
    return out.astype(x.dtype)


def _deconv3d_backward_raw(x, weights, geom: ConvGeometry, d_out):
    _check_conv_args(x, weights, None, geom, transposed=True)
    out_sp = geom.deconv_output_shape(x.shape[1:])
    if d_out.shape != (geom.out_channels,) + out_sp:
        raise ValueError(
            f"d_output shape {d_out.shape} != forward output {(geom.out_channels,) + out_sp}"
        )
    in_sp = x.shape[1:]
    full_sp = tuple((n - 1) * s + k for n, s, k in zip(in_sp, geom.stride, geom.kernel))
    p1, p2, p3 = geom.padding
    d_full = np.zeros((geom.out_channels,) + full_sp, dtype=np.float64)
    d_full[:, p1 : p1 + out_sp[0], p2 : p2 + out_sp[1], p3 : p3 + out_sp[2]] = d_out
    d_b = d_out.reshape(geom.out_channels, -1).astype(np.float64).sum(axis=1)
    # windows of d_full at each deposit site: exactly one per input position
    cols = _gather_columns(d_full, geom.kernel, geom.stride, in_sp)
    xmat = x.reshape(geom.in_channels, -1).astype(np.float64)
    d_w = xmat @ cols.T
    d_x = weights.reshape(geom.in_channels, -1).astype(np.float64) @ cols
    return (
        d_w.reshape(weights.shape).astype(x.dtype),
        d_b.astype(x.dtype),
        d_x.reshape(x.shape).astype(x.dtype),
    )


# ---------------------------------------------------------------------------
# Batched twins of the raw ops, used by the training loop.
#
# Arrays are float64 in channel-major batch layout [C, B, D, H, W] so that a
# whole mini-batch shares one GEMM per layer per direction.  Each function
# computes exactly the per-sample math above; a parity test holds the two
# paths together.
# ---------------------------------------------------------------------------


def _pad3_b(x: np.ndarray, padding: tuple[int, int, int]) -> np.ndarray:
    if padding == (0, 0, 0):
        return x
    p1, p2, p3 = padding
    return np.pad(x, ((0, 0), (0, 0), (p1, p1), (p2, p2), (p3, p3)))


def _gather_columns_b(padded, kernel, stride, n_positions) -> np.ndarray:
    """[C, B, Dp, Hp, Wp] -> columns [C*k1*k2*k3, B*N], float64."""
    c, b = padded.shape[:2]
    win = sliding_window_view(padded, kernel, axis=(2, 3, 4))
    win = win[:, :, :: stride[0], :: stride[1], :: stride[2]]
    win = win[:, :, : n_positions[0], : n_positions[1], : n_positions[2]]
    win = win.transpose(0, 5, 6, 7, 1, 2, 3, 4).astype(np.float64, order="C")
    n = b * n_positions[0] * n_positions[1] * n_positions[2]
    return win.reshape(c * kernel[0] * kernel[1] * kernel[2], n)


def _scatter_columns_b(cols, channels, batch, padded_spatial, kernel, stride, n_positions):
    k1, k2, k3 = kernel
    s1, s2, s3 = stride
    d1, d2, d3 = n_positions
    grid = cols.reshape(channels, k1, k2, k3, batch, d1, d2, d3)
    out = np.zeros((channels, batch) + padded_spatial, dtype=np.float64)
    for i, j, k in product(range(k1), range(k2), range(k3)):
        out[
            :,
            :,
            i : i + s1 * d1 : s1,
            j : j + s2 * d2 : s2,
            k : k + s3 * d3 : s3,
        ] += grid[:, i, j, k]
    return out


# few-output-channel layers (the final smoothing conv) skip im2col: the
# column matrix would be k1*k2*k3 times the activation size at the upsampled
# resolution, far more traffic than accumulating one GEMM per kernel tap
_DIRECT_MAX_COUT = 4


def _tap_slices(i, j, k, stride, out_sp):
    s1, s2, s3 = stride
    return (
        slice(i, i + s1 * out_sp[0], s1),
        slice(j, j + s2 * out_sp[1], s2),
        slice(k, k + s3 * out_sp[2], s3),
    )


def _conv_fwd_b(xs, w64, b64, geom: ConvGeometry):
    """Returns (out [C_out, B, *out_sp], cache-for-backward)."""
    out_sp = geom.conv_output_shape(xs.shape[2:])
    batch = xs.shape[1]
    padded = _pad3_b(xs, geom.padding)
    if geom.out_channels <= _DIRECT_MAX_COUT:
        out = np.zeros((geom.out_channels, batch) + out_sp)
        for i, j, k in product(*(range(kk) for kk in geom.kernel)):
            z1, z2, z3 = _tap_slices(i, j, k, geom.stride, out_sp)
            tap = np.ascontiguousarray(padded[:, :, z1, z2, z3]).reshape(
                geom.in_channels, -1
            )
            out += (w64[:, :, i, j, k] @ tap).reshape(out.shape)
        out += b64[:, None, None, None, None]
        return out, ("padded", padded)
    cols = _gather_columns_b(padded, geom.kernel, geom.stride, out_sp)
    out = w64.reshape(geom.out_channels, -1) @ cols
    out += b64[:, None]
    return out.reshape((geom.out_channels, batch) + out_sp), ("cols", cols)


def _conv_bwd_b(cache, w64, geom: ConvGeometry, g, in_spatial, need_dx: bool):
    kind, data = cache
    gm = g.reshape(geom.out_channels, -1)
    d_b = gm.sum(axis=1)
    batch = g.shape[1]
    out_sp = g.shape[2:]
    p1, p2, p3 = geom.padding
    d1, d2, d3 = in_spatial
    if kind == "padded":
        padded = data
        d_w = np.empty((geom.out_channels, geom.in_channels) + geom.kernel)
        d_pad = np.zeros_like(padded) if need_dx else None
        for i, j, k in product(*(range(kk) for kk in geom.kernel)):
            z1, z2, z3 = _tap_slices(i, j, k, geom.stride, out_sp)
            tap = np.ascontiguousarray(padded[:, :, z1, z2, z3]).reshape(
                geom.in_channels, -1
            )
            d_w[:, :, i, j, k] = gm @ tap.T
            if need_dx:
                d_pad[:, :, z1, z2, z3] += (w64[:, :, i, j, k].T @ gm).reshape(
                    (geom.in_channels, batch) + out_sp
                )
        d_xs = (
            d_pad[:, :, p1 : p1 + d1, p2 : p2 + d2, p3 : p3 + d3] if need_dx else None
        )
        return d_w, d_b, d_xs
    cols = data
    d_w = (gm @ cols.T).reshape((geom.out_channels, geom.in_channels) + geom.kernel)
    d_xs = None
    if need_dx:
        d_cols = w64.reshape(geom.out_channels, -1).T @ gm
        pad_sp = tuple(n + 2 * p for n, p in zip(in_spatial, geom.padding))
        d_pad = _scatter_columns_b(
            d_cols, geom.in_channels, batch, pad_sp, geom.kernel, geom.stride, out_sp
        )
        d_xs = d_pad[:, :, p1 : p1 + d1, p2 : p2 + d2, p3 : p3 + d3]
    return d_w, d_b, d_xs


def _deconv_fwd_b(xs, w64, b64, geom: ConvGeometry):
    out_sp = geom.deconv_output_shape(xs.shape[2:])
    k1, k2, k3 = geom.kernel
    s1, s2, s3 = geom.stride
    batch = xs.shape[1]
    in_sp = xs.shape[2:]
    full_sp = tuple((n - 1) * s + k for n, s, k in zip(in_sp, geom.stride, geom.kernel))
    deposits = (w64.reshape(geom.in_channels, -1).T @ xs.reshape(geom.in_channels, -1))
    deposits = deposits.reshape((geom.out_channels, k1, k2, k3, batch) + in_sp)
    full = np.zeros((geom.out_channels, batch) + full_sp, dtype=np.float64)
    for i, j, k in product(range(k1), range(k2), range(k3)):
        full[
            :,
            :,
            i : i + s1 * in_sp[0] : s1,
            j : j + s2 * in_sp[1] : s2,
            k : k + s3 * in_sp[2] : s3,
        ] += deposits[:, i, j, k]
    p1, p2, p3 = geom.padding
    out = full[:, :, p1 : p1 + out_sp[0], p2 : p2 + out_sp[1], p3 : p3 + out_sp[2]]
    return out + b64[:, None, None, None, None]


def _deconv_bwd_b(xs, w64, geom: ConvGeometry, g, need_dx: bool):
    batch = xs.shape[1]
    in_sp = xs.shape[2:]
    out_sp = g.shape[2:]
    full_sp = tuple((n - 1) * s + k for n, s, k in zip(in_sp, geom.stride, geom.kernel))
    p1, p2, p3 = geom.padding
    d_full = np.zeros((geom.out_channels, batch) + full_sp, dtype=np.float64)
    d_full[:, :, p1 : p1 + out_sp[0], p2 : p2 + out_sp[1], p3 : p3 + out_sp[2]] = g
    d_b = g.reshape(geom.out_channels, -1).sum(axis=1)
    cols_d = _gather_columns_b(d_full, geom.kernel, geom.stride, in_sp)
    d_w = (xs.reshape(geom.in_channels, -1) @ cols_d.T).reshape(
        (geom.in_channels, geom.out_channels) + geom.kernel
    )
    d_xs = None
    if need_dx:
        d_xs = (w64.reshape(geom.in_channels, -1) @ cols_d).reshape(xs.shape)
    return d_w, d_b, d_xs


def conv3d_forward(x: Tensor, weights: Tensor, bias: Tensor, geom: ConvGeometry) -> Tensor:
    """out[co, n, h, w] = bias[co] + sum_{ci,i,j,k} W[co,ci,i,j,k] *
    padded_x[ci, s1*n + i, s2*h + j, s3*w + k]."""
    return Tensor(_conv3d_raw(x.data, weights.data, bias.data, geom))


def conv3d_backward(
    x: Tensor, weights: Tensor, geom: ConvGeometry, d_output: Tensor
) -> LayerGrads:
    d_w, d_b, d_x = _conv3d_backward_raw(x.data, weights.data, geom, d_output.data)
    return LayerGrads(Tensor(d_w), Tensor(d_b), Tensor(d_x))


def deconv3d_forward(x: Tensor, weights: Tensor, bias: Tensor, geom: ConvGeometry) -> Tensor:
    """Transposed convolution: input voxel (n, h, w) deposits value * W into
    the output block starting at (s1*n - p1, s2*h - p2, s3*w - p3); overlaps sum."""
    return Tensor(_deconv3d_raw(x.data, weights.data, bias.data, geom))


def deconv3d_backward(
    x: Tensor, weights: Tensor, geom: ConvGeometry, d_output: Tensor
) -> LayerGrads:
    d_w, d_b, d_x = _deconv3d_backward_raw(x.data, weights.data, geom, d_output.data)
    return LayerGrads(Tensor(d_w), Tensor(d_b), Tensor(d_x))


def relu_forward(x: Tensor) -> Tensor:
    return Tensor(np.maximum(x.data, 0))


def relu_backward(x: Tensor, d_out: Tensor) -> Tensor:
    """Subgradient at 0 is 0: gradient passes only where x > 0."""
    if x.shape != d_out.shape:
        raise ValueError(f"relu_backward: shape mismatch {x.shape} vs {d_out.shape}")
    return Tensor(np.where(x.data > 0, d_out.data, 0))


def _mse_raw(pred, target, num_samples):
    diff = pred.astype(np.float64) - target.astype(np.float64)
    denom = float(pred.size if num_samples is None else num_samples)
    loss = float(np.sum(diff * diff) / denom)
    return loss, ((2.0 / denom) * diff).astype(pred.dtype)


def mse_loss(pred: Tensor, target: Tensor, num_samples: int | None = None):
    """Squared-error loss and its gradient w.r.t. pred.

    With ``num_samples`` given, loss = (1/num_samples) * sum(diff^2): the
    per-sample squared error summed over pixels and averaged over samples.
    With ``num_samples=None`` (the training default), the divisor is the
    total element count, i.e. the mean squared error over all elements,
    which keeps gradient magnitudes independent of patch size.
    """
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    if num_samples is not None and num_samples < 1:
        raise ValueError(f"num_samples must be >= 1, got {num_samples}")
    loss, d = _mse_raw(pred.data, target.data, num_samples)
    return loss, Tensor(d)


def sgd_step(params, grads, lr: float) -> None:
    """In-place w -= lr*dw, b -= lr*db over every layer of ``params``.

    ``params`` is a ModelParams-like object exposing ``layers`` with
    ``weights`` and ``bias`` tensors; ``grads`` is the matching LayerGrads
    sequence.  Non-finite gradients abort with the offending layer named.
    """
    if not np.isfinite(lr) or lr <= 0:
        raise ValueError(f"learning rate must be finite and > 0, got {lr}")
    layers = list(params.layers)
    grads = list(grads)
    if len(layers) != len(grads):
        raise ValueError(f"{len(grads)} gradient sets for {len(layers)} layers")
    f32lr = np.float32(lr)
    for idx, (layer, g) in enumerate(zip(layers, grads)):
        if g.d_weights.shape != layer.weights.shape or g.d_bias.shape != layer.bias.shape:
            raise ValueError(
                f"layer {idx}: gradient shapes {g.d_weights.shape}/{g.d_bias.shape} "
                f"do not match parameters {layer.weights.shape}/{layer.bias.shape}"
            )
        if not (np.isfinite(g.d_weights.data).all() and np.isfinite(g.d_bias.data).all()):
            raise NonFiniteError(f"non-finite gradient in layer {idx}")
        w, b = layer.weights.data, layer.bias.data
        np.subtract(w, f32lr * g.d_weights.data, out=w)
        np.subtract(b, f32lr * g.d_bias.data, out=b)
