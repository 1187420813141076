"""Minimal dense-tensor kernel: NCHW float32 tensors and the conv/pool/pointwise
primitives the segmentation net is built from.

Every operation is a pure function. The fast convolution (`conv2d`) and the
reference oracle (`conv2d_naive`) accumulate in float32 in the same fixed
order -- bias first, then taps left-to-right over (ky, kx, ci) -- so the two
are bit-identical on any input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor extents do not satisfy an operation's contract."""


@dataclass(frozen=True)
class Tensor:
    """Dense 4-D array in NCHW layout, row-major contiguous float32."""

    shape: tuple[int, int, int, int]
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        object.__setattr__(self, "shape", shape)
        if len(shape) != 4:
            raise ShapeError(f"tensor rank must be 4, got {len(shape)}")
        if any(s < 1 for s in shape):
            raise ShapeError(f"all extents must be >= 1, got {shape}")
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.size != int(np.prod(shape)):
            raise ShapeError(
                f"data length {data.size} does not match shape {shape}"
            )
        object.__setattr__(self, "data", data.reshape(shape))

    @classmethod
    def from_array(cls, arr) -> "Tensor":
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim != 4:
            raise ShapeError(f"expected 4-D array, got ndim={arr.ndim}")
        return cls(shape=tuple(arr.shape), data=arr)

    @classmethod
    def zeros(cls, shape) -> "Tensor":
        shape = tuple(int(s) for s in shape)
        return cls(shape=shape, data=np.zeros(shape, dtype=np.float32))

    @property
    def n(self) -> int:
        return self.shape[0]

    @property
    def c(self) -> int:
        return self.shape[1]

    @property
    def h(self) -> int:
        return self.shape[2]

    @property
    def w(self) -> int:
        return self.shape[3]

    def require_finite(self) -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise ValueError("tensor contains non-finite values")
        return self


@dataclass(frozen=True)
class ConvParams:
    """Kernel, bias and geometry of a 2-D convolution.

    kernel: (out_ch, in_ch // groups, kH, kW), square kernels only.
    bias:   (out_ch,) float32.
    """

    kernel: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1

    def __post_init__(self):
        kernel = np.ascontiguousarray(self.kernel, dtype=np.float32)
        bias = np.ascontiguousarray(self.bias, dtype=np.float32)
        object.__setattr__(self, "kernel", kernel)
        object.__setattr__(self, "bias", bias)
        if kernel.ndim != 4:
            raise ShapeError(f"kernel rank must be 4, got {kernel.ndim}")
        out_ch, _, kh, kw = kernel.shape
        if kh != kw:
            raise ShapeError(f"kernels must be square, got {kh}x{kw}")
        if bias.shape != (out_ch,):
            raise ShapeError(
                f"bias length {bias.shape} does not match out_ch={out_ch}"
            )
        if self.stride < 1 or self.dilation < 1 or self.groups < 1:
            raise ShapeError("stride, dilation and groups must be >= 1")
        if self.padding < 0:
            raise ShapeError("padding must be >= 0")
        if out_ch % self.groups != 0:
            raise ShapeError(
                f"out_ch={out_ch} not divisible by groups={self.groups}"
            )

    @property
    def out_ch(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_ch(self) -> int:
        return self.kernel.shape[1] * self.groups

    @property
    def ksize(self) -> int:
        return self.kernel.shape[2]


def conv_output_extent(extent: int, ksize: int, stride: int, padding: int,
                       dilation: int) -> int:
    return (extent + 2 * padding - dilation * (ksize - 1) - 1) // stride + 1


def _check_conv_shapes(x: Tensor, p: ConvParams) -> tuple[int, int]:
    if x.c != p.in_ch:
        raise ShapeError(
            f"input channels: got {x.c}, kernel expects {p.in_ch}"
        )
    if x.c % p.groups != 0:
        raise ShapeError(
            f"input channels {x.c} not divisible by groups={p.groups}"
        )
    h_out = conv_output_extent(x.h, p.ksize, p.stride, p.padding, p.dilation)
    w_out = conv_output_extent(x.w, p.ksize, p.stride, p.padding, p.dilation)
    if h_out < 1 or w_out < 1:
        raise ShapeError(
            f"output extent {h_out}x{w_out} < 1 for input {x.h}x{x.w}"
        )
    return h_out, w_out


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Grouped 2-D convolution with zero padding.

    Accumulates in float32: the accumulator starts at the bias and taps are
    added left-to-right over (ky, kx, ci).  Bit-identical to `conv2d_naive`.
    """
    h_out, w_out = _check_conv_shapes(x, p)
    n, cin = x.n, x.c
    cout, icg, k = p.out_ch, p.kernel.shape[1], p.ksize
    ocg = cout // p.groups
    pad = p.padding

    xp = x.data
    if pad > 0:
        xp = np.pad(xp, ((0, 0), (0, 0), (pad, pad), (pad, pad)))

    out = np.empty((n, cout, h_out, w_out), dtype=np.float32)
    out[:] = p.bias[None, :, None, None]
    depthwise = p.groups == cin and ocg == 1 and icg == 1
    tmp = np.empty((n, cout if depthwise else ocg, h_out, w_out), dtype=np.float32)

    # The (ky, kx) tap loop is outermost, channels inner; per output element
    # the accumulation order is still (ky, kx, ci) and matches conv2d_naive.
    for ky in range(k):
        y0 = ky * p.dilation
        for kx in range(k):
            x0 = kx * p.dilation
            xs = xp[:, :,
                    y0:y0 + (h_out - 1) * p.stride + 1:p.stride,
                    x0:x0 + (w_out - 1) * p.stride + 1:p.stride]
            if depthwise:
                np.multiply(p.kernel[:, 0, ky, kx][None, :, None, None], xs,
                            out=tmp)
                out += tmp
                continue
            xs = np.ascontiguousarray(xs)
            for g in range(p.groups):
                acc = out[:, g * ocg:(g + 1) * ocg]
                wg = p.kernel[g * ocg:(g + 1) * ocg]
                for cil in range(icg):
                    np.multiply(wg[:, cil, ky, kx][None, :, None, None],
                                xs[:, g * icg + cil][:, None], out=tmp)
                    acc += tmp
    return Tensor.from_array(out)


def conv2d_naive(x: Tensor, p: ConvParams) -> Tensor:
    """Reference convolution: direct nested loops, no vectorization.

    Same contract and same float32 accumulation order as `conv2d`; padded
    positions contribute explicit +0.0 taps so results match bit for bit.
    """
    h_out, w_out = _check_conv_shapes(x, p)
    n = x.n
    cout, icg, k = p.out_ch, p.kernel.shape[1], p.ksize
    ocg = cout // p.groups
    zero = np.float32(0.0)

    out = np.empty((n, cout, h_out, w_out), dtype=np.float32)
    for bn in range(n):
        for co in range(cout):
            g = co // ocg
            for oy in range(h_out):
                for ox in range(w_out):
                    acc = np.float32(p.bias[co])
                    for ky in range(k):
                        iy = oy * p.stride + ky * p.dilation - p.padding
                        for kx in range(k):
                            ix = ox * p.stride + kx * p.dilation - p.padding
                            inside = 0 <= iy < x.h and 0 <= ix < x.w
                            for cil in range(icg):
                                ci = g * icg + cil
                                xv = x.data[bn, ci, iy, ix] if inside else zero
                                acc = acc + p.kernel[co, cil, ky, kx] * xv
                    out[bn, co, oy, ox] = acc
    return Tensor.from_array(out)


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Double H and W; each 2x2 output block replicates one source pixel."""
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return Tensor.from_array(out)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel -> (N, C, 1, 1)."""
    out = x.data.mean(axis=(2, 3), keepdims=True, dtype=np.float64)
    return Tensor.from_array(out.astype(np.float32))


def relu(x: Tensor) -> Tensor:
    return Tensor.from_array(np.maximum(x.data, np.float32(0.0)))


def sigmoid(x: Tensor) -> Tensor:
    """Elementwise logistic 1 / (1 + exp(-x))."""
    return Tensor.from_array(_sigmoid_stable(x.data))


def _sigmoid_stable(a: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    a64 = a.astype(np.float64)
    out = np.empty_like(a64)
    pos = a64 >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a64[pos]))
    ex = np.exp(a64[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out.astype(np.float32)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if (a.n, a.h, a.w) != (b.n, b.h, b.w):
        raise ShapeError(
            f"concat needs equal N/H/W, got {a.shape} vs {b.shape}"
        )
    return Tensor.from_array(np.concatenate([a.data, b.data], axis=1))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} vs {b.shape}")
    return Tensor.from_array(a.data + b.data)
