"""Tensor primitives: hand-computed cases plus the fast-vs-naive conv oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from picoseg.tensorkit import (
    ConvParams,
    ShapeError,
    Tensor,
    add,
    concat_channels,
    conv2d,
    conv2d_naive,
    conv_output_extent,
    global_avg_pool,
    relu,
    sigmoid,
    upsample_nearest2x,
)


def t(arr):
    return Tensor.from_array(np.asarray(arr, dtype=np.float32))


# ---------------------------------------------------------------- Tensor type

def test_tensor_rejects_wrong_rank():
    with pytest.raises(ShapeError):
        Tensor(shape=(1, 2, 3), data=np.zeros(6, dtype=np.float32))


def test_tensor_rejects_zero_extent():
    with pytest.raises(ShapeError):
        Tensor(shape=(1, 0, 2, 2), data=np.zeros(0, dtype=np.float32))


def test_tensor_rejects_length_mismatch():
    with pytest.raises(ShapeError):
        Tensor(shape=(1, 1, 2, 2), data=np.zeros(5, dtype=np.float32))


def test_tensor_accessors():
    x = Tensor.zeros((2, 3, 4, 5))
    assert (x.n, x.c, x.h, x.w) == (2, 3, 4, 5)
    assert x.data.dtype == np.float32
    assert x.data.flags["C_CONTIGUOUS"]


def test_require_finite_flags_nan():
    x = t(np.full((1, 1, 2, 2), np.nan))
    with pytest.raises(ValueError):
        x.require_finite()


# ------------------------------------------------------------- ConvParams type

def test_conv_params_rejects_rectangular_kernel():
    with pytest.raises(ShapeError):
        ConvParams(kernel=np.zeros((1, 1, 3, 2), dtype=np.float32),
                   bias=np.zeros(1, dtype=np.float32))


def test_conv_params_rejects_bad_bias_length():
    with pytest.raises(ShapeError):
        ConvParams(kernel=np.zeros((4, 1, 1, 1), dtype=np.float32),
                   bias=np.zeros(3, dtype=np.float32))


def test_conv_params_rejects_bad_group_split():
    with pytest.raises(ShapeError):
        ConvParams(kernel=np.zeros((3, 1, 1, 1), dtype=np.float32),
                   bias=np.zeros(3, dtype=np.float32), groups=2)


def test_conv_rejects_channel_mismatch():
    p = ConvParams(kernel=np.zeros((1, 4, 1, 1), dtype=np.float32),
                   bias=np.zeros(1, dtype=np.float32))
    with pytest.raises(ShapeError, match="channels"):
        conv2d(Tensor.zeros((1, 3, 4, 4)), p)


def test_output_extent_formula():
    assert conv_output_extent(96, 3, 2, 1, 1) == 48
    assert conv_output_extent(6, 3, 1, 2, 2) == 6
    assert conv_output_extent(5, 1, 1, 0, 1) == 5


# -------------------------------------------------------------- conv: examples

def test_identity_pointwise_conv_is_identity():
    # 1x1 kernel = identity matrix over channels, zero bias.
    c = 5
    kernel = np.eye(c, dtype=np.float32).reshape(c, c, 1, 1)
    p = ConvParams(kernel=kernel, bias=np.zeros(c, dtype=np.float32))
    rng = np.random.default_rng(3)
    x = t(rng.standard_normal((2, c, 7, 6)))
    y = conv2d(x, p)
    assert np.array_equal(y.data, x.data)


def test_ones_kernel_interior_sums_window():
    # constant input c, 3x3 ones kernel, pad 1: interior pixels hold 9c.
    c = 2.5
    p = ConvParams(kernel=np.ones((1, 1, 3, 3), dtype=np.float32),
                   bias=np.zeros(1, dtype=np.float32), padding=1)
    x = t(np.full((1, 1, 6, 6), c))
    y = conv2d(x, p).data[0, 0]
    assert np.allclose(y[1:-1, 1:-1], 9 * c)
    assert np.allclose(y[0, 0], 4 * c)  # corner sees a 2x2 window
    assert np.allclose(y[0, 1], 6 * c)  # edge sees a 2x3 window


def test_single_pixel_full_window_sum():
    # 2x2 input, 2x2 ones kernel, no pad: one output pixel = sum of inputs.
    x = t([[[[1.0, 2.0], [3.0, 4.0]]]])
    p = ConvParams(kernel=np.ones((1, 1, 2, 2), dtype=np.float32),
                   bias=np.zeros(1, dtype=np.float32))
    y = conv2d_naive(x, p)
    assert y.shape == (1, 1, 1, 1)
    assert y.data[0, 0, 0, 0] == 10.0


def test_pointwise_scale_and_bias():
    x = t([[[[1.0, 2.0], [3.0, 4.0]]]])
    p = ConvParams(kernel=np.full((1, 1, 1, 1), 2.0, dtype=np.float32),
                   bias=np.ones(1, dtype=np.float32))
    y = conv2d(x, p)
    assert np.array_equal(y.data[0, 0], [[3.0, 5.0], [7.0, 9.0]])


def test_depthwise_keeps_channels_separate():
    # Per-channel scaling kernels: channel k multiplied by (k+1).
    c = 3
    kernel = np.zeros((c, 1, 1, 1), dtype=np.float32)
    for k in range(c):
        kernel[k, 0, 0, 0] = k + 1
    p = ConvParams(kernel=kernel, bias=np.zeros(c, dtype=np.float32), groups=c)
    x = t(np.ones((1, c, 2, 2)))
    y = conv2d(x, p)
    for k in range(c):
        assert np.all(y.data[0, k] == k + 1)


def test_strided_conv_picks_every_other_pixel():
    x = t(np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4))
    p = ConvParams(kernel=np.ones((1, 1, 1, 1), dtype=np.float32),
                   bias=np.zeros(1, dtype=np.float32), stride=2)
    y = conv2d(x, p)
    assert np.array_equal(y.data[0, 0], [[0.0, 2.0], [8.0, 10.0]])


def test_dilated_conv_reaches_spread_taps():
    # 3x3 kernel with dilation 2 spans a 5x5 footprint; with a one-hot kernel
    # tap at (0, 0) the output samples input[y-2, x-2] under pad=2.
    kernel = np.zeros((1, 1, 3, 3), dtype=np.float32)
    kernel[0, 0, 0, 0] = 1.0
    p = ConvParams(kernel=kernel, bias=np.zeros(1, dtype=np.float32),
                   padding=2, dilation=2)
    x = t(np.arange(25, dtype=np.float32).reshape(1, 1, 5, 5))
    y = conv2d(x, p)
    assert y.shape == (1, 1, 5, 5)
    assert y.data[0, 0, 2, 2] == x.data[0, 0, 0, 0]
    assert y.data[0, 0, 0, 0] == 0.0  # tap falls in the zero padding


def test_conv_does_not_mutate_input():
    rng = np.random.default_rng(11)
    x = t(rng.standard_normal((1, 2, 5, 5)))
    before = x.data.copy()
    p = ConvParams(kernel=rng.standard_normal((3, 2, 3, 3)).astype(np.float32),
                   bias=rng.standard_normal(3).astype(np.float32), padding=1)
    conv2d(x, p)
    assert np.array_equal(x.data, before)


# --------------------------------------------------------- conv: oracle sweep

def _random_case(rng, *, groups_mode, stride, dilation, ksize):
    if groups_mode == "full":
        # depthwise: groups == cin == cout
        groups = int(rng.integers(2, 5))
        cin = groups
        cout = groups
    else:
        groups = 1
        cin = int(rng.integers(1, 5))
        cout = int(rng.integers(1, 5))
    pad = int(rng.integers(0, 3))
    h = int(rng.integers(dilation * (ksize - 1) + 1, 9))
    w = int(rng.integers(dilation * (ksize - 1) + 1, 9))
    x = t(rng.standard_normal((int(rng.integers(1, 3)), cin, h, w)))
    p = ConvParams(
        kernel=rng.standard_normal(
            (cout, cin // groups, ksize, ksize)).astype(np.float32),
        bias=rng.standard_normal(cout).astype(np.float32),
        stride=stride, padding=pad, dilation=dilation, groups=groups,
    )
    return x, p


def test_conv_matches_naive_oracle_bitwise():
    # 50 seeded cases spanning groups in {1, C}, stride/dilation in {1, 2},
    # kernel sizes in {1, 3}. Equality is bitwise, not approximate.
    rng = np.random.default_rng(2024)
    cases = 0
    for groups_mode in ("unit", "full"):
        for stride in (1, 2):
            for dilation in (1, 2):
                for ksize in (1, 3):
                    for _ in range(4):
                        x, p = _random_case(rng, groups_mode=groups_mode,
                                            stride=stride, dilation=dilation,
                                            ksize=ksize)
                        fast = conv2d(x, p)
                        slow = conv2d_naive(x, p)
                        assert fast.shape == slow.shape
                        assert fast.data.tobytes() == slow.data.tobytes(), (
                            f"mismatch: groups={p.groups} stride={stride} "
                            f"dilation={dilation} k={ksize}"
                        )
                        cases += 1
    assert cases >= 50


@settings(max_examples=40, deadline=None)
@given(
    ksize=st.sampled_from([1, 2, 3]),
    stride=st.integers(1, 2),
    dilation=st.integers(1, 2),
    pad=st.integers(0, 2),
    groups=st.sampled_from([1, 2]),
    seed=st.integers(0, 10_000),
)
def test_conv_matches_naive_on_randomized_geometry(ksize, stride, dilation,
                                                   pad, groups, seed):
    rng = np.random.default_rng(seed)
    cin = groups * int(rng.integers(1, 3))
    cout = groups * int(rng.integers(1, 3))
    side = dilation * (ksize - 1) + 1 + int(rng.integers(0, 4))
    x = t(rng.standard_normal((1, cin, side, side)))
    p = ConvParams(
        kernel=rng.standard_normal(
            (cout, cin // groups, ksize, ksize)).astype(np.float32),
        bias=rng.standard_normal(cout).astype(np.float32),
        stride=stride, padding=pad, dilation=dilation, groups=groups,
    )
    assert conv2d(x, p).data.tobytes() == conv2d_naive(x, p).data.tobytes()


# ------------------------------------------------------------------- other ops

def test_upsample_single_pixel():
    y = upsample_nearest2x(t([[[[7.0]]]]))
    assert np.array_equal(y.data[0, 0], np.full((2, 2), 7.0))


def test_upsample_block_replication():
    y = upsample_nearest2x(t([[[[1.0, 2.0], [3.0, 4.0]]]]))
    expect = [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
    assert np.array_equal(y.data[0, 0], np.asarray(expect, dtype=np.float32))


def test_upsample_strided_readback_recovers_input():
    rng = np.random.default_rng(5)
    x = t(rng.standard_normal((2, 3, 4, 5)))
    y = upsample_nearest2x(x)
    assert np.array_equal(y.data[:, :, ::2, ::2], x.data)


def test_global_avg_pool_constant():
    assert global_avg_pool(t(np.full((1, 2, 3, 3), 4.5))).data.flatten().tolist() == [4.5, 4.5]


def test_global_avg_pool_mean():
    y = global_avg_pool(t([[[[0.0, 2.0], [4.0, 6.0]]]]))
    assert y.shape == (1, 1, 1, 1)
    assert y.data[0, 0, 0, 0] == 3.0


def test_global_avg_pool_permutation_invariant():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((1, 1, 4, 4)).astype(np.float32)
    shuffled = x.reshape(1, 1, -1)[:, :, rng.permutation(16)].reshape(x.shape)
    a = global_avg_pool(t(x)).data
    b = global_avg_pool(t(shuffled)).data
    assert np.allclose(a, b, atol=1e-6)


def test_relu_clamps_negatives():
    y = relu(t([[[[-1.0, 2.0], [0.0, -3.5]]]]))
    assert np.array_equal(y.data[0, 0], [[0.0, 2.0], [0.0, 0.0]])


def test_sigmoid_at_zero():
    assert sigmoid(t([[[[0.0]]]])).data[0, 0, 0, 0] == 0.5


def test_sigmoid_no_overflow_at_extremes():
    y = sigmoid(t([[[[-1e6, 1e6], [-40.0, 40.0]]]])).data[0, 0]
    assert np.all(np.isfinite(y))
    assert y[0, 0] == 0.0 and y[0, 1] == 1.0  # saturated in float32


@given(st.floats(-30, 30))
def test_sigmoid_complement_symmetry(v):
    a = sigmoid(t([[[[v]]]])).data[0, 0, 0, 0]
    b = sigmoid(t([[[[-v]]]])).data[0, 0, 0, 0]
    assert abs((a + b) - 1.0) < 1e-6


def test_concat_stacks_channels_in_order():
    a = t(np.zeros((1, 3, 2, 2)))
    b = t(np.ones((1, 5, 2, 2)))
    y = concat_channels(a, b)
    assert y.shape == (1, 8, 2, 2)
    assert np.all(y.data[:, :3] == 0) and np.all(y.data[:, 3:] == 1)


def test_concat_rejects_spatial_mismatch():
    with pytest.raises(ShapeError):
        concat_channels(Tensor.zeros((1, 1, 2, 2)), Tensor.zeros((1, 1, 3, 2)))


def test_add_elementwise_and_shape_check():
    y = add(t([[[[1.0, 2.0]], [[3.0, 4.0]]]]), t([[[[10.0, 20.0]], [[30.0, 40.0]]]]))
    assert np.array_equal(y.data.flatten(), [11, 22, 33, 44])
    with pytest.raises(ShapeError):
        add(Tensor.zeros((1, 1, 2, 2)), Tensor.zeros((1, 2, 2, 2)))


def test_ops_stay_finite_on_bounded_inputs():
    rng = np.random.default_rng(17)
    x = t(rng.uniform(-1e6, 1e6, size=(1, 4, 6, 6)))
    p = ConvParams(kernel=rng.uniform(-1, 1, (4, 4, 3, 3)).astype(np.float32),
                   bias=rng.uniform(-1, 1, 4).astype(np.float32), padding=1)
    for y in (conv2d(x, p), relu(x), sigmoid(x), upsample_nearest2x(x),
              global_avg_pool(x)):
        assert np.all(np.isfinite(y.data))
