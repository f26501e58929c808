import math

import numpy as np
import pytest

from covilearn.errors import ArgumentError, DimensionError
from covilearn.ops import (
    AvgPool2d,
    Conv2d,
    MaxPool2d,
    avg_pool2d,
    batchnorm_infer,
    concat_channels,
    conv2d,
    dense_affine,
    dropout,
    flatten,
    global_avg_pool,
    max_pool2d,
    pad_amounts,
    relu,
    softmax,
)
from covilearn.tensor import Tensor


def naive_conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, stride: int, padding: str) -> np.ndarray:
    _, _, h, w = x.shape
    f, c, kh, kw = kernel.shape
    top, bottom = pad_amounts(h, kh, stride, padding)  # type: ignore[arg-type]
    left, right = pad_amounts(w, kw, stride, padding)  # type: ignore[arg-type]
    xp = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))
    out_h = (xp.shape[2] - kh) // stride + 1
    out_w = (xp.shape[3] - kw) // stride + 1
    out = np.zeros((x.shape[0], f, out_h, out_w))
    for n in range(x.shape[0]):
        for fi in range(f):
            for oh in range(out_h):
                for ow in range(out_w):
                    acc = 0.0
                    for ci in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                acc += kernel[fi, ci, i, j] * xp[n, ci, oh * stride + i, ow * stride + j]
                    out[n, fi, oh, ow] = acc + bias[fi]
    return out


# ------------------------------------------------------------------------------
# conv2d
# ------------------------------------------------------------------------------


def test_conv2d_identity_kernel() -> None:
    out = conv2d(Tensor([[[[5.0]]]]), Tensor([[[[1.0]]]]), Tensor([0.0]))
    assert out.shape == (1, 1, 1, 1)
    assert out.numpy().tolist() == [[[[5.0]]]]


def test_conv2d_all_ones_kernel() -> None:
    image = Tensor(np.arange(1, 10, dtype=np.float64).reshape(1, 1, 3, 3))
    out = conv2d(image, Tensor(np.ones((1, 1, 3, 3))), Tensor([0.0]))
    assert out.numpy().tolist() == [[[[45.0]]]]


def test_conv2d_stride_subsampling() -> None:
    image = Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
    out = conv2d(image, Tensor([[[[1.0]]]]), stride=2)
    assert out.shape == (1, 1, 1, 1)
    assert out.numpy().tolist() == [[[[1.0]]]]


@pytest.mark.parametrize("padding", ["valid", "same"])
@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d_matches_naive_loop_exactly(padding: str, stride: int) -> None:
    rng = np.random.default_rng(17 + stride)
    for _ in range(5):
        n = int(rng.integers(1, 3))
        c = int(rng.integers(1, 4))
        h = int(rng.integers(3, 9))
        w = int(rng.integers(3, 9))
        f = int(rng.integers(1, 4))
        k = int(rng.integers(1, 4))
        x = rng.normal(size=(n, c, h, w))
        kernel = rng.normal(size=(f, c, k, k))
        bias = rng.normal(size=(f,))

        out = conv2d(Tensor(x), Tensor(kernel), Tensor(bias), stride=stride, padding=padding)  # type: ignore[arg-type]
        expected = naive_conv2d(x, kernel, bias, stride, padding)
        assert out.shape == expected.shape
        assert np.array_equal(out.numpy(), expected)


def test_conv2d_gemm_matches_direct() -> None:
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(2, 3, 8, 8)))
    kernel = Tensor(rng.normal(size=(4, 3, 3, 3)))
    bias = Tensor(rng.normal(size=(4,)))

    for stride in (1, 2):
        for padding in ("valid", "same"):
            direct = conv2d(x, kernel, bias, stride, padding, method="direct")  # type: ignore[arg-type]
            gemm = conv2d(x, kernel, bias, stride, padding, method="gemm")  # type: ignore[arg-type]
            assert np.allclose(direct.numpy(), gemm.numpy(), rtol=1e-12, atol=1e-12)


def test_conv2d_errors() -> None:
    x = Tensor(np.zeros((1, 2, 4, 4)))

    # Channel mismatch
    with pytest.raises(DimensionError):
        conv2d(x, Tensor(np.zeros((1, 3, 3, 3))))

    # Kernel larger than a valid-padded input
    with pytest.raises(DimensionError):
        conv2d(x, Tensor(np.zeros((1, 2, 5, 5))))

    with pytest.raises(ArgumentError):
        conv2d(x, Tensor(np.zeros((1, 2, 3, 3))), stride=0)

    with pytest.raises(DimensionError):
        conv2d(x, Tensor(np.zeros((2, 2, 3, 3))), Tensor([0.0]))


def test_same_padding_extra_cell_bottom_right() -> None:
    assert pad_amounts(5, 3, 1, "same") == (1, 1)
    assert pad_amounts(4, 3, 2, "same") == (0, 1)
    assert pad_amounts(224, 7, 2, "same") == (2, 3)
    assert pad_amounts(8, 3, 1, "valid") == (0, 0)

    x = Tensor(np.ones((1, 1, 5, 5)))
    assert conv2d(x, Tensor(np.ones((1, 1, 3, 3))), padding="same").shape == (1, 1, 5, 5)
    assert conv2d(x, Tensor(np.ones((1, 1, 3, 3))), stride=2, padding="same").shape == (1, 1, 3, 3)


# ------------------------------------------------------------------------------
# batchnorm_infer and relu
# ------------------------------------------------------------------------------


def test_batchnorm_identity_normalization() -> None:
    x = Tensor(np.full((1, 1, 1, 1), 3.0))
    one, zero = Tensor([1.0]), Tensor([0.0])
    out = batchnorm_infer(x, one, zero, zero, one, eps=0.0)
    assert out.numpy().item() == 3.0


def test_batchnorm_formula() -> None:
    x = Tensor(np.full((1, 1, 1, 1), 5.0))
    out = batchnorm_infer(x, Tensor([2.0]), Tensor([1.0]), Tensor([1.0]), Tensor([4.0]), eps=0.0)
    assert out.numpy().item() == 5.0


def test_batchnorm_zero_scale_outputs_beta() -> None:
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(2, 2, 3, 3)))
    out = batchnorm_infer(x, Tensor([0.0, 1.0]), Tensor([0.7, 0.0]), Tensor([0.0, 0.0]), Tensor([1.0, 1.0]))
    assert np.all(out.numpy()[:, 0] == 0.7)


def test_batchnorm_errors() -> None:
    x = Tensor(np.zeros((1, 2, 2, 2)))
    ones = Tensor([1.0, 1.0])
    zeros = Tensor([0.0, 0.0])

    with pytest.raises(ArgumentError):
        batchnorm_infer(x, ones, zeros, zeros, Tensor([1.0, -1.0]))

    with pytest.raises(DimensionError):
        batchnorm_infer(x, Tensor([1.0]), zeros, zeros, ones)


def test_relu() -> None:
    assert relu(Tensor([-1.0, 0.0, 2.0])).tolist() == [0.0, 0.0, 2.0]

    positive = Tensor([0.5, 1.0, 7.0])
    assert relu(positive) == positive

    assert relu(Tensor([-3.0, -0.1])).tolist() == [0.0, 0.0]


# ------------------------------------------------------------------------------
# Pooling
# ------------------------------------------------------------------------------


def test_max_pool_examples() -> None:
    out = max_pool2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), window=2, stride=2)
    assert out.numpy().tolist() == [[[[4.0]]]]

    constant = max_pool2d(Tensor(np.full((1, 2, 4, 4), 1.5)), window=2, stride=2)
    assert constant.shape == (1, 2, 2, 2)
    assert np.all(constant.numpy() == 1.5)

    # A (1, 4) row pools with a (1, 2) window
    row = max_pool2d(Tensor([[[[1.0, 2.0, 3.0, 4.0]]]]), window=(1, 2), stride=(1, 2))
    assert row.numpy().tolist() == [[[[2.0, 4.0]]]]


def test_max_pool_same_padding_ignores_pad_cells() -> None:
    x = Tensor(-np.ones((1, 1, 3, 3)))
    out = max_pool2d(x, window=3, stride=2, padding="same")
    assert out.shape == (1, 1, 2, 2)
    assert np.all(out.numpy() == -1.0)


def test_max_pool_window_too_large() -> None:
    with pytest.raises(ArgumentError):
        max_pool2d(Tensor(np.zeros((1, 1, 2, 2))), window=3, stride=1)


def test_avg_pool() -> None:
    x = Tensor(np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4))
    out = avg_pool2d(x, window=2, stride=2)
    assert out.numpy().tolist() == [[[[2.5, 4.5], [10.5, 12.5]]]]


def test_global_avg_pool() -> None:
    assert global_avg_pool(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])).tolist() == [[2.5]]
    assert global_avg_pool(Tensor(np.full((2, 3, 5, 5), 0.25))).tolist() == [[0.25] * 3] * 2

    two = Tensor([[[[0.0, 0.0], [0.0, 0.0]], [[1.0, 3.0], [5.0, 7.0]]]])
    assert global_avg_pool(two).tolist() == [[0.0, 4.0]]


# ------------------------------------------------------------------------------
# Structural operations
# ------------------------------------------------------------------------------


def test_concat_channels() -> None:
    single = Tensor(np.arange(8, dtype=np.float64).reshape(1, 2, 2, 2))
    assert concat_channels([single]) == single

    out = concat_channels([Tensor([[[[3.0]]]]), Tensor([[[[7.0]]]])])
    assert out.shape == (1, 2, 1, 1)
    assert out.numpy().reshape(-1).tolist() == [3.0, 7.0]


def test_concat_channels_spatial_mismatch() -> None:
    with pytest.raises(DimensionError):
        concat_channels([Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3)))])


def test_dense_affine() -> None:
    assert dense_affine(Tensor([[3.0]]), Tensor([[2.0]]), Tensor([1.0])).tolist() == [[7.0]]

    x = Tensor([[0.5, -1.0, 2.0]])
    assert dense_affine(x, Tensor(np.eye(3)), Tensor(np.zeros(3))) == x

    out = dense_affine(Tensor([[1.0, 2.0]]), Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([10.0, 20.0]))
    assert out.tolist() == [[11.0, 22.0]]


def test_dense_affine_mismatch() -> None:
    with pytest.raises(DimensionError):
        dense_affine(Tensor([[1.0, 2.0]]), Tensor(np.zeros((3, 2))), Tensor([0.0, 0.0]))
    with pytest.raises(DimensionError):
        dense_affine(Tensor([[1.0, 2.0]]), Tensor(np.zeros((2, 2))), Tensor([0.0]))


def test_flatten() -> None:
    out = flatten(Tensor([[[1.0, 2.0], [3.0, 4.0]]]))
    assert out.shape == (1, 4)
    assert out.tolist() == [[1.0, 2.0, 3.0, 4.0]]

    flat = Tensor([[1.0, 2.0, 3.0]])
    assert flatten(flat) == flat


# ------------------------------------------------------------------------------
# dropout and softmax
# ------------------------------------------------------------------------------


def test_dropout_identity_cases() -> None:
    x = Tensor(np.linspace(-1.0, 1.0, 50))
    assert dropout(x, 0.0, "train", seed=1) == x
    assert dropout(x, 0.9, "infer", seed=1) == x


def test_dropout_survivor_fraction() -> None:
    out = dropout(Tensor(np.ones(10_000)), 0.5, "train", seed=42).numpy()
    survivors = out != 0.0
    assert abs(survivors.mean() - 0.5) <= 0.02
    # Inverted dropout scales survivors by 1 / (1 - rate)
    assert np.all(out[survivors] == 2.0)


def test_dropout_reproducible() -> None:
    x = Tensor(np.random.default_rng(0).normal(size=(8, 64)))
    first = dropout(x, 0.3, "train", seed=9)
    second = dropout(x, 0.3, "train", seed=9)
    other = dropout(x, 0.3, "train", seed=10)
    assert first == second
    assert first != other


def test_dropout_rate_out_of_range() -> None:
    with pytest.raises(ArgumentError):
        dropout(Tensor([1.0]), 1.0, "train", seed=0)
    with pytest.raises(ArgumentError):
        dropout(Tensor([1.0]), -0.1, "train", seed=0)


def test_softmax_examples() -> None:
    assert softmax(Tensor([[0.0, 0.0]])).tolist() == [[0.5, 0.5]]

    out = softmax(Tensor([[math.log(2.0), 0.0]])).numpy()[0]
    assert out[0] == pytest.approx(2.0 / 3.0, abs=1e-15)
    assert out[1] == pytest.approx(1.0 / 3.0, abs=1e-15)


def test_softmax_rows_and_shift_invariance() -> None:
    rng = np.random.default_rng(5)
    logits = rng.normal(scale=10.0, size=(20, 4))
    out = softmax(Tensor(logits)).numpy()
    shifted = softmax(Tensor(logits + 123.0)).numpy()

    assert np.all(np.abs(out.sum(axis=1) - 1.0) < 1e-6)
    assert np.max(np.abs(out - shifted)) < 1e-9


def test_softmax_rejects_nan() -> None:
    with pytest.raises(ArgumentError):
        softmax(np.array([[float("nan"), 0.0]]))


# ------------------------------------------------------------------------------
# Shape algebra
# ------------------------------------------------------------------------------


def test_declared_shapes_match_executed_shapes() -> None:
    rng = np.random.default_rng(11)
    for _ in range(20):
        n, c = int(rng.integers(1, 3)), int(rng.integers(1, 4))
        h, w = int(rng.integers(4, 10)), int(rng.integers(4, 10))
        k = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        padding = "same" if rng.random() < 0.5 else "valid"
        x = Tensor(rng.normal(size=(n, c, h, w)))
        kernel = Tensor(rng.normal(size=(2, c, k, k)))

        declared = Conv2d.output_shape(x.shape, kernel.shape, stride=stride, padding=padding)
        assert conv2d(x, kernel, stride=stride, padding=padding).shape == declared  # type: ignore[arg-type]

        declared = MaxPool2d.output_shape(x.shape, window=k, stride=stride, padding=padding)
        assert max_pool2d(x, k, stride, padding).shape == declared  # type: ignore[arg-type]

        declared = AvgPool2d.output_shape(x.shape, window=k, stride=stride)
        assert avg_pool2d(x, k, stride).shape == declared
