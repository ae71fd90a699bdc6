import math

import numpy as np
import pytest

from leffa.tensor import (
    ComputationRecord,
    ContractError,
    DimensionError,
    ParameterError,
    Tensor,
    backward,
    bilinear_resize,
    concat,
    conv2d,
    get_default_dtype,
    matmul,
    no_grad,
    precision,
    relu,
    rms_norm,
    row_normalize,
    silu,
    softmax,
)


def test_default_dtype_is_32_bit_and_precision_switches():
    assert get_default_dtype() == np.float32
    assert Tensor([1.0, 2.0]).dtype == np.float32
    with precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert get_default_dtype() == np.float32


def test_data_is_read_only():
    t = Tensor(np.zeros(3))
    with pytest.raises(ValueError):
        t.data[0] = 1.0


class TestMatmul:
    def test_identity(self, rng):
        x = rng.standard_normal((3, 4)).astype(np.float32)
        assert np.array_equal(matmul(Tensor(np.eye(3)), Tensor(x)).data, x)

    def test_hand_product(self):
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        assert out.data.tolist() == [[3.0], [7.0]]

    def test_gradient_of_sum_is_b_transpose_broadcast(self, f64, rng):
        a = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        grads = backward(matmul(a, b).sum(), [a, b])
        np.testing.assert_allclose(grads[id(a)], np.tile(b.data.sum(axis=1), (2, 1)))
        np.testing.assert_allclose(grads[id(b)], np.tile(a.data.sum(axis=0)[:, None], (1, 4)))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


class TestSoftmax:
    def test_constant_row_is_uniform(self):
        for tau in (0.1, 1.0, 7.0):
            np.testing.assert_allclose(softmax(Tensor(np.full((2, 5), 3.0)), tau).data, 0.2, atol=1e-7)

    def test_hand_values(self):
        out = softmax(Tensor([0.0, math.log(4.0)]), 2.0).data
        np.testing.assert_allclose(out, [1 / 3, 2 / 3], atol=1e-7)

    def test_large_temperature_is_nearly_uniform(self, rng):
        out = softmax(Tensor(rng.standard_normal((4, 8))), 1e4).data
        assert np.abs(out - 1 / 8).max() < 1e-3

    def test_non_positive_temperature_rejected(self):
        for tau in (0.0, -1.0):
            with pytest.raises(ParameterError):
                softmax(Tensor([1.0, 2.0]), tau)

    def test_rows_are_distributions(self, rng):
        out = softmax(Tensor(rng.standard_normal((50, 17)) * 30), 0.5).data
        np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-5)
        assert out.min() >= 0 and out.max() <= 1

    def test_extreme_logits_stay_finite(self):
        out = softmax(Tensor([1e30, -1e30, 0.0]), 1.0).data
        assert np.all(np.isfinite(out))


class TestConv2d:
    def test_delta_kernel_is_identity(self, rng):
        x = rng.standard_normal((3, 5, 6)).astype(np.float32)
        k = np.zeros((3, 3, 3, 3), np.float32)
        for c in range(3):
            k[c, c, 1, 1] = 1.0
        np.testing.assert_array_equal(conv2d(Tensor(x), Tensor(k)).data, x)

    def test_all_ones(self):
        out = conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 3, 3)))).data[0]
        assert out[1:3, 1:3].tolist() == [[9.0, 9.0], [9.0, 9.0]]
        assert out[0, 0] == out[0, 3] == out[3, 0] == out[3, 3] == 4.0
        assert out[0, 1] == 6.0

    def test_matches_direct_loop(self, f64, rng):
        x = rng.standard_normal((2, 3, 5, 4))
        k = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        for stride in (1, 2):
            out = conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride).data
            pad = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
            ho, wo = (5 - 1) // stride + 1, (4 - 1) // stride + 1
            ref = np.zeros((2, 4, ho, wo))
            for n in range(2):
                for o in range(4):
                    for i in range(ho):
                        for j in range(wo):
                            patch = pad[n, :, i * stride:i * stride + 3, j * stride:j * stride + 3]
                            ref[n, o, i, j] = (patch * k[o]).sum() + b[o]
            np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_non_3x3_kernel_rejected(self):
        with pytest.raises(DimensionError):
            conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 5, 5))))


class TestBilinearResize:
    def test_same_size_is_identity(self, rng):
        x = rng.standard_normal((2, 5, 7)).astype(np.float32)
        np.testing.assert_array_equal(bilinear_resize(Tensor(x), 5, 7).data, x)

    def test_constant_stays_constant(self):
        for size in ((1, 1), (3, 9), (17, 4)):
            out = bilinear_resize(Tensor(np.full((1, 4, 6), 5.0)), *size).data
            assert np.all(out == 5.0)

    def test_hand_center_value(self):
        out = bilinear_resize(Tensor([[[0.0, 1.0], [2.0, 3.0]]]), 3, 3).data[0]
        assert out[1, 1] == 1.5
        assert out[0, 0] == 0.0 and out[2, 2] == 3.0 and out[0, 2] == 1.0 and out[2, 0] == 2.0

    def test_corners_preserved(self, rng):
        x = rng.standard_normal((1, 6, 5)).astype(np.float32)
        out = bilinear_resize(Tensor(x), 11, 3).data
        for (i, j), (p, q) in {(0, 0): (0, 0), (0, -1): (0, -1), (-1, 0): (-1, 0), (-1, -1): (-1, -1)}.items():
            assert out[0, i, j] == x[0, p, q]

    def test_zero_size_rejected(self):
        with pytest.raises((ParameterError, DimensionError)):
            bilinear_resize(Tensor(np.zeros((1, 2, 2))), 0, 3)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.zeros((2, 3)), requires_grad=True)
        assert np.array_equal(backward(x.sum(), [x])[id(x)], np.ones((2, 3)))

    def test_square_sum(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        assert backward((x * x).sum(), [x])[id(x)].tolist() == [2.0, 4.0]

    def test_fan_out_accumulates(self, f64):
        x = Tensor([1.5, -2.0], requires_grad=True)
        y = x * 3.0
        loss = (y * x).sum() + y.sum()
        np.testing.assert_allclose(backward(loss, [x])[id(x)], 6 * x.data + 3)

    def test_untouched_parameter_gets_zero(self):
        x = Tensor([1.0], requires_grad=True)
        unused = Tensor(np.ones((2, 2)), requires_grad=True)
        grads = backward(x.sum(), [x, unused])
        assert np.array_equal(grads[id(unused)], np.zeros((2, 2)))

    def test_non_scalar_loss_is_contract_error(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            backward(x * 2.0, [x])

    def test_method_accumulates_until_zeroed(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        (x * x).sum().backward()
        (x * x).sum().backward()
        assert x.grad.tolist() == [4.0, 8.0]
        x.zero_grad()
        assert x.grad is None

    def test_record_is_topological_and_visits_once(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        a = x * 2.0
        b = a + x
        loss = (b * a).sum()
        record = ComputationRecord(loss)
        position = {id(n): i for i, n in enumerate(record.nodes)}
        assert len(position) == len(record.nodes)
        for node in record.nodes:
            for parent in node._parents:
                if parent.requires_grad:
                    assert position[id(parent)] < position[id(node)]

    def test_deep_chain_does_not_recurse(self):
        x = Tensor([1.0], requires_grad=True)
        y = x
        for _ in range(5000):
            y = y * 1.0
        assert backward(y.sum(), [x])[id(x)].tolist() == [1.0]

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad and y._parents == ()


class TestPointwise:
    def test_relu_and_silu_values(self):
        x = Tensor([-2.0, 0.0, 3.0])
        assert relu(x).data.tolist() == [0.0, 0.0, 3.0]
        np.testing.assert_allclose(silu(x).data, [-2 / (1 + math.e ** 2), 0.0, 3 / (1 + math.e ** -3)], rtol=1e-6)

    def test_silu_is_finite_for_huge_inputs(self):
        assert np.all(np.isfinite(silu(Tensor([-1e4, 1e4])).data))

    def test_rms_norm_unit_rms(self, rng):
        out = rms_norm(Tensor(rng.standard_normal((4, 16)) * 7)).data
        np.testing.assert_allclose(np.sqrt((out ** 2).mean(-1)), 1.0, atol=1e-5)

    def test_row_normalize_zero_row_becomes_uniform(self):
        out = row_normalize(Tensor([[0.0, 0.0, 0.0, 0.0], [1.0, 3.0, 0.0, 0.0]])).data
        np.testing.assert_allclose(out, [[0.25] * 4, [0.25, 0.75, 0, 0]])

    def test_concat_and_getitem(self):
        a, b = Tensor([[1.0, 2.0]]), Tensor([[3.0, 4.0]])
        assert concat([a, b], axis=0).data.tolist() == [[1, 2], [3, 4]]
        assert concat([a, b], axis=0)[1].data.tolist() == [3, 4]
