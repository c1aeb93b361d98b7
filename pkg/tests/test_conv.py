import numpy as np
import pytest

from scsnet.autograd import Tensor, backward, finite_difference_check
from scsnet.conv import ConvLayer
from scsnet.errors import ContractError, ShapeError


def conv_oracle(layer, x):
    """Brute-force window loop (2-d or 3-d window, single item)."""
    spatial = x.shape[:-1]
    out_spatial = layer.output_shape(spatial)[:-1]
    out = np.zeros(out_spatial + (layer.units,))
    for pos in np.ndindex(out_spatial):
        sl = tuple(slice(i * s, i * s + k)
                   for i, s, k in zip(pos, layer.stride, layer.window))
        win = x[sl].reshape(-1)
        for u in range(layer.units):
            out[pos + (u,)] = layer.kernel.data[u].reshape(-1) @ win + layer.bias.data[u]
    if layer.activation == "relu":
        out = np.maximum(out, 0.0)
    return out


class TestConv2d:
    def test_delta_kernel_sifts(self):
        # a one-hot kernel copies the input entry under the hot tap
        layer = ConvLayer(units=1, window=(2, 2), in_channels=1, seed=0)
        layer.kernel = Tensor(np.array([[[[0.0]], [[0.0]], [[1.0]], [[0.0]]]]).reshape(1, 2, 2, 1),
                              requires_grad=True)
        x = np.arange(9.0).reshape(3, 3, 1)
        out = layer.forward(Tensor(x))
        assert np.array_equal(out.data[..., 0], x[1:, :2, 0])

    def test_hand_window(self):
        layer = ConvLayer(units=1, window=(2, 2), in_channels=1, seed=0)
        layer.kernel = Tensor(np.eye(2).reshape(1, 2, 2, 1), requires_grad=True)
        out = layer.forward(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)))
        assert out.data[0, 0, 0] == pytest.approx(5.0)

    def test_zero_kernel_yields_bias(self):
        layer = ConvLayer(units=3, window=(2, 2), in_channels=2, seed=0)
        layer.kernel = Tensor(np.zeros((3, 2, 2, 2)), requires_grad=True)
        layer.bias = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
        out = layer.forward(Tensor(np.random.default_rng(0).uniform(-1, 1, (4, 4, 2))))
        assert np.allclose(out.data, np.broadcast_to([1.0, -2.0, 0.5], (3, 3, 3)))

    def test_bias_gradient_counts_windows(self):
        layer = ConvLayer(units=1, window=(2, 2), in_channels=1, seed=0)
        out = layer.forward(Tensor(np.random.default_rng(1).uniform(-1, 1, (3, 3, 1))))
        backward(out.sum())
        assert layer.bias.grad[0] == pytest.approx(4.0)

    def test_relu_clamps(self):
        layer = ConvLayer(units=1, window=(1, 1), in_channels=1, activation="relu", seed=0)
        layer.kernel = Tensor(np.ones((1, 1, 1, 1)), requires_grad=True)
        out = layer.forward(Tensor(np.array([[-3.0, 2.0]]).reshape(1, 2, 1)))
        assert np.array_equal(out.data[..., 0], [[0.0, 2.0]])

    def test_matches_window_oracle(self):
        rng = np.random.default_rng(2)
        layer = ConvLayer(units=3, window=(3, 3), in_channels=2, seed=2,
                          activation="relu")
        x = rng.uniform(-1, 1, (6, 5, 2))
        got = layer.forward(Tensor(x))
        assert np.max(np.abs(got.data - conv_oracle(layer, x))) <= 1e-12

    def test_batched_stride(self):
        rng = np.random.default_rng(3)
        layer = ConvLayer(units=2, window=(2, 2), in_channels=1, stride=(2, 2), seed=3)
        xs = rng.uniform(-1, 1, (2, 6, 6, 1))
        got = layer.forward(Tensor(xs))
        assert got.shape == (2, 3, 3, 2)
        for n in range(2):
            assert np.max(np.abs(got.data[n] - conv_oracle(layer, xs[n]))) <= 1e-12


class TestConv3d:
    def test_matches_window_oracle(self):
        rng = np.random.default_rng(4)
        layer = ConvLayer(units=2, window=(2, 2, 3), in_channels=2, seed=4)
        x = rng.uniform(-1, 1, (4, 4, 5, 2))
        got = layer.forward(Tensor(x))
        assert got.shape == (3, 3, 3, 2)
        assert np.max(np.abs(got.data - conv_oracle(layer, x))) <= 1e-12

    def test_full_depth_window_matches_conv2d(self):
        # kd == D with one channel collapses to a 2-d conv over D channels
        rng = np.random.default_rng(5)
        k3 = ConvLayer(units=2, window=(3, 3, 4), in_channels=1, seed=5)
        k2 = ConvLayer(units=2, window=(3, 3), in_channels=4, seed=99)
        k2.kernel = Tensor(k3.kernel.data.reshape(2, 3, 3, 4), requires_grad=True)
        x = rng.uniform(-1, 1, (5, 5, 4))
        got2 = k2.forward(Tensor(x))
        got3 = k3.forward(Tensor(x.reshape(5, 5, 4, 1)))
        assert np.max(np.abs(got3.data[:, :, 0, :] - got2.data)) <= 1e-12

    def test_batched_shape(self):
        layer = ConvLayer(units=8, window=(3, 3, 7), in_channels=1, seed=6)
        x = Tensor(np.zeros((2, 15, 15, 15, 1)))
        assert layer.forward(x).shape == (2, 13, 13, 9, 8)


class TestValidation:
    def test_window_rank(self):
        with pytest.raises(ContractError):
            ConvLayer(units=1, window=(3,), in_channels=1)
        with pytest.raises(ContractError):
            ConvLayer(units=1, window=(1, 1, 1, 1), in_channels=1)

    def test_stride_rank_must_match(self):
        with pytest.raises(ContractError):
            ConvLayer(units=1, window=(3, 3), in_channels=1, stride=(1, 1, 1))

    def test_unknown_activation(self):
        with pytest.raises(ContractError):
            ConvLayer(units=1, window=(3, 3), in_channels=1, activation="tanh")

    def test_spatial_underflow(self):
        layer = ConvLayer(units=1, window=(3, 3), in_channels=1)
        with pytest.raises(ShapeError):
            layer.forward(Tensor(np.zeros((2, 2, 1))))

    def test_channel_mismatch(self):
        layer = ConvLayer(units=1, window=(2, 2), in_channels=3)
        with pytest.raises(ShapeError):
            layer.forward(Tensor(np.zeros((4, 4, 2))))


class TestGradients:
    @pytest.mark.parametrize("window", [(2, 2), (2, 2, 2)])
    def test_finite_differences(self, window):
        rng = np.random.default_rng(7)
        layer = ConvLayer(units=2, window=window, in_channels=2, seed=7,
                          activation="none")
        shape = (4,) * len(window) + (2,)
        x = Tensor(rng.uniform(-1, 1, shape))

        def loss_wrt(_):
            return layer.forward(x).sum()

        for name, param in layer.parameters():
            err = finite_difference_check(loss_wrt, param, eps=1e-6)
            assert err <= 1e-6, f"{name}: {err}"
        err = finite_difference_check(lambda v: layer.forward(v).sum(), x, eps=1e-6)
        assert err <= 1e-6

    def test_relu_finite_differences(self):
        # biases shifted away from zero so no activation sits on the kink
        rng = np.random.default_rng(8)
        layer = ConvLayer(units=2, window=(2, 2), in_channels=1, seed=8,
                          activation="relu")
        layer.bias = Tensor(np.array([0.5, -0.5]), requires_grad=True)
        x = Tensor(rng.uniform(-1, 1, (4, 4, 1)))
        err = finite_difference_check(lambda v: layer.forward(v).sum(), x, eps=1e-6)
        assert err <= 1e-4


def test_parameter_count_closed_form():
    layer = ConvLayer(units=8, window=(3, 3, 7), in_channels=1)
    total = sum(p.size for _, p in layer.parameters())
    assert total == 8 * 3 * 3 * 7 * 1 + 8 == 512
    layer = ConvLayer(units=16, window=(3, 3, 5), in_channels=8)
    total = sum(p.size for _, p in layer.parameters())
    assert total == 16 * 3 * 3 * 5 * 8 + 16 == 5776
