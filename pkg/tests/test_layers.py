"""BatchNorm blocks, weight standardization, network assembly and the
scale-invariance properties that follow from per-channel normalization."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from bnwrs.errors import ConfigError
from bnwrs.layers import (
    BatchNormState,
    batchnorm_forward,
    bn_layer_forward,
    build_network,
    parse_architecture,
    scale_slices,
    slice_norms,
    weight_standardize,
)
from bnwrs.tensor import Tensor, backward
from bnwrs.verify import EXACT_BN_EPSILON, random_bn_network
from conftest import central_difference, relative_grad_error


class TestBatchNormForward:
    def test_symmetric_two_point_batch(self):
        state = BatchNormState.create(1, epsilon=1e-5)
        out = batchnorm_forward(Tensor([[-1.0], [1.0]]), state, "train")
        expected = 1.0 / np.sqrt(1.0 + 1e-5)
        assert_allclose(out.data, [[-expected], [expected]], rtol=1e-12)
        assert abs(out.data[1, 0] - 0.99999) < 1e-5

    def test_constant_batch_outputs_beta_exactly(self):
        # 3.5 is binary-exact, so the batch mean subtracts to exactly zero
        # and the epsilon guard alone keeps the division finite
        state = BatchNormState.create(1, epsilon=1e-5)
        state.beta.data = np.array([0.37])
        out = batchnorm_forward(Tensor([[3.5], [3.5], [3.5]]), state, "train")
        assert_allclose(out.data, 0.37, rtol=0, atol=0)
        out2 = batchnorm_forward(Tensor([[3.3], [3.3], [3.3]]), state, "train")
        assert_allclose(out2.data, 0.37, rtol=0, atol=1e-12)

    def test_scale_invariance_of_preactivation(self, rng):
        z = rng.uniform(-2, 2, (16, 6))
        state = BatchNormState.create(6, epsilon=EXACT_BN_EPSILON)
        state.gamma.data = rng.uniform(0.5, 1.5, 6)
        state.beta.data = rng.uniform(-0.5, 0.5, 6)
        a = batchnorm_forward(Tensor(z), state, "train").data
        b = batchnorm_forward(Tensor(7.3 * z), state, "train").data
        assert np.abs(a - b).max() < 1e-10

    def test_train_requires_two_values(self):
        state = BatchNormState.create(3)
        with pytest.raises(ValueError, match="at least 2"):
            batchnorm_forward(Tensor(np.ones((1, 3))), state, "train")

    def test_negative_running_var_is_corruption(self):
        state = BatchNormState.create(2)
        state.running_var = np.array([0.5, -1e-3])
        with pytest.raises(ValueError, match="negative running variance"):
            batchnorm_forward(Tensor(np.ones((4, 2))), state, "eval")

    def test_conv_statistics_pool_spatial_dims(self, rng):
        x = rng.uniform(-1, 1, (4, 3, 5, 5))
        state = BatchNormState.create(3, epsilon=EXACT_BN_EPSILON)
        out = batchnorm_forward(Tensor(x), state, "train").data
        assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
        assert_allclose(out.std(axis=(0, 2, 3)), 1.0, rtol=1e-10)

    def test_running_stats_update_convention(self, rng):
        x = rng.uniform(-1, 1, (32, 2))
        state = BatchNormState.create(2, momentum=0.1)
        batchnorm_forward(Tensor(x), state, "train")
        batch_mean = x.mean(axis=0)
        batch_var = x.var(axis=0)
        assert_allclose(state.running_mean, 0.9 * 0.0 + 0.1 * batch_mean, rtol=1e-12)
        assert_allclose(state.running_var, 0.9 * 1.0 + 0.1 * batch_var, rtol=1e-12)

    def test_eval_uses_running_stats(self, rng):
        state = BatchNormState.create(2, epsilon=1e-5)
        state.running_mean = np.array([1.0, -1.0])
        state.running_var = np.array([4.0, 0.25])
        x = rng.uniform(-1, 1, (5, 2))
        out = batchnorm_forward(Tensor(x), state, "eval").data
        expected = (x - state.running_mean) / np.sqrt(state.running_var + 1e-5)
        assert_allclose(out, expected, rtol=1e-12)


class TestBnLayerForward:
    def test_zero_weight_column_gives_relu_beta(self, rng):
        w = rng.uniform(-1, 1, (5, 4))
        w[:, 1] = 0.0
        w[:, 2] = 0.0
        state = BatchNormState.create(4, epsilon=1e-5)
        state.beta.data = np.array([0.5, -0.5, 0.7, -0.2])
        h = Tensor(rng.uniform(-1, 1, (8, 5)))
        out = bn_layer_forward(h, Tensor(w), state, "train").data
        # zero pre-activation: channel output is relu(beta) broadcast
        assert_allclose(out[:, 2], 0.7, rtol=0, atol=0)
        assert_allclose(out[:, 1], 0.0, rtol=0, atol=0)

    def test_per_channel_rescale_leaves_output_unchanged(self, rng):
        w = rng.uniform(-1, 1, (5, 4))
        h = Tensor(rng.uniform(-2, 2, (8, 5)))
        state = BatchNormState.create(4, epsilon=EXACT_BN_EPSILON)
        state.gamma.data = rng.uniform(0.5, 1.5, 4)
        before = bn_layer_forward(h, Tensor(w), state, "train").data
        factors = rng.uniform(0.5, 3.0, 4)
        after = bn_layer_forward(h, Tensor(scale_slices(w, factors, "dense")), state, "train").data
        assert np.abs(after - before).max() < 1e-10

    def test_pre_relu_batch_moments_match_gamma_beta(self, rng):
        from bnwrs.layers import batchnorm_forward as bn
        from bnwrs.tensor import matmul

        eps = 1e-5
        w = Tensor(rng.uniform(-1, 1, (5, 4)))
        h = Tensor(rng.uniform(-2, 2, (8, 5)))
        state = BatchNormState.create(4, epsilon=eps)
        state.gamma.data = rng.uniform(-1.5, 1.5, 4)
        state.beta.data = rng.uniform(-0.5, 0.5, 4)
        pre = matmul(h, w)
        out = bn(pre, state, "train").data
        v = pre.data.var(axis=0)
        assert_allclose(out.mean(axis=0), state.beta.data, atol=1e-12)
        expected_std = np.abs(state.gamma.data) * np.sqrt(v / (v + eps))
        assert_allclose(out.std(axis=0), expected_std, atol=1e-6)


class TestWeightStandardize:
    def test_three_point_slice(self):
        out = weight_standardize(Tensor(np.array([[1.0], [2.0], [3.0]])))
        assert_allclose(out.data[:, 0], [-1.2247448, 0.0, 1.2247448], atol=1e-6)

    def test_idempotent_on_standardized_slice(self, rng):
        w = Tensor(rng.uniform(-1, 1, (6, 3)))
        once = weight_standardize(w)
        twice = weight_standardize(once)
        assert np.abs(once.data - twice.data).max() < 1e-10

    def test_random_kernel_slices_standardized_and_differentiable(self, rng):
        k = Tensor(rng.uniform(-1, 1, (3, 3, 2, 4)), requires_grad=True)
        out = weight_standardize(k)
        flat = out.data.reshape(-1, 4)
        assert np.abs(flat.mean(axis=0)).max() < 1e-12
        assert np.abs(flat.std(axis=0) - 1.0).max() < 1e-6
        proj = rng.uniform(-1, 1, k.shape)
        backward((out * Tensor(proj)).sum())

        def value():
            w = k.data
            m = w.mean(axis=(0, 1, 2), keepdims=True)
            c = w - m
            v = (c * c).mean(axis=(0, 1, 2), keepdims=True)
            return float((c / np.sqrt(v + 1e-12) * proj).sum())

        fd = central_difference(value, k.data)
        assert relative_grad_error(k.grad, fd) < 1e-5

    def test_scalar_slice_rejected(self):
        with pytest.raises(ValueError, match=">= 2"):
            weight_standardize(Tensor(np.ones((1, 3))))


class TestBuildNetwork:
    def test_mlp_string_marks_scale_invariance(self):
        net = build_network("mlp:784-256-256-10", (784,), 10, seed=0)
        weights = net.weight_layers()
        assert len(weights) == 3
        assert [layer.scale_invariant for _, layer in weights] == [True, True, False]
        assert net.output_layer.weight.shape == (256, 10)

    def test_cnn_marks_conv_scale_invariant(self):
        arch = {"kind": "cnn", "blocks": [{"channels": 16, "kernel": 3, "padding": 1}]}
        net = build_network(arch, (1, 28, 28), 10, seed=0)
        conv = net.weight_layers()[0][1]
        assert conv.kind == "conv2d"
        assert conv.scale_invariant
        assert conv.weight.shape == (3, 3, 1, 16)
        assert not net.output_layer.scale_invariant

    def test_same_seed_is_bit_identical(self):
        a = build_network("mlp:12-8-4", (12,), 4, seed=7)
        b = build_network("mlp:12-8-4", (12,), 4, seed=7)
        for (na, pa), (nb, pb) in zip(a.named_params().items(), b.named_params().items()):
            assert na == nb
            assert np.array_equal(pa.data, pb.data)

    def test_inconsistent_dims_rejected(self):
        with pytest.raises(ConfigError, match="input dim"):
            build_network("mlp:10-8-4", (12,), 4, seed=0)
        with pytest.raises(ConfigError, match="output dim"):
            build_network("mlp:12-8-4", (12,), 5, seed=0)

    def test_bad_architecture_strings(self):
        with pytest.raises(ConfigError):
            parse_architecture("cnn:1-2-3")
        with pytest.raises(ConfigError):
            parse_architecture("mlp:712-abc-10")
        with pytest.raises(ConfigError):
            parse_architecture({"kind": "transformer"})

    def test_initialization_is_fan_in_uniform(self):
        net = build_network("mlp:100-50-10", (100,), 10, seed=3)
        w = net.weight_layers()[0][1].weight.data
        bound = np.sqrt(1.0 / 100)
        assert w.min() >= -bound and w.max() <= bound
        assert w.std() > 0.4 * bound  # actually spread out, not degenerate


class TestScaleInvarianceProperties:
    """Rescaling any scale-invariant slice by c > 0 leaves train-mode
    outputs unchanged; the loss gradient of such a slice is orthogonal to
    the slice itself, whatever gamma and beta are."""

    def test_network_function_invariant_under_slice_rescaling(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            net, x, _ = random_bn_network(rng)
            before = net.forward(x, mode="train").data.copy()
            for _, layer in net.hidden_weight_layers():
                if layer.scale_invariant:
                    n = slice_norms(layer.weight.data, layer.slice_kind).shape[0]
                    factors = rng.uniform(0.5, 3.0, n)
                    layer.weight.data = scale_slices(layer.weight.data, factors, layer.slice_kind)
            after = net.forward(x, mode="train").data
            assert np.abs(after - before).max() < 1e-10

    def test_gradient_orthogonal_to_invariant_slices(self):
        from bnwrs.layers import slice_dots

        rng = np.random.default_rng(11)
        for _ in range(20):
            net, x, y = random_bn_network(rng)
            _, loss = net.loss(x, y, mode="train")
            net.zero_grad()
            backward(loss)
            for _, layer in net.hidden_weight_layers():
                if not layer.scale_invariant:
                    continue
                w, g = layer.weight.data, layer.weight.grad
                dots = np.abs(slice_dots(w, g, layer.slice_kind))
                wn = slice_norms(w, layer.slice_kind)
                gn = slice_norms(g, layer.slice_kind)
                live = gn > 1e-9 * np.maximum(1.0, wn)
                if live.any():
                    assert (dots[live] / (wn * gn)[live]).max() < 1e-8

    def test_argmax_invariant_under_uniform_output_rescale(self, rng):
        net = build_network("mlp:16-24-6", (16,), 6, seed=5)
        x = rng.uniform(-2, 2, (64, 16))
        logits = net.forward(x, mode="train").data
        net.output_layer.weight.data = net.output_layer.weight.data * 3.7
        rescaled = net.forward(x, mode="train").data
        assert np.array_equal(np.argmax(logits, axis=1), np.argmax(rescaled, axis=1))

    def test_per_column_output_rescale_can_change_argmax(self):
        """Normalizing output columns separately is NOT argmax-preserving:
        scaling logit j by c_j > 0 reorders logits whenever the top two are
        close.  Documented here so nobody treats the per-column form as an
        invariance."""
        h = np.array([[1.0, 0.0]])
        w = np.array([[1.0, 0.9], [0.0, 0.0]])
        logits = h @ w
        assert np.argmax(logits) == 0
        rescaled = h @ (w * np.array([0.5, 1.0]))
        assert np.argmax(rescaled) == 1


class TestWeightStandardizedNetworks:
    def test_ws_network_invariant_in_any_mode(self, rng):
        """Standardization divides each slice by its own statistics, so
        rescaling a slice cancels exactly even in eval mode."""
        arch = {"kind": "mlp", "hidden": [12, 8], "weight_standardize": True}
        net = build_network(arch, (6,), 3, seed=1)
        kinds = [layer.kind for _, layer in net.weight_layers()]
        assert kinds == ["ws_dense", "ws_dense", "dense"]
        x = rng.uniform(-2, 2, (16, 6))
        net.forward(x, mode="train")  # populate running statistics
        for mode in ("train", "eval"):
            before = net.forward(x, mode=mode).data.copy()
            for _, layer in net.hidden_weight_layers():
                n = layer.weight.shape[-1]
                layer.weight.data = scale_slices(
                    layer.weight.data, rng.uniform(0.5, 3.0, n), layer.slice_kind
                )
            after = net.forward(x, mode=mode).data
            assert np.abs(after - before).max() < 1e-10

    def test_ws_network_trains(self, rng):
        from bnwrs.datasets import make_synthetic
        from bnwrs.optim import LrSchedule
        from bnwrs.regularize import RegularizerConfig
        from bnwrs.runner import Trainer

        x, y = make_synthetic(3, 8, 600, 5, separation=3.0)
        arch = {"kind": "mlp", "hidden": [16], "weight_standardize": True}
        net = build_network(arch, (8,), 3, seed=5)
        trainer = Trainer(net, "sgdm", LrSchedule(0.1), RegularizerConfig(), seed=5)
        trainer.train(x, y, x, y, epochs=4, batch_size=30)
        assert trainer.history[-1]["train_acc"] > 0.9
