import numpy as np
import pytest

from parkour.nn import (Adam, Conv2d, CrossAttention, Dense, GRUCell, MLP,
                        grad_check)
from parkour.nn import tensor as T
from parkour.nn.tensor import ShapeError, Tensor


def rng():
    return np.random.default_rng(0)


class TestDense:
    def test_zero_weights_output_is_bias(self):
        layer = Dense(4, 3, rng())
        layer.w.data[:] = 0.0
        layer.b.data[:] = (1.0, 2.0, 3.0)
        out = layer(Tensor(np.ones((5, 4))))
        assert np.allclose(out.data, [1.0, 2.0, 3.0])

    def test_param_count_closed_form(self):
        layer = Dense(7, 11, rng())
        assert layer.n_params() == 7 * 11 + 11

    def test_width_mismatch_names_layer(self):
        layer = Dense(4, 3, rng(), name="emb")
        with pytest.raises(ShapeError, match="emb"):
            layer(Tensor(np.ones((2, 5))))

    def test_init_deterministic_per_seed(self):
        a = Dense(6, 6, np.random.default_rng(42))
        b = Dense(6, 6, np.random.default_rng(42))
        assert np.array_equal(a.w.data, b.w.data)


class TestMLPAndConv:
    def test_mlp_param_count(self):
        net = MLP((10, 20, 5), rng())
        assert net.n_params() == (10 * 20 + 20) + (20 * 5 + 5)

    def test_conv_param_count(self):
        conv = Conv2d(3, 8, 5, rng())
        assert conv.n_params() == 8 * 3 * 5 * 5 + 8

    def test_conv_gradcheck(self):
        conv = Conv2d(2, 3, 3, rng(), stride=2, padding=1)
        x = Tensor(np.random.default_rng(1).standard_normal((2, 2, 9, 7)))
        err = grad_check(lambda: T.tmean(T.square(conv(x))), conv.parameters(),
                         n_coords=80, rng=np.random.default_rng(2))
        assert err < 1e-5


class TestGRUCell:
    def test_zero_everything_closed_form(self):
        # zero input, state, weights, biases: r = z = sigmoid(0) = 0.5,
        # n = tanh(0) = 0, h' = (1 - 0.5)*0 + 0.5*0 = 0
        cell = GRUCell(3, 4, rng())
        for p in cell.parameters().values():
            p.data[:] = 0.0
        out = cell(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))
        assert np.allclose(out.data, 0.0)

    def test_zero_update_gate_bias_passthrough_limit(self):
        # with bz forced very positive, z -> 1 and h' -> h exactly
        cell = GRUCell(3, 4, rng())
        cell.bz.data[:] = 50.0
        h = Tensor(np.random.default_rng(3).standard_normal((2, 4)))
        out = cell(Tensor(np.ones((2, 3))), h)
        assert np.allclose(out.data, h.data, atol=1e-12)

    def test_memory_width_checked(self):
        cell = GRUCell(3, 4, rng(), name="gru0")
        with pytest.raises(ShapeError, match="gru0"):
            cell(Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 5))))

    def test_gradcheck(self):
        cell = GRUCell(4, 5, rng())
        x = Tensor(np.random.default_rng(5).standard_normal((3, 4)))
        h = Tensor(np.random.default_rng(6).standard_normal((3, 5)))
        err = grad_check(lambda: T.tmean(T.square(cell(x, h))), cell.parameters(),
                         n_coords=80, rng=np.random.default_rng(7))
        assert err < 1e-5

    def test_recurrent_kernel_orthogonal(self):
        cell = GRUCell(3, 6, rng())
        assert np.allclose(cell.ur.data @ cell.ur.data.T, np.eye(6), atol=1e-10)


class TestCrossAttention:
    def test_shape_preserved(self):
        attn = CrossAttention(8, rng())
        tokens = Tensor(np.random.default_rng(1).standard_normal((2, 5, 8)))
        assert attn(tokens).data.shape == (2, 5, 8)

    def test_rejects_wrong_width(self):
        attn = CrossAttention(8, rng(), name="mix")
        with pytest.raises(ShapeError, match="mix"):
            attn(Tensor(np.zeros((2, 5, 4))))

    def test_gradcheck(self):
        attn = CrossAttention(6, rng())
        tokens = Tensor(np.random.default_rng(2).standard_normal((2, 4, 6)))
        err = grad_check(lambda: T.tmean(T.square(attn(tokens))),
                         attn.parameters(), n_coords=80,
                         rng=np.random.default_rng(3))
        assert err < 1e-5


class TestGradCheckMachinery:
    def test_analytic_quadratic_tiny_error(self):
        w = T.parameter(np.random.default_rng(0).standard_normal(6), "w")
        err = grad_check(lambda: T.tsum(T.square(w)), {"w": w},
                         rng=np.random.default_rng(1))
        assert err < 1e-9

    def test_relu_kink_coordinate_excluded(self):
        # the relu pre-activation equals the checked parameter, and sits at
        # the kink: both perturbed passes disagree on the sign, so every
        # draw is excluded and the check reports no usable coordinates
        w = T.parameter(np.zeros(1), "w")
        with pytest.raises(RuntimeError, match="kink-free"):
            grad_check(lambda: T.tsum(T.relu(w)), {"w": w}, n_coords=4,
                       rng=np.random.default_rng(2))

    def test_corrupted_backward_detected(self):
        layer = Dense(4, 1, rng())
        x = Tensor(np.random.default_rng(9).standard_normal((3, 4)))

        def bad_loss():
            out = T.tmean(T.square(layer(x)))
            # sabotage: scale the recorded gradient closure
            original = out._backward_fn
            out._backward_fn = lambda g: original(2.0 * g)
            return out

        err = grad_check(bad_loss, layer.parameters(), n_coords=40,
                         rng=np.random.default_rng(10))
        assert err > 0.1


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        w = T.parameter(np.array([1.0, -2.0]), "w")
        opt = Adam({"w": w}, lr=0.1)
        w.grad = np.zeros(2)
        opt.step()
        assert np.allclose(w.data, [1.0, -2.0])

    def test_first_step_is_signed_lr(self):
        w = T.parameter(np.array([0.0, 0.0]), "w")
        opt = Adam({"w": w}, lr=0.01)
        w.grad = np.array([0.5, -3.0])
        opt.step()
        assert np.allclose(w.data, [-0.01, 0.01], atol=1e-6)

    def test_quadratic_descent(self):
        w = T.parameter(np.array([3.0, -4.0]), "w")
        opt = Adam({"w": w}, lr=0.05)
        losses = []
        for _ in range(100):
            w.zero_grad()
            loss = T.tsum(T.square(w))
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        assert all(b < a for a, b in zip(losses[5:], losses[6:]))
        assert losses[-1] < losses[0] / 10

    def test_state_round_trip(self):
        w = T.parameter(np.array([1.0]), "w")
        opt = Adam({"w": w}, lr=0.1)
        w.grad = np.array([1.0])
        opt.step()
        state = opt.state_dict()
        opt2 = Adam({"w": w}, lr=0.1)
        opt2.load_state_dict(state)
        assert opt2.t == 1
        assert np.allclose(opt2.m["w"], opt.m["w"])


class TestClipGradNorm:
    def test_scales_only_when_over(self):
        from parkour.nn import clip_grad_norm
        w = T.parameter(np.zeros(4), "w")
        w.grad = np.full(4, 10.0)
        norm = clip_grad_norm({"w": w}, max_norm=1.0)
        assert norm == pytest.approx(20.0)
        assert np.linalg.norm(w.grad) == pytest.approx(1.0)
        w.grad = np.full(4, 0.01)
        clip_grad_norm({"w": w}, max_norm=1.0)
        assert np.allclose(w.grad, 0.01)
