"""Backward-pass checks: every differentiable primitive against central
finite differences, plus tape semantics (accumulation, isolation, errors)."""
import numpy as np
import pytest

import sepgan.tensor as T
from sepgan import Rng, Tape

from oracles import central_difference_grad, max_relative_error

FD_H = 1e-5
FD_TOL = 1e-4


def analytic_and_numeric(build_loss, params):
    """Return (analytic grads, finite-difference grads) for each param.

    build_loss() must recompute the scalar loss from the params' current data
    so the finite-difference oracle stays independent of the tape.
    """
    with Tape() as tape:
        loss = build_loss()
        for p in params:
            p.zero_grad()
        tape.backward(loss)
    analytic = [p.grad.copy() for p in params]
    numeric = []
    for p in params:
        numeric.append(central_difference_grad(lambda: build_loss().item(), p.data, FD_H))
    return analytic, numeric


def assert_grads_match(build_loss, params):
    analytic, numeric = analytic_and_numeric(build_loss, params)
    for a, n in zip(analytic, numeric):
        assert max_relative_error(a, n) <= FD_TOL


class TestPrimitiveGradients:
    def test_conv2d(self):
        rng = Rng(201)
        x = T.Tensor(rng.normal((1, 2, 5, 5)), requires_grad=True)
        w = T.Tensor(rng.normal((3, 2, 3, 3)), requires_grad=True)
        b = T.Tensor(rng.normal((1, 3, 1, 1)), requires_grad=True)
        assert_grads_match(lambda: T.mean(T.conv2d(x, w, b, stride=2, pad=1)), [x, w, b])

    def test_depthwise_conv2d(self):
        rng = Rng(202)
        x = T.Tensor(rng.normal((1, 3, 5, 5)), requires_grad=True)
        w = T.Tensor(rng.normal((3, 1, 3, 3)), requires_grad=True)
        b = T.Tensor(rng.normal((1, 3, 1, 1)), requires_grad=True)
        assert_grads_match(lambda: T.mean(T.tanh(T.depthwise_conv2d(x, w, b, pad=1))),
                           [x, w, b])

    def test_pointwise_conv2d(self):
        rng = Rng(203)
        x = T.Tensor(rng.normal((2, 3, 4, 4)), requires_grad=True)
        w = T.Tensor(rng.normal((2, 3, 1, 1)), requires_grad=True)
        b = T.Tensor(rng.normal((1, 2, 1, 1)), requires_grad=True)
        assert_grads_match(lambda: T.mean(T.pointwise_conv2d(x, w, b)), [x, w, b])

    def test_conv_transpose2d(self):
        rng = Rng(204)
        x = T.Tensor(rng.normal((1, 2, 3, 3)), requires_grad=True)
        w = T.Tensor(rng.normal((2, 3, 4, 4)), requires_grad=True)
        b = T.Tensor(rng.normal((1, 3, 1, 1)), requires_grad=True)
        assert_grads_match(lambda: T.mean(T.tanh(T.conv_transpose2d(x, w, b, stride=2, pad=1))),
                           [x, w, b])

    def test_depthwise_conv_transpose2d(self):
        rng = Rng(205)
        x = T.Tensor(rng.normal((1, 2, 3, 3)), requires_grad=True)
        w = T.Tensor(rng.normal((2, 1, 4, 4)), requires_grad=True)
        assert_grads_match(lambda: T.mean(T.tanh(
            T.depthwise_conv_transpose2d(x, w, stride=2, pad=1))), [x, w])

    def test_instance_norm(self):
        rng = Rng(206)
        x = T.Tensor(rng.normal((2, 2, 4, 4)), requires_grad=True)
        gamma = T.Tensor(rng.normal((1, 2, 1, 1)), requires_grad=True)
        beta = T.Tensor(rng.normal((1, 2, 1, 1)), requires_grad=True)
        assert_grads_match(lambda: T.mean(T.tanh(T.instance_norm(x, gamma, beta))),
                           [x, gamma, beta])

    def test_leaky_relu_and_tanh(self):
        rng = Rng(207)
        # keep preactivations away from the leaky-relu kink
        data = rng.normal((1, 2, 4, 4))
        data = np.where(np.abs(data) < 0.05, data + 0.1, data)
        x = T.Tensor(data, requires_grad=True)
        assert_grads_match(lambda: T.mean(T.tanh(T.leaky_relu(x, 0.2))), [x])

    def test_bce_with_logits(self):
        rng = Rng(208)
        z = T.Tensor(rng.normal((2, 1, 3, 3)), requires_grad=True)
        t = (rng.uniform(18) > 0.5).astype(float).reshape(2, 1, 3, 3)
        assert_grads_match(lambda: T.bce_with_logits(z, t), [z])

    def test_softmax_cross_entropy(self):
        rng = Rng(209)
        z = T.Tensor(rng.normal((3, 4, 1, 1)), requires_grad=True)
        labels = np.array([0, 3, 1])
        assert_grads_match(lambda: T.softmax_cross_entropy(z, labels), [z])

    def test_l1(self):
        rng = Rng(210)
        a = T.Tensor(rng.normal((1, 2, 3, 3)), requires_grad=True)
        b = T.Tensor(rng.normal((1, 2, 3, 3)))
        assert_grads_match(lambda: T.l1(a, b), [a])

    def test_concat_channels(self):
        rng = Rng(211)
        a = T.Tensor(rng.normal((1, 2, 3, 3)), requires_grad=True)
        b = T.Tensor(rng.normal((1, 1, 3, 3)), requires_grad=True)
        assert_grads_match(lambda: T.mean(T.tanh(T.concat_channels(a, b))), [a, b])


class TestCompositeGradients:
    @pytest.mark.parametrize("seed", range(5))
    def test_conv_in_relu_mean_chain(self, seed):
        """conv -> instance norm -> relu -> mean, full elementwise check."""
        rng = Rng(300 + seed)
        x = T.Tensor(rng.normal((1, 2, 6, 6)), requires_grad=True)
        w = T.Tensor(rng.normal((3, 2, 3, 3)) * 0.5, requires_grad=True)
        b = T.Tensor(rng.normal((1, 3, 1, 1)), requires_grad=True)
        gamma = T.Tensor(1.0 + 0.1 * rng.normal((1, 3, 1, 1)), requires_grad=True)
        beta = T.Tensor(rng.normal((1, 3, 1, 1)), requires_grad=True)

        def build():
            h = T.conv2d(x, w, b, stride=1, pad=1)
            h = T.instance_norm(h, gamma, beta)
            # bias the preactivations off the relu kink so the FD oracle is clean
            h = T.add(h, T.full(h.shape, 0.31))
            return T.mean(T.relu(h))

        assert_grads_match(build, [x, w, b, gamma, beta])


class TestTapeSemantics:
    def test_mean_grad_is_inverse_size(self):
        x = T.Tensor(np.zeros((1, 1, 2, 2)), requires_grad=True)
        with Tape() as tape:
            loss = T.mean(x)
            x.zero_grad()
            tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 2), 0.25))

    def test_disconnected_parameter_stays_zero(self):
        x = T.Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        orphan = T.Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with Tape() as tape:
            loss = T.mean(x)
            x.zero_grad()
            orphan.zero_grad()
            tape.backward(loss)
        np.testing.assert_array_equal(orphan.grad, np.zeros((1, 1, 2, 2)))

    def test_repeated_backward_accumulates(self):
        x = T.Tensor(np.zeros((1, 1, 2, 2)), requires_grad=True)
        with Tape() as tape:
            loss = T.mean(x)
            x.zero_grad()
            tape.backward(loss)
            tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 2), 0.5))

    def test_fanout_accumulates_once_per_consumer(self):
        x = T.Tensor(np.full((1, 1, 1, 1), 3.0), requires_grad=True)
        with Tape() as tape:
            loss = T.add(x, x)
            x.zero_grad()
            tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.full((1, 1, 1, 1), 2.0))

    def test_non_scalar_loss_rejected(self):
        x = T.Tensor(np.zeros((1, 1, 2, 2)), requires_grad=True)
        with Tape() as tape:
            y = T.relu(x)
            with pytest.raises(T.ShapeError):
                tape.backward(y)

    def test_off_tape_loss_rejected(self):
        x = T.Tensor(np.zeros((1, 1, 1, 1)), requires_grad=True)
        loss = T.mean(x)  # no tape active: nothing recorded
        with Tape() as tape:
            with pytest.raises(RuntimeError):
                tape.backward(loss)

    def test_no_recording_outside_tape(self):
        x = T.Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        y = T.relu(x)
        assert y.requires_grad is False
