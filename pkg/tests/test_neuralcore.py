"""Kernel-level gradients against central finite differences, plus the
focal loss, Adam, and batch-norm contracts."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crpaml.neuralcore import (
    AdamState,
    BatchNormState,
    CallableFragment,
    DenseLayerParams,
    FocalLossConfig,
    NumericsError,
    adam_step,
    batchnorm_backward,
    batchnorm_forward,
    dense_backward,
    dense_forward,
    focal_loss,
    gradient_check,
    init_batchnorm,
    init_dense,
    l2_activity_penalty,
    relu_backward,
    relu_forward,
    tanh_backward,
    tanh_forward,
)

RNG = np.random.default_rng(1234)


class TestDense:
    def test_identity_weights(self):
        params = DenseLayerParams(weight=np.eye(4), bias=np.zeros(4))
        x = RNG.normal(size=(3, 4))
        assert np.array_equal(dense_forward(x, params), x)

    def test_one_by_one_hand_algebra(self):
        params = DenseLayerParams(weight=np.array([[2.0]]), bias=np.array([3.0]))
        x = np.array([[4.0]])
        assert dense_forward(x, params) == np.array([[11.0]])
        dx, dw, db = dense_backward(x, params, np.array([[1.0]]))
        assert dw == np.array([[4.0]])
        assert db == np.array([1.0])
        assert dx == np.array([[2.0]])

    def test_shape_mismatch_raises(self):
        params = DenseLayerParams(weight=np.ones((3, 2)), bias=np.zeros(2))
        with pytest.raises(ValueError):
            dense_forward(np.ones((1, 4)), params)

    def test_backward_matches_finite_differences(self):
        params = init_dense(RNG, 5, 3)
        x = RNG.normal(size=(8, 5))
        dy_seed = RNG.normal(size=(8, 3))

        def loss_fn(p):
            y = dense_forward(x, params)
            loss = float(np.sum(y * dy_seed))
            _, dw, db = dense_backward(x, params, dy_seed)
            return loss, {"w": dw, "b": db}

        fragment = CallableFragment({"w": params.weight, "b": params.bias}, loss_fn)
        assert gradient_check(fragment, eps=1e-6) < 1e-6


class TestBatchNorm:
    def test_constant_feature_batch_flattens_to_zero(self):
        state = init_batchnorm(3)
        x = np.ones((6, 3)) * 7.5
        y, _ = batchnorm_forward(x, state, "train")
        assert np.allclose(y, 0.0, atol=1e-6)

    def test_symmetric_pair_maps_near_identity(self):
        state = init_batchnorm(1)
        x = np.array([[-1.0], [1.0]])
        y, _ = batchnorm_forward(x, state, "train")
        assert np.allclose(y, x, atol=1e-2)  # epsilon shrinks slightly

    def test_train_mode_standardizes(self):
        state = init_batchnorm(4)
        x = RNG.normal(loc=3.0, scale=2.5, size=(64, 4))
        y, _ = batchnorm_forward(x, state, "train")
        assert np.allclose(y.mean(axis=0), 0.0, atol=1e-9)
        assert np.allclose(y.var(axis=0), 1.0, atol=1e-3)

    def test_batch_of_one_rejected_in_training(self):
        state = init_batchnorm(2)
        with pytest.raises(ValueError):
            batchnorm_forward(np.ones((1, 2)), state, "train")

    def test_inference_is_deterministic_affine(self):
        state = init_batchnorm(3)
        batchnorm_forward(RNG.normal(size=(32, 3)), state, "train")
        x = RNG.normal(size=(5, 3))
        y1, _ = batchnorm_forward(x, state, "infer")
        y2, _ = batchnorm_forward(x, state, "infer")
        assert np.array_equal(y1, y2)

    def test_backward_matches_finite_differences(self):
        x = RNG.normal(size=(16, 4))
        state = init_batchnorm(4)
        state.gamma = RNG.normal(size=4)
        state.beta = RNG.normal(size=4)
        dy_seed = RNG.normal(size=(16, 4))

        def loss_fn(p):
            fresh = BatchNormState(
                gamma=p["gamma"], beta=p["beta"],
                running_mean=np.zeros(4), running_var=np.ones(4),
            )
            y, cache = batchnorm_forward(p["x"], fresh, "train")
            loss = float(np.sum(y * dy_seed))
            dx, dgamma, dbeta = batchnorm_backward(dy_seed, fresh, cache)
            return loss, {"x": dx, "gamma": dgamma, "beta": dbeta}

        fragment = CallableFragment({"x": x, "gamma": state.gamma, "beta": state.beta}, loss_fn)
        assert gradient_check(fragment, eps=1e-5) < 1e-5


class TestFocalLoss:
    CFG = FocalLossConfig(alpha=0.25, gamma=3.0)

    def test_positive_at_half(self):
        loss, _ = focal_loss(np.array([1.0]), np.array([0.5]), self.CFG)
        # direct evaluation: 0.25 * 0.5^3 * ln 2
        assert loss[0] == pytest.approx(0.25 * 0.125 * math.log(2.0), abs=1e-12)
        assert loss[0] == pytest.approx(0.0216608, abs=5e-7)

    def test_negative_at_half(self):
        loss, _ = focal_loss(np.array([0.0]), np.array([0.5]), self.CFG)
        assert loss[0] == pytest.approx(0.75 * 0.125 * math.log(2.0), abs=1e-12)
        assert loss[0] == pytest.approx(0.0649825, abs=5e-7)

    def test_gamma_zero_reduces_to_half_bce(self):
        cfg = FocalLossConfig(alpha=0.5, gamma=0.0)
        rng = np.random.default_rng(7)
        y = (rng.random(10_000) < 0.5).astype(float)
        p = rng.uniform(1e-6, 1 - 1e-6, size=10_000)
        loss, _ = focal_loss(y, p, cfg)
        bce = -(y * np.log(p) + (1 - y) * np.log(1 - p))
        assert np.max(np.abs(loss - 0.5 * bce)) < 1e-12

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        y = (rng.random(50) < 0.3).astype(float)
        p = rng.uniform(0.05, 0.95, size=50)
        _, grad = focal_loss(y, p, self.CFG)
        eps = 1e-7
        lp, _ = focal_loss(y, p + eps, self.CFG)
        lm, _ = focal_loss(y, p - eps, self.CFG)
        numeric = (lp - lm) / (2 * eps)
        assert np.max(np.abs(grad - numeric) / np.maximum(np.abs(numeric), 1e-8)) < 1e-6

    @settings(max_examples=100, deadline=None)
    @given(p=st.floats(min_value=1e-9, max_value=1 - 1e-9))
    def test_loss_non_negative(self, p):
        for y in (0.0, 1.0):
            loss, _ = focal_loss(np.array([y]), np.array([p]), self.CFG)
            assert loss[0] >= 0.0

    @settings(max_examples=50, deadline=None)
    @given(
        p1=st.floats(min_value=0.01, max_value=0.98),
        delta=st.floats(min_value=1e-6, max_value=0.0199),
    )
    def test_positive_loss_strictly_decreasing_in_p(self, p1, delta):
        a, _ = focal_loss(np.array([1.0]), np.array([p1]), self.CFG)
        b, _ = focal_loss(np.array([1.0]), np.array([p1 + delta]), self.CFG)
        assert b[0] < a[0]


class TestActivityPenalty:
    def test_zero_lambda(self):
        penalty, grad = l2_activity_penalty(np.array([1.0, 2.0]), 0.0)
        assert penalty == 0.0 and np.array_equal(grad, np.zeros(2))

    def test_hand_value(self):
        penalty, grad = l2_activity_penalty(np.array([1.0, -1.0]), 0.5)
        assert penalty == 1.0
        assert np.array_equal(grad, np.array([1.0, -1.0]))

    def test_gradient_matches_finite_differences(self):
        h = RNG.normal(size=12)
        lam = 0.3
        _, grad = l2_activity_penalty(h, lam)
        eps = 1e-6
        for i in range(h.size):
            hp, hm = h.copy(), h.copy()
            hp[i] += eps
            hm[i] -= eps
            numeric = (l2_activity_penalty(hp, lam)[0] - l2_activity_penalty(hm, lam)[0]) / (2 * eps)
            assert abs(grad[i] - numeric) < 1e-8


def reference_adam(w0: float, grad_fn, steps: int, lr=0.001, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook bias-corrected Adam, written independently of the kernel."""
    w, m, v = w0, 0.0, 0.0
    path = []
    for t in range(1, steps + 1):
        g = grad_fn(w)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        w -= lr * m_hat / (math.sqrt(v_hat) + eps)
        path.append(w)
    return path


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        params = {"w": np.array([1.5, -2.0])}
        state = AdamState()
        adam_step(params, {"w": np.zeros(2)}, state)
        assert np.array_equal(params["w"], np.array([1.5, -2.0]))
        assert state.step == 1

    def test_unit_gradient_first_step_is_minus_lr(self):
        params = {"w": np.array([0.0])}
        adam_step(params, {"w": np.array([1.0])}, AdamState())
        assert params["w"][0] == pytest.approx(-0.001, rel=1e-6)

    def test_quadratic_descent_matches_reference(self):
        params = {"w": np.array([5.0])}
        state = AdamState()
        path = []
        for _ in range(100):
            adam_step(params, {"w": 2.0 * params["w"]}, state)
            path.append(float(params["w"][0]))
        oracle = reference_adam(5.0, lambda w: 2.0 * w, 100)
        assert np.allclose(path, oracle, atol=1e-12)
        # strictly decreasing after burn-in, visibly below the start
        assert all(abs(b) < abs(a) for a, b in zip(path[3:], path[4:]))
        assert abs(path[-1]) < 4.905

    def test_non_finite_gradient_names_block(self):
        params = {"head.weight": np.array([1.0])}
        with pytest.raises(NumericsError, match="head.weight"):
            adam_step(params, {"head.weight": np.array([np.nan])}, AdamState())

    def test_determinism(self):
        outs = []
        for _ in range(2):
            params = {"w": np.array([1.0, 2.0, 3.0])}
            state = AdamState()
            for step in range(5):
                adam_step(params, {"w": params["w"] * 0.5 + step}, state)
            outs.append(params["w"].copy())
        assert np.array_equal(outs[0], outs[1])


class TestGradientCheck:
    def test_linear_fragment_near_exact(self):
        w = RNG.normal(size=6)
        x = RNG.normal(size=6)

        def loss_fn(p):
            return float(p["w"] @ x), {"w": x.copy()}

        # exact for any step on a linear map; a large step kills cancelation noise
        assert gradient_check(CallableFragment({"w": w}, loss_fn), eps=0.25) < 1e-10

    def test_corrupted_backward_detected(self):
        w = RNG.normal(size=4) + 2.0
        x = RNG.normal(size=4) + 1.0

        def loss_fn(p):
            return float(p["w"] @ x), {"w": -x.copy()}  # sign-flipped gradient

        error = gradient_check(CallableFragment({"w": w}, loss_fn), eps=1e-6)
        assert error == pytest.approx(2.0, abs=1e-4)

    def test_two_layer_tanh_relu_block(self):
        rng = np.random.default_rng(9)
        l1 = init_dense(rng, 6, 8)
        l2 = init_dense(rng, 8, 3)
        x = rng.normal(size=(5, 6))
        target = rng.normal(size=(5, 3))

        def loss_fn(p):
            z1 = dense_forward(x, l1)
            h1 = tanh_forward(z1)
            z2 = dense_forward(h1, l2)
            h2 = relu_forward(z2)
            diff = h2 - target
            loss = float(np.sum(diff * diff))
            dh2 = 2.0 * diff
            dz2 = relu_backward(z2, dh2)
            dh1, dw2, db2 = dense_backward(h1, l2, dz2)
            dz1 = tanh_backward(h1, dh1)
            _, dw1, db1 = dense_backward(x, l1, dz1)
            return loss, {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}

        fragment = CallableFragment(
            {"w1": l1.weight, "b1": l1.bias, "w2": l2.weight, "b2": l2.bias}, loss_fn
        )
        assert gradient_check(fragment, eps=1e-5) < 1e-4
