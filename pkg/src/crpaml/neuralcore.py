"""Minimal deterministic neural kernels in double precision.

Dense layers, batch normalization, activations, the binary focal loss,
an activity L2 penalty, a bias-corrected Adam optimizer, and a finite
difference gradient checker. Everything is reentrant and seeded; no
autodiff graph, just paired forward/backward functions with exact
analytic gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

P_CLAMP = 1e-12


class NumericsError(FloatingPointError):
    """A non-finite value surfaced in a named computation block."""


def _require_finite(array: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(array)):
        raise NumericsError(f"non-finite values in {where}")


# --- dense layer ----------------------------------------------------------


@dataclass
class DenseLayerParams:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)


def init_dense(rng: np.random.Generator, n_in: int, n_out: int) -> DenseLayerParams:
    """Uniform fan-in scaled initialization."""
    bound = 1.0 / np.sqrt(n_in)
    return DenseLayerParams(
        weight=rng.uniform(-bound, bound, size=(n_in, n_out)),
        bias=np.zeros(n_out),
    )


def dense_forward(x: np.ndarray, params: DenseLayerParams) -> np.ndarray:
    if x.shape[-1] != params.weight.shape[0]:
        raise ValueError(
            f"dense input width {x.shape[-1]} != weight fan-in {params.weight.shape[0]}"
        )
    return x @ params.weight + params.bias


def dense_backward(
    x: np.ndarray, params: DenseLayerParams, dy: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dx, dweight, dbias)."""
    if dy.shape[-1] != params.weight.shape[1]:
        raise ValueError(
            f"dense upstream width {dy.shape[-1]} != weight fan-out {params.weight.shape[1]}"
        )
    dx = dy @ params.weight.T
    dweight = x.T @ dy
    dbias = dy.sum(axis=0)
    return dx, dweight, dbias


# --- activations ----------------------------------------------------------


def tanh_forward(z: np.ndarray) -> np.ndarray:
    return np.tanh(z)


def tanh_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * (1.0 - y * y)


def relu_forward(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def relu_backward(z: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * (z > 0.0)


def leaky_relu_forward(z: np.ndarray, slope: float = 0.01) -> np.ndarray:
    return np.where(z > 0.0, z, slope * z)


def leaky_relu_backward(z: np.ndarray, dy: np.ndarray, slope: float = 0.01) -> np.ndarray:
    return dy * np.where(z > 0.0, 1.0, slope)


def sigmoid_forward(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * y * (1.0 - y)


# --- batch normalization ---------------------------------------------------


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.99
    epsilon: float = 1e-5


def init_batchnorm(width: int, momentum: float = 0.99, epsilon: float = 1e-5) -> BatchNormState:
    return BatchNormState(
        gamma=np.ones(width),
        beta=np.zeros(width),
        running_mean=np.zeros(width),
        running_var=np.ones(width),
        momentum=momentum,
        epsilon=epsilon,
    )


@dataclass
class BatchNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray


def batchnorm_forward(
    x: np.ndarray, state: BatchNormState, mode: str
) -> tuple[np.ndarray, BatchNormCache | None]:
    """Training mode normalizes with batch statistics and folds them into
    the running stats; inference is a fixed affine map of the running stats."""
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batch normalization needs batch size >= 2 in training mode")
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + state.epsilon)
        x_hat = (x - mean) * inv_std
        state.running_mean = state.momentum * state.running_mean + (1 - state.momentum) * mean
        state.running_var = state.momentum * state.running_var + (1 - state.momentum) * var
        return state.gamma * x_hat + state.beta, BatchNormCache(x_hat, inv_std)
    if mode == "infer":
        x_hat = (x - state.running_mean) / np.sqrt(state.running_var + state.epsilon)
        return state.gamma * x_hat + state.beta, None
    raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")


def batchnorm_backward(
    dy: np.ndarray, state: BatchNormState, cache: BatchNormCache
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dx, dgamma, dbeta) for training-mode statistics."""
    n = dy.shape[0]
    x_hat, inv_std = cache.x_hat, cache.inv_std
    dgamma = (dy * x_hat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dx_hat = dy * state.gamma
    dx = (inv_std / n) * (n * dx_hat - dx_hat.sum(axis=0) - x_hat * (dx_hat * x_hat).sum(axis=0))
    return dx, dgamma, dbeta


# --- focal loss -------------------------------------------------------------


@dataclass(frozen=True)
class FocalLossConfig:
    alpha: float = 0.25
    gamma: float = 3.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("focal alpha must lie in (0, 1)")
        if self.gamma < 0.0:
            raise ValueError("focal gamma must be >= 0")


def focal_loss(
    y: np.ndarray, p_hat: np.ndarray, config: FocalLossConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample binary focal cross-entropy and its gradient wrt p_hat.

    positive: -alpha * (1 - p)^gamma * ln(p)
    negative: -(1 - alpha) * p^gamma * ln(1 - p)
    """
    y = np.asarray(y, dtype=np.float64)
    p = np.clip(np.asarray(p_hat, dtype=np.float64), P_CLAMP, 1.0 - P_CLAMP)
    a, g = config.alpha, config.gamma

    one_minus_p = 1.0 - p
    log_p = np.log(p)
    log_1mp = np.log(one_minus_p)

    loss_pos = -a * one_minus_p**g * log_p
    loss_neg = -(1.0 - a) * p**g * log_1mp
    loss = np.where(y == 1.0, loss_pos, loss_neg)

    grad_pos = a * g * one_minus_p ** (g - 1.0) * log_p - a * one_minus_p**g / p
    grad_neg = (1.0 - a) * p**g / one_minus_p - (1.0 - a) * g * p ** (g - 1.0) * log_1mp
    grad = np.where(y == 1.0, grad_pos, grad_neg)
    return loss, grad


def l2_activity_penalty(h: np.ndarray, lam: float) -> tuple[float, np.ndarray]:
    """penalty = lam * sum(h^2); gradient 2 * lam * h."""
    if lam < 0:
        raise ValueError("activity penalty coefficient must be >= 0")
    return lam * float(np.sum(h * h)), 2.0 * lam * h


# --- Adam optimizer ---------------------------------------------------------


@dataclass
class AdamState:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; mutates params and state in place."""
    state.step += 1
    t = state.step
    bias1 = 1.0 - state.beta1**t
    bias2 = 1.0 - state.beta2**t
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NumericsError(f"non-finite gradient for parameter block {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        m_hat = m / bias1
        v_hat = v / bias2
        params[name] -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


# --- gradient checking -------------------------------------------------------


class GradFragment(Protocol):
    """Anything exposing live parameter arrays and a scalar loss with
    analytic parameter gradients."""

    def parameters(self) -> dict[str, np.ndarray]: ...

    def loss_and_grads(self) -> tuple[float, dict[str, np.ndarray]]: ...


def gradient_check(
    fragment: GradFragment,
    eps: float = 1e-5,
    max_coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic gradients and central finite
    differences over the fragment's parameters.

    relative error = |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    """
    params = fragment.parameters()
    _, grads = fragment.loss_and_grads()
    worst = 0.0
    for name, values in params.items():
        flat = values.reshape(-1)
        grad_flat = grads[name].reshape(-1)
        indices = range(flat.size)
        if max_coords_per_param is not None and flat.size > max_coords_per_param:
            sampler = rng if rng is not None else np.random.default_rng(0)
            indices = sampler.choice(flat.size, size=max_coords_per_param, replace=False)
        for i in indices:
            original = flat[i]
            flat[i] = original + eps
            loss_plus, _ = fragment.loss_and_grads()
            flat[i] = original - eps
            loss_minus, _ = fragment.loss_and_grads()
            flat[i] = original
            numeric = (loss_plus - loss_minus) / (2.0 * eps)
            analytic = grad_flat[i]
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst


class CallableFragment:
    """Adapter turning (params, loss_fn) into a GradFragment."""

    def __init__(
        self,
        params: dict[str, np.ndarray],
        loss_fn: Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]],
    ):
        self._params = params
        self._loss_fn = loss_fn

    def parameters(self) -> dict[str, np.ndarray]:
        return self._params

    def loss_and_grads(self) -> tuple[float, dict[str, np.ndarray]]:
        return self._loss_fn(self._params)
