"""Minimal dense-network kernel: forward passes, exact reverse-mode gradients
for parameters and inputs, diagonal-Gaussian latent utilities, and Adam.

Everything operates on plain numpy arrays. Batches are row-major (B, width);
1-D vectors are accepted by the public helpers and treated as a batch of one.
Training runs in float32 by default; tests use float64 for finite-difference
headroom.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class DimensionMismatch(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


class StaleTape(RuntimeError):
    """backward() was called on a tape whose recorded state is already consumed."""


class DenseLayer:
    """Fully connected layer y = g(W x + b) with g in {relu, linear}."""

    __slots__ = ("weights", "bias", "activation", "grad_weights", "grad_bias")

    def __init__(self, weights: np.ndarray, bias: np.ndarray, activation: str = "linear"):
        weights = np.asarray(weights)
        bias = np.asarray(bias)
        if weights.ndim != 2 or bias.ndim != 1 or bias.shape[0] != weights.shape[0]:
            raise ShapeMismatch(
                f"weights {weights.shape} and bias {bias.shape} are inconsistent")
        if activation not in ("relu", "linear"):
            raise ValueError(f"unsupported activation {activation!r}")
        if not (np.isfinite(weights).all() and np.isfinite(bias).all()):
            raise ValueError("non-finite layer parameters")
        self.weights = weights
        self.bias = bias
        self.activation = activation
        self.grad_weights: Optional[np.ndarray] = None
        self.grad_bias: Optional[np.ndarray] = None

    @property
    def in_width(self) -> int:
        return self.weights.shape[1]

    @property
    def out_width(self) -> int:
        return self.weights.shape[0]

    def zero_grad(self) -> None:
        self.grad_weights = None
        self.grad_bias = None

    @classmethod
    def glorot(cls, in_width: int, out_width: int, activation: str,
               rng: np.random.Generator, dtype=np.float32) -> "DenseLayer":
        """Uniform(+/- sqrt(6 / (fan_in + fan_out))) weights, zero bias."""
        limit = math.sqrt(6.0 / (in_width + out_width))
        w = rng.uniform(-limit, limit, size=(out_width, in_width)).astype(dtype)
        b = np.zeros(out_width, dtype=dtype)
        return cls(w, b, activation)

    def astype(self, dtype) -> "DenseLayer":
        return DenseLayer(self.weights.astype(dtype), self.bias.astype(dtype),
                          self.activation)


@dataclass
class GaussianHead:
    """Pair of linear layers producing the mean and log-variance of the latent."""

    mu_layer: DenseLayer
    logvar_layer: DenseLayer

    def __post_init__(self):
        if (self.mu_layer.in_width != self.logvar_layer.in_width
                or self.mu_layer.out_width != self.logvar_layer.out_width):
            raise ShapeMismatch("mu and logvar layers must have identical shapes")
        if not (self.mu_layer.activation == self.logvar_layer.activation == "linear"):
            raise ValueError("Gaussian head layers must be linear")

    @classmethod
    def glorot(cls, in_width: int, out_width: int, rng: np.random.Generator,
               dtype=np.float32) -> "GaussianHead":
        return cls(DenseLayer.glorot(in_width, out_width, "linear", rng, dtype),
                   DenseLayer.glorot(in_width, out_width, "linear", rng, dtype))

    def zero_grad(self) -> None:
        self.mu_layer.zero_grad()
        self.logvar_layer.zero_grad()

    def astype(self, dtype) -> "GaussianHead":
        return GaussianHead(self.mu_layer.astype(dtype), self.logvar_layer.astype(dtype))


def _as_batch(x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim == 2:
        return arr, False
    raise DimensionMismatch(f"expected vector or batch, got shape {arr.shape}")


def dense_forward(layer: DenseLayer, x) -> np.ndarray:
    """Plain forward pass through one layer (no recording)."""
    batch, squeeze = _as_batch(x)
    if batch.shape[1] != layer.in_width:
        raise DimensionMismatch(
            f"input width {batch.shape[1]} != layer width {layer.in_width}")
    out = batch @ layer.weights.T + layer.bias
    if layer.activation == "relu":
        np.maximum(out, 0.0, out=out)
    return out[0] if squeeze else out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def gaussian_kl(mu, logvar) -> float:
    """KL[N(mu, diag(exp(logvar))) || N(0, I)], summed over dimensions."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    if mu.shape != logvar.shape:
        raise ShapeMismatch("mu and logvar must have the same shape")
    return float(0.5 * np.sum(mu ** 2 + np.exp(logvar) - 1.0 - logvar))


def gaussian_kl_per_row(mu: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    return 0.5 * np.sum(mu ** 2 + np.exp(logvar) - 1.0 - logvar, axis=1)


def reparameterize(mu, logvar, noise) -> np.ndarray:
    """z = mu + exp(logvar / 2) * noise, with externally supplied noise."""
    mu = np.asarray(mu)
    logvar = np.asarray(logvar)
    noise = np.asarray(noise)
    if mu.shape != logvar.shape or mu.shape != noise.shape:
        raise ShapeMismatch("mu, logvar and noise must share a shape")
    return mu + np.exp(0.5 * logvar) * noise


class TapeNode:
    """One intermediate value of a recorded forward computation."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = value
        self.grad: Optional[np.ndarray] = None


def _accum(node: TapeNode, g: np.ndarray) -> None:
    node.grad = g if node.grad is None else node.grad + g


class Tape:
    """Records one forward computation for exact reverse-mode differentiation.

    Gradients flow to layer parameters (accumulated on layer.grad_weights /
    grad_bias) and to every leaf created with `leaf()`. A tape can be walked
    backward once; a second backward() raises StaleTape.
    """

    def __init__(self):
        self._back: list[Callable[[], None]] = []
        self._consumed = False

    def leaf(self, value) -> TapeNode:
        return TapeNode(np.asarray(value))

    def dense(self, layer: DenseLayer, x: TapeNode) -> TapeNode:
        batch = x.value
        if batch.ndim != 2 or batch.shape[1] != layer.in_width:
            raise DimensionMismatch(
                f"input shape {batch.shape} incompatible with layer width {layer.in_width}")
        pre = batch @ layer.weights.T + layer.bias
        out = np.maximum(pre, 0.0) if layer.activation == "relu" else pre
        node = TapeNode(out)

        def back():
            dy = node.grad
            if dy is None:
                return
            if layer.activation == "relu":
                dy = dy * (pre > 0)
            gw = dy.T @ batch
            gb = dy.sum(axis=0)
            layer.grad_weights = gw if layer.grad_weights is None else layer.grad_weights + gw
            layer.grad_bias = gb if layer.grad_bias is None else layer.grad_bias + gb
            _accum(x, dy @ layer.weights)

        self._back.append(back)
        return node

    def chain(self, layers: Sequence[DenseLayer], x: TapeNode) -> TapeNode:
        for layer in layers:
            x = self.dense(layer, x)
        return x

    def reparameterize(self, mu: TapeNode, logvar: TapeNode, noise: np.ndarray) -> TapeNode:
        std = np.exp(0.5 * logvar.value)
        node = TapeNode(mu.value + std * noise)

        def back():
            dz = node.grad
            if dz is None:
                return
            _accum(mu, dz)
            _accum(logvar, dz * (0.5 * std * noise))

        self._back.append(back)
        return node

    def gaussian_kl_sum(self, mu: TapeNode, logvar: TapeNode) -> TapeNode:
        ev = np.exp(logvar.value)
        node = TapeNode(np.asarray(
            0.5 * np.sum(mu.value ** 2 + ev - 1.0 - logvar.value)))

        def back():
            d = node.grad
            if d is None:
                return
            _accum(mu, d * mu.value)
            _accum(logvar, d * 0.5 * (ev - 1.0))

        self._back.append(back)
        return node

    def half_sq_residual_sum(self, pred: TapeNode, target: TapeNode) -> TapeNode:
        """0.5 * sum((pred - target)^2); both sides receive gradients."""
        r = pred.value - target.value
        node = TapeNode(np.asarray(0.5 * np.sum(r * r)))

        def back():
            d = node.grad
            if d is None:
                return
            _accum(pred, d * r)
            _accum(target, -d * r)

        self._back.append(back)
        return node

    def sum_all(self, x: TapeNode) -> TapeNode:
        node = TapeNode(np.asarray(np.sum(x.value)))

        def back():
            if node.grad is not None:
                _accum(x, np.broadcast_to(node.grad, x.value.shape))

        self._back.append(back)
        return node

    def add(self, a: TapeNode, b: TapeNode) -> TapeNode:
        node = TapeNode(a.value + b.value)

        def back():
            if node.grad is not None:
                _accum(a, node.grad)
                _accum(b, node.grad)

        self._back.append(back)
        return node

    def scale(self, a: TapeNode, c: float) -> TapeNode:
        node = TapeNode(a.value * c)

        def back():
            if node.grad is not None:
                _accum(a, node.grad * c)

        self._back.append(back)
        return node

    def backward(self, loss: TapeNode, seed: float = 1.0) -> None:
        """Seed the scalar loss and propagate gradients to all parents."""
        if self._consumed:
            raise StaleTape("tape already walked backward")
        if loss.value.ndim != 0:
            raise DimensionMismatch("backward() requires a scalar loss node")
        self._consumed = True
        loss.grad = np.asarray(seed, dtype=loss.value.dtype)
        for fn in reversed(self._back):
            fn()


@dataclass
class AdamState:
    """Adam moments plus hyperparameters; weight decay is decoupled
    (applied to the parameters directly, before the Adam delta)."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(state: AdamState, params: Sequence[np.ndarray],
              grads: Sequence[np.ndarray]):
    """One in-place Adam update with bias correction. Returns (params, state)."""
    if len(params) != len(grads):
        raise ShapeMismatch("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    lr, eps = state.learning_rate, state.eps
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeMismatch(f"param shape {p.shape} != grad shape {g.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteGradient("gradient contains NaN or inf")
        if state.weight_decay:
            p -= lr * state.weight_decay * p
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


def finite_difference_input_grad(f: Callable[[np.ndarray], float],
                                 x: np.ndarray) -> np.ndarray:
    """Central finite differences with h = 1e-5 * max(1, |x_i|), in float64."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        h = 1e-5 * max(1.0, abs(flat[i]))
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
