"""Dense-network numeric core: layers, losses, backprop, Adam.

Everything is plain numpy over caller-owned buffers. Inputs may be a single
vector or a ``(batch, features)`` matrix; gradients returned by
``backward_mlp`` are summed over the batch, so any batch averaging must be
baked into the upstream gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolationError, ShapeError, TrainingDivergenceError

ACTIVATIONS = ("lrelu", "sigmoid", "identity")


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim == 2:
        return x, False
    raise ShapeError(f"expected 1-D or 2-D input, got ndim={x.ndim}")


def lrelu(z: np.ndarray, slope: float) -> np.ndarray:
    return np.where(z >= 0.0, z, slope * z)


def lrelu_grad(z: np.ndarray, slope: float) -> np.ndarray:
    # Derivative at exactly zero is defined as 1.
    return np.where(z >= 0.0, 1.0, slope)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.result_type(z, np.float64))
    pos = z >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class DenseLayer:
    """One fully connected layer: ``act(weights @ x + bias)``.

    ``weights`` has shape ``(out_size, in_size)``; ``bias`` shape ``(out_size,)``.
    """

    weights: np.ndarray
    bias: np.ndarray
    activation: str = "identity"
    lrelu_slope: float = 0.4

    def __post_init__(self):
        self.weights = np.asarray(self.weights)
        self.bias = np.asarray(self.bias)
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise ShapeError("weights must be 2-D and bias 1-D")
        if self.bias.shape[0] != self.weights.shape[0]:
            raise ShapeError(
                f"bias length {self.bias.shape[0]} != out size {self.weights.shape[0]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.activation == "lrelu" and not 0.0 < self.lrelu_slope < 1.0:
            raise ValueError("lrelu slope must be in (0, 1)")

    @property
    def in_size(self) -> int:
        return self.weights.shape[1]

    @property
    def out_size(self) -> int:
        return self.weights.shape[0]

    def apply_activation(self, z: np.ndarray) -> np.ndarray:
        if self.activation == "lrelu":
            return lrelu(z, self.lrelu_slope)
        if self.activation == "sigmoid":
            return sigmoid(z)
        return z

    def activation_grad(self, z: np.ndarray, out: np.ndarray) -> np.ndarray:
        if self.activation == "lrelu":
            return lrelu_grad(z, self.lrelu_slope)
        if self.activation == "sigmoid":
            return out * (1.0 - out)
        return np.ones_like(z)


@dataclass
class MlpCache:
    """Per-layer intermediates from ``forward_mlp``, consumed by ``backward_mlp``."""

    inputs: list[np.ndarray]
    pre_activations: list[np.ndarray]
    outputs: list[np.ndarray]
    layer_shapes: list[tuple[int, int]]


@dataclass
class Gradients:
    """Per-layer weight/bias gradient buffers, shape-matched to a layer stack."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def zeros_like(cls, layers: list[DenseLayer]) -> "Gradients":
        return cls(
            weights=[np.zeros_like(l.weights) for l in layers],
            biases=[np.zeros_like(l.bias) for l in layers],
        )

    def add_(self, other: "Gradients") -> "Gradients":
        for a, b in zip(self.weights, other.weights):
            a += b
        for a, b in zip(self.biases, other.biases):
            a += b
        return self

    def arrays(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


def glorot_init(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform Glorot matrix of shape ``(fan_out, fan_in)``."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"fan dimensions must be >= 1, got ({fan_in}, {fan_out})")
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def forward_mlp(layers: list[DenseLayer], x: np.ndarray) -> tuple[np.ndarray, MlpCache]:
    xb, squeeze = _as_batch(x)
    if xb.shape[1] != layers[0].in_size:
        raise ShapeError(
            f"input width {xb.shape[1]} != first layer in size {layers[0].in_size}"
        )
    cache = MlpCache(inputs=[], pre_activations=[], outputs=[],
                     layer_shapes=[l.weights.shape for l in layers])
    h = xb
    for layer in layers:
        z = h @ layer.weights.T + layer.bias
        a = layer.apply_activation(z)
        cache.inputs.append(h)
        cache.pre_activations.append(z)
        cache.outputs.append(a)
        h = a
    return (h[0] if squeeze else h), cache


def backward_mlp(
    layers: list[DenseLayer], cache: MlpCache, upstream_grad: np.ndarray
) -> tuple[Gradients, np.ndarray]:
    """Backpropagate ``upstream_grad`` (d loss / d output) through the stack.

    Returns per-layer parameter gradients summed over the batch and the
    gradient with respect to the stack input.
    """
    if len(cache.inputs) != len(layers) or cache.layer_shapes != [
        l.weights.shape for l in layers
    ]:
        raise ContractViolationError("cache does not match the given layer stack")
    g, squeeze = _as_batch(upstream_grad)
    if g.shape != cache.outputs[-1].shape:
        raise ContractViolationError("upstream gradient shape mismatch")
    grads = Gradients(weights=[], biases=[])
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        dz = g * layer.activation_grad(cache.pre_activations[i], cache.outputs[i])
        grads.weights.append(dz.T @ cache.inputs[i])
        grads.biases.append(dz.sum(axis=0))
        g = dz @ layer.weights
    grads.weights.reverse()
    grads.biases.reverse()
    return grads, (g[0] if squeeze else g)


def mse_loss(x: np.ndarray, x_hat: np.ndarray) -> float:
    """Squared error averaged over every element (per-dimension mean)."""
    x = np.asarray(x)
    x_hat = np.asarray(x_hat)
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    d = x - x_hat
    return float(np.mean(d * d))


def mse_grad(x: np.ndarray, x_hat: np.ndarray) -> np.ndarray:
    """Gradient of ``mse_loss`` with respect to ``x_hat``."""
    x = np.asarray(x)
    x_hat = np.asarray(x_hat)
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    return 2.0 * (x_hat - x) / x.size


@dataclass
class AdamState:
    """Adam moment buffers for a flat list of parameter arrays."""

    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    learning_rate: float = 1e-3
    epsilon: float = 1e-8

    @classmethod
    def init_like(
        cls,
        params: list[np.ndarray],
        learning_rate: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ) -> "AdamState":
        if not 0.0 < beta1 < 1.0 or not 0.0 < beta2 < 1.0:
            raise ValueError("betas must be in (0, 1)")
        if learning_rate <= 0.0 or epsilon <= 0.0:
            raise ValueError("learning_rate and epsilon must be > 0")
        return cls(
            first_moment=[np.zeros_like(p) for p in params],
            second_moment=[np.zeros_like(p) for p in params],
            beta1=beta1,
            beta2=beta2,
            learning_rate=learning_rate,
            epsilon=epsilon,
        )


def adam_step(
    params: list[np.ndarray], grads: list[np.ndarray], state: AdamState
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update; mutates the moment buffers in place."""
    if len(params) != len(state.first_moment) or len(params) != len(grads):
        raise ShapeError("params, grads and state buffers must align")
    for p, g, m in zip(params, grads, state.first_moment):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError("parameter/gradient/moment shape mismatch")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError("non-finite gradient in adam_step")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    new_params = []
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        new_params.append(p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon))
    return new_params, state
