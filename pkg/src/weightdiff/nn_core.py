"""
Dense feedforward networks over flat weight vectors.

A network is a NetworkSpec plus a 1-D float64 array holding every layer's
weight matrix (row-major, fan_in x fan_out) followed by its bias. Gradients
are exact layerwise reverse-mode accumulation over the small fixed set of
operations used here; there is no general tape.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Literal

import numpy as np


Activation = Literal["tanh", "relu"]
OutputHead = Literal["linear", "softmax_ce", "mse"]

ACTIVATIONS: tuple[str, ...] = ("tanh", "relu")
OUTPUT_HEADS: tuple[str, ...] = ("linear", "softmax_ce", "mse")

# Weight vectors are plain float64 arrays; the alias documents intent.
WeightVector = np.ndarray


class SpecError(ValueError):
    """Invalid network specification or mismatched dimensions."""


class NonFiniteError(FloatingPointError):
    """A NaN/Inf showed up where only finite values are allowed."""

    def __init__(self, message: str, *, layer: int | None = None, step: int | None = None):
        super().__init__(message)
        self.layer = layer
        self.step = step


@dataclass(frozen=True)
class NetworkSpec:
    layer_sizes: tuple[int, ...]
    activation: Activation = "tanh"
    output_head: OutputHead = "softmax_ce"

    def __post_init__(self) -> None:
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise SpecError(f"layer_sizes needs at least 2 entries, got {sizes}")
        if any(s < 1 for s in sizes):
            raise SpecError(f"layer sizes must be >= 1, got {sizes}")
        if self.activation not in ACTIVATIONS:
            raise SpecError(f"unknown activation {self.activation!r}")
        if self.output_head not in OUTPUT_HEADS:
            raise SpecError(f"unknown output head {self.output_head!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def parameter_count(self) -> int:
        return parameter_count(self)


def parameter_count(spec: NetworkSpec) -> int:
    sizes = spec.layer_sizes
    return sum(sizes[l] * sizes[l + 1] + sizes[l + 1] for l in range(len(sizes) - 1))


@dataclass(frozen=True)
class LabeledBatch:
    """
    inputs: (n, input_dim). targets: int class labels of shape (n,) for the
    softmax head, real targets of shape (n, output_dim) for regression heads.
    """

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "inputs", np.atleast_2d(np.asarray(self.inputs, dtype=np.float64)))
        object.__setattr__(self, "targets", np.asarray(self.targets))

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def with_inputs(self, inputs: np.ndarray) -> LabeledBatch:
        return replace(self, inputs=inputs)


@dataclass(frozen=True)
class GradResult:
    loss: float
    grad: WeightVector


@dataclass(frozen=True)
class ForwardTrace:
    """Per-layer inputs and pre-activations kept for the backward pass."""

    layer_inputs: list[np.ndarray]
    pre_activations: list[np.ndarray]
    output: np.ndarray


@dataclass(frozen=True)
class AdamState:
    m: WeightVector
    v: WeightVector
    step: int = 0
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps_stab: float = 1e-8

    @classmethod
    def zeros(cls, dim: int, lr: float = 0.005, **kwargs) -> AdamState:
        return cls(m=np.zeros(dim), v=np.zeros(dim), lr=lr, **kwargs)


# ──────────────────────────────────────────────────────────────────────────────
# Parameter layout
# ──────────────────────────────────────────────────────────────────────────────

def unflatten(spec: NetworkSpec, w: WeightVector) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat vector into (W, b) views, one pair per layer."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.shape[0] != spec.parameter_count:
        raise SpecError(
            f"weight vector has shape {w.shape}, spec needs ({spec.parameter_count},)"
        )
    layers = []
    offset = 0
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        W = w[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = w[offset:offset + fan_out]
        offset += fan_out
        layers.append((W, b))
    return layers


def init_network(spec: NetworkSpec, init_std: float, rng: np.random.Generator) -> WeightVector:
    if not init_std > 0:
        raise SpecError(f"init_std must be positive, got {init_std}")
    return rng.normal(0.0, init_std, size=spec.parameter_count)


def require_finite(values: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"non-finite values in {what}")


# ──────────────────────────────────────────────────────────────────────────────
# Forward / backward
# ──────────────────────────────────────────────────────────────────────────────

def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _activate_grad(kind: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return 1.0 - a * a
    return (z > 0.0).astype(np.float64)


def forward_trace(spec: NetworkSpec, w: WeightVector, inputs: np.ndarray) -> ForwardTrace:
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if x.shape[1] != spec.input_dim:
        raise SpecError(f"input width {x.shape[1]} != layer_sizes[0]={spec.input_dim}")
    layer_inputs: list[np.ndarray] = []
    pre: list[np.ndarray] = []
    h = x
    layers = unflatten(spec, w)
    last = len(layers) - 1
    for idx, (W, b) in enumerate(layers):
        layer_inputs.append(h)
        z = h @ W + b
        if not np.all(np.isfinite(z)):
            raise NonFiniteError(f"non-finite pre-activation in layer {idx}", layer=idx)
        pre.append(z)
        h = z if idx == last else _activate(spec.activation, z)
    return ForwardTrace(layer_inputs=layer_inputs, pre_activations=pre, output=h)


def forward(spec: NetworkSpec, w: WeightVector, inputs: np.ndarray) -> np.ndarray:
    """Raw network outputs (logits for the softmax head)."""
    return forward_trace(spec, w, inputs).output


def backward(
    spec: NetworkSpec,
    w: WeightVector,
    trace: ForwardTrace,
    grad_output: np.ndarray,
) -> WeightVector:
    """Pull dL/d(output) back to dL/dw for the trace's forward pass."""
    layers = unflatten(spec, w)
    grads: list[np.ndarray] = [None] * (2 * len(layers))  # type: ignore[list-item]
    delta = np.asarray(grad_output, dtype=np.float64).reshape(trace.output.shape)
    for idx in range(len(layers) - 1, -1, -1):
        W, _ = layers[idx]
        grads[2 * idx] = trace.layer_inputs[idx].T @ delta
        grads[2 * idx + 1] = delta.sum(axis=0)
        if idx > 0:
            z_prev = trace.pre_activations[idx - 1]
            a_prev = trace.layer_inputs[idx]
            delta = (delta @ W.T) * _activate_grad(spec.activation, z_prev, a_prev)
    return np.concatenate([g.ravel() for g in grads])


# ──────────────────────────────────────────────────────────────────────────────
# Task loss
# ──────────────────────────────────────────────────────────────────────────────

def _head_loss(spec: NetworkSpec, output: np.ndarray, batch: LabeledBatch) -> tuple[float, np.ndarray]:
    n = output.shape[0]
    if spec.output_head == "softmax_ce":
        labels = batch.targets.astype(np.int64).reshape(-1)
        if labels.shape[0] != n or labels.min() < 0 or labels.max() >= spec.output_dim:
            raise SpecError("class labels do not match the softmax head")
        shifted = output - output.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_p = shifted - log_z
        loss = float(-log_p[np.arange(n), labels].mean())
        grad = np.exp(log_p)
        grad[np.arange(n), labels] -= 1.0
        return loss, grad / n
    # linear and mse heads are both scored by mean squared error
    targets = np.asarray(batch.targets, dtype=np.float64).reshape(output.shape)
    diff = output - targets
    loss = float(np.mean(diff * diff))
    return loss, 2.0 * diff / diff.size


def task_loss(spec: NetworkSpec, w: WeightVector, batch: LabeledBatch) -> float:
    if len(batch) == 0:
        raise SpecError("empty batch")
    loss, _ = _head_loss(spec, forward(spec, w, batch.inputs), batch)
    return loss


def task_loss_grad(spec: NetworkSpec, w: WeightVector, batch: LabeledBatch) -> GradResult:
    if len(batch) == 0:
        raise SpecError("empty batch")
    trace = forward_trace(spec, w, batch.inputs)
    loss, grad_out = _head_loss(spec, trace.output, batch)
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite task loss at the output head", layer=spec.n_layers - 1)
    return GradResult(loss=loss, grad=backward(spec, w, trace, grad_out))


def predict_labels(spec: NetworkSpec, w: WeightVector, inputs: np.ndarray) -> np.ndarray:
    return forward(spec, w, inputs).argmax(axis=1)


# ──────────────────────────────────────────────────────────────────────────────
# Finite differences
# ──────────────────────────────────────────────────────────────────────────────

def central_difference(f: Callable[[np.ndarray], float], w: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if not h > 0:
        raise ValueError(f"step h must be positive, got {h}")
    w = np.array(w, dtype=np.float64)
    grad = np.empty_like(w)
    for i in range(w.shape[0]):
        orig = w[i]
        w[i] = orig + h
        f_plus = f(w)
        w[i] = orig - h
        f_minus = f(w)
        w[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def finite_diff_grad(spec: NetworkSpec, w: WeightVector, batch: LabeledBatch, h: float = 1e-5) -> WeightVector:
    return central_difference(lambda v: task_loss(spec, v, batch), w, h)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max|a-b| scaled by the larger of the two max-magnitudes (floored)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(b), initial=0.0)), floor)
    return float(np.max(np.abs(a - b), initial=0.0)) / scale


# ──────────────────────────────────────────────────────────────────────────────
# Optimizers
# ──────────────────────────────────────────────────────────────────────────────

def adam_step(state: AdamState, w: WeightVector, grad: WeightVector) -> tuple[WeightVector, AdamState]:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.m.shape or np.shape(w) != state.m.shape:
        raise SpecError(f"adam dimension mismatch: w{np.shape(w)} grad{grad.shape} state{state.m.shape}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError(f"non-finite gradient at adam step {state.step + 1}", step=state.step + 1)
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** step)
    v_hat = v / (1.0 - state.beta2 ** step)
    new_w = w - state.lr * m_hat / (np.sqrt(v_hat) + state.eps_stab)
    return new_w, replace(state, m=m, v=v, step=step)


SAM_MIN_NORM = 1e-12


def sam_perturb(grad: WeightVector, rho: float) -> WeightVector:
    """SAM ascent direction rho * g / ||g||; zero for vanishing gradients."""
    if rho < 0:
        raise ValueError(f"rho must be nonnegative, got {rho}")
    grad = np.asarray(grad, dtype=np.float64)
    norm = float(np.linalg.norm(grad))
    if rho == 0 or norm < SAM_MIN_NORM:
        return np.zeros_like(grad)
    return rho * grad / norm


def sgd_step(w: WeightVector, grad: WeightVector, lr: float) -> WeightVector:
    return w - lr * np.asarray(grad, dtype=np.float64)
