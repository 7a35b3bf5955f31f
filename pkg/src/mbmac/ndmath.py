"""Dense MLP primitives: forward pass, analytic backward pass and plain SGD.

Everything here is a pure function over float64 numpy arrays. Inputs may be a
single vector of shape ``(in,)`` or a batch of row vectors ``(B, in)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

HIDDEN_ACTIVATIONS = ("tanh",)


class ShapeError(ValueError):
    """Raised when array shapes do not line up with the network layout."""


@dataclass(frozen=True)
class MlpParams:
    """Weights and biases of a fully connected network.

    ``weights[l]`` has shape ``(out, in)``; ``activations`` holds one tag per
    hidden layer. The output layer is always linear.
    """

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    activations: tuple[str, ...]

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ShapeError(f"{len(self.weights)} weight matrices but {len(self.biases)} bias vectors")
        if len(self.activations) != len(self.weights) - 1:
            raise ShapeError(
                f"expected {len(self.weights) - 1} hidden activations, got {len(self.activations)}"
            )
        for act in self.activations:
            if act not in HIDDEN_ACTIVATIONS:
                raise ValueError(f"unsupported activation {act!r}")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {l}: weight {w.shape} incompatible with bias {b.shape}")
            if l > 0 and w.shape[1] != self.weights[l - 1].shape[0]:
                raise ShapeError(
                    f"layer {l}: expects {w.shape[1]} inputs but layer {l - 1} "
                    f"produces {self.weights[l - 1].shape[0]}"
                )

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "MlpParams":
        return MlpParams(
            tuple(w.copy() for w in self.weights),
            tuple(b.copy() for b in self.biases),
            self.activations,
        )


@dataclass(frozen=True)
class Gradients:
    """Gradients shaped like :class:`MlpParams`, plus the gradient w.r.t. the input.

    For batched inputs the parameter gradients are summed over rows while
    ``input`` keeps one row per sample.
    """

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    input: np.ndarray | None = None

    def scaled(self, factor: float) -> "Gradients":
        return Gradients(
            tuple(factor * w for w in self.weights),
            tuple(factor * b for b in self.biases),
            None if self.input is None else factor * self.input,
        )


def init_mlp(
    layer_sizes: Sequence[int],
    rng: np.random.Generator,
    activation: str = "tanh",
) -> MlpParams:
    """Uniform init in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` for weights and biases."""
    if len(layer_sizes) < 2 or any(int(n) < 1 for n in layer_sizes):
        raise ValueError(f"invalid layer sizes {list(layer_sizes)}")
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpParams(tuple(weights), tuple(biases), (activation,) * (len(layer_sizes) - 2))


def zeros_like(params: MlpParams) -> Gradients:
    return Gradients(
        tuple(np.zeros_like(w) for w in params.weights),
        tuple(np.zeros_like(b) for b in params.biases),
    )


def _check_input(params: MlpParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n_in = params.weights[0].shape[1]
    if x.ndim not in (1, 2) or x.shape[-1] != n_in:
        raise ShapeError(f"input shape {x.shape} does not match network input size {n_in}")
    return x


def forward_trace(params: MlpParams, x: np.ndarray) -> list[np.ndarray]:
    # activations[0] is the input, activations[-1] the linear output
    acts = [x]
    h = x
    last = params.num_layers - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.T + b
        if l < last:
            h = np.tanh(h)
        acts.append(h)
    return acts


def forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on one input vector or a batch of rows."""
    x = _check_input(params, x)
    return forward_trace(params, x)[-1]


def backward(
    params: MlpParams,
    x: np.ndarray,
    output_grad: np.ndarray,
    trace: list[np.ndarray] | None = None,
) -> Gradients:
    """Backpropagate ``output_grad`` (dL/dy) through the network at input ``x``.

    ``trace`` may carry the intermediate activations of an earlier forward
    call on the same input to avoid recomputing them.
    """
    x = _check_input(params, x)
    output_grad = np.asarray(output_grad, dtype=np.float64)
    n_out = params.weights[-1].shape[0]
    expected = x.shape[:-1] + (n_out,)
    if output_grad.shape != expected:
        raise ShapeError(f"output_grad shape {output_grad.shape} does not match expected {expected}")
    acts = forward_trace(params, x) if trace is None else trace

    batched = x.ndim == 2
    n_layers = params.num_layers
    gw: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    delta = output_grad
    for l in range(n_layers - 1, -1, -1):
        a_in = acts[l]
        if batched:
            gw[l] = delta.T @ a_in
            gb[l] = delta.sum(axis=0)
        else:
            gw[l] = np.outer(delta, a_in)
            gb[l] = delta.copy()
        delta = delta @ params.weights[l]
        if l > 0:
            # tanh'(z) = 1 - tanh(z)^2, and acts[l] already holds tanh(z)
            delta = delta * (1.0 - acts[l] * acts[l])
    return Gradients(tuple(gw), tuple(gb), delta)


def sgd_step(params: MlpParams, grads: Gradients, lr: float) -> MlpParams:
    """Return ``p - lr * g`` for every parameter."""
    if not lr >= 0.0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    if len(grads.weights) != params.num_layers:
        raise ShapeError(f"gradients have {len(grads.weights)} layers, params have {params.num_layers}")
    new_w, new_b = [], []
    for l, (w, b, dw, db) in enumerate(zip(params.weights, params.biases, grads.weights, grads.biases)):
        if dw.shape != w.shape or db.shape != b.shape:
            raise ShapeError(f"layer {l}: gradient shapes {dw.shape}/{db.shape} vs params {w.shape}/{b.shape}")
        if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
            raise FloatingPointError(f"non-finite gradient in layer {l}")
        new_w.append(w - lr * dw)
        new_b.append(b - lr * db)
    return MlpParams(tuple(new_w), tuple(new_b), params.activations)


def flatten(params: MlpParams | Gradients) -> np.ndarray:
    parts = []
    for w, b in zip(params.weights, params.biases):
        parts.append(w.ravel())
        parts.append(b.ravel())
    return np.concatenate(parts)


def unflatten(template: MlpParams, flat: np.ndarray) -> MlpParams:
    flat = np.asarray(flat, dtype=np.float64)
    if flat.size != sum(w.size + b.size for w, b in zip(template.weights, template.biases)):
        raise ShapeError(f"flat vector of size {flat.size} does not match the template")
    weights, biases, i = [], [], 0
    for w, b in zip(template.weights, template.biases):
        weights.append(flat[i:i + w.size].reshape(w.shape).copy())
        i += w.size
        biases.append(flat[i:i + b.size].copy())
        i += b.size
    return MlpParams(tuple(weights), tuple(biases), template.activations)
