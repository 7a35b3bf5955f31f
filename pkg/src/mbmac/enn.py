"""Embedding neural network: a dynamics model conditioned on a learned task vector.

The network maps ``[norm(s), norm(a), h]`` to the normalized state delta. The
loss is half the squared error in normalized-delta space, i.e. the Gaussian
negative log-likelihood with unit covariance and constants dropped.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .ndmath import Gradients, MlpParams, ShapeError, forward_trace, backward, init_mlp, sgd_step

MIN_STD = 1e-6


@dataclass(frozen=True)
class TransitionDataset:
    """Ordered ``(s, a, s')`` triples stored as three row-aligned arrays."""

    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    task_id: int | None = None

    def __post_init__(self):
        s, a, s2 = (np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in
                    (self.states, self.actions, self.next_states))
        if s.shape != s2.shape or s.shape[0] != a.shape[0]:
            raise ShapeError(f"inconsistent transition arrays: {s.shape}, {a.shape}, {s2.shape}")
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "actions", a)
        object.__setattr__(self, "next_states", s2)

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    def subset(self, index) -> "TransitionDataset":
        return TransitionDataset(self.states[index], self.actions[index], self.next_states[index], self.task_id)

    @staticmethod
    def concatenate(parts: Sequence["TransitionDataset"]) -> "TransitionDataset":
        if not parts:
            raise ValueError("nothing to concatenate")
        return TransitionDataset(
            np.concatenate([p.states for p in parts]),
            np.concatenate([p.actions for p in parts]),
            np.concatenate([p.next_states for p in parts]),
        )

    @staticmethod
    def empty(state_dim: int, action_dim: int) -> "TransitionDataset":
        return TransitionDataset(np.zeros((0, state_dim)), np.zeros((0, action_dim)), np.zeros((0, state_dim)))


@dataclass(frozen=True)
class NormStats:
    """Per-dimension mean/std for states, actions and state deltas."""

    state_mean: np.ndarray
    state_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray
    delta_mean: np.ndarray
    delta_std: np.ndarray

    def __post_init__(self):
        for name in ("state_std", "action_std", "delta_std"):
            if not np.all(getattr(self, name) > 0):
                raise ValueError(f"{name} must be strictly positive")

    @classmethod
    def from_data(cls, data: TransitionDataset) -> "NormStats":
        if len(data) == 0:
            raise ValueError("cannot compute normalization stats from an empty dataset")
        delta = data.next_states - data.states

        def std(x):
            sd = x.std(axis=0)
            return np.where(sd < MIN_STD, 1.0, sd)

        return cls(
            data.states.mean(axis=0), std(data.states),
            data.actions.mean(axis=0), std(data.actions),
            delta.mean(axis=0), std(delta),
        )

    @classmethod
    def identity(cls, state_dim: int, action_dim: int) -> "NormStats":
        return cls(np.zeros(state_dim), np.ones(state_dim), np.zeros(action_dim),
                   np.ones(action_dim), np.zeros(state_dim), np.ones(state_dim))

    def normalize_state(self, s):
        return (s - self.state_mean) / self.state_std

    def denormalize_state(self, z):
        return z * self.state_std + self.state_mean

    def normalize_action(self, a):
        return (a - self.action_mean) / self.action_std

    def denormalize_action(self, z):
        return z * self.action_std + self.action_mean

    def normalize_delta(self, d):
        return (d - self.delta_mean) / self.delta_std

    def denormalize_delta(self, z):
        return z * self.delta_std + self.delta_mean

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in
                ("state_mean", "state_std", "action_mean", "action_std", "delta_mean", "delta_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})


@dataclass(frozen=True)
class TaskEmbedding:
    id: int
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise ValueError(f"embedding {self.id} has non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class EmbeddingTable:
    embeddings: tuple[TaskEmbedding, ...]

    def __post_init__(self):
        embs = tuple(self.embeddings)
        if [e.id for e in embs] != list(range(len(embs))):
            raise ValueError("embedding ids must be 0..n-1 in order")
        if len({e.dim for e in embs}) > 1:
            raise ValueError("all embeddings must share one dimension")
        object.__setattr__(self, "embeddings", embs)

    @classmethod
    def zeros(cls, n: int, dim: int) -> "EmbeddingTable":
        return cls(tuple(TaskEmbedding(i, np.zeros(dim)) for i in range(n)))

    def __len__(self) -> int:
        return len(self.embeddings)

    def __getitem__(self, i: int) -> TaskEmbedding:
        return self.embeddings[i]

    def __iter__(self):
        return iter(self.embeddings)

    @property
    def dim(self) -> int:
        return self.embeddings[0].dim if self.embeddings else 0

    def with_values(self, i: int, values: np.ndarray) -> "EmbeddingTable":
        embs = list(self.embeddings)
        embs[i] = TaskEmbedding(i, values)
        return EmbeddingTable(tuple(embs))

    def as_array(self) -> np.ndarray:
        return np.stack([e.values for e in self.embeddings]) if self.embeddings else np.zeros((0, 0))


@dataclass(frozen=True)
class EnnModel:
    params: MlpParams
    norm: NormStats
    state_dim: int
    action_dim: int
    embedding_dim: int

    def __post_init__(self):
        sizes = self.params.layer_sizes
        if sizes[0] != self.state_dim + self.action_dim + self.embedding_dim:
            raise ShapeError(
                f"input layer {sizes[0]} != state_dim+action_dim+embedding_dim "
                f"= {self.state_dim + self.action_dim + self.embedding_dim}"
            )
        if sizes[-1] != self.state_dim:
            raise ShapeError(f"output layer {sizes[-1]} != state_dim {self.state_dim}")

    def with_params(self, params: MlpParams) -> "EnnModel":
        return replace(self, params=params)


def build_model(
    state_dim: int,
    action_dim: int,
    embedding_dim: int,
    hidden_sizes: Sequence[int],
    norm: NormStats,
    rng: np.random.Generator,
) -> EnnModel:
    sizes = [state_dim + action_dim + embedding_dim, *hidden_sizes, state_dim]
    return EnnModel(init_mlp(sizes, rng), norm, state_dim, action_dim, embedding_dim)


def _embedding_values(h) -> np.ndarray:
    return h.values if isinstance(h, TaskEmbedding) else np.asarray(h, dtype=np.float64).reshape(-1)


def model_inputs(model: EnnModel, s: np.ndarray, a: np.ndarray, h) -> np.ndarray:
    """Assemble the (batched) network input ``[norm(s), norm(a), h]``."""
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    hv = _embedding_values(h)
    if s.shape[-1] != model.state_dim or a.shape[-1] != model.action_dim or hv.shape[0] != model.embedding_dim:
        raise ShapeError(
            f"got state {s.shape}, action {a.shape}, embedding {hv.shape}; model expects "
            f"({model.state_dim}, {model.action_dim}, {model.embedding_dim})"
        )
    if s.shape[:-1] != a.shape[:-1]:
        raise ShapeError(f"state batch {s.shape} and action batch {a.shape} differ")
    zs = model.norm.normalize_state(s)
    za = model.norm.normalize_action(a)
    hb = np.broadcast_to(hv, s.shape[:-1] + hv.shape)
    return np.concatenate([zs, za, hb], axis=-1)


def predict_next_state(model: EnnModel, s: np.ndarray, a: np.ndarray, h) -> np.ndarray:
    """``s + denorm(net([norm(s), norm(a), h]))``; accepts single rows or batches."""
    x = model_inputs(model, s, a, h)
    out = forward_trace(model.params, x)[-1]
    return np.asarray(s, dtype=np.float64) + model.norm.denormalize_delta(out)


def _residuals(model: EnnModel, h, batch: TransitionDataset):
    if len(batch) == 0:
        raise ValueError("task loss needs a nonempty batch")
    x = model_inputs(model, batch.states, batch.actions, h)
    acts = forward_trace(model.params, x)
    target = model.norm.normalize_delta(batch.next_states - batch.states)
    return x, acts, acts[-1] - target


def task_loss(model: EnnModel, h, batch: TransitionDataset) -> float:
    """Mean over the batch of ``0.5 * ||target - prediction||^2`` in normalized-delta space."""
    _, _, err = _residuals(model, h, batch)
    return float(0.5 * np.sum(err * err) / len(batch))


def per_sample_loss(model: EnnModel, h, batch: TransitionDataset) -> np.ndarray:
    _, _, err = _residuals(model, h, batch)
    return 0.5 * np.sum(err * err, axis=1)


def task_loss_grads(model: EnnModel, h, batch: TransitionDataset) -> tuple[Gradients, np.ndarray]:
    """Gradients of :func:`task_loss` w.r.t. the network parameters and the embedding."""
    x, acts, err = _residuals(model, h, batch)
    grads = backward(model.params, x, err / len(batch), trace=acts)
    off = model.state_dim + model.action_dim
    # input gradient rows already carry the 1/B factor, so summing gives the batch mean
    grad_h = grads.input[:, off:].sum(axis=0)
    return Gradients(grads.weights, grads.biases), grad_h


def inner_adapt(
    model: EnnModel,
    h: TaskEmbedding,
    data: TransitionDataset,
    steps: int,
    lr: float,
    batch_size: int | None = None,
    rng: np.random.Generator | None = None,
    embedding_lr: float | None = None,
) -> tuple[MlpParams, TaskEmbedding]:
    """Run ``steps`` simultaneous SGD steps on the parameters and the embedding.

    With ``batch_size=None`` every step uses the whole of ``data``. Otherwise the
    data is shuffled once with ``rng`` and consecutive minibatches are consumed,
    wrapping around when exhausted. ``embedding_lr`` defaults to ``lr``.
    Neither ``model`` nor ``h`` is modified.
    """
    if steps < 1:
        raise ValueError(f"inner_adapt needs steps >= 1, got {steps}")
    if not lr > 0:
        raise ValueError(f"inner learning rate must be positive, got {lr}")
    lr_h = lr if embedding_lr is None else embedding_lr
    if not lr_h >= 0:
        raise ValueError(f"embedding learning rate must be non-negative, got {lr_h}")
    batches = _minibatches(data, steps, batch_size, rng)
    params = model.params
    hv = h.values
    for batch in batches:
        grads, grad_h = task_loss_grads(model.with_params(params), hv, batch)
        if not np.all(np.isfinite(grad_h)):
            raise FloatingPointError("non-finite embedding gradient")
        params = sgd_step(params, grads, lr)
        hv = hv - lr_h * grad_h
    return params, TaskEmbedding(h.id, hv)


def _minibatches(data, steps, batch_size, rng):
    n = len(data)
    if n == 0:
        raise ValueError("cannot adapt on an empty dataset")
    if batch_size is None or batch_size >= n:
        return [data] * steps
    if rng is None:
        raise ValueError("minibatch adaptation needs an rng")
    order = rng.permutation(n)
    need = steps * batch_size
    reps = -(-need // n)
    idx = np.tile(order, reps)[:need].reshape(steps, batch_size)
    return [data.subset(row) for row in idx]


def model_to_dict(model: EnnModel, table: EmbeddingTable) -> dict:
    p = model.params
    return {
        "layer_sizes": p.layer_sizes,
        "activations": list(p.activations) + ["linear"],
        "weights": [w.tolist() for w in p.weights],
        "biases": [b.tolist() for b in p.biases],
        "state_dim": model.state_dim,
        "action_dim": model.action_dim,
        "embedding_dim": model.embedding_dim,
        "embeddings": [e.values.tolist() for e in table],
        "norm_stats": model.norm.to_dict(),
    }


def model_from_dict(d: dict) -> tuple[EnnModel, EmbeddingTable]:
    acts = list(d["activations"])
    if not acts or acts[-1] != "linear":
        raise ValueError("last activation must be 'linear'")
    params = MlpParams(
        tuple(np.asarray(w, dtype=np.float64).reshape(o, i) for w, i, o in
              zip(d["weights"], d["layer_sizes"][:-1], d["layer_sizes"][1:])),
        tuple(np.asarray(b, dtype=np.float64) for b in d["biases"]),
        tuple(acts[:-1]),
    )
    emb_dim = int(d["embedding_dim"])
    table = EmbeddingTable(tuple(
        TaskEmbedding(i, np.asarray(v, dtype=np.float64).reshape(emb_dim)) for i, v in enumerate(d["embeddings"])
    ))
    model = EnnModel(params, NormStats.from_dict(d["norm_stats"]), int(d["state_dim"]),
                     int(d["action_dim"]), emb_dim)
    return model, table


def save_model(path: str | Path, model: EnnModel, table: EmbeddingTable) -> None:
    # json writes floats with repr(), which round-trips float64 exactly
    Path(path).write_text(json.dumps(model_to_dict(model, table)))


def load_model(path: str | Path) -> tuple[EnnModel, EmbeddingTable]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"model file not found: {path}")
    return model_from_dict(json.loads(path.read_text()))
