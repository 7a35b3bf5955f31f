"""REPTILE meta-training of the dynamics network jointly with per-task embeddings."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .enn import (
    EmbeddingTable,
    EnnModel,
    NormStats,
    TaskEmbedding,
    TransitionDataset,
    build_model,
    inner_adapt,
    task_loss,
)
from .envworld import DEFAULT_DT, DEFAULT_HORIZON, Env, TaskSpec
from .ndmath import MlpParams, ShapeError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetaTrainConfig:
    n_tasks: int = 8
    samples_per_task: int = 2000
    inner_steps: int = 10
    inner_lr: float = 0.03
    outer_lr: float = 0.2
    outer_iterations: int = 3000
    batch_size: int = 128
    embedding_lr: float | None = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_tasks", "samples_per_task", "inner_steps", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.outer_iterations < 0:
            raise ValueError(f"outer_iterations must be >= 0, got {self.outer_iterations}")
        if not 0 < self.outer_lr <= 1:
            raise ValueError(f"outer_lr must lie in (0, 1], got {self.outer_lr}")
        if not self.inner_lr > 0:
            raise ValueError(f"inner_lr must be positive, got {self.inner_lr}")
        if self.embedding_lr is not None and not self.embedding_lr > 0:
            raise ValueError(f"embedding_lr must be positive, got {self.embedding_lr}")


@dataclass
class IterationRecord:
    iteration: int
    task_id: int
    pre_loss: float
    post_loss: float


@dataclass
class MetaTrainReport:
    records: list[IterationRecord] = field(default_factory=list)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "task_id", "pre_loss", "post_loss"])
            for r in self.records:
                w.writerow([r.iteration, r.task_id, repr(r.pre_loss), repr(r.post_loss)])


def collect_task_data(
    task: TaskSpec,
    n: int,
    seed: int,
    dt: float = DEFAULT_DT,
    horizon: int = DEFAULT_HORIZON,
    task_id: int | None = None,
) -> TransitionDataset:
    """Gather ``n`` transitions from uniformly random actions, resetting at episode end."""
    if n < 1:
        raise ValueError(f"need at least one sample, got {n}")
    env = Env(task, dt, horizon)
    fam = env.family
    rng = np.random.default_rng(seed)
    states = np.empty((n, fam.state_dim))
    actions = np.empty((n, fam.action_dim))
    nexts = np.empty((n, fam.state_dim))
    s = env.reset(rng, mode="random")
    for t in range(n):
        a = rng.uniform(fam.action_low, fam.action_high)
        res = env.step(a)
        states[t], actions[t], nexts[t] = s, a, res.next_state
        s = env.reset(rng, mode="random") if res.done else res.next_state
    return TransitionDataset(states, actions, nexts, task_id)


def reptile_outer_update(
    theta: MlpParams,
    phi: MlpParams,
    h: TaskEmbedding,
    h_adapted: TaskEmbedding,
    alpha: float,
) -> tuple[MlpParams, TaskEmbedding]:
    """Move ``(theta, h)`` a fraction ``alpha`` of the way towards ``(phi, h_adapted)``."""
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if theta.layer_sizes != phi.layer_sizes or h.values.shape != h_adapted.values.shape:
        raise ShapeError(
            f"cannot interpolate {theta.layer_sizes}/{h.values.shape} "
            f"towards {phi.layer_sizes}/{h_adapted.values.shape}"
        )
    # theta + 1 * (phi - theta) can miss phi by a rounding error, so the endpoints are exact copies
    if alpha == 0:
        return theta.copy(), TaskEmbedding(h.id, h.values.copy())
    if alpha == 1:
        return phi.copy(), TaskEmbedding(h.id, h_adapted.values.copy())
    new = MlpParams(
        tuple(w + alpha * (wp - w) for w, wp in zip(theta.weights, phi.weights)),
        tuple(b + alpha * (bp - b) for b, bp in zip(theta.biases, phi.biases)),
        theta.activations,
    )
    return new, TaskEmbedding(h.id, h.values + alpha * (h_adapted.values - h.values))


def init_meta_model(
    datasets: Sequence[TransitionDataset],
    embedding_dim: int,
    hidden_sizes: Sequence[int],
    seed: int,
) -> tuple[EnnModel, EmbeddingTable]:
    """Fresh network plus zeroed embedding table; normalization comes from all task data."""
    norm = NormStats.from_data(TransitionDataset.concatenate(list(datasets)))
    rng = np.random.default_rng(seed)
    d0 = datasets[0]
    model = build_model(d0.state_dim, d0.action_dim, embedding_dim, hidden_sizes, norm, rng)
    return model, EmbeddingTable.zeros(len(datasets), embedding_dim)


def _task_schedule(n_tasks: int, iterations: int, rng: np.random.Generator) -> list[int]:
    # every task once per epoch, shuffled per epoch
    order: list[int] = []
    while len(order) < iterations:
        order.extend(int(i) for i in rng.permutation(n_tasks))
    return order[:iterations]


def meta_train_on_datasets(
    datasets: Sequence[TransitionDataset],
    config: MetaTrainConfig,
    embedding_dim: int = 5,
    hidden_sizes: Sequence[int] = (64, 64),
    init: tuple[EnnModel, EmbeddingTable] | None = None,
) -> tuple[EnnModel, EmbeddingTable, MetaTrainReport]:
    """Outer REPTILE loop over already collected task datasets."""
    if not datasets:
        raise ValueError("meta-training needs at least one task dataset")
    model, table = init if init is not None else init_meta_model(
        datasets, embedding_dim, hidden_sizes, config.seed)
    if len(table) != len(datasets):
        raise ValueError(f"{len(table)} embeddings for {len(datasets)} datasets")
    rng = np.random.default_rng([config.seed, 1])
    report = MetaTrainReport()
    for it, i in enumerate(_task_schedule(len(datasets), config.outer_iterations, rng)):
        data = datasets[i]
        h = table[i]
        batches_rng = np.random.default_rng([config.seed, 2, it])
        try:
            phi, h_new = inner_adapt(model, h, data, config.inner_steps, config.inner_lr,
                                     batch_size=config.batch_size, rng=batches_rng,
                                     embedding_lr=config.embedding_lr)
        except FloatingPointError as exc:
            raise FloatingPointError(f"outer iteration {it} (task {i}): {exc}") from exc
        # evaluate on the first minibatch drawn this iteration
        eval_idx = np.random.default_rng([config.seed, 2, it]).permutation(len(data))[:config.batch_size]
        eval_batch = data.subset(eval_idx)
        pre = task_loss(model, h, eval_batch)
        post = task_loss(model.with_params(phi), h_new, eval_batch)
        if not (np.isfinite(pre) and np.isfinite(post)):
            raise FloatingPointError(f"non-finite loss at outer iteration {it} (task {i})")
        report.records.append(IterationRecord(it, i, pre, post))
        theta, h_out = reptile_outer_update(model.params, phi, h, h_new, config.outer_lr)
        model = model.with_params(theta)
        table = table.with_values(i, h_out.values)
        if it % 500 == 0:
            log.debug("iteration %d task %d pre %.4f post %.4f", it, i, pre, post)
    return model, table, report


def meta_train(
    tasks: Sequence[TaskSpec],
    config: MetaTrainConfig,
    embedding_dim: int = 5,
    hidden_sizes: Sequence[int] = (64, 64),
    dt: float = DEFAULT_DT,
    horizon: int = DEFAULT_HORIZON,
) -> tuple[EnnModel, EmbeddingTable, MetaTrainReport, list[TransitionDataset]]:
    """Collect random-action data for every task, then run the REPTILE loop."""
    if len(tasks) != config.n_tasks:
        raise ValueError(f"config expects {config.n_tasks} tasks, got {len(tasks)}")
    datasets = [
        collect_task_data(t, config.samples_per_task, seed=config.seed * 1000 + i, dt=dt,
                          horizon=horizon, task_id=i)
        for i, t in enumerate(tasks)
    ]
    model, table, report = meta_train_on_datasets(datasets, config, embedding_dim, hidden_sizes)
    return model, table, report, datasets
