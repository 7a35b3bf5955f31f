"""Online adaptation: sliding observation window, most-likely embedding, meta-test loop."""

from __future__ import annotations

import csv
import math
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .enn import (
    EmbeddingTable,
    EnnModel,
    TaskEmbedding,
    TransitionDataset,
    inner_adapt,
    model_inputs,
    predict_next_state,
)
from .envworld import Env
from .ndmath import MlpParams, forward
from .planner import MPCPlanner, ReferenceModel, batch_cosine_similarity, similarity_features


class ObservationWindow:
    """FIFO of the most recent ``capacity`` transitions."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError(f"window capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._items: deque = deque(maxlen=capacity)

    def push(self, s, a, s_next) -> None:
        self._items.append((np.array(s, dtype=np.float64), np.array(a, dtype=np.float64),
                            np.array(s_next, dtype=np.float64)))

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def as_dataset(self) -> TransitionDataset:
        if not self._items:
            raise ValueError("observation window is empty")
        s, a, s2 = zip(*self._items)
        return TransitionDataset(np.stack(s), np.stack(a), np.stack(s2))


@dataclass(frozen=True)
class AdaptedModel:
    """Task-adapted parameters and embedding derived from the meta-trained model."""

    model: EnnModel
    embedding: TaskEmbedding
    source_id: int
    steps: int

    @property
    def params(self) -> MlpParams:
        return self.model.params

    def predict(self, states, actions):
        return predict_next_state(self.model, states, actions, self.embedding)


def window_errors(model: EnnModel, table: EmbeddingTable, data: TransitionDataset) -> np.ndarray:
    """Mean squared normalized-delta error of every table embedding on ``data``."""
    n, o = len(table), len(data)
    if n == 0:
        raise ValueError("embedding table is empty")
    target = model.norm.normalize_delta(data.next_states - data.states)
    x = np.concatenate([model_inputs(model, data.states, data.actions, h) for h in table])
    err = forward(model.params, x).reshape(n, o, -1) - target[None]
    return np.mean(err * err, axis=(1, 2))


def most_likely_embedding(model: EnnModel, table: EmbeddingTable, window: ObservationWindow | TransitionDataset) -> TaskEmbedding:
    """Table entry with the lowest window error (highest unit-covariance likelihood); ties go to the lowest id."""
    data = window.as_dataset() if isinstance(window, ObservationWindow) else window
    if len(data) == 0:
        raise ValueError("cannot select an embedding from an empty window")
    return table[int(np.argmin(window_errors(model, table, data)))]


def online_adapt(
    model: EnnModel,
    h_likely: TaskEmbedding,
    window: ObservationWindow | TransitionDataset,
    steps: int,
    lr: float,
) -> AdaptedModel:
    """``steps`` full-batch SGD steps on the window, always starting from the meta-trained parameters."""
    if steps < 0:
        raise ValueError(f"adaptation steps must be >= 0, got {steps}")
    if steps == 0:
        return AdaptedModel(model, h_likely, h_likely.id, 0)
    data = window.as_dataset() if isinstance(window, ObservationWindow) else window
    phi, h_test = inner_adapt(model, h_likely, data, steps, lr)
    return AdaptedModel(model.with_params(phi), h_test, h_likely.id, steps)


@dataclass(frozen=True)
class AdaptConfig:
    window: int = 32
    steps: int = 5
    lr: float = 0.03
    reselect_every: int | None = None
    bootstrap_steps: int = 5

    def __post_init__(self):
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.reselect_every is not None and self.reselect_every < 1:
            raise ValueError(f"reselect_every must be >= 1, got {self.reselect_every}")
        if not 1 <= self.bootstrap_steps <= self.window:
            raise ValueError(f"bootstrap_steps must lie in [1, window], got {self.bootstrap_steps}")

    @property
    def reselect_period(self) -> int:
        return self.window if self.reselect_every is None else self.reselect_every


@dataclass
class StepRecord:
    step: int
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    embedding_id: int
    mean_similarity: float
    max_similarity: float
    ref_similarity: float
    elite_reward: float
    rejected: int
    plan_time_ms: float


@dataclass
class EpisodeTrace:
    records: list[StepRecord] = field(default_factory=list)
    aborted: bool = False
    abort_reason: str = ""

    def __len__(self) -> int:
        return len(self.records)

    @property
    def cumulative_reward(self) -> float:
        return float(math.fsum(r.reward for r in self.records))

    @property
    def mean_ref_similarity(self) -> float:
        vals = [r.ref_similarity for r in self.records if not math.isnan(r.ref_similarity)]
        return float(np.mean(vals)) if vals else math.nan

    def write_csv(self, path: str | Path, timing: bool = True) -> None:
        sd = len(self.records[0].state) if self.records else 0
        ad = len(self.records[0].action) if self.records else 0
        header = ["step", *[f"s{i}" for i in range(sd)], *[f"a{i}" for i in range(ad)], "reward",
                  "embedding_id", "mean_similarity", "max_similarity", "ref_similarity",
                  "elite_reward", "rejected", "plan_time_ms"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in self.records:
                w.writerow([
                    r.step, *(repr(float(v)) for v in r.state), *(repr(float(v)) for v in r.action),
                    repr(r.reward), r.embedding_id, repr(r.mean_similarity), repr(r.max_similarity),
                    repr(r.ref_similarity), repr(r.elite_reward), r.rejected,
                    repr(r.plan_time_ms if timing else 0.0),
                ])


def _bootstrap_planner(planner) -> MPCPlanner:
    return MPCPlanner(planner.config, planner.low, planner.high, planner.reward_fn)


def run_meta_test(
    env: Env,
    model: EnnModel,
    table: EmbeddingTable,
    planner,
    config: AdaptConfig,
    steps: int,
    seed: int,
    reference: ReferenceModel | None = None,
    similarity_mask=None,
    bootstrap=None,
) -> EpisodeTrace:
    """Run the online adaptation control loop for ``steps`` environment steps.

    Each step: (re)select the most likely embedding every ``reselect_period``
    steps, adapt from the meta-trained parameters on the window, plan, act,
    and push the observed transition. Until the window holds
    ``bootstrap_steps`` transitions an MPC planner acts on the unadapted model
    with embedding 0. When ``reference`` is given, every step also records the
    cosine similarity between the visited next state and the reference
    model's prediction from the same state.
    """
    trace = EpisodeTrace()
    if steps <= 0:
        return trace
    rng = np.random.default_rng([seed, 17])
    planner.reset(seed)
    boot = bootstrap if bootstrap is not None else _bootstrap_planner(planner)
    boot.reset(seed)
    window = ObservationWindow(config.window)
    h_likely: TaskEmbedding | None = None
    since_select = 0
    s = env.reset(rng)
    for t in range(steps):
        t0 = time.perf_counter()
        if len(window) < config.bootstrap_steps:
            adapted = AdaptedModel(model, table[0], 0, 0)
            plan = boot.plan(adapted, s)
        else:
            if h_likely is None or since_select >= config.reselect_period:
                h_likely = most_likely_embedding(model, table, window)
                since_select = 0
            adapted = online_adapt(model, h_likely, window, config.steps, config.lr)
            plan = planner.plan(adapted, s)
            since_select += 1
        elapsed = 1000.0 * (time.perf_counter() - t0)
        action = env.family.clip_action(np.asarray(plan.action, dtype=np.float64))
        try:
            res = env.step(action)
        except FloatingPointError as exc:
            trace.aborted, trace.abort_reason = True, f"step {t}: {exc}"
            break
        ref_sim = math.nan
        if reference is not None:
            s_ref = reference.next_states(s)
            sims, _ = batch_cosine_similarity(similarity_features(reference.norm, res.next_state, similarity_mask),
                                              similarity_features(reference.norm, s_ref, similarity_mask))
            ref_sim = float(sims)
        trace.records.append(StepRecord(
            t, s.copy(), action, res.reward, res.next_state.copy(), adapted.source_id,
            plan.mean_similarity, plan.max_similarity, ref_sim, plan.elite_reward, plan.rejected, elapsed,
        ))
        window.push(s, action, res.next_state)
        s = env.reset(rng) if res.done else res.next_state
    return trace
