"""Sampling-based planners over a learned dynamics model.

* :class:`MPCPlanner` - random shooting with CEM refinement of a diagonal
  Gaussian over action sequences, warm-started between calls.
* :class:`AnchorMPCPlanner` - the same search, rejecting sequences whose
  predicted states leave a band of width ``delta`` around anchor states.
* :class:`MACPlanner` - the meta adaptation controller: a depth-wise frontier
  search that keeps, at each depth, the candidates whose predicted next state
  is most cosine-similar to the reference task's predicted next state, and
  among those the ones with the highest reward.

Dynamics objects only need ``predict(states, actions) -> next_states`` on
batches, so the adapted model, the reference model and the analytic
environments can all be planned against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .enn import EnnModel, NormStats, TaskEmbedding, predict_next_state
from .envworld import ReferencePolicy

RewardFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


class Dynamics(Protocol):
    def predict(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class PlannerConfig:
    horizon: int = 15
    elites: int = 32
    branches: int = 16
    smoothing: float = 0.7
    cem_iterations: int = 1
    var_min: float = 1e-4
    # initial std as a fraction of the half action range
    init_std: float = 0.5
    # how far the variance is pulled back to its initial value after each call
    reset_fraction: float = 0.5
    # anchor band half-width; inf disables the constraint
    similarity_threshold: float = math.inf
    # the similarity tier holds tier_factor * elites candidates
    tier_factor: int = 2
    similarity_mask: tuple[bool, ...] | None = None
    ref_jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("horizon", "elites", "branches", "cem_iterations", "tier_factor"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0 < self.smoothing <= 1:
            raise ValueError(f"smoothing must lie in (0, 1], got {self.smoothing}")
        if not self.var_min > 0:
            raise ValueError(f"var_min must be positive, got {self.var_min}")
        if not self.init_std > 0:
            raise ValueError(f"init_std must be positive, got {self.init_std}")
        if not 0 <= self.reset_fraction <= 1:
            raise ValueError(f"reset_fraction must lie in [0, 1], got {self.reset_fraction}")
        if not self.similarity_threshold > 0:
            raise ValueError(f"similarity_threshold must be positive, got {self.similarity_threshold}")
        if self.ref_jitter < 0:
            raise ValueError(f"ref_jitter must be >= 0, got {self.ref_jitter}")
        if self.similarity_mask is not None:
            object.__setattr__(self, "similarity_mask", tuple(bool(m) for m in self.similarity_mask))
            if not any(self.similarity_mask):
                raise ValueError("similarity_mask must select at least one dimension")

    @property
    def candidates(self) -> int:
        return self.elites * self.branches


@dataclass(frozen=True)
class ActionDistribution:
    """Per-step diagonal Gaussian over an action sequence of length ``horizon``."""

    mean: np.ndarray
    var: np.ndarray
    var_min: float

    def __post_init__(self):
        if self.mean.shape != self.var.shape or self.mean.ndim != 2:
            raise ValueError(f"mean {self.mean.shape} and var {self.var.shape} must be equal 2-d shapes")
        if not np.all(self.var >= self.var_min):
            raise ValueError("variance below the floor")

    @classmethod
    def initial(cls, horizon: int, low, high, init_std: float, var_min: float) -> "ActionDistribution":
        low = np.asarray(low, dtype=np.float64)
        high = np.asarray(high, dtype=np.float64)
        mean = np.tile((low + high) / 2.0, (horizon, 1))
        var = np.tile(np.maximum((init_std * (high - low) / 2.0) ** 2, var_min), (horizon, 1))
        return cls(mean, var, var_min)

    @property
    def horizon(self) -> int:
        return self.mean.shape[0]

    def sample(self, t: int, n: int, rng: np.random.Generator, low, high) -> np.ndarray:
        noise = rng.standard_normal((n, self.mean.shape[1]))
        return np.clip(self.mean[t] + np.sqrt(self.var[t]) * noise, low, high)

    def shifted(self, init_var: np.ndarray, reset_fraction: float) -> "ActionDistribution":
        """Drop the first step, repeat the last, and pull the variance back towards ``init_var``."""
        mean = np.concatenate([self.mean[1:], self.mean[-1:]])
        var = np.concatenate([self.var[1:], self.var[-1:]])
        var = np.maximum(var + reset_fraction * (init_var - var), self.var_min)
        return ActionDistribution(mean, var, self.var_min)


def update_distribution(dist: ActionDistribution, elites: np.ndarray, smoothing: float) -> ActionDistribution:
    """Blend the distribution towards the elite sequences' mean and variance.

    ``elites`` has shape ``(n, horizon, action_dim)``.
    """
    elites = np.asarray(elites, dtype=np.float64)
    if elites.ndim != 3 or elites.shape[0] == 0:
        raise ValueError("update_distribution needs a nonempty (n, horizon, action_dim) elite array")
    if elites.shape[1:] != dist.mean.shape:
        raise ValueError(f"elite sequences {elites.shape[1:]} do not match distribution {dist.mean.shape}")
    if not 0 <= smoothing <= 1:
        raise ValueError(f"smoothing must lie in [0, 1], got {smoothing}")
    mean = (1.0 - smoothing) * dist.mean + smoothing * elites.mean(axis=0)
    var = (1.0 - smoothing) * dist.var + smoothing * elites.var(axis=0)
    return ActionDistribution(mean, np.maximum(var, dist.var_min), dist.var_min)


def cosine_similarity(x, y) -> float:
    """Cosine of the angle between two nonzero vectors."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"vectors differ in shape: {x.shape} vs {y.shape}")
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(x, y) / (nx * ny), -1.0, 1.0))


def batch_cosine_similarity(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, int]:
    """Row-wise cosine similarity; rows with a zero operand score 0.

    Returns the similarities and the number of guarded rows.
    """
    nx = np.linalg.norm(x, axis=-1)
    ny = np.linalg.norm(y, axis=-1)
    denom = nx * ny
    zero = denom == 0
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = np.sum(x * y, axis=-1) / np.where(zero, 1.0, denom)
    sim = np.where(zero, 0.0, np.clip(sim, -1.0, 1.0))
    return sim, int(zero.sum())


def similarity_features(norm: NormStats, states: np.ndarray, mask: Sequence[bool] | None) -> np.ndarray:
    """States in normalized coordinates, restricted to ``mask`` when given."""
    z = norm.normalize_state(np.asarray(states, dtype=np.float64))
    if mask is not None:
        z = z[..., np.asarray(mask, dtype=bool)]
    return z


@dataclass(frozen=True)
class ModelDynamics:
    """A dynamics model evaluated at one fixed task embedding."""

    model: EnnModel
    embedding: TaskEmbedding

    def predict(self, states, actions):
        return predict_next_state(self.model, states, actions, self.embedding)


@dataclass(frozen=True)
class ReferenceModel:
    """Meta-trained model conditioned on the reference embedding, plus the reference policy."""

    model: EnnModel
    embedding: TaskEmbedding
    policy: ReferencePolicy

    @property
    def norm(self) -> NormStats:
        return self.model.norm

    def predict(self, states, actions):
        return predict_next_state(self.model, states, actions, self.embedding)

    def next_states(self, states) -> np.ndarray:
        states = np.asarray(states, dtype=np.float64)
        return self.predict(states, self.policy(states))

    def anchors(self, state, horizon: int) -> np.ndarray:
        """Roll the reference policy through the reference model for ``horizon`` steps."""
        out = np.empty((horizon, np.asarray(state).shape[-1]))
        s = np.asarray(state, dtype=np.float64)
        for t in range(horizon):
            s = self.next_states(s)
            out[t] = s
        return out


def reference_next_states(model: EnnModel, h_ref: TaskEmbedding, states, policy: ReferencePolicy) -> np.ndarray:
    """Predicted outcome of the reference policy's action under the reference embedding, per state."""
    states = np.asarray(states, dtype=np.float64)
    if states.size == 0:
        return np.zeros((0, model.state_dim))
    return predict_next_state(model, states, policy(states), h_ref)


@dataclass
class PlanResult:
    action: np.ndarray
    predicted_reward: float
    elite_reward: float
    mean_similarity: float = math.nan
    max_similarity: float = math.nan
    rejected: int = 0
    fallback: bool = False
    zero_similarity: int = 0
    frontier_sizes: list[int] = field(default_factory=list)


def rank_candidates(similarity: np.ndarray, reward: np.ndarray, tier_size: int) -> np.ndarray:
    """Order candidates by (similarity tier, reward).

    The ``tier_size`` most similar candidates form the tier; tier members come
    first, ordered by reward (then similarity, then index); the rest follow in
    the same order.
    """
    n = len(similarity)
    idx = np.arange(n)
    sim = np.where(np.isfinite(similarity), similarity, -np.inf)
    rew = np.where(np.isfinite(reward), reward, -np.inf)
    by_sim = np.lexsort((idx, -sim))
    in_tier = np.zeros(n, dtype=bool)
    in_tier[by_sim[:min(tier_size, n)]] = True
    return np.lexsort((idx, -sim, -rew, ~in_tier))


def select_elites(similarity: np.ndarray, reward: np.ndarray, n_keep: int, tier_size: int) -> np.ndarray:
    """Indices of the ``n_keep`` best candidates under :func:`rank_candidates`, ascending."""
    return np.sort(rank_candidates(similarity, reward, tier_size)[:n_keep])


class MPCPlanner:
    """Random shooting + CEM over the full horizon, maximizing summed predicted reward."""

    name = "mpc"

    def __init__(self, config: PlannerConfig, action_low, action_high, reward_fn: RewardFn):
        self.config = config
        self.low = np.asarray(action_low, dtype=np.float64)
        self.high = np.asarray(action_high, dtype=np.float64)
        self.reward_fn = reward_fn
        self.reset()

    def reset(self, seed: int | None = None) -> None:
        cfg = self.config
        self.rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self.dist = ActionDistribution.initial(cfg.horizon, self.low, self.high, cfg.init_std, cfg.var_min)
        self._init_var = self.dist.var.copy()

    def _rollout(self, model: Dynamics, state: np.ndarray):
        cfg = self.config
        n = cfg.candidates
        states = np.repeat(np.asarray(state, dtype=np.float64)[None], n, axis=0)
        seqs = np.empty((n, cfg.horizon, len(self.low)))
        preds = np.empty((n, cfg.horizon, states.shape[1]))
        total = np.zeros(n)
        for t in range(cfg.horizon):
            a = self.dist.sample(t, n, self.rng, self.low, self.high)
            total = total + self.reward_fn(states, a)
            states = model.predict(states, a)
            seqs[:, t] = a
            preds[:, t] = states
        total = np.where(np.isfinite(total) & np.all(np.isfinite(preds), axis=(1, 2)), total, -np.inf)
        if not np.any(np.isfinite(total)):
            raise FloatingPointError("every candidate rollout is non-finite")
        return seqs, preds, total

    def _choose(self, seqs, preds, total, anchors):
        order = np.argsort(-total, kind="stable")
        # elites go out in index order so distribution updates sum in a fixed order
        return int(order[0]), np.sort(order[:self.config.elites]), 0, False

    def plan(self, model: Dynamics, state, anchors=None) -> PlanResult:
        cfg = self.config
        best_total, best_action, rejected, fallback = -np.inf, None, 0, False
        elite_reward = math.nan
        for _ in range(cfg.cem_iterations):
            seqs, preds, total = self._rollout(model, state)
            best, elites, rejected, fallback = self._choose(seqs, preds, total, anchors)
            if best_action is None or total[best] > best_total:
                best_total, best_action = total[best], seqs[best, 0].copy()
            elite_reward = float(np.mean(total[elites]))
            self.dist = update_distribution(self.dist, seqs[elites], cfg.smoothing)
        self.dist = self.dist.shifted(self._init_var, cfg.reset_fraction)
        return PlanResult(best_action, float(best_total), elite_reward, rejected=rejected, fallback=fallback)


class AnchorMPCPlanner(MPCPlanner):
    """MPC whose candidates must keep every predicted state within ``delta`` of the anchors."""

    name = "anchor-mpc"

    def __init__(self, config, action_low, action_high, reward_fn, anchor_source=None):
        super().__init__(config, action_low, action_high, reward_fn)
        self.anchor_source = anchor_source

    def violations(self, preds: np.ndarray, anchors: np.ndarray) -> np.ndarray:
        """Summed elementwise excess of ``|s - s_anch|`` over ``delta`` per candidate."""
        cfg = self.config
        anchors = np.asarray(anchors, dtype=np.float64)
        if anchors.shape[0] < cfg.horizon:
            raise ValueError(f"need {cfg.horizon} anchor states, got {anchors.shape[0]}")
        diff = np.abs(preds - anchors[None, :cfg.horizon])
        if cfg.similarity_mask is not None:
            diff = diff[..., np.asarray(cfg.similarity_mask)]
        excess = np.maximum(diff - cfg.similarity_threshold, 0.0)
        return excess.sum(axis=(1, 2))

    def _choose(self, seqs, preds, total, anchors):
        viol = self.violations(preds, anchors)
        feasible = (viol == 0) & np.isfinite(total)
        n_ok = int(feasible.sum())
        rejected = len(total) - n_ok
        if n_ok:
            masked = np.where(feasible, total, -np.inf)
            order = np.argsort(-masked, kind="stable")
            return int(order[0]), np.sort(order[:min(self.config.elites, n_ok)]), rejected, False
        # nothing feasible: fall back to the least-violating sequences
        order = np.lexsort((np.arange(len(total)), -total, viol))
        return int(order[0]), np.sort(order[:self.config.elites]), rejected, True

    def plan(self, model, state, anchors=None) -> PlanResult:
        if anchors is None:
            if self.anchor_source is None:
                raise ValueError("anchor-mpc needs anchors or an anchor_source")
            anchors = self.anchor_source(state, self.config.horizon)
        return super().plan(model, state, anchors)


class MACPlanner:
    """Meta adaptation controller: similarity-filtered frontier search.

    At each depth the frontier states are expanded with sampled actions, the
    adapted model predicts the next states, and each prediction is compared
    (cosine similarity in normalized state space) with what the reference
    policy would reach from the same frontier state in the reference task.
    The ``tier_factor * elites`` most similar candidates form a tier, of which
    the ``elites`` highest-reward ones survive to the next depth.
    """

    name = "mac"

    def __init__(self, config: PlannerConfig, action_low, action_high, reward_fn: RewardFn,
                 reference: ReferenceModel):
        self.config = config
        self.low = np.asarray(action_low, dtype=np.float64)
        self.high = np.asarray(action_high, dtype=np.float64)
        self.reward_fn = reward_fn
        self.reference = reference
        self.reset()

    def reset(self, seed: int | None = None) -> None:
        cfg = self.config
        self.rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self.dist = ActionDistribution.initial(cfg.horizon, self.low, self.high, cfg.init_std, cfg.var_min)
        self._init_var = self.dist.var.copy()

    def _features(self, states):
        return similarity_features(self.reference.norm, states, self.config.similarity_mask)

    def _pass(self, model: Dynamics, state: np.ndarray):
        cfg = self.config
        eps, total_cands = cfg.elites, cfg.candidates
        tier = cfg.tier_factor * eps
        states = np.asarray(state, dtype=np.float64)[None]
        seqs = np.zeros((1, 0, len(self.low)))
        cum_r = np.zeros(1)
        cum_sim = np.zeros(1)
        sizes, step_sims, zero_guarded = [], [], 0
        for t in range(cfg.horizon):
            f = len(states)
            ref_actions = self.reference.policy(states)
            if cfg.ref_jitter > 0:
                ref_actions = np.clip(ref_actions + cfg.ref_jitter * self.rng.standard_normal(ref_actions.shape),
                                      self.low, self.high)
            s_ref = self.reference.predict(states, ref_actions)
            per = total_cands // f
            a = self.dist.sample(t, f * per, self.rng, self.low, self.high)
            parent = np.repeat(np.arange(f), per)
            s_from = states[parent]
            r = self.reward_fn(s_from, a)
            s_next = model.predict(s_from, a)
            sim, nz = batch_cosine_similarity(self._features(s_next), self._features(s_ref[parent]))
            zero_guarded += nz
            ok = np.isfinite(r) & np.all(np.isfinite(s_next), axis=1)
            r = np.where(ok, r, -np.inf)
            sim = np.where(ok, sim, -np.inf)
            if not np.any(ok):
                raise FloatingPointError("every MAC candidate is non-finite")
            cand_r = cum_r[parent] + r
            keep = select_elites(sim, cand_r, eps, tier)
            states = s_next[keep]
            seqs = np.concatenate([seqs[parent[keep]], a[keep][:, None]], axis=1)
            cum_r = cand_r[keep]
            cum_sim = cum_sim[parent[keep]] + sim[keep]
            sizes.append(len(keep))
            step_sims.append(sim[keep])
        return seqs, cum_r, cum_sim / cfg.horizon, sizes, np.stack(step_sims, axis=1), zero_guarded

    def plan(self, model: Dynamics, state, anchors=None) -> PlanResult:
        cfg = self.config
        for _ in range(cfg.cem_iterations):
            seqs, cum_r, mean_sim, sizes, step_sims, zero_guarded = self._pass(model, state)
            order = rank_candidates(mean_sim, cum_r, cfg.tier_factor * cfg.elites)
            best = int(order[0])
            self.dist = update_distribution(self.dist, seqs, cfg.smoothing)
        self.dist = self.dist.shifted(self._init_var, cfg.reset_fraction)
        finite = np.isfinite(step_sims)
        return PlanResult(
            action=seqs[best, 0].copy(),
            predicted_reward=float(cum_r[best]),
            elite_reward=float(np.mean(cum_r)),
            mean_similarity=float(np.mean(step_sims[finite])) if finite.any() else math.nan,
            max_similarity=float(np.max(step_sims[finite])) if finite.any() else math.nan,
            zero_similarity=zero_guarded,
            frontier_sizes=sizes,
        )


PLANNERS = {"mpc": MPCPlanner, "anchor-mpc": AnchorMPCPlanner, "mac": MACPlanner}
