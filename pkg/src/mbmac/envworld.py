"""Analytic toy task families and their scripted reference controllers.

Two families ship:

* ``pendulum-gravity``: torque-limited pendulum, state ``[cos th, sin th, omega]``
  with ``th = 0`` upright. Tasks vary the gravitational acceleration.
* ``pointmass-disabled``: planar point mass driven by two diagonal thrusters,
  state ``[x, vx, y, vy]``, running forward along a track of limited width.
  Tasks scale one thruster's gain down (a partially disabled actuator).

Dynamics are integrated with one semi-implicit Euler step per call and are
vectorized over leading batch dimensions.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_DT = 0.05
DEFAULT_HORIZON = 200


@dataclass(frozen=True)
class TaskSpec:
    family: str
    params: dict[str, float]

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; known: {sorted(FAMILIES)}")
        FAMILIES[self.family].validate(self.params)

    def to_dict(self) -> dict:
        return {"family": self.family, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(d["family"], {k: float(v) for k, v in d["params"].items()})


@dataclass(frozen=True)
class StepResult:
    next_state: np.ndarray
    reward: float
    done: bool


def _wrap(theta):
    return (theta + np.pi) % (2 * np.pi) - np.pi


class Family:
    """Base class: one parametric family of MDPs sharing state/action spaces."""

    name: str
    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    # family parameters sampled per task, with their (low, high) ranges
    param_ranges: dict[str, tuple[float, float]]
    # state dimensions used by the cosine similarity (None = all)
    similarity_mask: tuple[bool, ...] | None = None
    # charged once on a transition that ends the episode by failure (not by the time limit)
    failure_penalty: float = 0.0

    def validate(self, params: dict[str, float]) -> None:
        raise NotImplementedError

    def nominal(self) -> TaskSpec:
        raise NotImplementedError

    def sample_params(self, rng: np.random.Generator, ranges) -> dict[str, float]:
        raise NotImplementedError

    def dynamics(self, states, actions, task: TaskSpec, dt: float):
        """Return ``(next_states, done)`` for a batch of states and actions."""
        raise NotImplementedError

    def reward(self, states, actions):
        raise NotImplementedError

    def reset(self, rng: np.random.Generator, mode: str = "start") -> np.ndarray:
        raise NotImplementedError

    def clip_action(self, a):
        return np.clip(a, self.action_low, self.action_high)


class PendulumGravity(Family):
    name = "pendulum-gravity"
    state_dim = 3
    action_dim = 1
    mass = 1.0
    length = 1.0
    damping = 0.1
    max_torque = 2.0
    max_speed = 8.0
    nominal_gravity = 10.0
    action_low = np.array([-max_torque])
    action_high = np.array([max_torque])
    param_ranges = {"gravity": (2.0, 16.0)}

    def validate(self, params):
        if set(params) != {"gravity"}:
            raise ValueError(f"pendulum-gravity expects exactly a 'gravity' parameter, got {sorted(params)}")
        if not params["gravity"] > 0:
            raise ValueError(f"gravity must be positive, got {params['gravity']}")

    def nominal(self):
        return TaskSpec(self.name, {"gravity": self.nominal_gravity})

    def sample_params(self, rng, ranges):
        lo, hi = ranges["gravity"]
        return {"gravity": float(rng.uniform(lo, hi))}

    def dynamics(self, states, actions, task, dt):
        states = np.asarray(states, dtype=np.float64)
        u = self.clip_action(np.asarray(actions, dtype=np.float64))[..., 0]
        g = task.params["gravity"]
        theta = np.arctan2(states[..., 1], states[..., 0])
        omega = states[..., 2]
        ml2 = self.mass * self.length ** 2
        accel = (g / self.length) * np.sin(theta) - self.damping * omega / ml2 + u / ml2
        omega_next = np.clip(omega + accel * dt, -self.max_speed, self.max_speed)
        theta_next = theta + omega_next * dt
        nxt = np.stack([np.cos(theta_next), np.sin(theta_next), omega_next], axis=-1)
        return nxt, np.zeros(nxt.shape[:-1], dtype=bool)

    def reward(self, states, actions):
        states = np.asarray(states, dtype=np.float64)
        u = self.clip_action(np.asarray(actions, dtype=np.float64))[..., 0]
        theta = np.arctan2(states[..., 1], states[..., 0])
        return -(theta ** 2 + 0.1 * states[..., 2] ** 2 + 0.001 * u ** 2)

    def reset(self, rng, mode="start"):
        if mode == "random":
            theta = rng.uniform(-np.pi, np.pi)
            omega = rng.uniform(-1.0, 1.0)
        else:
            # hanging down with a small seeded perturbation
            theta = np.pi + rng.uniform(-0.1, 0.1)
            omega = rng.uniform(-0.1, 0.1)
        return np.array([np.cos(theta), np.sin(theta), omega])


class PointmassDisabled(Family):
    name = "pointmass-disabled"
    state_dim = 4
    action_dim = 2
    friction = 0.5
    track_half_width = 1.0
    action_low = np.array([-1.0, -1.0])
    action_high = np.array([1.0, 1.0])
    # thruster i pushes along column i: (1, 1)/sqrt2 and (1, -1)/sqrt2
    mixing = np.array([[1.0, 1.0], [1.0, -1.0]]) / np.sqrt(2.0)
    param_ranges = {"disabled_gain": (0.0, 0.5)}
    similarity_mask = (False, True, True, True)
    failure_penalty = 20.0

    def validate(self, params):
        if set(params) != {"gain_0", "gain_1"}:
            raise ValueError(f"pointmass-disabled expects 'gain_0' and 'gain_1', got {sorted(params)}")
        for k, v in params.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{k} must lie in [0, 1], got {v}")

    def nominal(self):
        return TaskSpec(self.name, {"gain_0": 1.0, "gain_1": 1.0})

    def sample_params(self, rng, ranges):
        lo, hi = ranges["disabled_gain"]
        which = int(rng.integers(2))
        gain = float(rng.uniform(lo, hi))
        gains = [1.0, 1.0]
        gains[which] = gain
        return {"gain_0": gains[0], "gain_1": gains[1]}

    def dynamics(self, states, actions, task, dt):
        states = np.asarray(states, dtype=np.float64)
        a = self.clip_action(np.asarray(actions, dtype=np.float64))
        gains = np.array([task.params["gain_0"], task.params["gain_1"]])
        force = (a * gains) @ self.mixing.T
        x, vx, y, vy = (states[..., i] for i in range(4))
        vx2 = vx + (force[..., 0] - self.friction * vx) * dt
        vy2 = vy + (force[..., 1] - self.friction * vy) * dt
        nxt = np.stack([x + vx2 * dt, vx2, y + vy2 * dt, vy2], axis=-1)
        return nxt, np.abs(nxt[..., 2]) > self.track_half_width

    def reward(self, states, actions):
        states = np.asarray(states, dtype=np.float64)
        a = self.clip_action(np.asarray(actions, dtype=np.float64))
        r = states[..., 1] - 0.01 * np.sum(a * a, axis=-1)
        # a predicted state off the track costs what the real exit transition is charged
        return r - self.failure_penalty * (np.abs(states[..., 2]) > self.track_half_width)

    def reset(self, rng, mode="start"):
        if mode == "random":
            y = rng.uniform(-0.5, 0.5)
            return np.array([0.0, rng.uniform(-0.5, 1.5), y, rng.uniform(-0.5, 0.5)])
        return np.array([0.0, 0.0, rng.uniform(-0.05, 0.05), 0.0])


FAMILIES: dict[str, Family] = {f.name: f for f in (PendulumGravity(), PointmassDisabled())}


def get_family(name: str) -> Family:
    try:
        return FAMILIES[name]
    except KeyError:
        raise ValueError(f"unknown family {name!r}; known: {sorted(FAMILIES)}") from None


def step(state, action, task: TaskSpec, dt: float = DEFAULT_DT) -> StepResult:
    """One deterministic transition of ``task`` from ``state`` under ``action``."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    fam = get_family(task.family)
    state = np.asarray(state, dtype=np.float64)
    if state.shape != (fam.state_dim,) or not np.all(np.isfinite(state)):
        raise FloatingPointError(f"invalid state {state!r} for {fam.name}")
    action = fam.clip_action(np.asarray(action, dtype=np.float64).reshape(fam.action_dim))
    nxt, done = fam.dynamics(state, action, task, dt)
    if not np.all(np.isfinite(nxt)):
        raise FloatingPointError(f"{fam.name} produced a non-finite state from {state!r}")
    reward = float(fam.reward(state, action)) - (fam.failure_penalty if done else 0.0)
    return StepResult(nxt, reward, bool(done))


def sample_tasks(
    family: str,
    n: int,
    seed: int,
    ranges: dict[str, Sequence[float]] | None = None,
    exclude: Sequence[TaskSpec] = (),
) -> list[TaskSpec]:
    """Draw ``n`` tasks uniformly from the family's parameter ranges.

    Tasks whose parameters coincide with one in ``exclude`` are redrawn, so a
    held-out set can be sampled disjoint from the training set.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    fam = get_family(family)
    ranges = {**fam.param_ranges, **(ranges or {})}
    for k, (lo, hi) in ranges.items():
        if lo > hi:
            raise ValueError(f"range for {k} is empty: [{lo}, {hi}]")
    taken = [t.params for t in exclude]
    rng = np.random.default_rng(seed)
    tasks: list[TaskSpec] = []
    while len(tasks) < n:
        params = fam.sample_params(rng, ranges)
        if params in taken:
            continue
        tasks.append(TaskSpec(family, params))
    return tasks


class ReferencePolicy:
    """Scripted feedback controller tuned for a family's nominal task."""

    family: str

    def __call__(self, states) -> np.ndarray:
        raise NotImplementedError


class PendulumSwingUp(ReferencePolicy):
    """Energy-shaping swing-up with a PD catch near the upright position."""

    family = PendulumGravity.name

    def __init__(self, energy_gain=2.0, kp=20.0, kd=4.0, catch_angle=0.5):
        self.energy_gain = energy_gain
        self.kp = kp
        self.kd = kd
        self.catch_angle = catch_angle
        self._fam = FAMILIES[self.family]

    def __call__(self, states):
        states = np.asarray(states, dtype=np.float64)
        fam = self._fam
        theta = np.arctan2(states[..., 1], states[..., 0])
        omega = states[..., 2]
        ml2 = fam.mass * fam.length ** 2
        mgl = fam.mass * fam.nominal_gravity * fam.length
        # zero at upright rest, -2 mgl hanging at rest
        energy = 0.5 * ml2 * omega ** 2 + mgl * (np.cos(theta) - 1.0)
        direction = np.where(omega >= 0.0, 1.0, -1.0)
        swing = self.energy_gain * (-energy) * direction
        catch = -self.kp * theta - self.kd * omega
        near = np.cos(theta) > np.cos(self.catch_angle)
        u = np.where(near, catch, swing)
        return fam.clip_action(u[..., None])


class PointmassCruise(ReferencePolicy):
    """P control on forward speed, PD on lateral position to hold the track centre."""

    family = PointmassDisabled.name

    def __init__(self, target_speed=2.5, kv=1.0, ky=2.0, kdy=2.0):
        self.target_speed = target_speed
        self.kv = kv
        self.ky = ky
        self.kdy = kdy
        self._fam = FAMILIES[self.family]

    def __call__(self, states):
        states = np.asarray(states, dtype=np.float64)
        fx = self.kv * (self.target_speed - states[..., 1])
        fy = -self.ky * states[..., 2] - self.kdy * states[..., 3]
        force = np.stack([fx, fy], axis=-1)
        # the mixing matrix is symmetric and orthogonal, so it is its own inverse
        return self._fam.clip_action(force @ self._fam.mixing)


REFERENCE_POLICIES = {PendulumSwingUp.family: PendulumSwingUp, PointmassCruise.family: PointmassCruise}


def make_reference_policy(family: str) -> ReferencePolicy:
    get_family(family)
    return REFERENCE_POLICIES[family]()


def reference_action(policy: ReferencePolicy, state, task: TaskSpec | None = None) -> np.ndarray:
    if task is not None and task.family != policy.family:
        raise ValueError(f"policy for {policy.family!r} cannot act in a {task.family!r} task")
    fam = FAMILIES[policy.family]
    state = np.asarray(state, dtype=np.float64)
    if state.shape[-1] != fam.state_dim:
        raise ValueError(f"state of size {state.shape[-1]} is not a {fam.name} state")
    return policy(state)


class Env:
    """Stateful wrapper tracking the current state and the episode step counter."""

    def __init__(self, task: TaskSpec, dt: float = DEFAULT_DT, horizon: int = DEFAULT_HORIZON):
        self.task = task
        self.family = get_family(task.family)
        self.dt = dt
        self.horizon = horizon
        self.state: np.ndarray | None = None
        self.t = 0

    def reset(self, rng: np.random.Generator, mode: str = "start") -> np.ndarray:
        self.state = self.family.reset(rng, mode)
        self.t = 0
        return self.state

    def step(self, action) -> StepResult:
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        res = step(self.state, action, self.task, self.dt)
        self.t += 1
        self.state = res.next_state
        if self.t >= self.horizon and not res.done:
            res = StepResult(res.next_state, res.reward, True)
        return res


@dataclass
class Rollout:
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)


def rollout_policy(env: Env, policy, steps: int, rng: np.random.Generator, mode: str = "start") -> Rollout:
    out = Rollout()
    s = env.reset(rng, mode)
    for _ in range(steps):
        a = np.asarray(policy(s), dtype=np.float64).reshape(env.family.action_dim)
        res = env.step(a)
        out.states.append(s)
        out.actions.append(env.family.clip_action(a))
        out.rewards.append(res.reward)
        s = res.next_state if not res.done else env.reset(rng, mode)
    return out


def write_rollout_csv(path: str | Path, rollout: Rollout) -> None:
    """Export a rollout as CSV with columns ``t, s0.., a0.., reward``."""
    states = np.asarray(rollout.states)
    actions = np.asarray(rollout.actions)
    sd = states.shape[1] if states.size else 0
    ad = actions.shape[1] if actions.size else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", *[f"s{i}" for i in range(sd)], *[f"a{i}" for i in range(ad)], "reward"])
        for t, (s, a, r) in enumerate(zip(states, actions, rollout.rewards)):
            w.writerow([t, *map(repr, map(float, s)), *map(repr, map(float, a)), repr(float(r))])
