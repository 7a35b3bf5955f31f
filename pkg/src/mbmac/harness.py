"""Experiment orchestration: configuration, the collect / meta-train / run / compare pipeline, and the CLI.

Output layout under ``out_dir``::

    datasets/   task_XX.csv per training task, manifest.json
    models/     enn.json, rmpc.json, manifest.json
    traces/     <system>_task<k>_seed<s>.csv
    reports/    train_enn.csv, train_rmpc.csv, comparison.csv, table.csv, table.txt

Every manifest records the hash of the configuration that produced it.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .adapt import AdaptConfig, run_meta_test
from .enn import (
    NormStats,
    TransitionDataset,
    build_model,
    load_model,
    save_model,
    task_loss_grads,
)
from .envworld import DEFAULT_DT, DEFAULT_HORIZON, Env, TaskSpec, get_family, make_reference_policy, sample_tasks
from .metatrain import MetaTrainConfig, collect_task_data, meta_train_on_datasets
from .ndmath import backward, init_mlp
from .planner import AnchorMPCPlanner, MACPlanner, MPCPlanner, PlannerConfig, ReferenceModel

log = logging.getLogger(__name__)

# system name -> (which model it plans with, planner class)
SYSTEMS: dict[str, tuple[str, type]] = {
    "rmpc": ("rmpc", MPCPlanner),
    "fmpc": ("enn", MPCPlanner),
    "mac": ("enn", MACPlanner),
    "anchor": ("enn", AnchorMPCPlanner),
}
# column order of the summary table
TABLE_ORDER = ("rmpc", "fmpc", "mac", "anchor")


class ConfigError(ValueError):
    """Invalid configuration; ``path`` is the dotted key that is wrong."""

    def __init__(self, path: str, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = path
        self.reason = reason


@dataclass(frozen=True)
class ModelConfig:
    embedding_dim: int = 5
    hidden_sizes: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        if self.embedding_dim < 0:
            raise ValueError(f"embedding_dim must be >= 0, got {self.embedding_dim}")
        if not self.hidden_sizes or any(h < 1 for h in self.hidden_sizes):
            raise ValueError(f"hidden_sizes must be nonempty positive ints, got {self.hidden_sizes}")


@dataclass(frozen=True)
class TestProtocol:
    n_tasks: int = 2
    steps: int = 500
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    # explicit held-out task parameters; sampled from the family ranges when None
    tasks: tuple[dict, ...] | None = None

    def __post_init__(self):
        if self.n_tasks < 1:
            raise ValueError(f"n_tasks must be >= 1, got {self.n_tasks}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if not self.seeds:
            raise ValueError("seeds must be a nonempty list")
        if self.tasks is not None and len(self.tasks) != self.n_tasks:
            raise ValueError(f"tasks lists {len(self.tasks)} entries but n_tasks is {self.n_tasks}")


@dataclass(frozen=True)
class ExperimentConfig:
    family: str = "pendulum-gravity"
    task_ranges: dict | None = None
    dt: float = DEFAULT_DT
    episode_horizon: int = DEFAULT_HORIZON
    model: ModelConfig = field(default_factory=ModelConfig)
    meta: MetaTrainConfig = field(default_factory=MetaTrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    planners: dict[str, PlannerConfig] = field(default_factory=dict)
    systems: tuple[str, ...] = ("rmpc", "fmpc", "mac")
    # state dimensions for similarity; None means the family default
    similarity_mask: tuple[bool, ...] | None = None
    test: TestProtocol = field(default_factory=TestProtocol)
    out_dir: str = "runs/default"
    # wall-clock planning time makes traces nondeterministic, so it is opt-in
    trace_timing: bool = False

    def __post_init__(self):
        fam = get_family(self.family)
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.episode_horizon < 1:
            raise ValueError(f"episode_horizon must be >= 1, got {self.episode_horizon}")
        if not self.systems:
            raise ValueError("systems must list at least one planner")
        unknown = [s for s in self.systems if s not in SYSTEMS]
        if unknown:
            raise ValueError(f"systems has unknown planner(s) {unknown}; valid: {sorted(SYSTEMS)}")
        unknown = [s for s in self.planners if s not in SYSTEMS]
        if unknown:
            raise ValueError(f"planners has unknown planner(s) {unknown}; valid: {sorted(SYSTEMS)}")
        if self.similarity_mask is not None and len(self.similarity_mask) != fam.state_dim:
            raise ValueError(f"similarity_mask needs {fam.state_dim} entries, got {len(self.similarity_mask)}")
        if self.task_ranges is not None:
            for k, v in self.task_ranges.items():
                if k not in fam.param_ranges:
                    raise ValueError(f"task_ranges has unknown key {k!r}; valid: {sorted(fam.param_ranges)}")
                if len(v) != 2 or not v[0] <= v[1]:
                    raise ValueError(f"task_ranges.{k} must be [low, high] with low <= high, got {v}")
        if self.test.tasks is not None:
            for p in self.test.tasks:
                fam.validate(p)

    @property
    def mask(self) -> tuple[bool, ...] | None:
        return self.similarity_mask if self.similarity_mask is not None else get_family(self.family).similarity_mask

    def planner_config(self, system: str) -> PlannerConfig:
        if system not in SYSTEMS:
            raise ValueError(f"unknown planner {system!r}; valid: {sorted(SYSTEMS)}")
        cfg = self.planners.get(system)
        if cfg is None:
            return PlannerConfig(similarity_mask=self.mask)
        return cfg

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def hash(self) -> str:
        """Digest of everything except the output directory."""
        d = self.to_dict()
        d.pop("out_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


_SECTIONS = {
    "model": ModelConfig,
    "meta": MetaTrainConfig,
    "adapt": AdaptConfig,
    "test": TestProtocol,
}


def _build(cls, raw: Any, path: str, overrides: dict | None = None):
    if not isinstance(raw, dict):
        raise ConfigError(path, f"expected an object, got {type(raw).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in raw.items():
        if key not in names:
            raise ConfigError(f"{path}.{key}", f"unknown key; valid keys: {sorted(names)}")
        if isinstance(val, list):
            val = tuple(val)
        kwargs[key] = val
    kwargs.update(overrides or {})
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        msg = str(exc)
        first = msg.split(" ", 1)[0]
        where = f"{path}.{first}" if first in names else path
        raise ConfigError(where, msg) from None


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build and validate an :class:`ExperimentConfig`; errors carry the offending key path."""
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be a JSON object")
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key in raw:
        if key not in top:
            raise ConfigError(f"config.{key}", f"unknown key; valid keys: {sorted(top)}")
    kwargs: dict[str, Any] = {}
    for key, cls in _SECTIONS.items():
        if key in raw:
            kwargs[key] = _build(cls, raw[key], f"config.{key}")
    family = raw.get("family", ExperimentConfig.family)
    try:
        fam = get_family(family)
    except ValueError as exc:
        raise ConfigError("config.family", str(exc)) from None
    default_mask = raw.get("similarity_mask", fam.similarity_mask)
    planners = raw.get("planners", {})
    if not isinstance(planners, dict):
        raise ConfigError("config.planners", "expected an object keyed by planner name")
    built = {}
    for name, pc in planners.items():
        if name not in SYSTEMS:
            raise ConfigError(f"config.planners.{name}", f"unknown planner; valid: {sorted(SYSTEMS)}")
        extra = {} if (isinstance(pc, dict) and "similarity_mask" in pc) else {"similarity_mask": default_mask}
        built[name] = _build(PlannerConfig, pc, f"config.planners.{name}", extra)
    kwargs["planners"] = built
    for key in ("family", "task_ranges", "dt", "episode_horizon", "similarity_mask", "out_dir", "trace_timing"):
        if key in raw:
            kwargs[key] = raw[key]
    if "systems" in raw:
        kwargs["systems"] = tuple(raw["systems"])
    if kwargs.get("similarity_mask") is not None:
        kwargs["similarity_mask"] = tuple(bool(m) for m in kwargs["similarity_mask"])
    if isinstance(kwargs.get("test"), TestProtocol) and kwargs["test"].tasks is not None:
        kwargs["test"] = dataclasses.replace(kwargs["test"], tasks=tuple(dict(t) for t in kwargs["test"].tasks))
    if "trace_timing" in kwargs and not isinstance(kwargs["trace_timing"], bool):
        raise ConfigError("config.trace_timing", f"expected true/false, got {kwargs['trace_timing']!r}")
    try:
        return ExperimentConfig(**kwargs)
    except (ValueError, TypeError) as exc:
        msg = str(exc)
        first = msg.split(" ", 1)[0]
        raise ConfigError(f"config.{first}" if first in top else "config", msg) from None


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"invalid JSON: {exc}") from None
    return config_from_dict(raw)


# ----------------------------------------------------------------------------- persistence

def write_dataset_csv(path: str | Path, data: TransitionDataset) -> None:
    sd, ad = data.state_dim, data.action_dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*[f"s{i}" for i in range(sd)], *[f"a{i}" for i in range(ad)], *[f"ns{i}" for i in range(sd)]])
        for s, a, s2 in zip(data.states, data.actions, data.next_states):
            w.writerow([repr(float(v)) for v in (*s, *a, *s2)])


def read_dataset_csv(path: str | Path, task_id: int | None = None) -> TransitionDataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    sd = sum(1 for h in header if h.startswith("s"))
    ad = sum(1 for h in header if h.startswith("a"))
    arr = np.array(body, dtype=np.float64).reshape(len(body), 2 * sd + ad)
    return TransitionDataset(arr[:, :sd], arr[:, sd:sd + ad], arr[:, sd + ad:], task_id)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _subdir(cfg: ExperimentConfig, name: str) -> Path:
    d = Path(cfg.out_dir) / name
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {d}: {exc}") from exc
    return d


def _read_manifest(path: Path) -> dict:
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    return json.loads(path.read_text())


# ----------------------------------------------------------------------------- tasks

def training_tasks(cfg: ExperimentConfig) -> list[TaskSpec]:
    """The nominal (reference) task as id 0, followed by ``n_tasks - 1`` sampled tasks."""
    fam = get_family(cfg.family)
    tasks = [fam.nominal()]
    if cfg.meta.n_tasks > 1:
        tasks += sample_tasks(cfg.family, cfg.meta.n_tasks - 1, cfg.meta.seed, cfg.task_ranges, exclude=tasks)
    return tasks


def heldout_tasks(cfg: ExperimentConfig, train: Sequence[TaskSpec]) -> list[TaskSpec]:
    if cfg.test.tasks is not None:
        return [TaskSpec(cfg.family, dict(p)) for p in cfg.test.tasks]
    return sample_tasks(cfg.family, cfg.test.n_tasks, cfg.meta.seed + 7919, cfg.task_ranges, exclude=train)


# ----------------------------------------------------------------------------- commands

def cmd_collect(cfg: ExperimentConfig) -> Path:
    """Collect random-action data for every training task and write the task manifest."""
    out = _subdir(cfg, "datasets")
    train = training_tasks(cfg)
    entries = []
    for i, task in enumerate(train):
        data = collect_task_data(task, cfg.meta.samples_per_task, seed=cfg.meta.seed * 1000 + i,
                                 dt=cfg.dt, horizon=cfg.episode_horizon, task_id=i)
        fname = f"task_{i:02d}.csv"
        write_dataset_csv(out / fname, data)
        entries.append({"id": i, "params": task.params, "file": fname, "samples": len(data)})
        log.info("collected %d transitions for task %d %s", len(data), i, task.params)
    manifest = {
        "config_hash": cfg.hash(),
        "family": cfg.family,
        "tasks": entries,
        "test_tasks": [t.params for t in heldout_tasks(cfg, train)],
    }
    _write_json(out / "manifest.json", manifest)
    return out / "manifest.json"


def load_datasets(cfg: ExperimentConfig) -> tuple[dict, list[TransitionDataset]]:
    root = Path(cfg.out_dir) / "datasets"
    manifest = _read_manifest(root / "manifest.json")
    datasets = [read_dataset_csv(root / e["file"], e["id"]) for e in manifest["tasks"]]
    return manifest, datasets


def cmd_meta_train(cfg: ExperimentConfig) -> Path:
    """Meta-train the embedding model and the embedding-free RMPC variant on the collected data."""
    manifest, datasets = load_datasets(cfg)
    models = _subdir(cfg, "models")
    reports = _subdir(cfg, "reports")
    out = {}
    for name, dim in (("enn", cfg.model.embedding_dim), ("rmpc", 0)):
        model, table, report = meta_train_on_datasets(datasets, cfg.meta, dim, cfg.model.hidden_sizes)
        bad = [r.iteration for r in report.records if not (math.isfinite(r.pre_loss) and math.isfinite(r.post_loss))]
        if bad:
            raise FloatingPointError(f"{name}: non-finite training loss at iterations {bad[:5]}")
        save_model(models / f"{name}.json", model, table)
        report.write_csv(reports / f"train_{name}.csv")
        out[name] = {"file": f"{name}.json", "embedding_dim": dim,
                     "final_post_loss": report.records[-1].post_loss if report.records else None}
        log.info("trained %s model (embedding_dim=%d)", name, dim)
    _write_json(models / "manifest.json", {
        "config_hash": cfg.hash(),
        "datasets_config_hash": manifest["config_hash"],
        "reference_task": manifest["tasks"][0]["params"],
        "test_tasks": manifest["test_tasks"],
        "models": out,
    })
    return models / "manifest.json"


def trace_path(cfg: ExperimentConfig, system: str, task_index: int, seed: int) -> Path:
    return Path(cfg.out_dir) / "traces" / f"{system}_task{task_index}_seed{seed}.csv"


def make_planner(cfg: ExperimentConfig, system: str, reference: ReferenceModel):
    fam = get_family(cfg.family)
    _, cls = SYSTEMS[system]
    pc = cfg.planner_config(system)
    if cls is MACPlanner:
        return MACPlanner(pc, fam.action_low, fam.action_high, fam.reward, reference)
    if cls is AnchorMPCPlanner:
        return AnchorMPCPlanner(pc, fam.action_low, fam.action_high, fam.reward, anchor_source=reference.anchors)
    return MPCPlanner(pc, fam.action_low, fam.action_high, fam.reward)


def cmd_run(cfg: ExperimentConfig, planner_name: str | None = None) -> list[Path]:
    """Run online adaptation for each (system, held-out task, seed) and write one trace per run."""
    systems = list(cfg.systems) if planner_name is None else [planner_name]
    for s in systems:
        if s not in SYSTEMS:
            raise ValueError(f"unknown planner {s!r}; valid: {sorted(SYSTEMS)}")
    mroot = Path(cfg.out_dir) / "models"
    manifest = _read_manifest(mroot / "manifest.json")
    loaded = {"enn": load_model(mroot / "enn.json")}
    if any(SYSTEMS[s][0] == "rmpc" for s in systems):
        loaded["rmpc"] = load_model(mroot / "rmpc.json")
    enn, table = loaded["enn"]
    reference = ReferenceModel(enn, table[0], make_reference_policy(cfg.family))
    tasks = [TaskSpec(cfg.family, p) for p in manifest["test_tasks"]]
    _subdir(cfg, "traces")
    written = []
    for system in systems:
        model, tab = loaded[SYSTEMS[system][0]]
        for k, task in enumerate(tasks):
            for seed in cfg.test.seeds:
                env = Env(task, cfg.dt, cfg.episode_horizon)
                planner = make_planner(cfg, system, reference)
                trace = run_meta_test(env, model, tab, planner, cfg.adapt, cfg.test.steps, seed,
                                      reference=reference, similarity_mask=cfg.mask)
                if trace.aborted:
                    log.warning("%s task %d seed %d aborted: %s", system, k, seed, trace.abort_reason)
                path = trace_path(cfg, system, k, seed)
                trace.write_csv(path, timing=cfg.trace_timing)
                written.append(path)
                log.info("%s task %d seed %d reward %.3f", system, k, seed, trace.cumulative_reward)
    return written


@dataclass(frozen=True)
class ComparisonRow:
    system: str
    task: int
    seed: int
    cumulative_reward: float
    mean_similarity: float
    steps: int


@dataclass
class ComparisonReport:
    family: str
    n_tasks: int
    steps: int
    seeds: tuple[int, ...]
    rows: list[ComparisonRow]

    @property
    def systems(self) -> list[str]:
        present = {r.system for r in self.rows}
        return [s for s in TABLE_ORDER if s in present]

    @property
    def env_steps(self) -> int:
        """Environment steps spent per system: tasks x seeds x steps per task."""
        return self.n_tasks * len(self.seeds) * self.steps

    def cell(self, system: str) -> float:
        """Mean over seeds of the reward summed over tasks."""
        per_seed = []
        for seed in self.seeds:
            vals = [r.cumulative_reward for r in self.rows if r.system == system and r.seed == seed]
            per_seed.append(math.fsum(vals))
        return math.fsum(per_seed) / len(per_seed)

    def similarity(self, system: str) -> float:
        vals = [r.mean_similarity for r in self.rows if r.system == system and not math.isnan(r.mean_similarity)]
        return math.fsum(vals) / len(vals) if vals else math.nan

    def write(self, reports: Path) -> None:
        with open(reports / "comparison.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["planner", "task", "seed", "cumulative_reward", "mean_similarity", "steps"])
            for r in self.rows:
                w.writerow([r.system, r.task, r.seed, repr(r.cumulative_reward), repr(r.mean_similarity), r.steps])
        header = ["environment", "tasks", "env_steps", *[s.upper() for s in self.systems]]
        values = [self.family, self.n_tasks, self.env_steps, *[repr(self.cell(s)) for s in self.systems]]
        with open(reports / "table.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerow(values)
            w.writerow(["similarity", "", "", *[repr(self.similarity(s)) for s in self.systems]])
        (reports / "table.txt").write_text(self.format_table() + "\n")

    def format_table(self) -> str:
        cols = ["Environment", "j tasks", "env steps", *[s.upper() for s in self.systems]]
        row = [self.family, str(self.n_tasks), str(self.env_steps), *[f"{self.cell(s):.1f}" for s in self.systems]]
        sim = ["mean similarity", "", "", *[f"{self.similarity(s):.4f}" for s in self.systems]]
        widths = [max(len(c), len(v), len(m)) for c, v, m in zip(cols, row, sim)]
        lines = [" | ".join(x.ljust(wd) for x, wd in zip(line, widths)) for line in (cols, row, sim)]
        lines.insert(1, "-+-".join("-" * wd for wd in widths))
        return "\n".join(lines)


def read_trace_totals(path: Path) -> tuple[float, float, int]:
    """(cumulative reward, mean reference similarity, row count) recomputed from a trace CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    rewards = [float(r["reward"]) for r in rows]
    sims = [float(r["ref_similarity"]) for r in rows]
    sims = [s for s in sims if not math.isnan(s)]
    mean_sim = math.fsum(sims) / len(sims) if sims else math.nan
    return math.fsum(rewards), mean_sim, len(rows)


def cmd_compare(cfg: ExperimentConfig) -> ComparisonReport:
    """Aggregate every expected trace into the comparison CSV and the summary table."""
    manifest = _read_manifest(Path(cfg.out_dir) / "models" / "manifest.json")
    n_tasks = len(manifest["test_tasks"])
    expected = [(s, k, seed) for s in cfg.systems for k in range(n_tasks) for seed in cfg.test.seeds]
    missing = [str(trace_path(cfg, *e)) for e in expected if not trace_path(cfg, *e).exists()]
    if missing:
        raise FileNotFoundError(f"{len(missing)} trace file(s) missing: " + ", ".join(missing))
    rows = []
    for s, k, seed in expected:
        total, sim, n = read_trace_totals(trace_path(cfg, s, k, seed))
        rows.append(ComparisonRow(s, k, seed, total, sim, n))
    report = ComparisonReport(cfg.family, n_tasks, cfg.test.steps, tuple(cfg.test.seeds), rows)
    reports = _subdir(cfg, "reports")
    report.write(reports)
    _write_json(reports / "manifest.json", {"config_hash": cfg.hash(), "rows": len(rows)})
    return report


# ----------------------------------------------------------------------------- gradient check

@dataclass(frozen=True)
class GradcheckResult:
    name: str
    max_rel_error: float
    passed: bool


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


def _forward_extended(weights, biases, x):
    # long double evaluation keeps finite-difference rounding noise far below the tolerance
    for l, (w, b) in enumerate(zip(weights, biases)):
        x = x @ w.T + b
        if l < len(weights) - 1:
            x = np.tanh(x)
    return x


def gradcheck(cases: int = 20, seed: int = 0, eps: float = 1e-6, tol: float = 1e-5) -> list[GradcheckResult]:
    """Central finite differences against backprop for the MLP and the embedding loss."""
    ld = np.longdouble
    rng = np.random.default_rng(seed)
    results = []
    for c in range(cases):
        sd, ad, hd = (int(v) for v in rng.integers(1, 4, size=3))
        hidden = tuple(int(v) for v in rng.integers(2, 6, size=int(rng.integers(1, 3))))
        batch = int(rng.integers(1, 6))
        # bare MLP: d(sum(w * out)) / d weights
        params = init_mlp((sd + ad + hd, *hidden, sd), rng)
        x = rng.standard_normal((batch, sd + ad + hd))
        wout = rng.standard_normal((batch, sd))
        grads = backward(params, x, wout)
        ws = [w.astype(ld) for w in params.weights]
        bs = [b.astype(ld) for b in params.biases]
        xl, wl = x.astype(ld), wout.astype(ld)
        worst = 0.0
        for li, W in enumerate(ws):
            num = np.zeros(W.shape)
            for idx in np.ndindex(W.shape):
                orig = W[idx]
                W[idx] = orig + ld(eps)
                fp = np.sum(wl * _forward_extended(ws, bs, xl))
                W[idx] = orig - ld(eps)
                fm = np.sum(wl * _forward_extended(ws, bs, xl))
                W[idx] = orig
                num[idx] = float((fp - fm) / (2 * ld(eps)))
            worst = max(worst, _rel_err(grads.weights[li], num))
        results.append(GradcheckResult(f"mlp[{c}]", worst, worst < tol))
        # embedding loss w.r.t. h, identity normalization so the loss is a plain MLP residual
        model = build_model(sd, ad, hd, hidden, NormStats.identity(sd, ad), rng)
        h = rng.standard_normal(hd)
        data = TransitionDataset(rng.standard_normal((batch, sd)), rng.standard_normal((batch, ad)),
                                 rng.standard_normal((batch, sd)))
        _, gh = task_loss_grads(model, h, data)
        ws = [w.astype(ld) for w in model.params.weights]
        bs = [b.astype(ld) for b in model.params.biases]
        target = (data.next_states - data.states).astype(ld)

        def loss(hv):
            xin = np.concatenate([data.states.astype(ld), data.actions.astype(ld), np.broadcast_to(hv, (batch, hd))],
                                 axis=1)
            err = _forward_extended(ws, bs, xin) - target
            return np.sum(err * err) / (2 * batch)

        hl = h.astype(ld)
        num_h = np.array([float((loss(hl + ld(eps) * e) - loss(hl - ld(eps) * e)) / (2 * ld(eps)))
                          for e in np.eye(hd, dtype=ld)])
        err = _rel_err(gh, num_h)
        results.append(GradcheckResult(f"embedding[{c}]", err, err < tol))
    return results


# ----------------------------------------------------------------------------- CLI

def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, meta=dataclasses.replace(cfg.meta, seed=args.seed))
    if getattr(args, "out", None) is not None:
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mbmac", description="Meta-learned dynamics models with similarity-guided planning.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("collect", "collect random-action data for the training tasks"),
        ("meta-train", "meta-train the embedding model and the RMPC baseline"),
        ("run", "run online adaptation on the held-out tasks"),
        ("compare", "aggregate traces into the comparison report"),
    ]:
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", type=Path, help="experiment JSON (defaults when omitted)")
        sp.add_argument("--seed", type=int, help="override the meta-training / task sampling seed")
        sp.add_argument("--out", help="override the output directory")
        if name == "run":
            sp.add_argument("--planner", help=f"run only this system ({', '.join(sorted(SYSTEMS))})")
    g = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--cases", type=int, default=20)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "gradcheck":
        results = gradcheck(args.cases, args.seed)
        for r in results:
            print(f"{'PASS' if r.passed else 'FAIL'} {r.name} max_rel_error={r.max_rel_error:.3e}")
        failed = sum(not r.passed for r in results)
        print(f"{len(results) - failed}/{len(results)} checks passed")
        return 1 if failed else 0
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        cfg = _apply_overrides(cfg, args)
        if args.command == "collect":
            print(cmd_collect(cfg))
        elif args.command == "meta-train":
            print(cmd_meta_train(cfg))
        elif args.command == "run":
            paths = cmd_run(cfg, args.planner)
            print(f"wrote {len(paths)} trace(s) to {Path(cfg.out_dir) / 'traces'}")
        elif args.command == "compare":
            print(cmd_compare(cfg).format_table())
    except (ConfigError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
