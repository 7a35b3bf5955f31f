"""Acceptance criteria, each checked at its stated tolerance.

Every test prints one ``CRITERION n PASS|FAIL`` line (also collected into the
pytest terminal summary) before asserting.
"""

import filecmp
import math
import sys
import time

import numpy as np
import pytest

from mbmac.adapt import AdaptConfig, most_likely_embedding, online_adapt
from mbmac.enn import (
    EmbeddingTable,
    NormStats,
    TaskEmbedding,
    TransitionDataset,
    build_model,
    inner_adapt,
    predict_next_state,
    task_loss,
    task_loss_grads,
)
from mbmac.envworld import TaskSpec, get_family, make_reference_policy
from mbmac.harness import (
    ExperimentConfig,
    cmd_collect,
    cmd_compare,
    cmd_meta_train,
    cmd_run,
    config_from_dict,
    heldout_tasks,
    training_tasks,
)
from mbmac.metatrain import MetaTrainConfig, collect_task_data, meta_train, reptile_outer_update
from mbmac.ndmath import flatten, init_mlp
from mbmac.planner import (
    ActionDistribution,
    AnchorMPCPlanner,
    MACPlanner,
    MPCPlanner,
    PlannerConfig,
    ReferenceModel,
    update_distribution,
)

pytestmark = pytest.mark.acceptance


def record(log, n, passed, detail):
    line = f"CRITERION {n} {'PASS' if passed else 'FAIL'}: {detail}"
    print(line)
    log.append(line)


def rel_error(a, b):
    return np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-8)


# ---------------------------------------------------------------------------- 1


def _extended_loss(weights, biases, x, target):
    """Straight-line loss in long double, independent of the library's forward pass."""
    a = x
    for l, (w, b) in enumerate(zip(weights, biases)):
        a = a @ w.T + b
        if l < len(weights) - 1:
            a = np.tanh(a)
    err = a - target
    return np.sum(err * err) / (2 * x.shape[0])


def test_criterion_1_gradient_correctness(acceptance_log):
    # float64 central differences at eps=1e-6 carry ~1e-10 absolute rounding noise, so the
    # difference quotients are evaluated in extended precision to resolve small gradient entries
    ld = np.longdouble
    rng = np.random.default_rng(2024)
    eps = 1e-6
    worst = 0.0
    t0 = time.perf_counter()
    for _ in range(50):
        sd, ad, hd = (int(v) for v in rng.integers(1, 5, size=3))
        hidden = tuple(int(v) for v in rng.integers(1, 17, size=int(rng.integers(1, 4))))
        n = int(rng.integers(1, 9))
        data = TransitionDataset(rng.standard_normal((n, sd)), rng.standard_normal((n, ad)),
                                 rng.standard_normal((n, sd)))
        norm = NormStats.from_data(data) if n > 1 else NormStats.identity(sd, ad)
        model = build_model(sd, ad, hd, hidden, norm, rng)
        h = rng.standard_normal(hd)
        grads, gh = task_loss_grads(model, h, data)

        zs = (data.states.astype(ld) - norm.state_mean) / norm.state_std
        za = (data.actions.astype(ld) - norm.action_mean) / norm.action_std
        target = ((data.next_states.astype(ld) - data.states) - norm.delta_mean) / norm.delta_std
        ws = [w.astype(ld) for w in model.params.weights]
        bs = [b.astype(ld) for b in model.params.biases]

        def loss(ws, bs, hv):
            x = np.concatenate([zs, za, np.broadcast_to(hv, (n, hd))], axis=1)
            return _extended_loss(ws, bs, x, target)

        num = []
        for group in (ws, bs):
            for arr in group:
                for idx in np.ndindex(arr.shape):
                    orig = arr[idx]
                    arr[idx] = orig + ld(eps)
                    fp = loss(ws, bs, h.astype(ld))
                    arr[idx] = orig - ld(eps)
                    fm = loss(ws, bs, h.astype(ld))
                    arr[idx] = orig
                    num.append((fp - fm) / (2 * ld(eps)))
        # flatten() interleaves layers as (W0, b0, W1, b1, ...); rebuild that order
        sizes_w = [w.size for w in ws]
        sizes_b = [b.size for b in bs]
        nw = sum(sizes_w)
        num_w, num_b = num[:nw], num[nw:]
        ordered, iw, ib = [], 0, 0
        for sw, sb in zip(sizes_w, sizes_b):
            ordered += num_w[iw:iw + sw] + num_b[ib:ib + sb]
            iw += sw
            ib += sb
        num_theta = np.array(ordered, dtype=np.float64)
        hl = h.astype(ld)
        num_h = np.array([(loss(ws, bs, hl + ld(eps) * e) - loss(ws, bs, hl - ld(eps) * e)) / (2 * ld(eps))
                          for e in np.eye(hd, dtype=ld)], dtype=np.float64)
        worst = max(worst, rel_error(flatten(grads), num_theta).max(), rel_error(gh, num_h).max())
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-5 and elapsed < 30
    record(acceptance_log, 1, ok, f"max relative error {worst:.2e} (< 1e-5) over 50 cases in {elapsed:.1f}s (< 30s)")
    assert ok


# ---------------------------------------------------------------------------- 2


def _ulps(x, y, scale):
    return np.max(np.abs(np.asarray(x) - np.asarray(y)) / np.spacing(np.maximum(scale, np.finfo(float).tiny)))


def test_criterion_2_reptile_and_distribution_exactness(acceptance_log):
    rng = np.random.default_rng(7)
    worst = 0.0
    endpoints_exact = True
    for alpha in [0.0, 1.0, *rng.uniform(0, 1, 20)]:
        theta, phi = init_mlp((4, 6, 3), rng), init_mlp((4, 6, 3), rng)
        h, h2 = TaskEmbedding(0, rng.standard_normal(5)), TaskEmbedding(0, rng.standard_normal(5))
        new, hn = reptile_outer_update(theta, phi, h, h2, float(alpha))
        t, p = flatten(theta).tolist(), flatten(phi).tolist()
        oracle = [ti + alpha * (pi - ti) for ti, pi in zip(t, p)]
        oracle_h = [a + alpha * (b - a) for a, b in zip(h.values.tolist(), h2.values.tolist())]
        scale = np.maximum(np.abs(t), np.abs(p))
        worst = max(worst, _ulps(flatten(new), oracle, scale),
                    _ulps(hn.values, oracle_h, np.maximum(np.abs(h.values), np.abs(h2.values))))
        if alpha == 0.0:
            endpoints_exact &= np.array_equal(flatten(new), flatten(theta)) and np.array_equal(hn.values, h.values)
        if alpha == 1.0:
            endpoints_exact &= np.array_equal(flatten(new), flatten(phi)) and np.array_equal(hn.values, h2.values)
    # update_distribution endpoints
    dist = ActionDistribution(rng.uniform(-1, 1, (5, 2)), rng.uniform(0.1, 0.5, (5, 2)), 1e-4)
    elites = rng.uniform(-1, 1, (7, 5, 2))
    d0 = update_distribution(dist, elites, 0.0)
    d1 = update_distribution(dist, elites, 1.0)
    mean_or = [[sum(elites[k, t, j] for k in range(7)) / 7 for j in range(2)] for t in range(5)]
    var_or = [[max(sum((elites[k, t, j] - elites[:, t, j].mean()) ** 2 for k in range(7)) / 7, 1e-4)
               for j in range(2)] for t in range(5)]
    dist_ok = (np.array_equal(d0.mean, dist.mean) and np.array_equal(d0.var, dist.var)
               and _ulps(d1.mean, mean_or, np.abs(elites).max(axis=0)) <= 1
               and _ulps(d1.var, var_or, np.asarray(var_or)) <= 1)
    ok = worst <= 1 and endpoints_exact and dist_ok
    record(acceptance_log, 2, ok, f"max deviation {worst:.0f} ulp; endpoints exact={endpoints_exact}; "
                                  f"distribution endpoints ok={dist_ok}")
    assert ok


# ---------------------------------------------------------------------------- 3


def test_criterion_3_embedding_selection_oracle(acceptance_log):
    rng = np.random.default_rng(3)
    agree = 0
    for _ in range(50):
        sd, ad, hd = 3, 1, 4
        data = TransitionDataset(rng.standard_normal((32, sd)), rng.uniform(-2, 2, (32, ad)),
                                 rng.standard_normal((32, sd)))
        model = build_model(sd, ad, hd, (16, 16), NormStats.from_data(data), rng)
        table = EmbeddingTable(tuple(TaskEmbedding(i, rng.standard_normal(hd)) for i in range(8)))
        best, best_mse = None, math.inf
        for emb in table:
            sq = 0.0
            for s, a, s2 in zip(data.states, data.actions, data.next_states):
                err = (predict_next_state(model, s, a, emb) - s2) / model.norm.delta_std
                sq += float(err @ err)
            if sq / 32 < best_mse:
                best, best_mse = emb.id, sq / 32
        agree += most_likely_embedding(model, table, data).id == best
    ok = agree == 50
    record(acceptance_log, 3, ok, f"{agree}/50 selections agree with exhaustive enumeration")
    assert ok


# ---------------------------------------------------------------------------- 4


def _one_step_mse(model, h, data):
    return 2.0 * task_loss(model, h, data) / model.state_dim


def test_criterion_4_meta_adaptation_benefit(acceptance_log):
    t0 = time.perf_counter()
    adapt = AdaptConfig()
    enn_mse, fresh_mse = [], []
    for seed in range(5):
        cfg = ExperimentConfig(meta=MetaTrainConfig(seed=seed))
        train = training_tasks(cfg)
        held = heldout_tasks(cfg, train)
        assert len(train) == 8 and len(held) == 2
        model, table, _, _ = meta_train(train, cfg.meta, cfg.model.embedding_dim, cfg.model.hidden_sizes)
        for k, task in enumerate(held):
            window = collect_task_data(task, adapt.window, seed=10_000 + 10 * seed + k)
            test = collect_task_data(task, 1000, seed=20_000 + 10 * seed + k)
            h = most_likely_embedding(model, table, window)
            adapted = online_adapt(model, h, window, adapt.steps, adapt.lr)
            e = _one_step_mse(adapted.model, adapted.embedding, test)
            fresh = build_model(3, 1, 0, cfg.model.hidden_sizes, model.norm, np.random.default_rng(seed + 100))
            phi, h0 = inner_adapt(fresh, TaskEmbedding(0, np.zeros(0)), window, adapt.steps, adapt.lr)
            f = _one_step_mse(fresh.with_params(phi), h0, test)
            enn_mse.append(e)
            fresh_mse.append(f)
    elapsed = time.perf_counter() - t0
    ratio = np.mean(enn_mse) / np.mean(fresh_mse)
    ok = ratio <= 0.5 and elapsed < 15 * 60
    record(acceptance_log, 4, ok, f"adapted MSE {np.mean(enn_mse):.4g} vs fresh {np.mean(fresh_mse):.4g} "
                                  f"(ratio {ratio:.4f} <= 0.5) in {elapsed:.0f}s (< 900s)")
    assert ok


# ---------------------------------------------------------------------------- 5


def _run_pipeline(tmp, raw):
    raw = dict(raw, out_dir=str(tmp))
    cfg = config_from_dict(raw)
    cmd_collect(cfg)
    cmd_meta_train(cfg)
    cmd_run(cfg)
    return cfg, cmd_compare(cfg)


def _system_means(report, system):
    return report.cell(system), report.similarity(system)


def test_criterion_5_mac_behavior_similarity(acceptance_log, tmp_path):
    # held-out low-gravity task: half the nominal gravity
    raw = {"family": "pendulum-gravity", "systems": ["fmpc", "mac"],
           "test": {"n_tasks": 1, "steps": 500, "seeds": [0, 1, 2, 3, 4], "tasks": [{"gravity": 5.0}]}}
    _, report = _run_pipeline(tmp_path, raw)
    r_f, s_f = _system_means(report, "fmpc")
    r_m, s_m = _system_means(report, "mac")
    gap = s_m - s_f
    # rewards here are negative costs, so "at least half of FMPC" is read as losing at most half of |FMPC|
    reward_ok = r_m >= r_f - 0.5 * abs(r_f)
    ok = gap >= 0.05 and reward_ok
    record(acceptance_log, 5, ok,
           f"similarity MAC {s_m:.4f} vs FMPC {s_f:.4f} (gap {gap:.4f}, need >= 0.05); "
           f"reward MAC {r_m:.1f} vs FMPC {r_f:.1f} (need >= {r_f - 0.5 * abs(r_f):.1f}; "
           f"literal ratio MAC/FMPC = {r_m / r_f:.3f})")
    assert ok


# ---------------------------------------------------------------------------- 6


def test_criterion_6_baseline_ordering(acceptance_log, tmp_path):
    raw = {"family": "pointmass-disabled", "systems": ["rmpc", "mac"],
           "test": {"n_tasks": 2, "steps": 500, "seeds": [0, 1, 2, 3, 4]}}
    _, report = _run_pipeline(tmp_path, raw)
    r_rmpc, _ = _system_means(report, "rmpc")
    r_mac, _ = _system_means(report, "mac")
    ok = r_mac >= r_rmpc
    record(acceptance_log, 6, ok, f"mean cumulative reward MAC {r_mac:.1f} >= RMPC {r_rmpc:.1f}")
    assert ok


# ---------------------------------------------------------------------------- 7


def test_criterion_7_pipeline_determinism(acceptance_log, tmp_path):
    raw = {
        "meta": {"n_tasks": 3, "samples_per_task": 300, "outer_iterations": 60, "batch_size": 32},
        "model": {"embedding_dim": 3, "hidden_sizes": [16, 16]},
        "planners": {s: {"horizon": 5, "elites": 8, "branches": 4} for s in ("rmpc", "fmpc", "mac")},
        "test": {"n_tasks": 2, "steps": 40, "seeds": [0, 1]},
    }
    _run_pipeline(tmp_path / "a", raw)
    _run_pipeline(tmp_path / "b", raw)
    names = ["comparison.csv", "table.csv", "table.txt", "train_enn.csv", "train_rmpc.csv", "manifest.json"]
    same = [filecmp.cmp(tmp_path / "a" / "reports" / n, tmp_path / "b" / "reports" / n, shallow=False)
            for n in names]
    ok = all(same)
    record(acceptance_log, 7, ok, f"{sum(same)}/{len(same)} report files byte-identical across reruns")
    assert ok


# ---------------------------------------------------------------------------- 8


def test_criterion_8_planner_invariants(acceptance_log):
    fam = get_family("pendulum-gravity")
    task = TaskSpec("pendulum-gravity", {"gravity": 5.0})
    data = collect_task_data(TaskSpec("pendulum-gravity", {"gravity": 10.0}), 500, seed=0)
    rng = np.random.default_rng(0)
    model = build_model(3, 1, 2, (16,), NormStats.from_data(data), rng)
    ref = ReferenceModel(model, TaskEmbedding(0, rng.standard_normal(2)), make_reference_policy(fam.name))

    class TrueDynamics:
        def predict(self, s, a):
            return fam.dynamics(s, a, task, 0.05)[0]

    dyn = TrueDynamics()
    frontier_ok, var_ok, anchor_ok = True, True, True
    for eps, m in [(4, 3), (16, 8), (32, 16), (5, 1)]:
        cfg = PlannerConfig(horizon=6, elites=eps, branches=m, seed=eps, var_min=1e-3)
        mac = MACPlanner(cfg, fam.action_low, fam.action_high, fam.reward, ref)
        mpc = MPCPlanner(cfg, fam.action_low, fam.action_high, fam.reward)
        anc = AnchorMPCPlanner(cfg, fam.action_low, fam.action_high, fam.reward, anchor_source=ref.anchors)
        s = np.array([-1.0, 0.0, 0.0])
        for _ in range(10):
            res = mac.plan(dyn, s)
            frontier_ok &= res.frontier_sizes == [eps] * cfg.horizon
            a_mpc = mpc.plan(dyn, s).action
            a_anc = anc.plan(dyn, s).action
            anchor_ok &= bool(np.array_equal(a_mpc, a_anc))
            for p in (mac, mpc, anc):
                var_ok &= bool(np.all(p.dist.var >= cfg.var_min))
            s = dyn.predict(s, res.action)
    ok = frontier_ok and var_ok and anchor_ok
    record(acceptance_log, 8, ok, f"frontier size == elites at every depth: {frontier_ok}; "
                                  f"variance >= floor: {var_ok}; anchor-MPC(delta=inf) == MPC: {anchor_ok}")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
