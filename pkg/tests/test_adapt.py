import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mbmac.adapt import (
    AdaptConfig,
    ObservationWindow,
    most_likely_embedding,
    online_adapt,
    run_meta_test,
    window_errors,
)
from mbmac.enn import (
    EmbeddingTable,
    EnnModel,
    NormStats,
    TaskEmbedding,
    TransitionDataset,
    build_model,
    task_loss,
)
from mbmac.envworld import Env, TaskSpec, get_family, make_reference_policy
from mbmac.metatrain import collect_task_data
from mbmac.ndmath import MlpParams, flatten
from mbmac.planner import MACPlanner, MPCPlanner, PlannerConfig, ReferenceModel

SMALL = PlannerConfig(horizon=4, elites=4, branches=4)


def offset_model(offsets):
    """Linear net whose normalized delta is the embedding's first entry, on every state dim."""
    sd, ad, hd = 2, 1, 1
    W = np.zeros((sd, sd + ad + hd))
    W[:, -1] = 1.0
    model = EnnModel(MlpParams((W,), (np.zeros(sd),), ()), NormStats.identity(sd, ad), sd, ad, hd)
    table = EmbeddingTable(tuple(TaskEmbedding(i, np.array([c])) for i, c in enumerate(offsets)))
    return model, table


def offset_window(c, n, rng):
    s = rng.standard_normal((n, 2))
    return TransitionDataset(s, rng.standard_normal((n, 1)), s + c)


@given(cap=st.integers(1, 10), pushes=st.integers(0, 30))
def test_window_is_bounded_fifo(cap, pushes):
    w = ObservationWindow(cap)
    for i in range(pushes):
        w.push([float(i)], [0.0], [float(i + 1)])
    assert len(w) == min(cap, pushes)
    if pushes:
        firsts = [item[0][0] for item in w]
        assert firsts == [float(i) for i in range(max(0, pushes - cap), pushes)]


def test_window_rejects_zero_capacity_and_empty_dataset():
    with pytest.raises(ValueError):
        ObservationWindow(0)
    with pytest.raises(ValueError):
        ObservationWindow(3).as_dataset()


def test_single_entry_table_returns_it(rng):
    model, table = offset_model([0.4])
    assert most_likely_embedding(model, table, offset_window(-1.0, 8, rng)).id == 0


def test_tie_goes_to_lowest_id(rng):
    model, table = offset_model([0.7, 0.2, 0.2, 0.7])
    assert most_likely_embedding(model, table, offset_window(0.2, 8, rng)).id == 1


def test_window_from_task_selects_its_embedding(rng):
    offsets = [-0.3, -0.1, 0.0, 0.1, 0.3]
    model, table = offset_model(offsets)
    for i, c in enumerate(offsets):
        assert most_likely_embedding(model, table, offset_window(c, 16, rng)).id == i


@given(seed=st.integers(0, 10_000))
def test_selected_embedding_has_minimal_window_error(seed):
    rng = np.random.default_rng(seed)
    data = TransitionDataset(rng.standard_normal((12, 3)), rng.standard_normal((12, 1)),
                             rng.standard_normal((12, 3)))
    model = build_model(3, 1, 2, (6,), NormStats.from_data(data), rng)
    table = EmbeddingTable(tuple(TaskEmbedding(i, rng.standard_normal(2)) for i in range(6)))
    best = most_likely_embedding(model, table, data)
    errs = [2 * task_loss(model, h, data) / 3 for h in table]
    assert all(errs[best.id] <= e + 1e-15 for e in errs)
    np.testing.assert_allclose(window_errors(model, table, data), errs, rtol=1e-12)


def test_online_adapt_zero_steps_is_identity(rng):
    model, table = offset_model([0.1, 0.5])
    out = online_adapt(model, table[1], offset_window(0.3, 8, rng), 0, 0.1)
    assert out.model is model and out.embedding is table[1] and out.steps == 0


def test_online_adapt_perfect_fit_unchanged(rng):
    model, table = offset_model([0.1, 0.5])
    out = online_adapt(model, table[1], offset_window(0.5, 8, rng), 7, 0.1)
    np.testing.assert_allclose(flatten(out.params), flatten(model.params), atol=1e-14)
    np.testing.assert_allclose(out.embedding.values, [0.5], atol=1e-14)


def test_online_adapt_reduces_window_loss():
    train = collect_task_data(TaskSpec("pendulum-gravity", {"gravity": 10.0}), 400, seed=0)
    held = collect_task_data(TaskSpec("pendulum-gravity", {"gravity": 4.0}), 32, seed=1)
    rng = np.random.default_rng(0)
    model = build_model(3, 1, 2, (16,), NormStats.from_data(train), rng)
    h = TaskEmbedding(0, np.zeros(2))
    cfg = AdaptConfig()
    out = online_adapt(model, h, held, cfg.steps, cfg.lr)
    assert task_loss(out.model, out.embedding, held) <= task_loss(model, h, held)


def test_adapt_config_validation():
    with pytest.raises(ValueError):
        AdaptConfig(window=0)
    with pytest.raises(ValueError):
        AdaptConfig(window=4, bootstrap_steps=5)
    assert AdaptConfig(window=8).reselect_period == 8


@pytest.fixture(scope="module")
def pendulum_setup():
    task = TaskSpec("pendulum-gravity", {"gravity": 6.0})
    data = collect_task_data(task, 300, seed=0)
    rng = np.random.default_rng(3)
    model = build_model(3, 1, 2, (8,), NormStats.from_data(data), rng)
    table = EmbeddingTable(tuple(TaskEmbedding(i, rng.standard_normal(2) * 0.1) for i in range(3)))
    ref = ReferenceModel(model, table[0], make_reference_policy("pendulum-gravity"))
    return task, model, table, ref


def _mpc():
    fam = get_family("pendulum-gravity")
    return MPCPlanner(SMALL, fam.action_low, fam.action_high, fam.reward)


def test_zero_steps_gives_empty_trace(pendulum_setup):
    task, model, table, _ = pendulum_setup
    trace = run_meta_test(Env(task), model, table, _mpc(), AdaptConfig(window=8), 0, seed=0)
    assert len(trace) == 0 and trace.cumulative_reward == 0.0


def test_trace_bookkeeping_and_no_mutation(pendulum_setup, tmp_path):
    task, model, table, ref = pendulum_setup
    before_p, before_t = flatten(model.params).copy(), table.as_array().copy()
    fam = get_family("pendulum-gravity")
    mac = MACPlanner(SMALL, fam.action_low, fam.action_high, fam.reward, ref)
    cfg = AdaptConfig(window=8, steps=2)
    trace = run_meta_test(Env(task), model, table, mac, cfg, 30, seed=1, reference=ref)
    assert len(trace) == 30
    assert trace.cumulative_reward == pytest.approx(sum(r.reward for r in trace.records), rel=1e-14)
    assert [r.embedding_id for r in trace.records[:cfg.bootstrap_steps]] == [0] * cfg.bootstrap_steps
    assert all(np.isfinite(r.ref_similarity) for r in trace.records)
    np.testing.assert_array_equal(flatten(model.params), before_p)
    np.testing.assert_array_equal(table.as_array(), before_t)
    path = tmp_path / "t.csv"
    trace.write_csv(path, timing=False)
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == 30 and all(r["plan_time_ms"] == "0.0" for r in rows)
    assert sum(float(r["reward"]) for r in rows) == pytest.approx(trace.cumulative_reward, rel=1e-12)


def test_run_meta_test_is_deterministic(pendulum_setup):
    task, model, table, ref = pendulum_setup
    cfg = AdaptConfig(window=8, steps=2)
    a = run_meta_test(Env(task), model, table, _mpc(), cfg, 15, seed=4, reference=ref)
    b = run_meta_test(Env(task), model, table, _mpc(), cfg, 15, seed=4, reference=ref)
    assert [r.action.tolist() for r in a.records] == [r.action.tolist() for r in b.records]
