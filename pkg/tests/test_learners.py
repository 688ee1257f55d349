"""Behavioral oracles for the ten learners: exact algebra where possible
(gradient projection, fisher accumulation, herding), state-machine guards,
and checkpoint round trips."""

import numpy as np
import pytest
from conftest import make_synth_stream
from hypothesis import given, settings
from hypothesis import strategies as st

from il_backdoor.learners import (
    AGEM,
    BaseLearner,
    LearnerConfig,
    MethodScenarioError,
    StreamMeta,
    TrainingDivergence,
    create_learner,
    estimate_fisher,
    herd_indices,
    load_learner,
    project_gradient,
    save_learner,
)

SMALL = dict(hidden=(32, 32), lr=1e-3, batch_size=16, buffer_capacity=30,
             fisher_samples=20, exemplar_budget=12, vae_hidden=(24, 24),
             vae_latent=8)


def small_config(method, **over):
    kw = dict(SMALL)
    kw.update(over)
    return LearnerConfig(method, **kw)


def trained(method, stream, n_tasks=2, iterations=60, seed=0, **over):
    learner = create_learner(small_config(method, **over), stream, seed)
    for t in range(1, n_tasks + 1):
        learner.train_task(stream.tasks[t - 1], t, iterations)
        learner.consolidate(stream.tasks[t - 1], t)
    return learner


# -- gradient projection ----------------------------------------------------


def test_project_gradient_worked_example():
    g = np.array([1.0, 0.0])
    ref = np.array([-1.0, 1.0])
    out = project_gradient(g, ref)
    np.testing.assert_allclose(out, [0.5, 0.5], atol=1e-15)
    assert out is g  # in place
    # agreeing gradients pass through untouched
    g2 = np.array([1.0, 2.0])
    np.testing.assert_array_equal(project_gradient(g2.copy(), g2), g2)
    # degenerate reference: no projection possible
    g3 = np.array([-3.0, 1.0])
    np.testing.assert_array_equal(project_gradient(g3.copy(), np.zeros(2)), g3)


@settings(max_examples=100, deadline=None)
@given(
    st.integers(2, 24).flatmap(
        lambda d: st.tuples(
            st.lists(st.floats(-10, 10), min_size=d, max_size=d),
            st.lists(st.floats(-10, 10), min_size=d, max_size=d),
        )
    )
)
def test_projected_gradient_never_conflicts(pair):
    g = np.array(pair[0])
    ref = np.array(pair[1])
    out = project_gradient(g.copy(), ref)
    scale = max(float(np.linalg.norm(out) * np.linalg.norm(ref)), 1.0)
    assert float(np.dot(out, ref)) >= -1e-9 * scale


# -- penalty-based learners --------------------------------------------------


def test_ewc_lambda_zero_is_exactly_plain_finetune(synth_stream):
    cfg = small_config("EWC", lam=0.0)
    ewc = create_learner(cfg, synth_stream, seed=3)
    plain = BaseLearner(cfg, StreamMeta.of(synth_stream), seed=3)
    np.testing.assert_array_equal(ewc.model.params, plain.model.params)
    for t in (1, 2):
        for learner in (ewc, plain):
            learner.train_task(synth_stream.tasks[t - 1], t, 40)
            learner.consolidate(synth_stream.tasks[t - 1], t)
        np.testing.assert_array_equal(ewc.model.params, plain.model.params)


def test_ewc_keeps_one_anchor_per_task(synth_stream):
    learner = trained("EWC", synth_stream, n_tasks=2)
    assert len(learner.fishers) == 2
    fisher2, anchor2 = learner.fishers[1]
    np.testing.assert_array_equal(anchor2, learner.model.params)
    assert (fisher2 >= 0).all() and fisher2.max() > 0


def test_online_ewc_decay_algebra(synth_stream):
    learner = create_learner(small_config("OnlineEWC", gamma=0.7), synth_stream, 0)
    learner.train_task(synth_stream.tasks[0], 1, 40)
    learner.consolidate(synth_stream.tasks[0], 1)
    f1 = learner.fisher.copy()
    learner.train_task(synth_stream.tasks[1], 2, 40)
    f2 = estimate_fisher(learner, synth_stream.tasks[1], 2)
    learner.consolidate(synth_stream.tasks[1], 2)
    np.testing.assert_allclose(learner.fisher, 0.7 * f1 + f2, rtol=1e-6)
    np.testing.assert_array_equal(learner.anchor, learner.model.params)


def test_fisher_estimation_leaves_batch_rng_alone(synth_stream):
    learner = trained("EWC", synth_stream, n_tasks=1)
    state_before = learner.rng.bit_generator.state
    estimate_fisher(learner, synth_stream.tasks[0], 1)
    assert learner.rng.bit_generator.state == state_before


def test_si_importance_lifecycle(synth_stream):
    learner = create_learner(small_config("SI"), synth_stream, 0)
    assert not learner.importance.any()
    learner.train_task(synth_stream.tasks[0], 1, 40)
    assert learner.omega.any()  # path integral accumulated during training
    learner.consolidate(synth_stream.tasks[0], 1)
    assert learner.importance.any()
    assert not learner.omega.any()  # reset per task
    np.testing.assert_array_equal(learner.anchor, learner.model.params)


def test_lwf_teacher_is_frozen_snapshot(synth_stream):
    learner = trained("LwF", synth_stream, n_tasks=1)
    frozen = learner.prev_model.params.copy()
    learner.train_task(synth_stream.tasks[1], 2, 40)
    assert not np.array_equal(learner.model.params, frozen)
    np.testing.assert_array_equal(learner.prev_model.params, frozen)


# -- gating -------------------------------------------------------------------


def test_xdg_masks_frozen_and_sparse():
    stream = make_synth_stream(scenario="task")
    cfg = small_config("XdG", gate_fraction=0.75)
    learner = create_learner(cfg, stream, 0)
    width = 32
    n_on = round(0.25 * width)
    masks = learner.model.gate_masks
    assert set(masks) == {0, 1, 2}
    for m in masks.values():
        assert m.shape == (2, width)
        np.testing.assert_array_equal((m > 0).sum(axis=1), n_on)
    assert not np.array_equal(masks[0], masks[1])
    snapshot = {t: m.copy() for t, m in masks.items()}
    learner.train_task(stream.tasks[0], 1, 30)
    learner.consolidate(stream.tasks[0], 1)
    for t, m in learner.model.gate_masks.items():
        np.testing.assert_array_equal(m, snapshot[t])


def test_xdg_gate_fraction_bounds():
    stream = make_synth_stream(scenario="task")
    with pytest.raises(ValueError):
        create_learner(small_config("XdG", gate_fraction=0.999), stream, 0)


# -- buffers ------------------------------------------------------------------


def test_buffer_quota_is_class_balanced(synth_stream):
    learner = create_learner(small_config("ER", buffer_capacity=30), synth_stream, 0)
    for t in (1, 2, 3):
        learner.train_task(synth_stream.tasks[t - 1], t, 20)
        learner.consolidate(synth_stream.tasks[t - 1], t)
        assert learner.buf_n == 10 * t  # quota = 30 // 3 tasks
        block = slice(10 * (t - 1), 10 * t)
        assert (learner.buf_task[block] == t).all()
        counts = np.bincount(learner.buf_y[block], minlength=3)
        assert sorted(counts.tolist()) == [3, 3, 4]  # 10 over 3 classes


def test_buffer_eviction_respects_capacity(synth_stream):
    learner = create_learner(small_config("ER", buffer_capacity=7), synth_stream, 0)
    task = synth_stream.tasks[0]
    for k in range(6):  # quota is 2; keep folding until overflow hits
        learner._fold_into_buffer(task, k + 1)
        assert learner.buf_n <= 7
    assert learner.buf_n == 7


def test_er_uses_buffer_from_second_task(synth_stream):
    learner = trained("ER", synth_stream, n_tasks=1, iterations=30)
    buf_before = learner.buf_x[: learner.buf_n].copy()
    loss = learner.step(synth_stream.tasks[1].train.flat()[:16],
                        synth_stream.tasks[1].train.labels[:16], 2)
    assert np.isfinite(loss)
    np.testing.assert_array_equal(learner.buf_x[: learner.buf_n], buf_before)


def test_agem_without_buffer_fails_loudly(synth_stream):
    learner = create_learner(small_config("AGEM", buffer_capacity=0), synth_stream, 0)
    learner.train_task(synth_stream.tasks[0], 1, 10)
    learner.consolidate(synth_stream.tasks[0], 1)
    with pytest.raises(ValueError):
        learner.train_task(synth_stream.tasks[1], 2, 5)


# -- generative replay ---------------------------------------------------------


def test_dgr_freezes_generator_at_boundary(synth_stream):
    learner = trained("DGR", synth_stream, n_tasks=1, iterations=30)
    assert learner.prev_generator is not None
    frozen = learner.prev_generator.params.copy()
    learner.train_task(synth_stream.tasks[1], 2, 20)
    np.testing.assert_array_equal(learner.prev_generator.params, frozen)
    assert not np.array_equal(learner.generator.params, frozen)
    out = learner.replay_samples(5, np.random.default_rng(0))
    assert out.shape == (5, 64)
    assert out.min() >= 0.0 and out.max() <= 1.0


# -- herding -------------------------------------------------------------------


def test_herding_full_budget_reproduces_class_mean():
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(12, 5))
    order = herd_indices(feats, 12)
    assert sorted(order.tolist()) == list(range(12))
    np.testing.assert_allclose(feats[order].mean(axis=0), feats.mean(axis=0), atol=1e-12)


def test_herding_prefix_property_and_first_pick():
    rng = np.random.default_rng(1)
    feats = rng.normal(size=(20, 4))
    mu = feats.mean(axis=0)
    first = int(np.argmin(((feats - mu) ** 2).sum(axis=1)))
    order6 = herd_indices(feats, 6)
    order3 = herd_indices(feats, 3)
    assert order6[0] == first
    np.testing.assert_array_equal(order3, order6[:3])
    assert len(np.unique(order6)) == 6


def test_icarl_exemplars_and_prediction():
    stream = make_synth_stream(scenario="class")
    learner = trained("iCaRL", stream, n_tasks=2, iterations=80)
    # class_hi grew eagerly and budgets re-split across seen classes
    assert learner.class_hi == 6
    per_class = 12 // 6
    for c, arr in learner.exemplar_x.items():
        assert len(arr) <= max(per_class, 12 // 3)
    preds = learner.predict(stream.tasks[0].test)
    assert set(np.unique(preds)) <= set(range(6))
    acc = float((learner.predict(stream.tasks[1].test) == stream.tasks[1].test.labels).mean())
    assert acc > 0.5  # distinct blobs are easy; near-chance means herding broke


# -- guards ---------------------------------------------------------------------


def test_task_ordering_guards(synth_stream):
    learner = create_learner(small_config("EWC"), synth_stream, 0)
    with pytest.raises(ValueError):
        learner.train_task(synth_stream.tasks[1], 2, 5)
    with pytest.raises(ValueError):
        learner.consolidate(synth_stream.tasks[0], 1)  # nothing trained yet
    learner.train_task(synth_stream.tasks[0], 1, 5)
    learner.consolidate(synth_stream.tasks[0], 1)
    with pytest.raises(ValueError):
        learner.consolidate(synth_stream.tasks[0], 1)  # twice


def test_fine_tune_guards(synth_stream):
    learner = create_learner(small_config("EWC"), synth_stream, 0)
    with pytest.raises(ValueError):
        learner.fine_tune(synth_stream.tasks[0].train)
    learner.train_task(synth_stream.tasks[0], 1, 10)
    learner.consolidate(synth_stream.tasks[0], 1)
    with pytest.raises(ValueError):
        learner.fine_tune(synth_stream.tasks[0].train, task_index=2)
    before = learner.model.params.copy()
    learner.fine_tune(synth_stream.tasks[0].train, iterations=5)
    assert not np.array_equal(learner.model.params, before)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(synth_stream):
    learner = create_learner(small_config("EWC", lr=1e18), synth_stream, 0)
    with pytest.raises(TrainingDivergence):
        learner.train_task(synth_stream.tasks[0], 1, 200)


def test_scenario_compatibility_matrix():
    domain = make_synth_stream(scenario="domain", n_tasks=2)
    task = make_synth_stream(scenario="task", n_tasks=2)
    clazz = make_synth_stream(scenario="class", n_tasks=2)
    with pytest.raises(MethodScenarioError):
        create_learner(small_config("XdG"), domain, 0)
    with pytest.raises(MethodScenarioError):
        create_learner(small_config("iCaRL"), task, 0)
    with pytest.raises(MethodScenarioError):
        create_learner(small_config("EWC"), clazz, 0)
    create_learner(small_config("DGR"), clazz, 0)  # broadest support


def test_predict_label_spaces():
    task_stream = make_synth_stream(scenario="task")
    learner = trained("EWC", task_stream, n_tasks=2, iterations=80)
    preds = learner.predict(task_stream.tasks[1].test, task_id=2)
    assert set(np.unique(preds)) <= set(task_stream.tasks[1].class_ids)
    feats = learner.penultimate_activations(task_stream.tasks[0].test)
    assert feats.shape == (len(task_stream.tasks[0].test), 32)

    domain_stream = make_synth_stream(scenario="domain")
    dl = trained("SI", domain_stream, n_tasks=1, iterations=80)
    dpreds = dl.predict(domain_stream.tasks[0].test)
    assert set(np.unique(dpreds)) <= {0, 1, 2}
    acc = float((dpreds == domain_stream.tasks[0].test.labels).mean())
    assert acc > 0.6


# -- checkpoint round trips -------------------------------------------------------


@pytest.mark.parametrize("method,scenario", [
    ("EWC", "domain"),
    ("SI", "domain"),
    ("LwF", "domain"),
    ("ER", "domain"),
    ("AGEM", "domain"),
    ("OnlineEWC", "domain"),
    ("DGR", "domain"),
    ("DGRdistill", "domain"),
    ("XdG", "task"),
    ("iCaRL", "class"),
])
def test_save_load_round_trip(tmp_path, method, scenario):
    stream = make_synth_stream(scenario=scenario)
    learner = trained(method, stream, n_tasks=2, iterations=40)
    path = tmp_path / "state.npz"
    save_learner(learner, path)
    back = load_learner(path)
    assert back.method == learner.method
    assert back.tasks_seen == 2
    assert back.class_hi == learner.class_hi
    np.testing.assert_array_equal(back.model.params, learner.model.params)
    task_id = 1 if scenario == "task" else None
    np.testing.assert_array_equal(
        back.predict(stream.tasks[0].test, task_id=task_id),
        learner.predict(stream.tasks[0].test, task_id=task_id),
    )
    if method in ("ER", "AGEM"):
        assert back.buf_n == learner.buf_n
        np.testing.assert_array_equal(back.buf_x[: back.buf_n],
                                      learner.buf_x[: learner.buf_n])
    if method == "EWC":
        assert len(back.fishers) == 2
        np.testing.assert_array_equal(back.fishers[0][0], learner.fishers[0][0])
    if method.startswith("DGR"):
        np.testing.assert_array_equal(back.generator.params, learner.generator.params)
        np.testing.assert_array_equal(back.prev_generator.params,
                                      learner.prev_generator.params)
    if method == "XdG":
        for t, m in learner.model.gate_masks.items():
            np.testing.assert_array_equal(back.model.gate_masks[t], m)
    if method == "iCaRL":
        assert set(back.exemplar_x) == set(learner.exemplar_x)
        for c in learner.exemplar_x:
            np.testing.assert_array_equal(back.exemplar_x[c], learner.exemplar_x[c])


def test_resume_training_after_load(tmp_path, synth_stream):
    learner = trained("EWC", synth_stream, n_tasks=1, iterations=30)
    path = tmp_path / "mid.npz"
    save_learner(learner, path)
    back = load_learner(path)
    back.train_task(synth_stream.tasks[1], 2, 10)
    back.consolidate(synth_stream.tasks[1], 2)
    assert back.tasks_seen == 2
