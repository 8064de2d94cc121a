import math

import numpy as np
import pytest
from scipy import stats

from conception import diffuser
from conception.conception_models import ConditionLabel, GeneratedPlan, NetworkScenario
from conception.config import DiffusionSettings
from conception.diffuser import (DiffusionModel, NoiseSchedule, decode_actions, execute_plan, fit_inverse,
                                 forward_noise, guided_noise, noise_step, normalize_states, plan_from_states,
                                 sample_plan, snap_to_grid, trace_rows)
from conception.errors import ContractError, MissingPrerequisiteError, UsageError
from conception.traj_store import TrajectoryFilter, TrajectoryStore, fit_layout
from conception.twin_env import utility


def _settings(**overrides):
    base = dict(steps=4, window=4, hidden=16, depth=2, embed_dim=8, batch_size=8, inverse_hidden=[16])
    base.update(overrides)
    return DiffusionSettings(**base)


@pytest.fixture
def model(micro_store):
    return DiffusionModel.build(micro_store.layout, 2, 4, _settings(), rng=np.random.default_rng(0))


@pytest.fixture
def constant_store(tmp_path, micro_scenario, play):
    # puissance nulle et baisses bornées : chaque fenêtre est constante
    trajs = [play(micro_scenario, [1, 3] * 3) for _ in range(4)]
    store = TrajectoryStore.create(tmp_path / "constant.jsonl", fit_layout(trajs))
    store.extend(trajs)
    return store


# ---------------------------------------------------------------------------
# Processus direct
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["cosine", "linear"])
def test_schedule_shape(kind):
    sched = NoiseSchedule.build(kind, 50)
    ab = sched.alpha_bar
    assert sched.K == 50 and len(ab) == 51
    assert ab[0] == 1.0
    assert np.all(np.diff(ab) < 0)
    assert np.all((sched.betas >= 1e-6) & (sched.betas <= 0.999))
    with pytest.raises(ContractError):
        NoiseSchedule.build("sigmoid", 10)


def test_forward_noise_step_range():
    sched = NoiseSchedule.cosine(10)
    x0 = np.array([0.25, -0.5])
    out = forward_noise(sched, x0, 0, np.random.default_rng(0))
    assert np.array_equal(out, x0) and out is not x0
    for bad in (-1, 11, 1.5):
        with pytest.raises(ContractError):
            forward_noise(sched, x0, bad, np.random.default_rng(0))
    with pytest.raises(ContractError):
        noise_step(sched, x0, 0, np.random.default_rng(0))


def test_last_step_is_standard_normal():
    sched = NoiseSchedule.cosine(50)
    x = forward_noise(sched, np.full(100_000, 0.7), 50, np.random.default_rng(1))
    assert abs(x.mean()) < 0.015
    assert abs(x.var() - 1.0) < 0.02


def test_iterated_kernel_matches_closed_form():
    sched = NoiseSchedule.cosine(50)
    n, k = 20_000, 10
    rng = np.random.default_rng(2)
    x = np.full(n, 0.5)
    for step_idx in range(1, k + 1):
        x = noise_step(sched, x, step_idx, rng)
    closed = forward_noise(sched, np.full(n, 0.5), k, np.random.default_rng(3))
    ab = sched.alpha_bar[k]
    mean, var = math.sqrt(ab) * 0.5, 1.0 - ab
    assert abs(x.mean() - mean) <= 4 * math.sqrt(var / n)
    assert abs(x.var() - var) <= 4 * var * math.sqrt(2.0 / n)
    assert stats.ks_2samp(x, closed).pvalue > 1e-3


def test_guided_noise_identities():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    assert guided_noise(a, b, 0) is a
    assert guided_noise(a, b, 1) is b
    np.testing.assert_allclose(guided_noise(a, b, 2.0), 2 * b - a, rtol=1e-12)


# ---------------------------------------------------------------------------
# Modèle et échantillonnage
# ---------------------------------------------------------------------------

def test_build_rejects_unknown_user_count(micro_store):
    with pytest.raises(ContractError):
        DiffusionModel.build(micro_store.layout, 3, 4, _settings())


def test_untrained_model_ignores_condition(model, micro_scenario):
    label = model.target_label(micro_scenario)
    x = np.random.default_rng(5).normal(size=(3, model.window, 2))
    for k in (1, 4):
        np.testing.assert_allclose(model.predict_noise(x, k, model.encode_condition(label)),
                                   model.predict_noise(x, k, model.encode_condition(None)), rtol=1e-12, atol=1e-12)


def test_zero_guidance_equals_unconditional(model, micro_scenario):
    label = model.target_label(micro_scenario)
    guided = sample_plan(model, [1, 2], label, np.random.default_rng(6), w=0)
    free = sample_plan(model, [1, 2], None, np.random.default_rng(6))
    assert np.array_equal(guided.states, free.states)


def test_sampling_is_deterministic_and_inpaints_first_state(model, micro_scenario):
    label = model.target_label(micro_scenario)
    a = sample_plan(model, [1, 3], label, np.random.default_rng(7), record_trace=True)
    b = sample_plan(model, [1, 3], label, np.random.default_rng(7))
    assert np.array_equal(a.states, b.states)
    assert a.states[0].tolist() == [1.0, 3.0]
    assert len(a.trace) == model.schedule.K + 1
    s0 = normalize_states([1, 3], 4)
    assert all(np.array_equal(x[0], s0) for x in a.trace)
    assert a.states.shape == (model.window, 2) and len(a.actions) == model.window - 1


def test_sampling_contract_errors(model):
    with pytest.raises(ContractError):
        model.encode_condition(ConditionLabel(return_bucket=9, user_count=20, env_features=np.zeros(5)))
    with pytest.raises(ContractError):
        sample_plan(model, [0, 0, 0], None, np.random.default_rng(0))


def test_predicted_return_is_replayed_in_twin(model, micro_scenario):
    plan = sample_plan(model, [0, 0], model.target_label(micro_scenario), np.random.default_rng(8),
                       scenario=micro_scenario)
    replay = execute_plan(plan, micro_scenario, [0, 0])
    assert plan.predicted_return == replay.trajectory.ret
    assert replay.achieved_utility == pytest.approx(utility(micro_scenario, replay.trajectory.states[-1]))


def test_trace_rows_cover_every_step(model, micro_scenario):
    plan = sample_plan(model, [2, 2], None, np.random.default_rng(9), record_trace=True)
    rows = trace_rows(plan, model.p_max)
    assert len(rows) == (model.schedule.K + 1) * model.window * 2
    assert rows[0]["step"] == 0 and rows[-1]["step"] == model.schedule.K
    assert float(rows[-1]["value"]) == pytest.approx(plan.states[-1, 1])


# ---------------------------------------------------------------------------
# Décodage et exécution
# ---------------------------------------------------------------------------

def test_empty_plan_keeps_initial_utility(micro_scenario):
    plan = GeneratedPlan(states=np.array([[2.0, 1.0]]), actions=[])
    result = execute_plan(plan, micro_scenario, [2, 1])
    assert result.achieved_utility == utility(micro_scenario, [2, 1])
    assert result.trajectory.ret == 0.0 and result.trajectory.actions == []


def test_linear_inverse_replays_stored_trajectory(micro_store, fixture_scenario, play):
    model = DiffusionModel.build(micro_store.layout, 2, 40, _settings(inverse_hidden=[]),
                                 rng=np.random.default_rng(10))
    W, b = model.inverse.params
    W[:] = 0.0
    b[:] = 0.0
    for i in range(2):
        W[2 + i, 2 * i] = 1.0
        W[2 + i, 2 * i + 1] = -1.0
    actions = np.random.default_rng(11).integers(0, 4, size=20).tolist()
    stored = play(fixture_scenario, actions, initial=[20, 20])
    plan = plan_from_states(model, stored.states, model.layout.env_features(fixture_scenario))
    assert [a.index for a in plan.actions] == actions
    replay = execute_plan(plan, fixture_scenario, stored.states[0])
    assert abs(replay.trajectory.ret - stored.ret) <= 1e-12


def test_decode_rounds_real_states_to_the_grid(micro_store, fixture_scenario):
    model = DiffusionModel.build(micro_store.layout, 2, 40, _settings(inverse_hidden=[]),
                                 rng=np.random.default_rng(10))
    W, b = model.inverse.params
    W[:] = 0.0
    b[:] = 0.0
    for i in range(2):
        W[2 + i, 2 * i] = 1.0
        W[2 + i, 2 * i + 1] = -1.0
    states = np.array([[10.0, 10.0], [10.3, 10.45], [10.6, 9.7]])
    assert snap_to_grid(states, 40).tolist() == [[10, 10], [10, 10], [11, 10]]
    assert snap_to_grid([[-0.7, 40.6]], 40).tolist() == [[0, 40]]
    # sur les états réels, les écarts (0.3, 0.45) puis (0.3, −0.75) donneraient [2, 3]
    env = model.layout.env_features(fixture_scenario)
    assert [a.index for a in decode_actions(model, states, env)] == [0, 0]


def test_decode_ties_pick_smallest_index(model):
    for p in model.inverse.params:
        p[:] = 0.0
    states = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]])
    assert [a.index for a in decode_actions(model, states, np.zeros(5))] == [0, 0]
    assert decode_actions(model, states[:1], np.zeros(5)) == []


def test_fit_inverse_recovers_random_walk_actions(micro_store, play):
    scn = NetworkScenario(num_base_stations=1, num_users=2, channel_gain=[[1.0], [0.5]], p_max=10)
    model = DiffusionModel.build(micro_store.layout, 2, 10, _settings(inverse_hidden=[32]),
                                 rng=np.random.default_rng(12))
    rng = np.random.default_rng(13)
    trajs = [play(scn, rng.integers(0, 4, size=5).tolist(), initial=[5, 5]) for _ in range(20)]
    fit_inverse(model, trajs, steps=1000, rng=np.random.default_rng(14), lr=5e-3)
    env = model.layout.env_features(scn)
    for t in trajs:
        assert [a.index for a in decode_actions(model, t.states, env)] == [a.index for a in t.actions]


def test_execution_modes(model, micro_scenario):
    open_loop = execute_plan(model, micro_scenario, rng=np.random.default_rng(15))
    assert len(open_loop.trajectory.actions) == model.window - 1
    assert len(open_loop.plans) == 1

    replan = execute_plan(model, micro_scenario, mode="replan", replan_every=2, horizon=7,
                          rng=np.random.default_rng(16))
    assert len(replan.trajectory.actions) == 7
    assert len(replan.plans) == 4

    with pytest.raises(UsageError):
        execute_plan(open_loop.plans[0], micro_scenario, mode="replan")
    with pytest.raises(ContractError):
        execute_plan(model, NetworkScenario(num_base_stations=1, num_users=3, channel_gain=[[1.0]] * 3))


# ---------------------------------------------------------------------------
# Entraînement et persistance
# ---------------------------------------------------------------------------

def test_full_dropout_leaves_condition_unused(micro_store, micro_scenario):
    s = _settings(p_drop=1.0)
    model = DiffusionModel.build(micro_store.layout, 2, 4, s, rng=np.random.default_rng(17))
    diffuser.train(model, micro_store, steps=20, rng=np.random.default_rng(18), settings=s)
    x_dim = model.window * 2
    assert np.all(model.denoiser.params[0][x_dim + model.embed_dim:, :] == 0.0)
    x = np.random.default_rng(19).normal(size=(2, model.window, 2))
    cond = model.encode_condition(model.target_label(micro_scenario))
    np.testing.assert_allclose(model.predict_noise(x, 2, cond), model.predict_noise(x, 2, model.encode_condition(None)),
                               atol=1e-6)


def test_heldout_loss_decreases_on_constant_windows(constant_store):
    s = _settings(lr=1e-3, batch_size=16, holdout_fraction=0.25)
    model = DiffusionModel.build(constant_store.layout, 2, 4, s, rng=np.random.default_rng(20))
    report = diffuser.train(model, constant_store, steps=300, rng=np.random.default_rng(21), settings=s)
    assert report.train_size == 3 and report.holdout_size == 1
    assert report.heldout_after < report.heldout_before
    assert math.isfinite(report.last_inverse_loss)


def test_train_rejects_foreign_filter(model, micro_store):
    with pytest.raises(ContractError):
        diffuser.train(model, micro_store, TrajectoryFilter(user_count=20), steps=1)


def test_checkpoint_round_trip(tmp_path, model, micro_scenario):
    path = diffuser.save(model, tmp_path / "diffusion_2.rgnn")
    restored = diffuser.load(path)
    label = model.target_label(micro_scenario)
    a = sample_plan(model, [0, 1], label, np.random.default_rng(22))
    b = sample_plan(restored, [0, 1], label, np.random.default_rng(22))
    assert np.array_equal(a.states, b.states)
    assert [x.index for x in a.actions] == [x.index for x in b.actions]
    diffuser.sidecar_path(path).unlink()
    with pytest.raises(MissingPrerequisiteError):
        diffuser.load(path)


@pytest.mark.slow
def test_constant_windows_are_learned(constant_store):
    s = DiffusionSettings(steps=10, window=4, hidden=64, depth=2, embed_dim=16, batch_size=32, lr=1e-3,
                          inverse_hidden=[16], holdout_fraction=0.25)
    model = DiffusionModel.build(constant_store.layout, 2, 4, s, rng=np.random.default_rng(23))
    report = diffuser.train(model, constant_store, steps=5000, rng=np.random.default_rng(24), settings=s)
    assert report.heldout_after < 0.05
