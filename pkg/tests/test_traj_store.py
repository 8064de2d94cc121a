import json
import math

import numpy as np
import pytest

from conception.conception_models import ConditionLabel, NetworkScenario
from conception.errors import (ConditionUnsatisfiableError, ContractError, EmptyDatasetError,
                               InvariantViolation)
from conception.traj_store import (ENV_FEATURE_WIDTH, LabelLayout, TrajectoryFilter, TrajectoryStore, fit_layout,
                                   check_trajectory, compute_metrics, metrics_rows)
from conception.twin_env import utility

# paires état-action distinctes du micro-jeu, dénombrées à la main
MICRO_SACO = 7


def test_micro_dataset_metrics(micro_trajectories, micro_scenario):
    m = compute_metrics(micro_trajectories)
    assert m.size == 3
    assert m.saco == MICRO_SACO
    finals = [utility(micro_scenario, t.states[-1]) for t in micro_trajectories]
    assert m.tq == pytest.approx(math.fsum(finals) / 3, rel=1e-12)
    assert m.tq == math.fsum(t.ret for t in micro_trajectories) / 3


def test_check_trajectory_names_the_failed_check(micro_trajectories):
    for t in micro_trajectories:
        check_trajectory(t)
    t = micro_trajectories[0]
    t.rewards = t.rewards.copy()
    t.rewards[1] += 1e-3
    t.ret = math.fsum(t.rewards.tolist())
    with pytest.raises(InvariantViolation) as info:
        check_trajectory(t)
    assert info.value.check == "reward_replay"

    t = micro_trajectories[1]
    t.ret += 1.0
    with pytest.raises(InvariantViolation) as info:
        check_trajectory(t)
    assert info.value.check == "return_sum"

    t = micro_trajectories[2]
    t.states = t.states.copy()
    t.states[2] = [3, 3]
    with pytest.raises(InvariantViolation) as info:
        check_trajectory(t, verify_rewards=False)
    assert info.value.check == "transition"


def test_store_persists_records_and_layout(micro_store):
    reopened = TrajectoryStore.open(micro_store.path)
    assert len(reopened) == 3
    assert reopened.layout.to_dict() == micro_store.layout.to_dict()
    for a, b in zip(micro_store, reopened):
        assert a.record_id == b.record_id
        assert np.array_equal(a.states, b.states)
        assert np.array_equal(a.rewards, b.rewards)
        assert a.ret == b.ret
        assert a.actions == b.actions
        assert a.label.to_dict() == b.label.to_dict()


def test_partial_trailing_line_is_ignored(micro_store):
    with open(micro_store.path, "a", encoding="utf-8") as fh:
        fh.write('{"record": "trajectory", "id": 3, "sta')
    assert len(TrajectoryStore.open(micro_store.path)) == 3


def test_create_refuses_to_overwrite(micro_store):
    with pytest.raises(FileExistsError):
        TrajectoryStore.create(micro_store.path, micro_store.layout)


def test_empty_selections(micro_store):
    with pytest.raises(EmptyDatasetError):
        micro_store.compute_metrics(TrajectoryFilter(user_count=20))
    with pytest.raises(ConditionUnsatisfiableError):
        micro_store.sample_batch(TrajectoryFilter(user_count=20), 4, 2, np.random.default_rng(0))
    with pytest.raises(ContractError):
        micro_store.sample_batch(None, 4, 10, np.random.default_rng(0))


def test_sample_batch_windows_are_contiguous(micro_store):
    batch = micro_store.sample_batch(None, 32, 3, np.random.default_rng(1))
    assert batch.states.shape == (32, 3, 2)
    assert batch.actions.shape == (32, 2)
    records = micro_store.records
    for k in range(32):
        t = records[batch.record_ids[k]]
        s = batch.starts[k]
        assert np.array_equal(batch.states[k], t.states[s:s + 3])
        assert batch.actions[k].tolist() == [a.index for a in t.actions[s:s + 2]]
    assert batch.env_features.shape == (32, ENV_FEATURE_WIDTH)


def test_split_holds_out_last_records(micro_store):
    train, hold = micro_store.split(0.34)
    assert train == frozenset({0, 1})
    assert hold == frozenset({2})
    assert micro_store.split(0.0) == (frozenset({0, 1, 2}), frozenset())


def test_return_buckets_follow_frozen_deciles():
    layout = LabelLayout.fit({2: list(range(100))}, user_counts=(2, 20))
    assert layout.return_bucket(-5.0, 2) == 0
    assert layout.return_bucket(99.0, 2) == 9
    assert layout.return_bucket(50.0, 2) == 5
    with pytest.raises(ContractError):
        layout.return_bucket(1.0, 20)
    assert LabelLayout.from_dict(layout.to_dict()) == layout


def test_label_encoding_modes(micro_store):
    layout = micro_store.layout
    label = ConditionLabel(return_bucket=3, user_count=2, env_features=np.arange(ENV_FEATURE_WIDTH) + 1.0)
    both = layout.encode(label, "both")
    assert both.shape == (layout.width,)
    assert both[3] == 1.0 and both[10] == 1.0
    assert np.all(layout.encode(label, "env")[:10] == 0.0)
    assert np.all(layout.encode(label, "returns")[14:19] == 0.0)
    with pytest.raises(ContractError):
        layout.encode(ConditionLabel(return_bucket=10, user_count=2, env_features=np.zeros(5)))
    with pytest.raises(ContractError):
        layout.encode(ConditionLabel(return_bucket=1, user_count=3, env_features=np.zeros(5)))


def test_metrics_rows_per_count_and_total(micro_store):
    rows = metrics_rows(micro_store)
    assert [r["user_count"] for r in rows] == [2, "all"]
    assert rows[0]["saco"] == rows[1]["saco"] == MICRO_SACO
    assert rows[0]["size"] == 3


def test_append_after_partial_line_keeps_store_readable(micro_store, micro_scenario, play):
    with open(micro_store.path, "a", encoding="utf-8") as fh:
        fh.write('{"record": "trajectory", "id": 3, "sta')
    store = TrajectoryStore.open(micro_store.path)
    assert len(store) == 3
    receipt = store.append(play(micro_scenario, [2, 2, 0]))
    assert receipt.record_id == 3
    reopened = TrajectoryStore.open(micro_store.path)
    assert [t.record_id for t in reopened] == [0, 1, 2, 3]
    assert reopened.records[3].actions == store.records[3].actions


def test_garbage_line_is_a_contract_error(micro_store):
    with open(micro_store.path, "a", encoding="utf-8") as fh:
        fh.write("pas du json\n")
    with pytest.raises(ContractError):
        TrajectoryStore.open(micro_store.path)


def test_non_finite_reward_is_rejected_on_open(micro_store):
    lines = micro_store.path.read_text(encoding="utf-8").splitlines()
    record = json.loads(lines[1])
    record["rewards"][0] = float("nan")
    lines[1] = json.dumps(record)  # json écrit NaN tel quel
    micro_store.path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    with pytest.raises(ContractError):
        TrajectoryStore.open(micro_store.path)


def test_filter_on_mixed_user_counts(tmp_path, micro_scenario, play):
    large = NetworkScenario(num_base_stations=1, num_users=20, channel_gain=np.ones((20, 1)), p_max=2)
    trajs = [play(micro_scenario, [0, 2]), play(large, [0, 2, 39]), play(micro_scenario, [1, 3]),
             play(large, [38, 4]), play(micro_scenario, [2])]
    store = TrajectoryStore.create(tmp_path / "mixed.jsonl", fit_layout(trajs))
    store.extend(trajs)
    for count, expected in ((2, [0, 2, 4]), (20, [1, 3])):
        selected = store.select(TrajectoryFilter(user_count=count))
        assert [t.record_id for t in selected] == expected
        assert all(t.user_count == count for t in selected)
        rejected = [t for t in store if t.record_id not in expected]
        assert all(t.user_count != count for t in rejected)
    assert store.compute_metrics(TrajectoryFilter(user_count=20)).size == 2


def test_sample_batch_draws_windows_uniformly(tmp_path, micro_scenario, play):
    trajs = [play(micro_scenario, [k % 4, (k // 4) % 4, 0]) for k in range(10)]
    store = TrajectoryStore.create(tmp_path / "uniform.jsonl", fit_layout(trajs))
    store.extend(trajs)
    n = 100_000
    # une seule fenêtre de 4 états par trajectoire : chaque enregistrement a p = 1/10
    batch = store.sample_batch(None, n, 4, np.random.default_rng(21))
    assert np.all(batch.starts == 0)
    counts = np.bincount(batch.record_ids, minlength=10)
    sigma = math.sqrt(n * 0.1 * 0.9)
    assert np.all(np.abs(counts - n / 10) <= 4.0 * sigma)


def test_thousand_appends_survive_reopen(tmp_path, micro_scenario, play):
    trajs = [play(micro_scenario, [k % 4, (k // 4) % 4, (k // 16) % 4]) for k in range(1000)]
    store = TrajectoryStore.create(tmp_path / "big.jsonl", fit_layout(trajs))
    receipts = store.extend(trajs)
    assert [r.record_id for r in receipts] == list(range(1000))
    reopened = TrajectoryStore.open(store.path)
    assert len(reopened) == 1000
    for a, b in zip(store, reopened):
        assert a.record_id == b.record_id
        assert np.array_equal(a.states, b.states)
        assert np.array_equal(a.rewards, b.rewards)
        assert a.actions == b.actions and a.ret == b.ret
