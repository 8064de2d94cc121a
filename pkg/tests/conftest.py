import json
import math

import numpy as np
import pytest

from conception.conception_models import AdjustAction, NetworkScenario, Trajectory
from conception.config import ExperimentConfig
from conception.traj_store import TrajectoryStore, fit_layout, label_trajectories
from conception.twin_env import step

# Séquences d'actions du micro-jeu (index a = 2·user + (0 si +1, 1 si −1))
MICRO_ACTIONS = ([0, 0, 2], [0, 2, 2], [1, 0, 3])


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="exécute aussi les critères d'acceptation longs")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: apprentissage complet, lancé avec --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="test long : utilisez --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def play(scn, actions, initial=None):
    """Trajectoire obtenue en appliquant une suite d'index d'actions."""
    state = np.zeros(scn.num_users, dtype=np.int64) if initial is None else np.asarray(initial, dtype=np.int64)
    states, acts, rewards = [state], [], []
    for index in actions:
        result = step(scn, state, AdjustAction.from_index(index))
        state = result.next_state
        states.append(state)
        acts.append(result.action)
        rewards.append(result.reward)
    return Trajectory(scenario=scn, states=np.stack(states), actions=acts, rewards=np.asarray(rewards),
                      ret=math.fsum(rewards))


@pytest.fixture(name="play")
def play_fixture():
    return play


@pytest.fixture
def fixture_scenario():
    return NetworkScenario(num_base_stations=1, num_users=2, channel_gain=[[2.0], [1.5]], p_max=40)


@pytest.fixture
def micro_scenario():
    return NetworkScenario(num_base_stations=1, num_users=2, channel_gain=[[1.0], [0.5]], p_max=4)


@pytest.fixture
def micro_trajectories(micro_scenario):
    trajs = [play(micro_scenario, acts) for acts in MICRO_ACTIONS]
    label_trajectories(trajs, fit_layout(trajs))
    return trajs


@pytest.fixture
def micro_store(tmp_path, micro_trajectories):
    store = TrajectoryStore.create(tmp_path / "micro.jsonl", fit_layout(micro_trajectories))
    store.extend(micro_trajectories)
    return store


def tiny_config_dict(run_dir):
    return {
        "schema_version": 1,
        "root_seed": 7,
        "run_dir": str(run_dir),
        "user_counts": [2],
        "progress": False,
        "scenario": {"p_max": 6},
        "sac": {"hidden": [16], "batch_size": 16, "replay_capacity": 1000, "warmup_steps": 20,
                "update_every": 2, "episodes": 12},
        "bcq": {"hidden": [16], "batch_size": 16, "steps": 10},
        "diffusion": {"steps": 4, "window": 4, "hidden": 16, "depth": 2, "embed_dim": 8, "batch_size": 8,
                      "train_steps": 5, "inverse_hidden": [16], "inverse_refine_steps": 20,
                      "replan_every": 2},
        "evaluation": {"seeds": 2, "ascent_restarts": 2},
    }


@pytest.fixture
def tiny_config(tmp_path):
    return ExperimentConfig.model_validate(tiny_config_dict(tmp_path / "run"))


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(tiny_config_dict(tmp_path / "run")), encoding="utf-8")
    return path


@pytest.fixture(name="tiny_config_dict")
def tiny_config_dict_fixture():
    return tiny_config_dict
