"""Jumeau numérique : allocation de puissance montante avec interférences.

Deux usages :
- évaluateur statique (sinr, rate, utility, utility_batch) ;
- MDP épisodique (step, TwinEnv) à actions ±1 sur un utilisateur.

SINR_i = p_i·h[i][j(i)] / (σ² + Σ_{k≠i} p_k·h[k][j(i)])
R_i    = B·log2(1 + SINR_i)
U(p)   = Σ_i a·ln(1 + R_i) − c·p_i
"""
from __future__ import annotations
import json
import logging
from pathlib import Path
from typing import Optional

import numpy as np

from .conception_models import AdjustAction, EnvStep, NetworkScenario
from .config import ScenarioRanges
from .errors import ConfigError, ContractError, UsageError

log = logging.getLogger(__name__)


def validate_allocation(scn: NetworkScenario, p) -> np.ndarray:
    arr = np.asarray(p)
    if arr.shape != (scn.num_users,):
        raise ContractError(f"allocation de longueur {arr.shape} ≠ I={scn.num_users}")
    if not np.all(np.equal(np.mod(arr, 1), 0)):
        raise ContractError("allocation non entière")
    arr = arr.astype(np.int64)
    if np.any(arr < 0) or np.any(arr > scn.p_max):
        raise ContractError(f"allocation hors grille [0, {scn.p_max}]: {arr.tolist()}")
    return arr


def _cross_gain(scn: NetworkScenario) -> np.ndarray:
    """G[k, i] = h[k][j(i)] pour k ≠ i, 0 sur la diagonale."""
    g = scn.channel_gain[:, scn.association].copy()
    np.fill_diagonal(g, 0.0)
    return g


def sinr_batch(scn: NetworkScenario, P: np.ndarray) -> np.ndarray:
    """SINR de tous les utilisateurs pour un lot d'allocations (N, I)."""
    P = np.asarray(P, dtype=np.float64)
    signal = P * scn.serving_gain
    interference = P @ _cross_gain(scn)
    return signal / (scn.noise_power + interference)


def rate_batch(scn: NetworkScenario, P: np.ndarray) -> np.ndarray:
    return scn.bandwidth * np.log2(1.0 + sinr_batch(scn, P))


def utility_batch(scn: NetworkScenario, P: np.ndarray) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    rates = rate_batch(scn, P)
    return np.sum(scn.revenue_weight * np.log1p(rates) - scn.cost_coeff * P, axis=-1)


def sinr(scn: NetworkScenario, p, i: int) -> float:
    p = validate_allocation(scn, p)
    return float(sinr_batch(scn, p[None, :])[0, i])


def rate(scn: NetworkScenario, p, i: int) -> float:
    p = validate_allocation(scn, p)
    return float(rate_batch(scn, p[None, :])[0, i])


def utility(scn: NetworkScenario, p) -> float:
    p = validate_allocation(scn, p)
    return float(utility_batch(scn, p[None, :])[0])


def constraint_flags(scn: NetworkScenario, p) -> tuple:
    """Indicateurs multi-hot des contraintes configurées (vide si aucune)."""
    p = validate_allocation(scn, p)
    flags = []
    if scn.power_budget is not None:
        flags.append(int(p.sum() <= scn.power_budget))
    if scn.min_rate is not None:
        flags.append(int(np.all(rate_batch(scn, p[None, :])[0] >= scn.min_rate)))
    return tuple(flags)


def constraint_names(scn: NetworkScenario) -> list:
    names = []
    if scn.power_budget is not None:
        names.append("power_budget")
    if scn.min_rate is not None:
        names.append("min_rate")
    return names


def apply_action(scn: NetworkScenario, state: np.ndarray, action: AdjustAction) -> np.ndarray:
    if not 0 <= action.user < scn.num_users:
        raise ContractError(f"utilisateur {action.user} hors de [0, {scn.num_users})")
    nxt = np.array(state, dtype=np.int64, copy=True)
    nxt[action.user] = min(max(nxt[action.user] + action.delta, 0), scn.p_max)
    return nxt


def step(scn: NetworkScenario, state, action: AdjustAction, done: bool = False) -> EnvStep:
    """Transition bornée ; récompense = U(s') − U(s), nulle sur un no-op borné."""
    state = validate_allocation(scn, state)
    nxt = apply_action(scn, state, action)
    if np.array_equal(nxt, state):
        reward = 0.0
    else:
        # une évaluation par état : U(s) identique d'un pas à l'autre, la somme télescope exactement
        reward = float(utility_batch(scn, nxt[None, :])[0] - utility_batch(scn, state[None, :])[0])
    return EnvStep(state=state, action=action, reward=reward, next_state=nxt, done=done)


def default_horizon(num_users: int, p_max: int) -> int:
    if num_users == 2:
        return 2 * p_max
    return min(128, 8 * num_users)


def sample_scenario(ranges: ScenarioRanges, num_users: int, seed: int) -> NetworkScenario:
    """Gains tirés log-uniformément dans [gain_low, gain_high] ; déterministe pour une graine."""
    lo, hi = ranges.gain_low, ranges.gain_high
    if not (0 < lo <= hi) or not np.isfinite(hi):
        raise ConfigError(f"plage de gains vide ou invalide: [{lo}, {hi}]")
    if num_users < 1:
        raise ConfigError("num_users ≥ 1 requis")
    rng = np.random.default_rng(seed)
    shape = (num_users, ranges.num_base_stations)
    if lo == hi:
        gains = np.full(shape, float(lo))
    else:
        gains = np.exp(rng.uniform(np.log(lo), np.log(hi), size=shape))
    association = rng.integers(0, ranges.num_base_stations, size=num_users)
    return NetworkScenario(
        num_base_stations=ranges.num_base_stations, num_users=num_users, channel_gain=gains,
        noise_power=ranges.noise_power, p_max=ranges.p_max, bandwidth=ranges.bandwidth,
        revenue_weight=ranges.revenue_weight, cost_coeff=ranges.cost_coeff, association=association,
        rng_seed=int(seed), power_budget=ranges.power_budget, min_rate=ranges.min_rate,
    )


def dump_scenario(scn: NetworkScenario, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(scn.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_scenario(path: str | Path) -> NetworkScenario:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ContractError(f"fichier scénario illisible ({path}): {e}") from e
    return NetworkScenario.from_dict(data)


class TwinEnv:
    """Épisode à budget de pas H ; une instance par worker, jamais partagée."""

    def __init__(self, scn: NetworkScenario, horizon: Optional[int] = None):
        self.scn = scn
        self.horizon = horizon if horizon is not None else default_horizon(scn.num_users, scn.p_max)
        self.state: Optional[np.ndarray] = None
        self.t = 0

    def reset(self, initial=None) -> np.ndarray:
        if initial is None:
            initial = np.zeros(self.scn.num_users, dtype=np.int64)
        self.state = validate_allocation(self.scn, initial)
        self.t = 0
        return self.state.copy()

    @property
    def done(self) -> bool:
        return self.state is not None and self.t >= self.horizon

    def step(self, action: AdjustAction) -> EnvStep:
        if self.state is None:
            raise UsageError("step appelé avant reset")
        if self.done:
            raise UsageError("épisode terminé : budget de pas épuisé")
        self.t += 1
        result = step(self.scn, self.state, action, done=self.t >= self.horizon)
        self.state = result.next_state
        return result
