"""Modèles et constantes du jumeau numérique d'allocation de puissance.
Séparé des modules de calcul pour être partagé par l'environnement, le stockage
des trajectoires, les agents et le planificateur par diffusion.
"""
from __future__ import annotations
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .errors import ContractError

# Valeurs par défaut du scénario (constantes de calibration, non publiées dans la littérature)
DEFAULT_P_MAX = 40
DEFAULT_REVENUE_WEIGHT = 10.0
DEFAULT_COST_COEFF = 0.05
DEFAULT_BANDWIDTH = 1.0
DEFAULT_NOISE_POWER = 1.0
DEFAULT_GAIN_RANGE = (0.1, 10.0)
# Comptes d'utilisateurs reconnus par le label de conditionnement
DEFAULT_USER_COUNTS = (2, 20, 50, 80)
RETURN_BINS = 10

SCENARIO_KEYS = (
    "num_base_stations", "num_users", "channel_gain", "noise_power", "p_max",
    "bandwidth", "revenue_weight", "cost_coeff", "association", "rng_seed",
    "power_budget", "min_rate",
)


@dataclass
class NetworkScenario:
    """Paramétrage du jumeau numérique.
    channel_gain[i][j] : gain linéaire de l'utilisateur i vers la station j.
    """
    num_base_stations: int
    num_users: int
    channel_gain: np.ndarray
    noise_power: float = DEFAULT_NOISE_POWER
    p_max: int = DEFAULT_P_MAX
    bandwidth: float = DEFAULT_BANDWIDTH
    revenue_weight: float = DEFAULT_REVENUE_WEIGHT
    cost_coeff: float = DEFAULT_COST_COEFF
    association: np.ndarray = None
    rng_seed: Optional[int] = None
    power_budget: Optional[float] = None
    min_rate: Optional[float] = None

    def __post_init__(self):
        self.channel_gain = np.asarray(self.channel_gain, dtype=np.float64)
        if self.association is None:
            self.association = np.zeros(self.num_users, dtype=np.int64)
        self.association = np.asarray(self.association, dtype=np.int64)
        if self.num_users < 1 or self.num_base_stations < 1:
            raise ContractError("I ≥ 1 et J ≥ 1 requis")
        if self.p_max < 1:
            raise ContractError("P_max ≥ 1 requis")
        if self.channel_gain.shape != (self.num_users, self.num_base_stations):
            raise ContractError(f"channel_gain doit être de forme ({self.num_users}, {self.num_base_stations}), "
                                f"reçu {self.channel_gain.shape}")
        if not np.all(np.isfinite(self.channel_gain)) or np.any(self.channel_gain <= 0):
            raise ContractError("gains de canal strictement positifs et finis requis")
        if not (self.noise_power > 0) or not np.isfinite(self.noise_power):
            raise ContractError("puissance de bruit σ² > 0 requise")
        if not (self.bandwidth > 0):
            raise ContractError("bande passante B > 0 requise")
        if not (self.revenue_weight > 0) or self.cost_coeff < 0:
            raise ContractError("a > 0 et c ≥ 0 requis")
        if self.association.shape != (self.num_users,):
            raise ContractError("association: une station par utilisateur")
        if np.any(self.association < 0) or np.any(self.association >= self.num_base_stations):
            raise ContractError("association j(i) hors de [0, J)")

    @property
    def num_actions(self) -> int:
        return 2 * self.num_users

    @property
    def serving_gain(self) -> np.ndarray:
        return self.channel_gain[np.arange(self.num_users), self.association]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "num_base_stations": int(self.num_base_stations),
            "num_users": int(self.num_users),
            "channel_gain": self.channel_gain.tolist(),
            "noise_power": float(self.noise_power),
            "p_max": int(self.p_max),
            "bandwidth": float(self.bandwidth),
            "revenue_weight": float(self.revenue_weight),
            "cost_coeff": float(self.cost_coeff),
            "association": self.association.tolist(),
            "rng_seed": self.rng_seed,
            "power_budget": self.power_budget,
            "min_rate": self.min_rate,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "NetworkScenario":
        unknown = set(data) - set(SCENARIO_KEYS)
        missing = {"num_base_stations", "num_users", "channel_gain"} - set(data)
        if unknown or missing:
            raise ContractError(f"clés de scénario invalides: inconnues={sorted(unknown)}, manquantes={sorted(missing)}")
        return cls(**data)


@dataclass(frozen=True)
class AdjustAction:
    """Ajustement ±1 de la puissance d'un utilisateur. Index a = 2·user + (0 si +1, 1 si −1)."""
    user: int
    delta: int

    def __post_init__(self):
        if self.delta not in (1, -1):
            raise ContractError(f"delta doit valoir ±1, reçu {self.delta}")
        if self.user < 0:
            raise ContractError(f"index utilisateur négatif: {self.user}")

    @property
    def index(self) -> int:
        return 2 * self.user + (0 if self.delta == 1 else 1)

    @classmethod
    def from_index(cls, index: int) -> "AdjustAction":
        index = int(index)
        return cls(user=index // 2, delta=1 if index % 2 == 0 else -1)


@dataclass
class EnvStep:
    state: np.ndarray
    action: AdjustAction
    reward: float
    next_state: np.ndarray
    done: bool


@dataclass
class ConditionLabel:
    """Label y d'une trajectoire. Les blocs one-hot sont stockés par leur index
    actif ; `LabelLayout.encode` produit le vecteur plat.
    """
    return_bucket: int
    user_count: int
    env_features: np.ndarray
    constraint_flags: Tuple[int, ...] = ()

    def __post_init__(self):
        self.env_features = np.asarray(self.env_features, dtype=np.float64)
        if not np.all(np.isfinite(self.env_features)):
            raise ContractError("env_features non finies")
        self.constraint_flags = tuple(int(f) for f in self.constraint_flags)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "return_bucket": int(self.return_bucket),
            "user_count": int(self.user_count),
            "env_features": self.env_features.tolist(),
            "constraint_flags": list(self.constraint_flags),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ConditionLabel":
        return cls(return_bucket=data["return_bucket"], user_count=data["user_count"],
                   env_features=data["env_features"], constraint_flags=tuple(data.get("constraint_flags", ())))


@dataclass
class Trajectory:
    scenario: NetworkScenario
    states: np.ndarray            # (H+1, I) entiers
    actions: List[AdjustAction]   # H
    rewards: np.ndarray           # H
    ret: float
    label: Optional[ConditionLabel] = None
    record_id: Optional[int] = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)

    @property
    def horizon(self) -> int:
        return len(self.actions)

    @property
    def user_count(self) -> int:
        return self.scenario.num_users


@dataclass
class DatasetMetrics:
    tq: float
    saco: int
    size: int


@dataclass
class GeneratedPlan:
    """Plan généré : états réels (unités de puissance, avant arrondi) et actions décodées."""
    states: np.ndarray
    actions: List[AdjustAction]
    predicted_return: Optional[float] = None
    trace: List[np.ndarray] = field(default_factory=list)

    @property
    def final_allocation(self) -> np.ndarray:
        return self.states[-1]
