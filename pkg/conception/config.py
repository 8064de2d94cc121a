"""Configuration d'expérience (un fichier JSON par expérience, schéma versionné).
Validée par pydantic ; toute erreur est remontée en ConfigError.
"""
from __future__ import annotations
import json
from pathlib import Path
from typing import List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .conception_models import (DEFAULT_BANDWIDTH, DEFAULT_COST_COEFF, DEFAULT_GAIN_RANGE, DEFAULT_NOISE_POWER,
                                 DEFAULT_P_MAX, DEFAULT_REVENUE_WEIGHT, DEFAULT_USER_COUNTS)
from .errors import ConfigError

SCHEMA_VERSION = 1
# Sous-flux aléatoires nommés, tous dérivés de la graine racine
STREAMS = {"env": 1, "sac": 2, "diffusion": 3, "bcq": 4, "eval": 5}


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ScenarioRanges(_Section):
    num_base_stations: int = Field(1, ge=1)
    p_max: int = Field(DEFAULT_P_MAX, ge=1)
    gain_low: float = DEFAULT_GAIN_RANGE[0]
    gain_high: float = DEFAULT_GAIN_RANGE[1]
    noise_power: float = DEFAULT_NOISE_POWER
    bandwidth: float = DEFAULT_BANDWIDTH
    revenue_weight: float = DEFAULT_REVENUE_WEIGHT
    cost_coeff: float = DEFAULT_COST_COEFF
    power_budget: Optional[float] = None
    min_rate: Optional[float] = None


class SacSettings(_Section):
    hidden: List[int] = [128, 128]
    lr: float = 3e-4
    alpha_lr: float = 3e-4
    init_alpha: float = 1.0
    gamma: float = 0.99
    rho: float = 0.005
    batch_size: int = 256
    replay_capacity: int = 200_000
    target_entropy_ratio: float = 0.6
    warmup_steps: int = 1_000
    update_every: int = 4
    episodes: int = 20_000
    workers: int = Field(1, ge=1)                 # jumeaux menés de front pendant la collecte
    max_grad_norm: Optional[float] = 10.0


class BcqSettings(_Section):
    hidden: List[int] = [128, 128]
    lr: float = 3e-4
    gamma: float = 0.99
    rho: float = 0.005
    tau: float = Field(0.3, gt=0.0, le=1.0)
    batch_size: int = 256
    steps: int = 20_000
    max_grad_norm: Optional[float] = 10.0


class DiffusionSettings(_Section):
    steps: int = Field(50, ge=1)                  # K
    window: int = Field(32, ge=2)                 # H'
    hidden: int = 256
    depth: int = 3
    embed_dim: int = 32
    p_drop: float = Field(0.25, ge=0.0, le=1.0)
    guidance: float = 1.2
    lr: float = 3e-4
    batch_size: int = 64
    train_steps: int = 20_000
    inverse_hidden: List[int] = [128, 128]
    inverse_refine_steps: int = Field(2_000, ge=0)  # f_φ seul, sur toutes les transitions
    condition: Literal["returns", "env", "both"] = "both"
    replan_every: int = 16
    holdout_fraction: float = 0.1
    max_grad_norm: Optional[float] = 1.0


class EvaluationSettings(_Section):
    seeds: int = 20
    exhaustive_limit: int = 10_000_000
    ascent_restarts: int = 16
    target_bucket: Optional[int] = None           # None : décile le plus élevé


class ExperimentConfig(_Section):
    schema_version: int = SCHEMA_VERSION
    root_seed: int = 7
    run_dir: str = "runs/default"
    user_counts: List[int] = [2, 20]
    include_large: bool = False
    known_user_counts: List[int] = list(DEFAULT_USER_COUNTS)
    progress: bool = True
    scenario: ScenarioRanges = Field(default_factory=ScenarioRanges)
    sac: SacSettings = Field(default_factory=SacSettings)
    bcq: BcqSettings = Field(default_factory=BcqSettings)
    diffusion: DiffusionSettings = Field(default_factory=DiffusionSettings)
    evaluation: EvaluationSettings = Field(default_factory=EvaluationSettings)

    @model_validator(mode="after")
    def _check(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"schema_version {self.schema_version} non supportée (attendu {SCHEMA_VERSION})")
        for count in self.active_user_counts:
            if count not in self.known_user_counts:
                raise ValueError(f"user_count {count} absent de known_user_counts")
        return self

    @property
    def active_user_counts(self) -> List[int]:
        counts = list(self.user_counts)
        if self.include_large:
            counts += [c for c in (50, 80) if c not in counts]
        return counts

    def snapshot(self) -> dict:
        return json.loads(self.model_dump_json())


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"fichier de configuration introuvable: {path}")
    try:
        return ExperimentConfig.model_validate(json.loads(path.read_text(encoding="utf-8")))
    except json.JSONDecodeError as e:
        raise ConfigError(f"configuration illisible ({path}): {e}") from e
    except ValidationError as e:
        fields = ", ".join(".".join(str(p) for p in err["loc"]) or "<racine>" for err in e.errors())
        raise ConfigError(f"configuration invalide ({fields}): {e.errors()[0]['msg']}") from e


def substream(root_seed: int, name: str, *keys: int) -> np.random.Generator:
    """Générateur du sous-flux `name` (env, sac, diffusion, bcq, eval)."""
    if name not in STREAMS:
        raise ConfigError(f"sous-flux inconnu: {name}")
    return np.random.default_rng(np.random.SeedSequence([int(root_seed), STREAMS[name], *map(int, keys)]))


def substream_seed(root_seed: int, name: str, *keys: int) -> int:
    """Graine entière dérivée (pour les objets qui stockent leur graine)."""
    return int(substream(root_seed, name, *keys).integers(0, 2**31 - 1))
