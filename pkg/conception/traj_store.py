"""Jeu de trajectoires étiquetées.

Format disque : un enregistrement JSON par ligne.
- ligne 0 : en-tête auto-descriptif (version de schéma, disposition des labels,
  bornes des déciles de retour figées) ;
- lignes suivantes : une trajectoire par ligne, identifiant croissant.

Métriques de qualité : TQ (retour moyen) et SACo (nombre de paires
état-action distinctes, état sérialisé par son vecteur entier de puissances).
"""
from __future__ import annotations
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .conception_models import (DEFAULT_GAIN_RANGE, DEFAULT_USER_COUNTS, RETURN_BINS, AdjustAction, ConditionLabel,
                                 DatasetMetrics, NetworkScenario, Trajectory)
from .errors import ConditionUnsatisfiableError, ContractError, EmptyDatasetError, InvariantViolation
from .twin_env import apply_action, constraint_flags, constraint_names, utility_batch

log = logging.getLogger(__name__)

STORE_SCHEMA_VERSION = 1
ENV_FEATURE_WIDTH = 5
RETURN_TOLERANCE = 1e-12


@dataclass
class LabelLayout:
    """Disposition du vecteur de conditionnement y, figée dans l'en-tête du jeu."""
    return_edges: Dict[int, List[float]]   # déciles par nombre d'utilisateurs
    user_counts: List[int] = field(default_factory=lambda: list(DEFAULT_USER_COUNTS))
    log_gain_range: Tuple[float, float] = (math.log(DEFAULT_GAIN_RANGE[0]), math.log(DEFAULT_GAIN_RANGE[1]))
    constraint_names: List[str] = field(default_factory=list)

    @classmethod
    def fit(cls, returns_by_count: Dict[int, Sequence[float]], user_counts: Sequence[int] = DEFAULT_USER_COUNTS,
            gain_range: Tuple[float, float] = DEFAULT_GAIN_RANGE,
            constraint_names: Sequence[str] = ()) -> "LabelLayout":
        """Déciles calculés sur une partition de référence, séparément par nombre d'utilisateurs."""
        qs = np.arange(1, RETURN_BINS) / RETURN_BINS
        edges = {}
        for count, returns in returns_by_count.items():
            if len(returns) == 0:
                raise EmptyDatasetError(f"impossible de figer les déciles: aucun retour pour {count} utilisateurs")
            edges[int(count)] = [float(e) for e in np.quantile(np.asarray(returns, dtype=np.float64), qs)]
        return cls(return_edges=edges, user_counts=[int(c) for c in user_counts],
                   log_gain_range=(math.log(gain_range[0]), math.log(gain_range[1])),
                   constraint_names=list(constraint_names))

    @property
    def n_return_bins(self) -> int:
        return RETURN_BINS

    @property
    def width(self) -> int:
        return self.n_return_bins + len(self.user_counts) + ENV_FEATURE_WIDTH + len(self.constraint_names)

    def return_bucket(self, ret: float, user_count: int) -> int:
        if user_count not in self.return_edges:
            raise ContractError(f"aucun décile figé pour {user_count} utilisateurs")
        return int(np.searchsorted(np.asarray(self.return_edges[user_count]), ret, side="right"))

    def env_features(self, scn: NetworkScenario) -> np.ndarray:
        """Statistiques des log-gains normalisées dans [−1, 1] et log-bruit."""
        lo, hi = self.log_gain_range
        mid = 0.5 * (lo + hi)
        half = max(0.5 * (hi - lo), 1e-12)
        lg = np.log(scn.channel_gain).ravel()
        return np.array([(lg.mean() - mid) / half, lg.std() / half, (lg.min() - mid) / half,
                         (lg.max() - mid) / half, math.log(scn.noise_power)])

    def label_for(self, scn: NetworkScenario, ret: float, final_state: np.ndarray) -> ConditionLabel:
        if scn.num_users not in self.user_counts:
            raise ContractError(f"nombre d'utilisateurs {scn.num_users} absent de la disposition {self.user_counts}")
        if constraint_names(scn) != list(self.constraint_names):
            raise ContractError(f"contraintes {constraint_names(scn)} ≠ disposition {self.constraint_names}")
        return ConditionLabel(return_bucket=self.return_bucket(ret, scn.num_users), user_count=scn.num_users,
                              env_features=self.env_features(scn),
                              constraint_flags=constraint_flags(scn, final_state))

    def encode(self, label: ConditionLabel, mode: str = "both") -> np.ndarray:
        """Vecteur plat [retour one-hot | utilisateurs one-hot | env | contraintes] ;
        les blocs désactivés par `mode` sont mis à zéro."""
        if not 0 <= label.return_bucket < self.n_return_bins:
            raise ContractError(f"return_bucket {label.return_bucket} hors de [0, {self.n_return_bins})")
        if label.user_count not in self.user_counts:
            raise ContractError(f"user_count {label.user_count} absent de {self.user_counts}")
        if len(label.env_features) != ENV_FEATURE_WIDTH or len(label.constraint_flags) != len(self.constraint_names):
            raise ContractError("label incompatible avec la disposition")
        ret = np.zeros(self.n_return_bins)
        users = np.zeros(len(self.user_counts))
        users[self.user_counts.index(label.user_count)] = 1.0
        env = np.zeros(ENV_FEATURE_WIDTH)
        flags = np.zeros(len(self.constraint_names))
        if mode in ("returns", "both"):
            ret[label.return_bucket] = 1.0
            flags[:] = label.constraint_flags
        if mode in ("env", "both"):
            env[:] = label.env_features
        return np.concatenate([ret, users, env, flags])

    def to_dict(self) -> Dict:
        return {"return_edges": {str(k): list(v) for k, v in sorted(self.return_edges.items())}, "user_counts": list(self.user_counts),
                "log_gain_range": list(self.log_gain_range), "constraint_names": list(self.constraint_names)}

    @classmethod
    def from_dict(cls, data: Dict) -> "LabelLayout":
        return cls(return_edges={int(k): [float(e) for e in v] for k, v in data["return_edges"].items()},
                   user_counts=[int(c) for c in data["user_counts"]],
                   log_gain_range=tuple(data["log_gain_range"]),
                   constraint_names=list(data.get("constraint_names", [])))


@dataclass(frozen=True)
class TrajectoryFilter:
    user_count: Optional[int] = None
    return_buckets: Optional[Tuple[int, ...]] = None
    min_return: Optional[float] = None
    record_ids: Optional[frozenset] = None

    def matches(self, traj: Trajectory) -> bool:
        if self.user_count is not None and traj.user_count != self.user_count:
            return False
        if self.return_buckets is not None and (traj.label is None or traj.label.return_bucket not in self.return_buckets):
            return False
        if self.min_return is not None and traj.ret < self.min_return:
            return False
        if self.record_ids is not None and traj.record_id not in self.record_ids:
            return False
        return True

    def describe(self) -> str:
        parts = []
        if self.user_count is not None:
            parts.append(f"user_count={self.user_count}")
        if self.return_buckets is not None:
            parts.append(f"return_buckets={list(self.return_buckets)}")
        if self.min_return is not None:
            parts.append(f"min_return={self.min_return}")
        if self.record_ids is not None:
            parts.append(f"record_ids=<{len(self.record_ids)} ids>")
        return ", ".join(parts) or "<aucun critère>"


@dataclass
class AppendReceipt:
    record_id: int
    path: Path


@dataclass
class TrainingBatch:
    states: np.ndarray          # (B, H', I) entiers
    actions: np.ndarray         # (B, H'−1) index d'action
    labels: List[ConditionLabel]
    env_features: np.ndarray    # (B, ENV_FEATURE_WIDTH)
    p_max: np.ndarray           # (B,)
    record_ids: np.ndarray
    starts: np.ndarray


def check_trajectory(traj: Trajectory, verify_rewards: bool = True) -> None:
    """Lève InvariantViolation en nommant la vérification échouée."""
    scn = traj.scenario
    h = len(traj.actions)
    if traj.states.shape != (h + 1, scn.num_users):
        raise InvariantViolation("states_shape", f"{traj.states.shape} ≠ {(h + 1, scn.num_users)}")
    if traj.rewards.shape != (h,):
        raise InvariantViolation("rewards_length", f"{traj.rewards.shape[0]} ≠ {h}")
    if np.any(traj.states < 0) or np.any(traj.states > scn.p_max):
        raise InvariantViolation("states_in_grid")
    if not np.all(np.isfinite(traj.rewards)) or not math.isfinite(traj.ret):
        raise InvariantViolation("finite_rewards")
    total = math.fsum(traj.rewards.tolist())
    if abs(traj.ret - total) > RETURN_TOLERANCE * max(1.0, abs(total)):
        raise InvariantViolation("return_sum", f"G={traj.ret} ≠ Σr={total}")
    for t, action in enumerate(traj.actions):
        if not 0 <= action.user < scn.num_users:
            raise InvariantViolation("action_valid", f"pas {t}: utilisateur {action.user}")
        if not np.array_equal(apply_action(scn, traj.states[t], action), traj.states[t + 1]):
            raise InvariantViolation("transition", f"pas {t}")
    if verify_rewards:
        u = [float(utility_batch(scn, s[None, :])[0]) for s in traj.states]
        for t in range(h):
            expected = 0.0 if np.array_equal(traj.states[t], traj.states[t + 1]) else u[t + 1] - u[t]
            if abs(traj.rewards[t] - expected) > RETURN_TOLERANCE * max(1.0, abs(u[t + 1])):
                raise InvariantViolation("reward_replay", f"pas {t}: {traj.rewards[t]} ≠ {expected}")


def _encode_record(traj: Trajectory, record_id: int) -> str:
    return json.dumps({
        "record": "trajectory",
        "id": record_id,
        "scenario": traj.scenario.to_dict(),
        "states": traj.states.tolist(),
        "actions": [[a.user, a.delta] for a in traj.actions],
        "rewards": traj.rewards.tolist(),
        "return": traj.ret,
        "label": traj.label.to_dict() if traj.label is not None else None,
    }, separators=(",", ":"))


def _parse_line(path: Path, lineno: int, line: str) -> Dict:
    try:
        return json.loads(line)
    except json.JSONDecodeError as e:
        raise ContractError(f"{path}:{lineno}: JSON illisible ({e})") from e


def _decode_record(data: Dict) -> Trajectory:
    return Trajectory(
        scenario=NetworkScenario.from_dict(data["scenario"]),
        states=np.asarray(data["states"], dtype=np.int64),
        actions=[AdjustAction(int(u), int(d)) for u, d in data["actions"]],
        rewards=np.asarray(data["rewards"], dtype=np.float64),
        ret=float(data["return"]),
        label=ConditionLabel.from_dict(data["label"]) if data.get("label") is not None else None,
        record_id=int(data["id"]),
    )


class TrajectoryStore:
    """Un seul écrivain (ajout atomique par ligne), lecteurs multiples."""

    def __init__(self, path: Path, layout: LabelLayout, records: List[Trajectory]):
        self.path = Path(path)
        self.layout = layout
        self._records = records

    @classmethod
    def create(cls, path: str | Path, layout: LabelLayout, overwrite: bool = False) -> "TrajectoryStore":
        path = Path(path)
        if path.exists() and not overwrite:
            raise FileExistsError(f"jeu de trajectoires {path} existe déjà")
        path.parent.mkdir(parents=True, exist_ok=True)
        header = {"record": "header", "schema_version": STORE_SCHEMA_VERSION, "layout": layout.to_dict()}
        path.write_text(json.dumps(header, separators=(",", ":")) + "\n", encoding="utf-8")
        return cls(path, layout, [])

    @classmethod
    def open(cls, path: str | Path) -> "TrajectoryStore":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"jeu de trajectoires introuvable: {path}")
        raw = path.read_bytes()
        end = raw.rfind(b"\n") + 1
        if end < len(raw):
            # ajout interrompu : la ligne sans saut final est retirée du fichier
            log.warning("[STORE] %s : ligne incomplète de %d octets supprimée", path, len(raw) - end)
            with open(path, "r+b") as fh:
                fh.truncate(end)
        complete = raw[:end].decode("utf-8").split("\n")[:-1]
        if not complete:
            raise ContractError(f"{path}: en-tête absent")
        header = _parse_line(path, 1, complete[0])
        if header.get("record") != "header" or header.get("schema_version") != STORE_SCHEMA_VERSION:
            raise ContractError(f"{path}: en-tête invalide ou version non supportée")
        records = []
        for lineno, line in enumerate(complete[1:], start=2):
            if not line.strip():
                continue
            try:
                traj = _decode_record(_parse_line(path, lineno, line))
                check_trajectory(traj, verify_rewards=False)
            except (KeyError, TypeError, ValueError) as e:
                raise ContractError(f"{path}:{lineno}: enregistrement invalide ({e})") from e
            records.append(traj)
        return cls(path, LabelLayout.from_dict(header["layout"]), records)

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[Trajectory]:
        return iter(self._records)

    @property
    def records(self) -> List[Trajectory]:
        return list(self._records)

    def append(self, traj: Trajectory, verify_rewards: bool = True) -> AppendReceipt:
        check_trajectory(traj, verify_rewards=verify_rewards)
        if traj.label is None:
            traj.label = self.layout.label_for(traj.scenario, traj.ret, traj.states[-1])
        record_id = len(self._records)
        line = _encode_record(traj, record_id) + "\n"
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line)
            fh.flush()
            os.fsync(fh.fileno())
        traj.record_id = record_id
        self._records.append(traj)
        return AppendReceipt(record_id=record_id, path=self.path)

    def extend(self, trajectories: Sequence[Trajectory], verify_rewards: bool = True) -> List[AppendReceipt]:
        return [self.append(t, verify_rewards=verify_rewards) for t in trajectories]

    def select(self, flt: Optional[TrajectoryFilter] = None) -> List[Trajectory]:
        flt = flt or TrajectoryFilter()
        return [t for t in self._records if flt.matches(t)]

    def split(self, holdout_fraction: float, flt: Optional[TrajectoryFilter] = None) -> Tuple[frozenset, frozenset]:
        """Partition déterministe par identifiant : les derniers enregistrements sont mis de côté."""
        ids = [t.record_id for t in self.select(flt)]
        n_hold = int(round(len(ids) * holdout_fraction))
        if holdout_fraction > 0 and len(ids) > 1:
            n_hold = min(max(n_hold, 1), len(ids) - 1)
        else:
            n_hold = 0
        cut = len(ids) - n_hold
        return frozenset(ids[:cut]), frozenset(ids[cut:])

    def compute_metrics(self, flt: Optional[TrajectoryFilter] = None) -> DatasetMetrics:
        return compute_metrics(self.select(flt), flt)

    def sample_batch(self, flt: Optional[TrajectoryFilter], batch_size: int, window: int,
                     rng: np.random.Generator) -> TrainingBatch:
        return sample_batch(self.select(flt), flt, batch_size, window, rng)


def compute_metrics(trajectories: Sequence[Trajectory], flt: Optional[TrajectoryFilter] = None) -> DatasetMetrics:
    if not trajectories:
        raise EmptyDatasetError(f"sélection vide ({(flt or TrajectoryFilter()).describe()})")
    tq = math.fsum(t.ret for t in trajectories) / len(trajectories)
    pairs = set()
    for t in trajectories:
        for s, a in zip(t.states[:-1], t.actions):
            pairs.add((tuple(int(v) for v in s), a.user, a.delta))
    return DatasetMetrics(tq=tq, saco=len(pairs), size=len(trajectories))


def sample_batch(trajectories: Sequence[Trajectory], flt: Optional[TrajectoryFilter], batch_size: int,
                 window: int, rng: np.random.Generator) -> TrainingBatch:
    """Fenêtres de H' états tirées uniformément parmi toutes les fenêtres éligibles."""
    if not trajectories:
        raise ConditionUnsatisfiableError((flt or TrajectoryFilter()).describe())
    counts = np.array([max(len(t.states) - window + 1, 0) for t in trajectories])
    total = int(counts.sum())
    if total == 0:
        raise ContractError(f"fenêtre H'={window} plus longue que toutes les trajectoires sélectionnées")
    cum = np.cumsum(counts)
    flat = rng.integers(0, total, size=batch_size)
    which = np.searchsorted(cum, flat, side="right")
    starts = flat - (cum[which] - counts[which])
    states, actions, labels, envs, pmax, ids = [], [], [], [], [], []
    for k, s in zip(which, starts):
        t = trajectories[k]
        states.append(t.states[s:s + window])
        actions.append([a.index for a in t.actions[s:s + window - 1]])
        labels.append(t.label)
        envs.append(t.label.env_features if t.label is not None else np.zeros(ENV_FEATURE_WIDTH))
        pmax.append(t.scenario.p_max)
        ids.append(-1 if t.record_id is None else t.record_id)
    return TrainingBatch(states=np.stack(states), actions=np.asarray(actions, dtype=np.int64).reshape(batch_size, window - 1),
                         labels=labels, env_features=np.stack(envs), p_max=np.asarray(pmax),
                         record_ids=np.asarray(ids), starts=np.asarray(starts))


def metrics_rows(store: TrajectoryStore) -> List[Dict]:
    """Lignes CSV `user_count,size,tq,saco` (une par nombre d'utilisateurs + `all`)."""
    rows = []
    for count in sorted({t.user_count for t in store}):
        m = store.compute_metrics(TrajectoryFilter(user_count=count))
        rows.append({"user_count": count, "size": m.size, "tq": repr(m.tq), "saco": m.saco})
    m = store.compute_metrics()
    rows.append({"user_count": "all", "size": m.size, "tq": repr(m.tq), "saco": m.saco})
    return rows


def fit_layout(trajectories: Sequence[Trajectory], user_counts: Sequence[int] = DEFAULT_USER_COUNTS,
               gain_range: Tuple[float, float] = DEFAULT_GAIN_RANGE) -> LabelLayout:
    """Fige la disposition sur un lot de référence (déciles de retour par nombre d'utilisateurs)."""
    if not trajectories:
        raise EmptyDatasetError("aucune trajectoire pour figer la disposition des labels")
    by_count: Dict[int, List[float]] = {}
    for t in trajectories:
        by_count.setdefault(t.user_count, []).append(t.ret)
    return LabelLayout.fit(by_count, user_counts=user_counts, gain_range=gain_range,
                           constraint_names=constraint_names(trajectories[0].scenario))


def label_trajectories(trajectories: Sequence[Trajectory], layout: LabelLayout) -> None:
    for t in trajectories:
        t.label = layout.label_for(t.scenario, t.ret, t.states[-1])
