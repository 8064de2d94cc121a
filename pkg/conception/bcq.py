"""Référence hors ligne : Q-learning contraint par le lot (BCQ discret).

G_ω(a|s) imite le comportement du jeu de trajectoires ; seules les actions
dont G(a|s)/max G(·|s) ≥ τ sont candidates, pour la cible comme pour l'action
jouée. Aucune interaction avec l'environnement pendant l'apprentissage.
"""
from __future__ import annotations
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from .conception_models import AdjustAction, NetworkScenario, Trajectory
from .config import BcqSettings
from .errors import EmptyDatasetError, TrainingDivergenceError
from .nn_core import AdamState, cross_entropy, load_checkpoint, save_checkpoint, softmax
from .sac_collector import build_mlp, featurize, rollout
from .traj_store import TrajectoryFilter, TrajectoryStore

log = logging.getLogger(__name__)


def transitions_from(trajectories: Sequence[Trajectory]) -> Dict[str, np.ndarray]:
    """Transitions (s, a, r, s', d).
    Le jumeau n'a pas d'état terminal : d vaut 0 partout et le dernier pas de chaque
    trajectoire est seulement marqué `truncated` (la cible continue d'amorcer sur s')."""
    obs, nxt, actions, rewards, truncated = [], [], [], [], []
    for t in trajectories:
        h = len(t.actions)
        if h == 0:
            continue
        obs.append(featurize(t.scenario, t.states[:-1]))
        nxt.append(featurize(t.scenario, t.states[1:]))
        actions.extend(a.index for a in t.actions)
        rewards.append(t.rewards)
        cut = np.zeros(h)
        cut[-1] = 1.0
        truncated.append(cut)
    if not actions:
        raise EmptyDatasetError("aucune transition pour BCQ")
    truncated = np.concatenate(truncated)
    return {"obs": np.concatenate(obs), "actions": np.asarray(actions, dtype=np.int64),
            "rewards": np.concatenate(rewards), "next_obs": np.concatenate(nxt),
            "dones": np.zeros_like(truncated), "truncated": truncated}


class BcqAgent:

    def __init__(self, obs_dim: int, num_actions: int, settings: Optional[BcqSettings] = None,
                 rng: Optional[np.random.Generator] = None):
        self.settings = settings or BcqSettings()
        rng = rng if rng is not None else np.random.default_rng(0)
        s = self.settings
        self.obs_dim = obs_dim
        self.num_actions = num_actions
        self.tau = s.tau
        self.q = build_mlp(obs_dim, s.hidden, num_actions, rng)
        self.q_target = self.q.copy()
        self.behavior = build_mlp(obs_dim, s.hidden, num_actions, rng, zero_head=True)
        self.opt_q = AdamState(self.q.params, lr=s.lr, max_grad_norm=s.max_grad_norm)
        self.opt_behavior = AdamState(self.behavior.params, lr=s.lr, max_grad_norm=s.max_grad_norm)
        self.updates = 0

    def behavior_probs(self, obs) -> np.ndarray:
        return softmax(self.behavior.forward(obs))

    def filter_mask(self, obs) -> np.ndarray:
        """Actions admises : G(a|s)/max G ≥ τ (le mode du comportement passe toujours)."""
        g = self.behavior_probs(obs)
        return g / np.max(g, axis=-1, keepdims=True) >= self.tau

    def _filtered_argmax(self, q: np.ndarray, mask: np.ndarray) -> np.ndarray:
        return np.argmax(np.where(mask, q, -np.inf), axis=-1)

    def act_features(self, obs) -> int:
        obs = np.asarray(obs, dtype=np.float64)
        return int(self._filtered_argmax(self.q.forward(obs), self.filter_mask(obs)))

    def act(self, scn: NetworkScenario, state) -> AdjustAction:
        return AdjustAction.from_index(self.act_features(featurize(scn, state)))

    def filtered_actions(self, scn: NetworkScenario, state) -> List[int]:
        return [int(a) for a in np.flatnonzero(self.filter_mask(featurize(scn, state)))]

    def update(self, batch: Dict[str, np.ndarray]) -> Dict[str, float]:
        s = self.settings
        obs, actions = batch["obs"], batch["actions"]
        n = len(actions)

        logits = self.behavior.forward(obs, record=True)
        loss_g, grad_g = cross_entropy(logits, actions)
        grads, _ = self.behavior.backward(grad_g)
        self.opt_behavior.step(self.behavior.params, grads)

        # cible double Q : argmax de Q en ligne parmi les actions filtrées, valeur par Q̄
        next_obs = batch["next_obs"]
        best = self._filtered_argmax(self.q.forward(next_obs), self.filter_mask(next_obs))
        q_next = self.q_target.forward(next_obs)[np.arange(n), best]
        target = batch["rewards"] + s.gamma * (1.0 - batch["dones"]) * q_next

        pred = self.q.forward(obs, record=True)
        diff = pred[np.arange(n), actions] - target
        grad = np.zeros_like(pred)
        grad[np.arange(n), actions] = 2.0 * diff / n
        grads, _ = self.q.backward(grad)
        self.opt_q.step(self.q.params, grads)
        self.q_target.soft_update(self.q, s.rho)
        self.updates += 1

        losses = {"q": float(np.mean(diff * diff)), "behavior": loss_g}
        if not all(math.isfinite(v) for v in losses.values()):
            raise TrainingDivergenceError("perte BCQ non finie", block="bcq", snapshot={**losses, "update": self.updates})
        return losses

    def save(self, path: str | Path) -> Path:
        return save_checkpoint(path, {"q": self.q, "q_target": self.q_target, "behavior": self.behavior},
                               {"tau": np.array([self.tau])})

    @classmethod
    def load(cls, path: str | Path, settings: Optional[BcqSettings] = None) -> "BcqAgent":
        nets, arrays = load_checkpoint(path)
        agent = cls(nets["q"].in_dim, nets["q"].out_dim, settings)
        agent.q, agent.q_target, agent.behavior = nets["q"], nets["q_target"], nets["behavior"]
        agent.tau = float(arrays["tau"][0])
        agent.opt_q = AdamState(agent.q.params, lr=agent.settings.lr, max_grad_norm=agent.settings.max_grad_norm)
        agent.opt_behavior = AdamState(agent.behavior.params, lr=agent.settings.lr,
                                       max_grad_norm=agent.settings.max_grad_norm)
        return agent


@dataclass
class BcqReport:
    agent: BcqAgent
    transitions: int
    first_losses: Dict[str, float]
    last_losses: Dict[str, float]


def fit(agent: BcqAgent, transitions: Dict[str, np.ndarray], steps: int, rng: np.random.Generator,
        progress: bool = False) -> BcqReport:
    n = len(transitions["actions"])
    if n == 0:
        raise EmptyDatasetError("aucune transition pour BCQ")
    first: Dict[str, float] = {}
    losses: Dict[str, float] = {}
    for step_idx in tqdm(range(steps), desc="[BCQ] entraînement", disable=not progress):
        idx = rng.choice(n, size=min(agent.settings.batch_size, n), replace=False)
        losses = agent.update({k: v[idx] for k, v in transitions.items()})
        if step_idx == 0:
            first = dict(losses)
    log.info("[BCQ] %d pas sur %d transitions : %s", steps, n, losses)
    return BcqReport(agent=agent, transitions=n, first_losses=first, last_losses=losses)


def train(agent: BcqAgent, store: TrajectoryStore, steps: int, rng: np.random.Generator,
          flt: Optional[TrajectoryFilter] = None, progress: bool = False) -> BcqReport:
    """Apprentissage purement hors ligne sur la sélection `flt` du jeu."""
    selected = store.select(flt)
    if not selected:
        raise EmptyDatasetError(f"sélection vide ({(flt or TrajectoryFilter()).describe()})")
    return fit(agent, transitions_from(selected), steps, rng, progress=progress)


def greedy_rollout(agent: BcqAgent, scn: NetworkScenario, horizon: Optional[int] = None, initial=None) -> Trajectory:
    """Évaluation gloutonne ; chaque décision respecte le filtre."""
    return rollout(None, scn, horizon=horizon, initial=initial,
                   policy=lambda state: agent.act_features(featurize(scn, state)))
