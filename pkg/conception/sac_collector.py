"""Collecte de trajectoires étiquetées par un agent SAC discret (étape 1).

Acteur : softmax sur les 2I actions. Deux critiques Q(s, ·) et leurs cibles.
Les espérances sur les actions sont calculées en forme close (pas de
reparamétrisation). La température α est ajustée vers une entropie cible.
"""
from __future__ import annotations
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
from tqdm import tqdm

from .conception_models import AdjustAction, NetworkScenario, Trajectory
from .config import SacSettings
from .errors import ContractError, TrainingDivergenceError
from .nn_core import AdamState, MlpNetwork, load_checkpoint, log_softmax, save_checkpoint, softmax
from .traj_store import LabelLayout, label_trajectories
from .twin_env import TwinEnv

log = logging.getLogger(__name__)


def feature_width(scn: NetworkScenario) -> int:
    return scn.num_users + scn.num_users * scn.num_base_stations + 1


def featurize(scn: NetworkScenario, states) -> np.ndarray:
    """p/P_max concaténé aux log-gains et au log-bruit du scénario (partagé avec BCQ)."""
    states = np.asarray(states, dtype=np.float64)
    single = states.ndim == 1
    S = states[None, :] if single else states
    ctx = np.concatenate([np.log(scn.channel_gain).ravel(), [math.log(scn.noise_power)]])
    out = np.concatenate([S / scn.p_max, np.broadcast_to(ctx, (S.shape[0], ctx.size))], axis=1)
    return out[0] if single else out


def build_mlp(in_dim: int, hidden: List[int], out_dim: int, rng: np.random.Generator,
              zero_head: bool = False) -> MlpNetwork:
    widths = [in_dim, *hidden, out_dim]
    net = MlpNetwork(widths, ["relu"] * len(hidden) + ["identity"], rng=rng)
    if zero_head:
        net.params[-2][:] = 0.0
        net.params[-1][:] = 0.0
    return net


def actor_logit_grad(probs: np.ndarray, log_probs: np.ndarray, q_min: np.ndarray, alpha: float) -> np.ndarray:
    """∂/∂z de Σ_a π_a(α log π_a − Q_a) : π ⊙ (f − Σ π f)."""
    f = alpha * log_probs - q_min
    loss = np.sum(probs * f, axis=1, keepdims=True)
    return probs * (f - loss)


class ReplayBuffer:
    """Anneau de transitions ; échantillonnage uniforme sans remise dans un batch.
    `dones` marque un état terminal ; la troncature par budget de pas n'en est pas un."""

    def __init__(self, obs_dim: int, capacity: int):
        self.capacity = int(capacity)
        self.obs = np.zeros((self.capacity, obs_dim))
        self.next_obs = np.zeros((self.capacity, obs_dim))
        self.actions = np.zeros(self.capacity, dtype=np.int64)
        self.rewards = np.zeros(self.capacity)
        self.dones = np.zeros(self.capacity)
        self.inserted = 0

    def __len__(self) -> int:
        return min(self.inserted, self.capacity)

    def push(self, obs, action: int, reward: float, next_obs, terminal: bool) -> None:
        k = self.inserted % self.capacity
        self.obs[k] = obs
        self.actions[k] = action
        self.rewards[k] = reward
        self.next_obs[k] = next_obs
        self.dones[k] = float(terminal)
        self.inserted += 1

    def sample(self, batch_size: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        n = len(self)
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        return {"obs": self.obs[idx], "actions": self.actions[idx], "rewards": self.rewards[idx],
                "next_obs": self.next_obs[idx], "dones": self.dones[idx]}


class SacAgent:

    def __init__(self, obs_dim: int, num_actions: int, settings: Optional[SacSettings] = None,
                 rng: Optional[np.random.Generator] = None, target_entropy: Optional[float] = None):
        self.settings = settings or SacSettings()
        rng = rng if rng is not None else np.random.default_rng(0)
        s = self.settings
        self.obs_dim = obs_dim
        self.num_actions = num_actions
        # tête nulle : politique uniforme à l'initialisation
        self.policy = build_mlp(obs_dim, s.hidden, num_actions, rng, zero_head=True)
        self.q1 = build_mlp(obs_dim, s.hidden, num_actions, rng)
        self.q2 = build_mlp(obs_dim, s.hidden, num_actions, rng)
        self.q1_target = self.q1.copy()
        self.q2_target = self.q2.copy()
        self.log_alpha = np.array([math.log(s.init_alpha)])
        self.target_entropy = (target_entropy if target_entropy is not None
                               else s.target_entropy_ratio * math.log(num_actions))
        self._reset_optimizers()
        self.interactions = 0
        self.updates = 0

    def _reset_optimizers(self) -> None:
        s = self.settings
        self.opt_policy = AdamState(self.policy.params, lr=s.lr, max_grad_norm=s.max_grad_norm)
        self.opt_q1 = AdamState(self.q1.params, lr=s.lr, max_grad_norm=s.max_grad_norm)
        self.opt_q2 = AdamState(self.q2.params, lr=s.lr, max_grad_norm=s.max_grad_norm)
        self.opt_alpha = AdamState([self.log_alpha], lr=s.alpha_lr)

    @property
    def alpha(self) -> float:
        return float(math.exp(self.log_alpha[0]))

    def probs(self, obs) -> np.ndarray:
        return softmax(self.policy.forward(obs))

    def act_features(self, obs, mode: str = "stochastic", rng: Optional[np.random.Generator] = None) -> int:
        logits = self.policy.forward(obs)
        if mode == "greedy":
            return int(np.argmax(logits))      # premier maximum : plus petit index
        if mode != "stochastic":
            raise ContractError(f"mode inconnu: {mode}")
        rng = rng if rng is not None else np.random.default_rng()
        return int(rng.choice(self.num_actions, p=softmax(logits)))

    def act(self, scn: NetworkScenario, state, mode: str = "stochastic",
            rng: Optional[np.random.Generator] = None) -> AdjustAction:
        return AdjustAction.from_index(self.act_features(featurize(scn, state), mode, rng))

    def critic_target(self, batch: Dict[str, np.ndarray]) -> np.ndarray:
        """y = r + γ(1−d)·Σ_a' π(a'|s')[min Q̄(s',a') − α log π(a'|s')]."""
        gamma = self.settings.gamma
        next_logits = self.policy.forward(batch["next_obs"])
        next_p, next_logp = softmax(next_logits), log_softmax(next_logits)
        q_next = np.minimum(self.q1_target.forward(batch["next_obs"]), self.q2_target.forward(batch["next_obs"]))
        v_next = np.sum(next_p * (q_next - self.alpha * next_logp), axis=1)
        return batch["rewards"] + gamma * (1.0 - batch["dones"]) * v_next

    def _critic_step(self, net: MlpNetwork, opt: AdamState, obs, actions, target) -> float:
        n = len(actions)
        pred = net.forward(obs, record=True)
        qa = pred[np.arange(n), actions]
        diff = qa - target
        grad = np.zeros_like(pred)
        grad[np.arange(n), actions] = 2.0 * diff / n
        grads, _ = net.backward(grad)
        opt.step(net.params, grads)
        return float(np.mean(diff * diff))

    def update(self, batch: Dict[str, np.ndarray]) -> Dict[str, float]:
        obs, actions = batch["obs"], batch["actions"]
        n = len(actions)
        target = self.critic_target(batch)
        loss_q1 = self._critic_step(self.q1, self.opt_q1, obs, actions, target)
        loss_q2 = self._critic_step(self.q2, self.opt_q2, obs, actions, target)

        logits = self.policy.forward(obs, record=True)
        p, logp = softmax(logits), log_softmax(logits)
        q_min = np.minimum(self.q1.forward(obs), self.q2.forward(obs))
        alpha = self.alpha
        actor_loss = float(np.mean(np.sum(p * (alpha * logp - q_min), axis=1)))
        grads, _ = self.policy.backward(actor_logit_grad(p, logp, q_min, alpha) / n)
        self.opt_policy.step(self.policy.params, grads)

        entropy = float(np.mean(-np.sum(p * logp, axis=1)))
        alpha_loss = float(self.log_alpha[0] * (entropy - self.target_entropy))
        self.opt_alpha.step([self.log_alpha], [np.array([entropy - self.target_entropy])])

        rho = self.settings.rho
        self.q1_target.soft_update(self.q1, rho)
        self.q2_target.soft_update(self.q2, rho)
        self.updates += 1
        losses = {"critic1": loss_q1, "critic2": loss_q2, "actor": actor_loss,
                  "alpha": alpha_loss, "entropy": entropy}
        if not all(math.isfinite(v) for v in losses.values()):
            raise TrainingDivergenceError("perte SAC non finie", block="sac",
                                          snapshot={**losses, "update": self.updates, "alpha": alpha})
        return losses

    def save(self, path: str | Path) -> Path:
        return save_checkpoint(path, {"policy": self.policy, "q1": self.q1, "q2": self.q2,
                                      "q1_target": self.q1_target, "q2_target": self.q2_target},
                               {"log_alpha": self.log_alpha, "interactions": np.array([float(self.interactions)])})

    @classmethod
    def load(cls, path: str | Path, settings: Optional[SacSettings] = None) -> "SacAgent":
        nets, arrays = load_checkpoint(path)
        policy = nets["policy"]
        agent = cls(policy.in_dim, policy.out_dim, settings)
        agent.policy, agent.q1, agent.q2 = policy, nets["q1"], nets["q2"]
        agent.q1_target, agent.q2_target = nets["q1_target"], nets["q2_target"]
        agent.log_alpha = arrays["log_alpha"].copy()
        agent.interactions = int(arrays["interactions"][0])
        agent._reset_optimizers()
        return agent


@dataclass
class CollectionReport:
    trajectories: List[Trajectory]
    layout: Optional[LabelLayout]
    interactions: int
    last_losses: Dict[str, float]


def rollout(agent: SacAgent, scn: NetworkScenario, horizon: Optional[int] = None, mode: str = "greedy",
            rng: Optional[np.random.Generator] = None, initial=None,
            policy: Optional[Callable[[np.ndarray], int]] = None) -> Trajectory:
    """Épisode sans apprentissage ; `policy` remplace l'agent si fourni (index d'action depuis l'état)."""
    env = TwinEnv(scn, horizon)
    state = env.reset(initial)
    states, actions, rewards = [state], [], []
    while not env.done:
        if policy is not None:
            index = policy(state)
        else:
            index = agent.act_features(featurize(scn, state), mode, rng)
        result = env.step(AdjustAction.from_index(index))
        state = result.next_state
        states.append(state)
        actions.append(result.action)
        rewards.append(result.reward)
    return Trajectory(scenario=scn, states=np.stack(states), actions=actions,
                      rewards=np.asarray(rewards), ret=math.fsum(rewards))


def collect(agent: SacAgent, scenarios: Callable[[int], NetworkScenario], episodes: int,
            rng: np.random.Generator, horizon: Optional[int] = None, layout: Optional[LabelLayout] = None,
            replay: Optional[ReplayBuffer] = None, train: bool = True, workers: Optional[int] = None,
            progress: bool = False) -> CollectionReport:
    """Explore `episodes` scénarios, apprend en ligne et renvoie les trajectoires,
    étiquetées seulement si une disposition est fournie.

    Les épisodes avancent par vagues de `workers` jumeaux indépendants, chacun avec
    son propre flux aléatoire ; l'insertion en mémoire et les mises à jour restent
    sérielles, dans l'ordre des workers.
    """
    s = agent.settings
    workers = max(1, workers if workers is not None else s.workers)
    replay = replay if replay is not None else ReplayBuffer(agent.obs_dim, s.replay_capacity)
    streams = rng.spawn(workers)
    trajectories: List[Trajectory] = []
    losses: Dict[str, float] = {}
    bar = tqdm(total=episodes, desc="[SAC] collecte", disable=not progress)
    for first in range(0, episodes, workers):
        wave = range(first, min(first + workers, episodes))
        scns = [scenarios(ep) for ep in wave]
        envs = [TwinEnv(scn, horizon) for scn in scns]
        runs = [([env.reset()], [], []) for env in envs]
        obs = [featurize(scn, states[0]) for scn, (states, _, _) in zip(scns, runs)]
        while not all(env.done for env in envs):
            for w, env in enumerate(envs):
                if env.done:
                    continue
                index = agent.act_features(obs[w], "stochastic", streams[w])
                result = env.step(AdjustAction.from_index(index))
                next_obs = featurize(scns[w], result.next_state)
                # budget de pas épuisé = troncature, pas un état terminal
                replay.push(obs[w], index, result.reward, next_obs, terminal=False)
                agent.interactions += 1
                if train and len(replay) >= max(s.warmup_steps, 1) and agent.interactions % s.update_every == 0:
                    losses = agent.update(replay.sample(s.batch_size, rng))
                states, actions, rewards = runs[w]
                states.append(result.next_state)
                actions.append(result.action)
                rewards.append(result.reward)
                obs[w] = next_obs
        for scn, (states, actions, rewards) in zip(scns, runs):
            trajectories.append(Trajectory(scenario=scn, states=np.stack(states), actions=actions,
                                           rewards=np.asarray(rewards), ret=math.fsum(rewards)))
        bar.update(len(wave))
        if progress and losses:
            log.debug("[SAC] épisodes %d-%d: %s", wave[0], wave[-1], losses)
    bar.close()
    if layout is not None:
        label_trajectories(trajectories, layout)
    log.info("[SAC] %d trajectoires collectées, %d interactions", len(trajectories), agent.interactions)
    return CollectionReport(trajectories=trajectories, layout=layout, interactions=agent.interactions,
                            last_losses=losses)
