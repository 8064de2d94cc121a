"""Planificateur par diffusion de trajectoires conditionnelles (étape 2).

On diffuse uniquement des fenêtres d'états (H' × I, normalisées dans [−1, 1]) ;
les actions sont retrouvées par un modèle de dynamique inverse f_φ sur les
paires d'états consécutifs.

Conventions :
- ᾱ_0 = 1 (k = 0 est l'identité), ᾱ_k strictement décroissant jusqu'à k = K ;
- le premier état de la fenêtre est ré-imposé (inpainting) à chaque étape ;
- le jeton nul = bloc de condition à zéro + indicateur de présence à 0.
"""
from __future__ import annotations
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
from tqdm import tqdm

from .conception_models import AdjustAction, ConditionLabel, GeneratedPlan, NetworkScenario, Trajectory
from .config import DiffusionSettings
from .errors import ContractError, EmptyDatasetError, MissingPrerequisiteError, TrainingDivergenceError, UsageError
from .nn_core import (AdamState, MlpNetwork, cross_entropy, load_checkpoint, mse_loss, save_checkpoint,
                      sinusoidal_embedding)
from .traj_store import ENV_FEATURE_WIDTH, LabelLayout, TrajectoryFilter, TrajectoryStore, sample_batch
from .twin_env import TwinEnv, utility, validate_allocation

log = logging.getLogger(__name__)

CONDITION_MODES = ("returns", "env", "both")
_HELDOUT_SEED = 12345
_HELDOUT_BATCH = 256


# ---------------------------------------------------------------------------
# Processus direct
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    betas: np.ndarray            # β_1 … β_K

    @classmethod
    def cosine(cls, steps: int, s: float = 0.008) -> "NoiseSchedule":
        if steps < 1:
            raise ContractError("K ≥ 1 requis")
        t = np.linspace(0.0, steps, steps + 1)
        f = np.cos(((t / steps) + s) / (1.0 + s) * math.pi * 0.5) ** 2
        ab = f / f[0]
        betas = np.clip(1.0 - ab[1:] / ab[:-1], 1e-6, 0.999)
        return cls("cosine", betas)

    @classmethod
    def linear(cls, steps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        if steps < 1:
            raise ContractError("K ≥ 1 requis")
        return cls("linear", np.linspace(beta_start, beta_end, steps))

    @classmethod
    def build(cls, kind: str, steps: int) -> "NoiseSchedule":
        if kind == "cosine":
            return cls.cosine(steps)
        if kind == "linear":
            return cls.linear(steps)
        raise ContractError(f"planning de bruit inconnu: {kind}")

    @property
    def K(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bar(self) -> np.ndarray:
        """ᾱ_0 … ᾱ_K, avec ᾱ_0 = 1."""
        return np.concatenate([[1.0], np.cumprod(self.alphas)])

    def beta(self, k: int) -> float:
        return float(self.betas[k - 1])


def _check_step(schedule: NoiseSchedule, k: int, lowest: int) -> int:
    if int(k) != k or not lowest <= k <= schedule.K:
        raise ContractError(f"étape de diffusion {k} hors de [{lowest}, {schedule.K}]")
    return int(k)


def forward_noise(schedule: NoiseSchedule, x0, k: int, rng: np.random.Generator,
                  noise: Optional[np.ndarray] = None) -> np.ndarray:
    """x_k = √ᾱ_k·x_0 + √(1−ᾱ_k)·ε ; k = 0 renvoie x_0 (ᾱ_0 = 1)."""
    k = _check_step(schedule, k, 0)
    x0 = np.asarray(x0, dtype=np.float64)
    if k == 0:
        return x0.copy()
    ab = schedule.alpha_bar[k]
    eps = rng.standard_normal(x0.shape) if noise is None else noise
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def noise_step(schedule: NoiseSchedule, x_prev, k: int, rng: np.random.Generator) -> np.ndarray:
    """Noyau d'un pas : x_k = √α_k·x_{k−1} + √β_k·ε."""
    k = _check_step(schedule, k, 1)
    x_prev = np.asarray(x_prev, dtype=np.float64)
    beta = schedule.beta(k)
    return math.sqrt(1.0 - beta) * x_prev + math.sqrt(beta) * rng.standard_normal(x_prev.shape)


def guided_noise(eps_null: np.ndarray, eps_cond: np.ndarray, w: float) -> np.ndarray:
    """ε̂ = ε(∅) + w·(ε(y) − ε(∅)), exact en w = 0 et w = 1."""
    if w == 0:
        return eps_null
    if w == 1:
        return eps_cond
    return eps_null + w * (eps_cond - eps_null)


def normalize_states(states, p_max: int) -> np.ndarray:
    return np.asarray(states, dtype=np.float64) / p_max * 2.0 - 1.0


def denormalize_states(x, p_max: int) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) + 1.0) * 0.5 * p_max


# ---------------------------------------------------------------------------
# Modèle
# ---------------------------------------------------------------------------

@dataclass
class DiffusionModel:
    schedule: NoiseSchedule
    denoiser: MlpNetwork
    inverse: MlpNetwork
    layout: LabelLayout
    user_count: int
    p_max: int
    window: int
    embed_dim: int
    condition: str = "both"
    p_drop: float = 0.25
    guidance: float = 1.2

    @classmethod
    def build(cls, layout: LabelLayout, user_count: int, p_max: int,
              settings: Optional[DiffusionSettings] = None, rng: Optional[np.random.Generator] = None,
              schedule: str = "cosine") -> "DiffusionModel":
        s = settings or DiffusionSettings()
        rng = rng if rng is not None else np.random.default_rng(0)
        if user_count not in layout.user_counts:
            raise ContractError(f"user_count {user_count} absent de la disposition {layout.user_counts}")
        x_dim = s.window * user_count
        widths = [x_dim + s.embed_dim + layout.width + 1] + [s.hidden] * s.depth + [x_dim]
        activations = ["silu"] * s.depth + ["identity"]
        residual = [False] + [True] * (s.depth - 1) + [False]
        denoiser = MlpNetwork(widths, activations, residual, rng=rng)
        # colonnes de condition nulles : sortie indépendante de y à l'initialisation
        denoiser.params[0][x_dim + s.embed_dim:, :] = 0.0
        inv_widths = [2 * user_count + ENV_FEATURE_WIDTH, *s.inverse_hidden, 2 * user_count]
        inverse = MlpNetwork(inv_widths, ["relu"] * len(s.inverse_hidden) + ["identity"], rng=rng)
        return cls(schedule=NoiseSchedule.build(schedule, s.steps), denoiser=denoiser, inverse=inverse,
                   layout=layout, user_count=user_count, p_max=p_max, window=s.window, embed_dim=s.embed_dim,
                   condition=s.condition, p_drop=s.p_drop, guidance=s.guidance)

    def __post_init__(self):
        if self.condition not in CONDITION_MODES:
            raise ContractError(f"mode de conditionnement inconnu: {self.condition}")
        x_dim = self.window * self.user_count
        if self.denoiser.out_dim != x_dim or self.denoiser.in_dim != x_dim + self.embed_dim + self.layout.width + 1:
            raise ContractError("largeurs du débruiteur incompatibles avec la fenêtre et la disposition")
        if self.inverse.out_dim != 2 * self.user_count:
            raise ContractError(f"f_φ doit produire {2 * self.user_count} logits")

    def encode_condition(self, label: Optional[ConditionLabel]) -> np.ndarray:
        """Vecteur [y | 1] ; None donne le jeton nul [0 | 0]."""
        if label is None:
            return np.zeros(self.layout.width + 1)
        if label.user_count != self.user_count:
            raise ContractError(f"label pour {label.user_count} utilisateurs, modèle entraîné pour {self.user_count}")
        return np.concatenate([self.layout.encode(label, self.condition), [1.0]])

    def denoiser_input(self, xk: np.ndarray, ks, cond: np.ndarray) -> np.ndarray:
        n = xk.shape[0]
        return np.concatenate([xk.reshape(n, -1), sinusoidal_embedding(ks, self.embed_dim),
                               np.broadcast_to(cond, (n, cond.shape[-1]))], axis=1)

    def predict_noise(self, xk: np.ndarray, k: int, cond: np.ndarray) -> np.ndarray:
        n = xk.shape[0]
        out = self.denoiser.forward(self.denoiser_input(xk, np.full(n, k), cond))
        return out.reshape(xk.shape)

    def target_label(self, scn: NetworkScenario, return_bucket: Optional[int] = None) -> ConditionLabel:
        """Label de génération : décile visé (le plus haut par défaut), contraintes demandées satisfaites."""
        bucket = self.layout.n_return_bins - 1 if return_bucket is None else return_bucket
        return ConditionLabel(return_bucket=bucket, user_count=scn.num_users,
                              env_features=self.layout.env_features(scn),
                              constraint_flags=tuple(1 for _ in self.layout.constraint_names))


def _inverse_features(states_real: np.ndarray, p_max: int, env_features: np.ndarray) -> np.ndarray:
    """(s_t normalisé, s_{t+1} − s_t en unités de grille, descripteurs d'environnement)."""
    s = np.asarray(states_real, dtype=np.float64)
    cur = s[:-1] / p_max * 2.0 - 1.0
    diff = s[1:] - s[:-1]
    env = np.broadcast_to(np.asarray(env_features, dtype=np.float64), (cur.shape[0], ENV_FEATURE_WIDTH))
    return np.concatenate([cur, diff, env], axis=1)


def snap_to_grid(states_real, p_max: int) -> np.ndarray:
    return np.clip(np.rint(np.asarray(states_real, dtype=np.float64)), 0, p_max)


def decode_actions(model: DiffusionModel, states_real: np.ndarray, env_features) -> List[AdjustAction]:
    """Argmax de f_φ sur chaque paire consécutive d'états arrondis à la grille
    (plus petit index en cas d'égalité)."""
    if len(states_real) < 2:
        return []
    grid = snap_to_grid(states_real, model.p_max)
    logits = model.inverse.forward(_inverse_features(grid, model.p_max, env_features))
    return [AdjustAction.from_index(int(a)) for a in np.argmax(logits, axis=1)]


# ---------------------------------------------------------------------------
# Entraînement
# ---------------------------------------------------------------------------

@dataclass
class DiffusionReport:
    model: DiffusionModel
    heldout_before: float
    heldout_after: float
    last_loss: float
    last_inverse_loss: float
    train_size: int
    holdout_size: int


def _noised_batch(model: DiffusionModel, states: np.ndarray, rng: np.random.Generator):
    x0 = normalize_states(states, model.p_max)
    ks = rng.integers(1, model.schedule.K + 1, size=x0.shape[0])
    eps = rng.standard_normal(x0.shape)
    ab = model.schedule.alpha_bar[ks][:, None, None]
    xk = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    xk[:, 0] = x0[:, 0]
    return xk, ks, eps


def _slot_mask(model: DiffusionModel, n: int) -> np.ndarray:
    mask = np.ones((n, model.window, model.user_count))
    mask[:, 0] = 0.0
    return mask.reshape(n, -1)


def heldout_loss(model: DiffusionModel, trajectories: Sequence[Trajectory], batch_size: int = _HELDOUT_BATCH,
                 seed: int = _HELDOUT_SEED) -> float:
    """Perte ε sur un lot figé (même graine à chaque appel, conditions présentes)."""
    rng = np.random.default_rng(seed)
    batch = sample_batch(trajectories, None, batch_size, model.window, rng)
    xk, ks, eps = _noised_batch(model, batch.states, rng)
    cond = np.stack([model.encode_condition(lab) for lab in batch.labels])
    pred = model.denoiser.forward(model.denoiser_input(xk, ks, cond))
    loss, _ = mse_loss(pred, eps.reshape(len(ks), -1), _slot_mask(model, len(ks)))
    return loss


def train(model: DiffusionModel, store: TrajectoryStore, flt: Optional[TrajectoryFilter] = None,
          steps: int = 1000, rng: Optional[np.random.Generator] = None,
          settings: Optional[DiffusionSettings] = None, progress: bool = False) -> DiffusionReport:
    """Appariement de bruit (‖ε − ε_θ(x_k, k, y)‖², slot 0 exclu) et entropie croisée de f_φ,
    sur la partition d'entraînement ; la perte retenue est mesurée sur la partition mise de côté."""
    s = settings or DiffusionSettings()
    rng = rng if rng is not None else np.random.default_rng(0)
    flt = flt or TrajectoryFilter(user_count=model.user_count)
    if flt.user_count is None:
        flt = replace(flt, user_count=model.user_count)
    elif flt.user_count != model.user_count:
        raise ContractError(f"filtre sur {flt.user_count} utilisateurs, modèle pour {model.user_count}")
    train_ids, hold_ids = store.split(s.holdout_fraction, flt)
    train_set = store.select(replace(flt, record_ids=train_ids))
    hold_set = store.select(replace(flt, record_ids=hold_ids)) or train_set
    opt = AdamState(model.denoiser.params, lr=s.lr, max_grad_norm=s.max_grad_norm)
    opt_inv = AdamState(model.inverse.params, lr=s.lr, max_grad_norm=s.max_grad_norm)
    before = heldout_loss(model, hold_set) if train_set else math.nan
    loss = inv_loss = math.nan
    for step_idx in tqdm(range(steps), desc="[DIFFUSION] entraînement", disable=not progress):
        batch = sample_batch(train_set, flt, s.batch_size, model.window, rng)
        n = batch.states.shape[0]
        xk, ks, eps = _noised_batch(model, batch.states, rng)
        cond = np.stack([model.encode_condition(lab) for lab in batch.labels])
        cond[rng.random(n) < model.p_drop] = 0.0
        pred = model.denoiser.forward(model.denoiser_input(xk, ks, cond), record=True)
        loss, grad = mse_loss(pred, eps.reshape(n, -1), _slot_mask(model, n))
        if not math.isfinite(loss):
            raise TrainingDivergenceError("perte de débruitage non finie", block="denoiser",
                                          snapshot={"step": step_idx, "loss": loss})
        grads, _ = model.denoiser.backward(grad)
        opt.step(model.denoiser.params, grads)

        feats = np.concatenate([_inverse_features(w, model.p_max, e)
                                for w, e in zip(batch.states, batch.env_features)])
        logits = model.inverse.forward(feats, record=True)
        inv_loss, inv_grad = cross_entropy(logits, batch.actions.reshape(-1))
        if not math.isfinite(inv_loss):
            raise TrainingDivergenceError("perte de dynamique inverse non finie", block="inverse",
                                          snapshot={"step": step_idx, "loss": inv_loss})
        inv_grads, _ = model.inverse.backward(inv_grad)
        opt_inv.step(model.inverse.params, inv_grads)
    after = heldout_loss(model, hold_set)
    log.info("[DIFFUSION] %d pas : perte mise de côté %.4f → %.4f (f_φ %.4f)", steps, before, after, inv_loss)
    return DiffusionReport(model=model, heldout_before=before, heldout_after=after, last_loss=loss,
                           last_inverse_loss=inv_loss, train_size=len(train_set), holdout_size=len(hold_set))


def fit_inverse(model: DiffusionModel, trajectories: Sequence[Trajectory], steps: int,
                rng: np.random.Generator, lr: float = 1e-3, batch_size: int = 256,
                max_grad_norm: Optional[float] = None) -> float:
    """Affine f_φ seul sur toutes les transitions des trajectoires ; renvoie la perte finale."""
    if steps == 0:
        return math.nan
    feats, labels = [], []
    for t in trajectories:
        if len(t.actions) == 0:
            continue
        feats.append(_inverse_features(t.states, model.p_max, model.layout.env_features(t.scenario)))
        labels.extend(a.index for a in t.actions)
    if not labels:
        raise EmptyDatasetError("aucune transition pour la dynamique inverse")
    X = np.concatenate(feats)
    y = np.asarray(labels, dtype=np.int64)
    opt = AdamState(model.inverse.params, lr=lr, max_grad_norm=max_grad_norm)
    loss = math.nan
    for step_idx in range(steps):
        idx = rng.choice(len(y), size=min(batch_size, len(y)), replace=False)
        logits = model.inverse.forward(X[idx], record=True)
        loss, grad = cross_entropy(logits, y[idx])
        if not math.isfinite(loss):
            raise TrainingDivergenceError("perte de dynamique inverse non finie", block="inverse",
                                          snapshot={"step": step_idx, "loss": loss})
        grads, _ = model.inverse.backward(grad)
        opt.step(model.inverse.params, grads)
    log.info("[DIFFUSION] f_φ affinée sur %d transitions (%d pas) : perte %.4f", len(y), steps, loss)
    return loss


# ---------------------------------------------------------------------------
# Échantillonnage
# ---------------------------------------------------------------------------

def sample_plan(model: DiffusionModel, initial, label: Optional[ConditionLabel], rng: np.random.Generator,
                scenario: Optional[NetworkScenario] = None, w: Optional[float] = None,
                record_trace: bool = False) -> GeneratedPlan:
    """Processus inverse DDPM guidé ; label None donne l'échantillonnage inconditionnel."""
    initial = np.asarray(initial, dtype=np.int64)
    if initial.shape != (model.user_count,):
        raise ContractError(f"état initial de longueur {initial.shape} ≠ I={model.user_count}")
    w = model.guidance if w is None else w
    cond = model.encode_condition(label)
    null = model.encode_condition(None)
    sched = model.schedule
    ab = sched.alpha_bar
    s0 = normalize_states(initial, model.p_max)
    x = rng.standard_normal((1, model.window, model.user_count))
    x[:, 0] = s0
    trace = [x[0].copy()] if record_trace else []
    for k in range(sched.K, 0, -1):
        if label is None or w == 0:
            eps = model.predict_noise(x, k, null)
        elif w == 1:
            eps = model.predict_noise(x, k, cond)
        else:
            eps = guided_noise(model.predict_noise(x, k, null), model.predict_noise(x, k, cond), w)
        beta = sched.beta(k)
        x0_hat = np.clip((x - math.sqrt(1.0 - ab[k]) * eps) / math.sqrt(ab[k]), -1.0, 1.0)
        coef_x0 = math.sqrt(ab[k - 1]) * beta / (1.0 - ab[k])
        coef_xk = math.sqrt(1.0 - beta) * (1.0 - ab[k - 1]) / (1.0 - ab[k])
        x = coef_x0 * x0_hat + coef_xk * x
        if k > 1:
            var = beta * (1.0 - ab[k - 1]) / (1.0 - ab[k])
            x = x + math.sqrt(var) * rng.standard_normal(x.shape)
        x[:, 0] = s0
        if record_trace:
            trace.append(x[0].copy())
    states = denormalize_states(x[0], model.p_max)
    states[0] = initial
    env = model.layout.env_features(scenario) if scenario is not None else (
        label.env_features if label is not None else np.zeros(ENV_FEATURE_WIDTH))
    plan = GeneratedPlan(states=states, actions=decode_actions(model, states, env), trace=trace)
    if scenario is not None:
        plan.predicted_return = execute_plan(plan, scenario, initial).trajectory.ret
    return plan


def plan_from_states(model: DiffusionModel, states, env_features) -> GeneratedPlan:
    """Plan à partir d'états connus (rejeu d'une trajectoire stockée)."""
    states = np.asarray(states, dtype=np.float64)
    return GeneratedPlan(states=states, actions=decode_actions(model, states, env_features))


# ---------------------------------------------------------------------------
# Exécution
# ---------------------------------------------------------------------------

@dataclass
class ExecutionResult:
    achieved_utility: float
    trajectory: Trajectory
    plans: List[GeneratedPlan] = field(default_factory=list)


def _run_actions(env: TwinEnv, actions: Sequence[AdjustAction], states, acts, rewards) -> None:
    for action in actions:
        if env.done:
            break
        result = env.step(action)
        states.append(result.next_state)
        acts.append(result.action)
        rewards.append(result.reward)


def execute_plan(source: Union[GeneratedPlan, DiffusionModel], scn: NetworkScenario, initial=None,
                 mode: str = "open-loop", replan_every: Optional[int] = None,
                 label: Optional[ConditionLabel] = None, rng: Optional[np.random.Generator] = None,
                 horizon: Optional[int] = None) -> ExecutionResult:
    """Applique les actions décodées dans le jumeau (bornage absorbant les pas invalides).
    open-loop : un seul plan ; replan : nouveau plan depuis l'état réalisé tous les R pas."""
    if mode not in ("open-loop", "replan"):
        raise ContractError(f"mode d'exécution inconnu: {mode}")
    initial = validate_allocation(scn, np.zeros(scn.num_users) if initial is None else initial)
    if isinstance(source, GeneratedPlan):
        if mode == "replan":
            raise UsageError("le mode replan exige un modèle, pas un plan figé")
        if len(source.states) and np.asarray(source.states).shape[1] != scn.num_users:
            raise ContractError("dimension du plan ≠ nombre d'utilisateurs du scénario")
        plans = [source]
        env = TwinEnv(scn, horizon=len(source.actions) if horizon is None else horizon)
        state = env.reset(initial)
        states, acts, rewards = [state], [], []
        _run_actions(env, source.actions, states, acts, rewards)
    else:
        model = source
        if scn.num_users != model.user_count:
            raise ContractError(f"scénario à {scn.num_users} utilisateurs, modèle pour {model.user_count}")
        rng = rng if rng is not None else np.random.default_rng(0)
        label = label if label is not None else model.target_label(scn)
        horizon = model.window - 1 if horizon is None else horizon
        every = model.window - 1 if mode == "open-loop" else (replan_every or model.window - 1)
        every = max(1, min(every, model.window - 1))
        env = TwinEnv(scn, horizon=horizon)
        state = env.reset(initial)
        states, acts, rewards = [state], [], []
        plans = []
        while not env.done:
            plan = sample_plan(model, state, label, rng, w=None)
            plan.actions = decode_actions(model, plan.states, model.layout.env_features(scn))
            plans.append(plan)
            chunk = plan.actions if mode == "open-loop" else plan.actions[:every]
            before = env.t
            _run_actions(env, chunk, states, acts, rewards)
            state = states[-1]
            if mode == "open-loop" or env.t == before:
                break
    traj = Trajectory(scenario=scn, states=np.stack(states), actions=acts, rewards=np.asarray(rewards),
                      ret=math.fsum(rewards))
    return ExecutionResult(achieved_utility=utility(scn, states[-1]), trajectory=traj, plans=plans)


# ---------------------------------------------------------------------------
# Checkpoints et traces
# ---------------------------------------------------------------------------

def sidecar_path(path: Union[str, Path]) -> Path:
    return Path(path).with_suffix(".json")


def save(model: DiffusionModel, path: Union[str, Path]) -> Path:
    """Paquet nn_core (débruiteur + f_φ) et fiche JSON (planning, fenêtre, disposition, guidage)."""
    path = save_checkpoint(path, {"denoiser": model.denoiser, "inverse": model.inverse},
                           {"betas": model.schedule.betas})
    meta = {
        "schedule": model.schedule.kind, "steps": model.schedule.K, "window": model.window,
        "user_count": model.user_count, "p_max": model.p_max, "embed_dim": model.embed_dim,
        "condition": model.condition, "p_drop": model.p_drop, "guidance": model.guidance,
        "layout": model.layout.to_dict(),
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load(path: Union[str, Path]) -> DiffusionModel:
    path = Path(path)
    side = sidecar_path(path)
    if not side.is_file():
        raise MissingPrerequisiteError(side.name, "fiche JSON du modèle de diffusion absente")
    meta = json.loads(side.read_text(encoding="utf-8"))
    nets, arrays = load_checkpoint(path)
    schedule = NoiseSchedule(meta["schedule"], arrays["betas"])
    if schedule.K != meta["steps"]:
        raise ContractError("fiche et checkpoint incohérents (nombre d'étapes)")
    return DiffusionModel(schedule=schedule, denoiser=nets["denoiser"], inverse=nets["inverse"],
                          layout=LabelLayout.from_dict(meta["layout"]), user_count=meta["user_count"],
                          p_max=meta["p_max"], window=meta["window"], embed_dim=meta["embed_dim"],
                          condition=meta["condition"], p_drop=meta["p_drop"], guidance=meta["guidance"])


def trace_rows(plan: GeneratedPlan, p_max: int) -> List[dict]:
    """Lignes `step,slot,user,value` (puissance réelle) ; step 0 = bruit pur."""
    rows = []
    for step_idx, x in enumerate(plan.trace):
        real = denormalize_states(x, p_max)
        for slot in range(real.shape[0]):
            for user in range(real.shape[1]):
                rows.append({"step": step_idx, "slot": slot, "user": user, "value": repr(float(real[slot, user]))})
    return rows
