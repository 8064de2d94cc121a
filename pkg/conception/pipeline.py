"""Orchestration reproductible : collecte (étape 1) → apprentissages hors ligne
(étape 2) → évaluation, statistiques et traces.

Usage :
    python -m conception.pipeline <verbe> --config configs/fixture_2users.json

Verbes : collect, train-diffusion, train-bcq, evaluate, oracle, stats, trace,
scenario, sample, ablate, pipeline.

Chaque verbe écrit ses artefacts dans `run_dir` et un manifeste
`manifest_<verbe>.json` (configuration, graines, sha256 des entrées et sorties,
sans horodatage).
"""
from __future__ import annotations
import csv
import hashlib
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from . import bcq as bcq_mod
from . import diffuser
from .conception_models import NetworkScenario
from .config import STREAMS, DiffusionSettings, ExperimentConfig, load_config, substream, substream_seed
from .errors import MissingPrerequisiteError, ReseauGenError, UnknownVerbError
from .oracle import best_reference
from .sac_collector import SacAgent, collect, feature_width, rollout
from .traj_store import TrajectoryFilter, TrajectoryStore, fit_layout, label_trajectories, metrics_rows
from .twin_env import default_horizon, dump_scenario, sample_scenario, utility, utility_batch

log = logging.getLogger(__name__)

REWARD_COLUMNS = ["method", "user_count", "best_reward", "mean_reward"]
CONVERGENCE_COLUMNS = ["method", "category", "env_interactions", "learns_from"]
STATS_COLUMNS = ["user_count", "size", "tq", "saco"]
ORACLE_COLUMNS = ["user_count", "method", "allocation", "utility"]
TRACE_COLUMNS = ["step", "slot", "user", "value"]
DIFFUSION_LOSS_COLUMNS = ["user_count", "heldout_before", "heldout_after", "inverse_loss", "train_size",
                          "holdout_size"]
ABLATION_COLUMNS = ["condition", "user_count", "best_reward", "mean_reward", "heldout_after"]

_INVERSE_BATCH = 256


@dataclass
class RunContext:
    cfg: ExperimentConfig
    run_dir: Path

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "RunContext":
        run_dir = Path(cfg.run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        return cls(cfg, run_dir)

    @property
    def dataset_path(self) -> Path:
        return self.run_dir / "dataset.jsonl"

    def sac_path(self, count: int) -> Path:
        return self.run_dir / f"sac_{count}.rgnn"

    def bcq_path(self, count: int) -> Path:
        return self.run_dir / f"bcq_{count}.rgnn"

    def diffusion_path(self, count: int) -> Path:
        return self.run_dir / f"diffusion_{count}.rgnn"

    def require(self, path: Path, hint: str) -> Path:
        if not path.is_file():
            raise MissingPrerequisiteError(path.name, hint)
        return path

    def open_dataset(self) -> TrajectoryStore:
        return TrajectoryStore.open(self.require(self.dataset_path, "lancez d'abord le verbe collect"))


# ---------------------------------------------------------------------------
# Scénarios
# ---------------------------------------------------------------------------

def training_scenario(cfg: ExperimentConfig, count: int, episode: int) -> NetworkScenario:
    return sample_scenario(cfg.scenario, count, substream_seed(cfg.root_seed, "env", count, episode))


def reference_scenario(cfg: ExperimentConfig, count: int) -> NetworkScenario:
    """Scénario d'évaluation figé pour un nombre d'utilisateurs."""
    return sample_scenario(cfg.scenario, count, substream_seed(cfg.root_seed, "eval", count))


def _write_csv(path: Path, columns: List[str], rows: List[Dict]) -> Path:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return path


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# Verbes
# ---------------------------------------------------------------------------

def run_collect(ctx: RunContext, **_) -> List[Path]:
    cfg = ctx.cfg
    trajectories, outputs = [], []
    for count in cfg.active_user_counts:
        template = training_scenario(cfg, count, 0)
        agent = SacAgent(feature_width(template), template.num_actions, cfg.sac, rng=substream(cfg.root_seed, "sac", count))
        log.info("[PIPELINE] Collecte SAC : %d utilisateurs, %d épisodes", count, cfg.sac.episodes)
        report = collect(agent, lambda ep, c=count: training_scenario(cfg, c, ep), cfg.sac.episodes,
                         substream(cfg.root_seed, "sac", count, 1), progress=cfg.progress)
        trajectories.extend(report.trajectories)
        outputs.append(agent.save(ctx.sac_path(count)))
    # déciles figés sur l'ensemble du lot, séparément par nombre d'utilisateurs
    layout = fit_layout(trajectories, user_counts=cfg.known_user_counts,
                        gain_range=(cfg.scenario.gain_low, cfg.scenario.gain_high))
    label_trajectories(trajectories, layout)
    store = TrajectoryStore.create(ctx.dataset_path, layout, overwrite=True)
    store.extend(trajectories)
    log.info("[STORE] %d trajectoires écrites dans %s", len(store), ctx.dataset_path)
    return [ctx.dataset_path, *outputs]


def _fit_diffusion(ctx: RunContext, store: TrajectoryStore, count: int,
                   settings: DiffusionSettings) -> Tuple[diffuser.DiffusionModel, diffuser.DiffusionReport, float]:
    """Débruiteur + f_φ sur les trajectoires à `count` utilisateurs, puis affinage de f_φ."""
    cfg = ctx.cfg
    flt = TrajectoryFilter(user_count=count)
    model = diffuser.DiffusionModel.build(store.layout, count, cfg.scenario.p_max, settings,
                                          rng=substream(cfg.root_seed, "diffusion", count))
    log.info("[PIPELINE] Diffusion (%s) : %d utilisateurs, %d pas", settings.condition, count, settings.train_steps)
    report = diffuser.train(model, store, flt, settings.train_steps,
                            substream(cfg.root_seed, "diffusion", count, 1), settings, progress=cfg.progress)
    inverse_loss = diffuser.fit_inverse(model, store.select(flt), settings.inverse_refine_steps,
                                        substream(cfg.root_seed, "diffusion", count, 2), lr=settings.lr,
                                        batch_size=_INVERSE_BATCH, max_grad_norm=settings.max_grad_norm)
    return model, report, inverse_loss


def run_train_diffusion(ctx: RunContext, **_) -> List[Path]:
    cfg = ctx.cfg
    store = ctx.open_dataset()
    outputs, rows = [], []
    for count in cfg.active_user_counts:
        model, report, inverse_loss = _fit_diffusion(ctx, store, count, cfg.diffusion)
        path = diffuser.save(model, ctx.diffusion_path(count))
        outputs += [path, diffuser.sidecar_path(path)]
        rows.append({"user_count": count, "heldout_before": _fmt(report.heldout_before),
                     "heldout_after": _fmt(report.heldout_after), "inverse_loss": _fmt(inverse_loss),
                     "train_size": report.train_size, "holdout_size": report.holdout_size})
    outputs.append(_write_csv(ctx.run_dir / "diffusion_losses.csv", DIFFUSION_LOSS_COLUMNS, rows))
    return outputs


def run_train_bcq(ctx: RunContext, **_) -> List[Path]:
    cfg = ctx.cfg
    store = ctx.open_dataset()
    outputs, rows = [], []
    for count in cfg.active_user_counts:
        flt = TrajectoryFilter(user_count=count)
        selected = store.select(flt)
        if not selected:
            raise MissingPrerequisiteError(f"trajectoires à {count} utilisateurs", "relancez collect avec ce compte")
        scn = selected[0].scenario
        agent = bcq_mod.BcqAgent(feature_width(scn), scn.num_actions, cfg.bcq,
                                 rng=substream(cfg.root_seed, "bcq", count))
        log.info("[PIPELINE] BCQ : %d utilisateurs, %d pas", count, cfg.bcq.steps)
        report = bcq_mod.train(agent, store, cfg.bcq.steps, substream(cfg.root_seed, "bcq", count, 1), flt,
                               progress=cfg.progress)
        outputs.append(agent.save(ctx.bcq_path(count)))
        rows.append({"user_count": count, "transitions": report.transitions,
                     "q_first": _fmt(report.first_losses.get("q", float("nan"))),
                     "q_last": _fmt(report.last_losses.get("q", float("nan"))),
                     "behavior_first": _fmt(report.first_losses.get("behavior", float("nan"))),
                     "behavior_last": _fmt(report.last_losses.get("behavior", float("nan")))})
    outputs.append(_write_csv(ctx.run_dir / "bcq_losses.csv",
                              ["user_count", "transitions", "q_first", "q_last", "behavior_first", "behavior_last"],
                              rows))
    return outputs


def _diffusion_runs(ctx: RunContext, model: diffuser.DiffusionModel, scn: NetworkScenario, count: int,
                    seeds: int) -> List[diffuser.ExecutionResult]:
    cfg = ctx.cfg
    label = model.target_label(scn, cfg.evaluation.target_bucket)
    initial = np.zeros(count, dtype=np.int64)
    return [diffuser.execute_plan(model, scn, initial, mode="replan", replan_every=cfg.diffusion.replan_every,
                                  label=label, rng=substream(cfg.root_seed, "eval", count, seed + 1),
                                  horizon=default_horizon(count, scn.p_max))
            for seed in range(seeds)]


def run_evaluate(ctx: RunContext, **_) -> List[Path]:
    cfg = ctx.cfg
    counts = cfg.active_user_counts
    trained = {m: [c for c in counts if path(c).is_file()]
               for m, path in (("sac", ctx.sac_path), ("bcq", ctx.bcq_path), ("diffusion", ctx.diffusion_path))}
    if not any(trained.values()):
        raise MissingPrerequisiteError("sac_<I>.rgnn, bcq_<I>.rgnn ou diffusion_<I>.rgnn",
                                       "lancez collect, train-bcq et train-diffusion")
    rewards, sac_interactions = [], 0
    for count in counts:
        scn = reference_scenario(cfg, count)
        p, u, method = best_reference(scn, cfg.evaluation.exhaustive_limit, cfg.evaluation.ascent_restarts,
                                      substream(cfg.root_seed, "eval", count, 0))
        log.info("[ORACLE] %d utilisateurs (%s) : %s → %.6f", count, method, p.tolist(), u)
        rewards.append({"method": "oracle", "user_count": count, "best_reward": _fmt(u), "mean_reward": _fmt(u)})
        if count in trained["sac"]:
            agent = SacAgent.load(ctx.sac_path(count), cfg.sac)
            sac_interactions += agent.interactions
            u_sac = utility(scn, rollout(agent, scn, mode="greedy").states[-1])
            rewards.append({"method": "sac", "user_count": count, "best_reward": _fmt(u_sac), "mean_reward": _fmt(u_sac)})
        if count in trained["bcq"]:
            agent = bcq_mod.BcqAgent.load(ctx.bcq_path(count), cfg.bcq)
            u_bcq = utility(scn, bcq_mod.greedy_rollout(agent, scn).states[-1])
            rewards.append({"method": "bcq", "user_count": count, "best_reward": _fmt(u_bcq), "mean_reward": _fmt(u_bcq)})
        if count in trained["diffusion"]:
            model = diffuser.load(ctx.diffusion_path(count))
            achieved = [r.achieved_utility for r in _diffusion_runs(ctx, model, scn, count, cfg.evaluation.seeds)]
            rewards.append({"method": "diffusion", "user_count": count, "best_reward": _fmt(max(achieved)),
                            "mean_reward": _fmt(float(np.mean(achieved)))})
    convergence = []
    if trained["sac"]:
        convergence.append({"method": "sac", "category": "online", "env_interactions": sac_interactions,
                            "learns_from": "environment"})
    for method in ("bcq", "diffusion"):
        if trained[method]:
            convergence.append({"method": method, "category": "offline", "env_interactions": 0,
                                "learns_from": "dataset"})
    return [_write_csv(ctx.run_dir / "table_rewards.csv", REWARD_COLUMNS, rewards),
            _write_csv(ctx.run_dir / "table_convergence.csv", CONVERGENCE_COLUMNS, convergence)]


def run_oracle(ctx: RunContext, **_) -> List[Path]:
    cfg = ctx.cfg
    rows = []
    for count in cfg.active_user_counts:
        scn = reference_scenario(cfg, count)
        p, u, method = best_reference(scn, cfg.evaluation.exhaustive_limit, cfg.evaluation.ascent_restarts,
                                      substream(cfg.root_seed, "eval", count, 0))
        rows.append({"user_count": count, "method": method, "allocation": " ".join(str(int(v)) for v in p),
                     "utility": _fmt(u)})
        print(f"{count},{method},{' '.join(str(int(v)) for v in p)},{u!r}")
    return [_write_csv(ctx.run_dir / "oracle.csv", ORACLE_COLUMNS, rows)]


def run_stats(ctx: RunContext, **_) -> List[Path]:
    rows = metrics_rows(ctx.open_dataset())
    writer = csv.DictWriter(sys.stdout, fieldnames=STATS_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return [_write_csv(ctx.run_dir / "stats.csv", STATS_COLUMNS, rows)]


def run_ablate(ctx: RunContext, **_) -> List[Path]:
    """Conditionnement par retour, par environnement ou les deux : même jeu, mêmes graines,
    modèles non sauvegardés ; une ligne par mode et par nombre d'utilisateurs."""
    cfg = ctx.cfg
    store = ctx.open_dataset()
    rows = []
    for count in cfg.active_user_counts:
        scn = reference_scenario(cfg, count)
        for mode in diffuser.CONDITION_MODES:
            settings = cfg.diffusion.model_copy(update={"condition": mode})
            model, report, _ = _fit_diffusion(ctx, store, count, settings)
            achieved = [r.achieved_utility for r in _diffusion_runs(ctx, model, scn, count, cfg.evaluation.seeds)]
            rows.append({"condition": mode, "user_count": count, "best_reward": _fmt(max(achieved)),
                         "mean_reward": _fmt(float(np.mean(achieved))), "heldout_after": _fmt(report.heldout_after)})
            log.info("[PIPELINE] Ablation %s (%d utilisateurs) : meilleure utilité %.6f", mode, count, max(achieved))
    return [_write_csv(ctx.run_dir / "table_ablation.csv", ABLATION_COLUMNS, rows)]


def _trace_count(cfg: ExperimentConfig) -> int:
    return 2 if 2 in cfg.active_user_counts else cfg.active_user_counts[0]


def run_trace(ctx: RunContext, **_) -> List[Path]:
    cfg = ctx.cfg
    count = _trace_count(cfg)
    path = ctx.require(ctx.diffusion_path(count), "lancez d'abord train-diffusion")
    model = diffuser.load(path)
    scn = reference_scenario(cfg, count)
    result = _diffusion_runs(ctx, model, scn, count, 1)[0]
    states = result.trajectory.states
    u = utility_batch(scn, states)
    columns = ["step", *[f"p_{i}" for i in range(count)], "utility"]
    rows = [{"step": t, **{f"p_{i}": int(s[i]) for i in range(count)}, "utility": _fmt(u[t])}
            for t, s in enumerate(states)]
    outputs = [_write_csv(ctx.run_dir / "trace_plan.csv", columns, rows)]
    if count == 2:
        levels = np.arange(scn.p_max + 1)
        grid = np.stack(np.meshgrid(levels, levels, indexing="ij"), axis=-1).reshape(-1, 2)
        surface = utility_batch(scn, grid)
        rows = [{"p_0": int(g[0]), "p_1": int(g[1]), "utility": _fmt(v)} for g, v in zip(grid, surface)]
        outputs.append(_write_csv(ctx.run_dir / "trace_surface.csv", ["p_0", "p_1", "utility"], rows))
    log.info("[PIPELINE] Trace : allocation finale %s, U = %.6f", states[-1].tolist(), result.achieved_utility)
    return outputs


def run_scenario(ctx: RunContext, **_) -> List[Path]:
    return [dump_scenario(reference_scenario(ctx.cfg, count), ctx.run_dir / "scenarios" / f"reference_{count}.json")
            for count in ctx.cfg.active_user_counts]


def run_sample(ctx: RunContext, user_count: Optional[int] = None, seed: int = 0,
               bucket: Optional[int] = None, **_) -> List[Path]:
    cfg = ctx.cfg
    count = user_count if user_count is not None else cfg.active_user_counts[0]
    model = diffuser.load(ctx.require(ctx.diffusion_path(count), "lancez d'abord train-diffusion"))
    scn = reference_scenario(cfg, count)
    label = model.target_label(scn, bucket if bucket is not None else cfg.evaluation.target_bucket)
    initial = np.zeros(count, dtype=np.int64)
    plan = diffuser.sample_plan(model, initial, label, substream(cfg.root_seed, "eval", count, seed + 1),
                                scenario=scn, record_trace=True)
    record = {"user_count": count, "seed": seed, "label": label.to_dict(), "initial": initial.tolist(),
              "states": plan.states.tolist(), "actions": [[a.user, a.delta] for a in plan.actions],
              "predicted_return": plan.predicted_return}
    plan_path = ctx.run_dir / f"sample_{count}.jsonl"
    plan_path.write_text(json.dumps(record, separators=(",", ":")) + "\n", encoding="utf-8")
    trace_path = _write_csv(ctx.run_dir / f"denoise_trace_{count}.csv", TRACE_COLUMNS,
                            diffuser.trace_rows(plan, model.p_max))
    return [plan_path, trace_path]


PIPELINE_ORDER = ("collect", "train-bcq", "train-diffusion", "evaluate", "stats", "trace")


def run_pipeline(ctx: RunContext, **options) -> List[Path]:
    outputs: List[Path] = []
    for verb in PIPELINE_ORDER:
        outputs += _run_verb(ctx, verb, **options)
    return outputs


VERBS: Dict[str, Callable[..., List[Path]]] = {
    "collect": run_collect,
    "train-diffusion": run_train_diffusion,
    "train-bcq": run_train_bcq,
    "evaluate": run_evaluate,
    "oracle": run_oracle,
    "stats": run_stats,
    "trace": run_trace,
    "scenario": run_scenario,
    "sample": run_sample,
    "ablate": run_ablate,
    "pipeline": run_pipeline,
}

# Artefacts lus par chaque verbe (hachés dans le manifeste s'ils existent)
_INPUTS = {
    "train-diffusion": ["dataset.jsonl"],
    "train-bcq": ["dataset.jsonl"],
    "stats": ["dataset.jsonl"],
    "ablate": ["dataset.jsonl"],
    "evaluate": ["sac_{}.rgnn", "bcq_{}.rgnn", "diffusion_{}.rgnn", "diffusion_{}.json"],
    "trace": ["diffusion_{}.rgnn", "diffusion_{}.json"],
    "sample": ["diffusion_{}.rgnn", "diffusion_{}.json"],
}


# ---------------------------------------------------------------------------
# Manifestes
# ---------------------------------------------------------------------------

def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hashes(ctx: RunContext, paths: List[Path]) -> Dict[str, str]:
    out = {}
    for p in sorted(set(Path(p) for p in paths)):
        try:
            name = p.resolve().relative_to(ctx.run_dir.resolve()).as_posix()
        except ValueError:
            name = p.as_posix()
        out[name] = sha256_file(p)
    return out


def write_manifest(ctx: RunContext, verb: str, inputs: List[Path], outputs: List[Path]) -> Path:
    """Manifeste sans horodatage ni chemin absolu : deux exécutions identiques donnent le même fichier."""
    snapshot = ctx.cfg.snapshot()
    snapshot.pop("run_dir", None)
    manifest = {
        "verb": verb,
        "config": snapshot,
        "seeds": {"root_seed": ctx.cfg.root_seed, "streams": dict(STREAMS)},
        "inputs": _hashes(ctx, inputs),
        "outputs": _hashes(ctx, outputs),
    }
    path = ctx.run_dir / f"manifest_{verb}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _existing_inputs(ctx: RunContext, verb: str) -> List[Path]:
    paths = []
    for pattern in _INPUTS.get(verb, []):
        for count in ctx.cfg.active_user_counts:
            p = ctx.run_dir / pattern.format(count)
            if p.is_file():
                paths.append(p)
    return paths


def _run_verb(ctx: RunContext, verb: str, **options) -> List[Path]:
    if verb not in VERBS:
        raise UnknownVerbError(f"verbe inconnu: {verb} (attendu: {', '.join(VERBS)})")
    inputs = _existing_inputs(ctx, verb)
    log.info("[PIPELINE] Verbe %s...", verb)
    outputs = VERBS[verb](ctx, **options)
    write_manifest(ctx, verb, inputs, outputs)
    return outputs


def run(config: Union[ExperimentConfig, str, Path], verb: str, **options) -> List[Path]:
    """Exécute un verbe ; renvoie la liste des artefacts écrits (manifeste non compris)."""
    if verb not in VERBS:
        raise UnknownVerbError(f"verbe inconnu: {verb} (attendu: {', '.join(VERBS)})")
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    return _run_verb(RunContext.from_config(cfg), verb, **options)


def _parse_cli_args(argv: Optional[List[str]] = None):
    import argparse
    ap = argparse.ArgumentParser(description="ReseauGen : génération de conceptions réseau par diffusion")
    ap.add_argument('verb', help=f"Verbe à exécuter ({', '.join(VERBS)})")
    ap.add_argument('--config', required=True, help="Fichier JSON de configuration d'expérience")
    ap.add_argument('--run-dir', default=None, help='Remplace run_dir de la configuration')
    ap.add_argument('--user-count', type=int, default=None, help="Nombre d'utilisateurs (verbe sample)")
    ap.add_argument('--seed', type=int, default=0, help="Indice de graine d'échantillonnage (verbe sample)")
    ap.add_argument('--bucket', type=int, default=None, help='Décile de retour visé (verbe sample)')
    ap.add_argument('--log-level', default='INFO', help='Niveau de journalisation (DEBUG, INFO, WARNING...)')
    return ap.parse_args(argv)


def main(argv: Optional[List[str]] = None):
    args = _parse_cli_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(message)s")
    try:
        cfg = load_config(args.config)
        if args.run_dir is not None:
            cfg = cfg.model_copy(update={"run_dir": args.run_dir})
        outputs = run(cfg, args.verb, user_count=args.user_count, seed=args.seed, bucket=args.bucket)
    except ReseauGenError as e:
        print(f"[ERREUR] {e}")
        sys.exit(1)
    print(f"[PIPELINE] {len(outputs)} artefacts écrits dans {cfg.run_dir}")


if __name__ == '__main__':
    main()
