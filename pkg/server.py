from __future__ import annotations
import logging
import os
from pathlib import Path

import numpy as np
from flask import Flask, jsonify, request

from conception import diffuser
from conception.config import load_config, substream
from conception.conception_models import NetworkScenario
from conception.errors import ConfigError, ContractError, MissingPrerequisiteError, ReseauGenError
from conception.oracle import best_reference
from conception.pipeline import RunContext, reference_scenario
from conception.traj_store import metrics_rows
from conception.twin_env import default_horizon

log = logging.getLogger(__name__)

app = Flask(__name__)
app.config.setdefault('RESEAUGEN_CONFIG', os.environ.get('RESEAUGEN_CONFIG', 'configs/fixture_2users.json'))


def _context() -> RunContext:
    return RunContext.from_config(load_config(Path(app.config['RESEAUGEN_CONFIG'])))


def _error(e: Exception):
    if isinstance(e, MissingPrerequisiteError):
        status = 404
    elif isinstance(e, (ContractError, ConfigError)):
        status = 400
    else:
        status = 500
    log.warning("[SERVEUR] %s", e)
    return jsonify(success=False, error=str(e)), status


def _body() -> dict:
    data = request.get_json(silent=True)
    if not isinstance(data, dict):
        raise ContractError("corps JSON (objet) attendu")
    return data


@app.get('/health')
def health():
    return jsonify(success=True, status='ok')


# Optimum de référence pour un scénario fourni
@app.post('/oracle')
def oracle():
    try:
        data = _body()
        scn = NetworkScenario.from_dict(data.get('scenario', data))
        p, u, method = best_reference(scn, restarts=int(data.get('restarts', 16)))
        return jsonify(success=True, allocation=p.tolist(), utility=u, method=method)
    except (ReseauGenError, TypeError, ValueError) as e:
        return _error(e if isinstance(e, ReseauGenError) else ContractError(str(e)))


# Conception générée par le planificateur de diffusion entraîné
@app.post('/design')
def design():
    try:
        data = _body()
        ctx = _context()
        cfg = ctx.cfg
        count = int(data.get('user_count', cfg.active_user_counts[0]))
        path = ctx.require(ctx.diffusion_path(count), "lancez d'abord train-diffusion")
        model = diffuser.load(path)
        scn = NetworkScenario.from_dict(data['scenario']) if 'scenario' in data else reference_scenario(cfg, count)
        initial = np.asarray(data.get('initial', [0] * count), dtype=np.int64)
        label = model.target_label(scn, data.get('return_bucket'))
        seed = int(data.get('seed', 0))
        result = diffuser.execute_plan(model, scn, initial, mode='replan', replan_every=cfg.diffusion.replan_every,
                                       label=label, rng=substream(cfg.root_seed, 'eval', count, seed + 1),
                                       horizon=default_horizon(count, scn.p_max))
        traj = result.trajectory
        return jsonify(success=True, user_count=count, allocation=traj.states[-1].tolist(),
                       utility=result.achieved_utility, states=traj.states.tolist(),
                       actions=[[a.user, a.delta] for a in traj.actions], plans=len(result.plans))
    except (ReseauGenError, TypeError, ValueError) as e:
        return _error(e if isinstance(e, ReseauGenError) else ContractError(str(e)))


@app.get('/stats')
def stats():
    try:
        return jsonify(success=True, rows=metrics_rows(_context().open_dataset()))
    except ReseauGenError as e:
        return _error(e)


if __name__ == '__main__':
    # Lancement développement
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    port = int(os.environ.get('PORT', '5000'))
    app.run(host='127.0.0.1', port=port, debug=True)
