"""Solveurs de référence pour l'objectif d'allocation de puissance.
exhaustive : optimum global sur toute la grille (garde-fou sur la taille).
coordinate_ascent : optimum local par recherche linéaire utilisateur par utilisateur, multi-départs.
Départage lexicographique partout.
"""
from __future__ import annotations
import logging
from typing import Optional, Tuple

import numpy as np

from .conception_models import NetworkScenario
from .errors import InstanceTooLargeError
from .twin_env import utility_batch, validate_allocation

log = logging.getLogger(__name__)

EXHAUSTIVE_LIMIT = 10_000_000
_CHUNK = 200_000


def grid_size(scn: NetworkScenario) -> int:
    return (scn.p_max + 1) ** scn.num_users


def exhaustive(scn: NetworkScenario, limit: int = EXHAUSTIVE_LIMIT) -> Tuple[np.ndarray, float]:
    """Parcourt la grille en ordre lexicographique (utilisateur 0 le plus significatif)."""
    total = grid_size(scn)
    if total > limit:
        raise InstanceTooLargeError(
            f"grille de {total} allocations > {limit}: utilisez coordinate_ascent")
    shape = (scn.p_max + 1,) * scn.num_users
    best_u = -np.inf
    best_idx = 0
    for start in range(0, total, _CHUNK):
        flat = np.arange(start, min(start + _CHUNK, total))
        P = np.stack(np.unravel_index(flat, shape), axis=1)
        u = utility_batch(scn, P)
        k = int(np.argmax(u))        # premier maximum = plus petit lexicographiquement
        if u[k] > best_u:
            best_u, best_idx = float(u[k]), int(flat[k])
    best = np.array(np.unravel_index(best_idx, shape), dtype=np.int64)
    log.debug("[ORACLE] exhaustif: %s → %.6f", best.tolist(), best_u)
    return best, best_u


def _line_search(scn: NetworkScenario, p: np.ndarray, i: int) -> Tuple[int, float, float]:
    """Meilleur niveau pour l'utilisateur i ; renvoie (niveau, U au meilleur, U au niveau courant),
    les deux utilités issues du même lot."""
    levels = np.arange(scn.p_max + 1)
    P = np.repeat(p[None, :], len(levels), axis=0)
    P[:, i] = levels
    u = utility_batch(scn, P)
    k = int(np.argmax(u))
    return int(levels[k]), float(u[k]), float(u[p[i]])


def _ascend(scn: NetworkScenario, start: np.ndarray) -> np.ndarray:
    p = start.copy()
    improved = True
    while improved:
        improved = False
        for i in range(scn.num_users):
            level, u_best, u_here = _line_search(scn, p, i)
            if u_best > u_here:
                p[i] = level
                improved = True
    return p


def coordinate_ascent(scn: NetworkScenario, start=None, restarts: int = 1,
                      rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, float]:
    """Meilleur de `restarts` montées : le départ donné puis des départs aléatoires."""
    if start is None:
        start = np.zeros(scn.num_users, dtype=np.int64)
    start = validate_allocation(scn, start)
    rng = rng if rng is not None else np.random.default_rng(0)
    best_p = _ascend(scn, start)
    best_u = float(utility_batch(scn, best_p[None, :])[0])
    for _ in range(max(restarts, 1) - 1):
        p = _ascend(scn, rng.integers(0, scn.p_max + 1, size=scn.num_users))
        u = float(utility_batch(scn, p[None, :])[0])
        if u > best_u or (u == best_u and tuple(p) < tuple(best_p)):
            best_p, best_u = p, u
    return best_p, best_u


def is_local_optimum(scn: NetworkScenario, p) -> bool:
    """Aucun changement de niveau d'un seul utilisateur n'améliore U."""
    p = validate_allocation(scn, p)
    for i in range(scn.num_users):
        _, u_best, u_here = _line_search(scn, p, i)
        if u_best > u_here:
            return False
    return True


def best_reference(scn: NetworkScenario, limit: int = EXHAUSTIVE_LIMIT, restarts: int = 16,
                   rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, float, str]:
    """Exhaustif si la garde le permet, sinon montée par coordonnées."""
    if grid_size(scn) <= limit:
        p, u = exhaustive(scn, limit)
        return p, u, "exhaustive"
    p, u = coordinate_ascent(scn, restarts=restarts, rng=rng)
    return p, u, "coordinate_ascent"
