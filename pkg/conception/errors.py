"""Exceptions nommées de ReseauGen.
Chaque classe dérive aussi de l'exception standard la plus proche, pour que
l'appelant puisse attraper l'une ou l'autre.
"""
from __future__ import annotations
from typing import Any, Dict, Optional


class ReseauGenError(Exception):
    """Base de toutes les erreurs du projet."""


class ContractError(ReseauGenError, ValueError):
    """Forme, plage ou disposition de label invalide."""


class UsageError(ReseauGenError, RuntimeError):
    """Appel dans un ordre invalide (ex: backward sans forward)."""


class TrainingDivergenceError(ReseauGenError, FloatingPointError):
    """Valeur non finie rencontrée pendant l'apprentissage."""

    def __init__(self, message: str, block: Optional[str] = None,
                 snapshot: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.block = block
        self.snapshot = snapshot or {}


class ConfigError(ReseauGenError, ValueError):
    """Configuration invalide (plage vide, champ inconnu...)."""


class InvariantViolation(ReseauGenError, ValueError):
    """Trajectoire rejetée : `check` nomme la vérification échouée."""

    def __init__(self, check: str, detail: str = ""):
        super().__init__(f"invariant '{check}' violé{': ' + detail if detail else ''}")
        self.check = check


class EmptyDatasetError(ReseauGenError, LookupError):
    """Sélection vide dans le jeu de trajectoires."""


class ConditionUnsatisfiableError(ReseauGenError, LookupError):
    """Aucun enregistrement ne satisfait le filtre."""

    def __init__(self, filter_description: str):
        super().__init__(f"aucune trajectoire ne satisfait le filtre: {filter_description}")
        self.filter_description = filter_description


class InstanceTooLargeError(ReseauGenError, ValueError):
    """Grille trop grande pour la recherche exhaustive."""


class MissingPrerequisiteError(ReseauGenError, FileNotFoundError):
    """Artefact requis absent du dossier d'expérience."""

    def __init__(self, artifact: str, hint: str = ""):
        super().__init__(f"artefact manquant: {artifact}{' (' + hint + ')' if hint else ''}")
        self.artifact = artifact


class UnknownVerbError(ReseauGenError, ValueError):
    """Verbe CLI inconnu."""
