"""
Exceptions du pipeline de découverte de points clés.

Les erreurs d'entrée dérivent de ValueError (comme partout ailleurs dans le
dépôt), les erreurs d'exécution numérique de RuntimeError.
"""


class ValidationError(ValueError):
    """Invariant d'entrée violé ; le message nomme la vérification en échec."""

    def __init__(self, check: str, message: str = ""):
        self.check = check
        text = f"[{check}] {message}" if message else f"[{check}] vérification échouée"
        super().__init__(text)


class ProjectionError(ValueError):
    """Profondeur homogène trop faible : point sur le plan caméra."""


class UnderdeterminedError(ValueError):
    """Moins de deux vues distinctes pour trianguler."""


class ConfigError(ValueError):
    """Configuration hors schéma."""


class NonFiniteError(RuntimeError):
    def __init__(self, op_name: str):
        self.op_name = op_name
        super().__init__(f"Valeur non finie (NaN/Inf) produite par l'opération '{op_name}'")


class DivergenceError(RuntimeError):
    def __init__(self, message: str, checkpoint_path=None):
        self.checkpoint_path = checkpoint_path
        super().__init__(message)


class EnvelopeError(RuntimeError):
    """Trajectoire hors du volume malgré les réductions d'amplitude."""
