"""Simulator for federated ensemble games with best-response dynamics."""

from . import datagen, game, harness, nnkernel, orchestrator
from .errors import FLGamesError

__version__ = "0.1.0"

__all__ = ["datagen", "game", "harness", "nnkernel", "orchestrator", "FLGamesError", "__version__"]
