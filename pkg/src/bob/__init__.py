"""Persona-consistent dialogue model built on a minimal autodiff core.

One encoder reads persona plus query, an autoregressive decoder drafts a
response, and a bidirectional decoder refines the draft against the persona.
The refinement decoder is additionally trained on entailed/contradicted
sentence pairs with an unlikelihood objective so it learns what a persona
rules out, not just what it suggests.
"""

from bob.model import BobModel, ModelConfig
from bob.objectives import TrainConfig

__all__ = ["BobModel", "ModelConfig", "TrainConfig"]
__version__ = "0.1.0"
