"""Bottleneck-feature voice conversion with a mixture-of-logistics attention decoder."""
from .errors import (AcceptanceFailed, InvalidInput, MolVCError, NoPitch, PoisonedDecode, PoisonedTraining)

__version__ = "0.1.0"

__all__ = ["AcceptanceFailed", "InvalidInput", "MolVCError", "NoPitch", "PoisonedDecode", "PoisonedTraining",
           "__version__"]
