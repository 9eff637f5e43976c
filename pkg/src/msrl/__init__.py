"""Multi-group self-paced relevance learning for group-based cross-modal triplet ranking."""

from .errors import MSRLError, ValidationError
from .trainer import VARIANTS, Trainer, TrainerConfig, train

__version__ = "0.1.0"

__all__ = ["MSRLError", "ValidationError", "VARIANTS", "Trainer", "TrainerConfig", "train", "__version__"]
