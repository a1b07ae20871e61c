"""Feature Bank Enhancement for distance-based OOD detection."""

__version__ = "0.1.0"

from .bank import FeatureBank, LinearHead, load_bank, load_head, save_bank, save_head
from .enhance import DeviationBoundaries, clamp_bank, enhance, fit_boundaries
from .metrics import auroc, evaluate, fpr_at_tpr
from .scores import ScoreSpec, score

__all__ = [
    "DeviationBoundaries",
    "FeatureBank",
    "LinearHead",
    "ScoreSpec",
    "auroc",
    "clamp_bank",
    "enhance",
    "evaluate",
    "fit_boundaries",
    "fpr_at_tpr",
    "load_bank",
    "load_head",
    "save_bank",
    "save_head",
    "score",
]
