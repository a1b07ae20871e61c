"""AUROC and FPR-at-TPR for ID/OOD score sets.

Both follow the decision rule ``score >= threshold => ID``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .bank import FeatureBank, LinearHead
from .scores import ScoreSpec, score


@dataclass(frozen=True, eq=False)
class EvalSet:
    id_scores: np.ndarray
    ood_scores: np.ndarray

    def __post_init__(self):
        for name in ("id_scores", "ood_scores"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            if arr.size < 1:
                raise ValueError(f"{name} must be non-empty")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            object.__setattr__(self, name, arr)


def _as_evalset(id_scores, ood_scores=None) -> EvalSet:
    if isinstance(id_scores, EvalSet):
        return id_scores
    return EvalSet(id_scores, ood_scores)


def auroc(id_scores, ood_scores=None) -> float:
    """Probability that an ID score beats an OOD score, ties counting one half.

    Mann-Whitney U from midranks of the pooled scores.
    """
    e = _as_evalset(id_scores, ood_scores)
    p, q = e.id_scores.size, e.ood_scores.size
    ranks = rankdata(np.concatenate([e.id_scores, e.ood_scores]), method="average")
    u = ranks[:p].sum() - p * (p + 1) / 2.0
    return float(u / (p * q))


def tpr_threshold(id_scores: np.ndarray, tpr: float) -> float:
    """Largest attained ID score ``t`` with ``mean(id >= t) >= tpr``."""
    if not 0 < tpr <= 1:
        raise ValueError(f"tpr must lie in (0, 1], got {tpr}")
    desc = np.sort(np.asarray(id_scores, dtype=np.float64))[::-1]
    p = desc.size
    # smallest count c with c / p >= tpr
    fractions = np.arange(1, p + 1) / p
    c = int(np.argmax(fractions >= tpr)) + 1
    return float(desc[c - 1])


def fpr_at_tpr(id_scores, ood_scores=None, tpr: float = 0.95) -> float:
    e = _as_evalset(id_scores, ood_scores)
    tau = tpr_threshold(e.id_scores, tpr)
    return float(np.mean(e.ood_scores >= tau))


def evaluate(spec: ScoreSpec, bank: FeatureBank, id_queries: FeatureBank,
             ood_queries: FeatureBank, head: Optional[LinearHead] = None,
             react_bank: Optional[FeatureBank] = None) -> dict:
    """Score both query sets against ``bank`` and report AUROC / FPR95."""
    t0 = time.perf_counter()
    s_id = score(spec, bank, id_queries, head, react_bank).scores
    s_ood = score(spec, bank, ood_queries, head, react_bank).scores
    wall_ms = int(round((time.perf_counter() - t0) * 1000))
    e = EvalSet(s_id, s_ood)
    return {
        "score": spec.to_dict(),
        "auroc": auroc(e),
        "fpr95": fpr_at_tpr(e, tpr=0.95),
        "n_id": int(s_id.size),
        "n_ood": int(s_ood.size),
        "wall_ms": wall_ms,
    }
