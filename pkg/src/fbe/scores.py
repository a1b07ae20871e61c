"""OOD score functions. Higher score means more in-distribution.

Distance scores (knn, mahalanobis, nnguide) compare queries against a feature
bank; head scores (energy, msp, maxlogit) only need a :class:`LinearHead`.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from .bank import FeatureBank, LinearHead, l2_normalize
from .enhance import percentile_per_dim

KINDS = ("knn", "mahalanobis", "nnguide", "energy", "msp", "maxlogit")
BANK_KINDS = ("knn", "mahalanobis", "nnguide")
HEAD_KINDS = ("nnguide", "energy", "msp", "maxlogit")

# ~128 MiB of float64 per query chunk in the prefilter
_CHUNK_ELEMS = 1 << 24


@dataclass(frozen=True)
class ScoreSpec:
    kind: str
    k: Optional[int] = None
    temperature: float = 1.0
    react_percentile: Optional[float] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown score kind {self.kind!r}; choose from {', '.join(KINDS)}")
        if self.kind in ("knn", "nnguide"):
            if self.k is None or int(self.k) < 1:
                raise ValueError(f"{self.kind} needs a positive k, got {self.k}")
            object.__setattr__(self, "k", int(self.k))
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.react_percentile is not None and not 0 < self.react_percentile <= 100:
            raise ValueError(f"react_percentile must lie in (0, 100], got {self.react_percentile}")

    @property
    def needs_head(self) -> bool:
        return self.kind in HEAD_KINDS

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreSpec":
        return cls(**{k: d[k] for k in ("kind", "k", "temperature", "react_percentile") if k in d})


@dataclass(frozen=True, eq=False)
class ScoreBatch:
    scores: np.ndarray
    spec: ScoreSpec = field(default=None)

    def __len__(self):
        return len(self.scores)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "score"])
        for i, s in enumerate(self.scores):
            w.writerow([i, repr(float(s))])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({
            "score": None if self.spec is None else self.spec.to_dict(),
            "scores": [float(s) for s in self.scores],
        })


def _check_k(k: int, n: int) -> None:
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")


def _check_m(bank: FeatureBank, queries: FeatureBank) -> None:
    if bank.m != queries.m:
        raise ValueError(f"bank has m={bank.m} but queries have m={queries.m}")


def _chunks(q: int, n: int):
    step = max(1, _CHUNK_ELEMS // max(n, 1))
    for start in range(0, q, step):
        yield slice(start, min(q, start + step))


def kth_nearest_distance(bank: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """Exact Euclidean distance from each query to its k-th nearest bank row.

    A Gram-matrix estimate of the squared distances selects a candidate set
    that provably contains the k nearest rows; the final distances are then
    recomputed elementwise, so the result does not depend on BLAS blocking.
    """
    bank = np.ascontiguousarray(bank, dtype=np.float64)
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    _check_k(k, bank.shape[0])
    bb = np.sum(bank * bank, axis=1)
    scale = bb.max(initial=0.0)
    out = np.empty(queries.shape[0])
    for sl in _chunks(queries.shape[0], bank.shape[0]):
        qc = queries[sl]
        qq = np.sum(qc * qc, axis=1)
        approx = qq[:, None] + bb[None, :] - 2.0 * (qc @ bank.T)
        kth = np.partition(approx, k - 1, axis=1)[:, k - 1]
        margin = 1e-9 * (qq + scale + 1.0) * bank.shape[1]
        for r, i in enumerate(range(sl.start, sl.stop)):
            cand = np.flatnonzero(approx[r] <= kth[r] + margin[r])
            diff = bank[cand] - queries[i]
            d = np.sqrt(np.sum(diff * diff, axis=1))
            out[i] = np.partition(d, k - 1)[k - 1]
    return out


def topk_inner_mean(bank: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """Mean of the k largest inner products between each query and the bank rows."""
    bank = np.ascontiguousarray(bank, dtype=np.float64)
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    _check_k(k, bank.shape[0])
    bnorm = np.sqrt(np.sum(bank * bank, axis=1)).max(initial=0.0)
    out = np.empty(queries.shape[0])
    for sl in _chunks(queries.shape[0], bank.shape[0]):
        qc = queries[sl]
        qnorm = np.sqrt(np.sum(qc * qc, axis=1))
        approx = qc @ bank.T
        kth = -np.partition(-approx, k - 1, axis=1)[:, k - 1]
        margin = 1e-9 * (qnorm * bnorm + 1.0) * bank.shape[1]
        for r, i in enumerate(range(sl.start, sl.stop)):
            cand = np.flatnonzero(approx[r] >= kth[r] - margin[r])
            sims = np.sum(bank[cand] * queries[i], axis=1)
            top = np.sort(sims)[::-1][:k]
            out[i] = np.mean(top)
    return out


def knn_score(bank: FeatureBank, queries: FeatureBank, k: int) -> ScoreBatch:
    """Negative distance to the k-th nearest bank row, both sides L2-normalized."""
    _check_m(bank, queries)
    _check_k(k, bank.n)
    d = kth_nearest_distance(l2_normalize(bank.data), l2_normalize(queries.data), k)
    return ScoreBatch(-d, ScoreSpec("knn", k=k))


class MahalanobisModel:
    """Class means and shrunk pooled within-class covariance.

    ``cov = S + 1e-6 * tr(S) / m * I`` where ``S`` is the pooled scatter
    divided by the sample count.
    """

    shrinkage = 1e-6

    def __init__(self, bank: FeatureBank):
        if bank.labels is None:
            raise ValueError("mahalanobis scoring needs a labelled bank")
        z = bank.data.astype(np.float64)
        classes = np.unique(bank.labels)
        counts = np.array([np.sum(bank.labels == c) for c in classes])
        if counts.min() < 2:
            bad = classes[np.argmin(counts)]
            raise ValueError(f"class {bad} has {counts.min()} sample(s); need at least 2")
        self.classes = classes
        self.means = np.stack([z[bank.labels == c].mean(axis=0) for c in classes])
        centered = z - self.means[np.searchsorted(classes, bank.labels)]
        cov = centered.T @ centered / z.shape[0]
        m = z.shape[1]
        cov += self.shrinkage * np.trace(cov) / m * np.eye(m)
        try:
            self.chol = linalg.cholesky(cov, lower=True)
        except linalg.LinAlgError as exc:
            raise ValueError(f"pooled covariance is singular after shrinkage: {exc}") from None
        self.cov = cov

    def distances(self, queries: np.ndarray) -> np.ndarray:
        """Mahalanobis distance of each query to each class mean, shape (q, classes)."""
        q = np.asarray(queries, dtype=np.float64)
        out = np.empty((q.shape[0], len(self.classes)))
        for j, mu in enumerate(self.means):
            y = linalg.solve_triangular(self.chol, (q - mu).T, lower=True)
            out[:, j] = np.sqrt(np.sum(y * y, axis=0))
        return out


def mahalanobis_score(bank: FeatureBank, queries: FeatureBank) -> ScoreBatch:
    _check_m(bank, queries)
    model = MahalanobisModel(bank)
    return ScoreBatch(-model.distances(queries.data).min(axis=1), ScoreSpec("mahalanobis"))


def energy_from_logits(logits: np.ndarray, T: float = 1.0) -> np.ndarray:
    """``T * logsumexp(logits / T)`` along the last axis."""
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    return T * logsumexp(logits / T, axis=1)


def msp_from_logits(logits: np.ndarray) -> np.ndarray:
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    shifted = logits - logits.max(axis=1, keepdims=True)
    return 1.0 / np.sum(np.exp(shifted), axis=1)


def nnguide_confidence(bank: FeatureBank, head: LinearHead) -> np.ndarray:
    """Positive guidance weight per bank row: softplus of its T=1 energy score."""
    return np.logaddexp(0.0, energy_from_logits(head.logits(bank.data), 1.0))


def guided_score(bank: FeatureBank, confidence: np.ndarray, queries: FeatureBank,
                 k: int) -> np.ndarray:
    """Mean top-k inner product of normalized queries with confidence-scaled bank rows."""
    _check_m(bank, queries)
    _check_k(k, bank.n)
    confidence = np.asarray(confidence, dtype=np.float64).reshape(-1)
    if confidence.shape[0] != bank.n:
        raise ValueError(f"need {bank.n} confidences, got {confidence.shape[0]}")
    guided = l2_normalize(bank.data) * confidence[:, None]
    return topk_inner_mean(guided, l2_normalize(queries.data), k)


def nnguide_score(bank: FeatureBank, head: LinearHead, queries: FeatureBank, k: int) -> ScoreBatch:
    if head.m != bank.m:
        raise ValueError(f"head has m={head.m} but bank has m={bank.m}")
    s = guided_score(bank, nnguide_confidence(bank, head), queries, k)
    return ScoreBatch(s, ScoreSpec("nnguide", k=k))


def energy_score(head: LinearHead, queries: FeatureBank, T: float = 1.0) -> ScoreBatch:
    return ScoreBatch(energy_from_logits(head.logits(queries.data), T),
                      ScoreSpec("energy", temperature=T))


def msp_score(head: LinearHead, queries: FeatureBank) -> ScoreBatch:
    return ScoreBatch(msp_from_logits(head.logits(queries.data)), ScoreSpec("msp"))


def maxlogit_score(head: LinearHead, queries: FeatureBank) -> ScoreBatch:
    return ScoreBatch(head.logits(queries.data).max(axis=1), ScoreSpec("maxlogit"))


def react_threshold(bank: FeatureBank, p: float) -> float:
    """Global ``p``-th percentile over every entry of the bank."""
    if not 0 < p <= 100:
        raise ValueError(f"react percentile must lie in (0, 100], got {p}")
    return float(percentile_per_dim(bank.data.reshape(-1), p)[0])


def react_clip(queries: FeatureBank, bank: FeatureBank, p: float,
               threshold: Optional[float] = None) -> FeatureBank:
    """Clip every query entry from above at the bank's global ``p``-th percentile."""
    tau = react_threshold(bank, p) if threshold is None else threshold
    z = queries.data.astype(np.float64)
    return queries.with_data(np.minimum(z, tau).astype(np.float32))


def score(spec: ScoreSpec, bank: FeatureBank, queries: FeatureBank,
          head: Optional[LinearHead] = None, react_bank: Optional[FeatureBank] = None) -> ScoreBatch:
    """Dispatch on ``spec.kind``.

    With ``spec.react_percentile`` set, queries are first clipped at the global
    percentile of ``react_bank`` (defaults to ``bank``).
    """
    if spec.needs_head and head is None:
        raise ValueError(f"{spec.kind} scoring needs a linear head")
    _check_m(bank, queries)
    if spec.react_percentile is not None:
        queries = react_clip(queries, react_bank if react_bank is not None else bank,
                             spec.react_percentile)
    if spec.kind == "knn":
        s = knn_score(bank, queries, spec.k).scores
    elif spec.kind == "mahalanobis":
        s = mahalanobis_score(bank, queries).scores
    elif spec.kind == "nnguide":
        s = nnguide_score(bank, head, queries, spec.k).scores
    elif spec.kind == "energy":
        s = energy_score(head, queries, spec.temperature).scores
    elif spec.kind == "msp":
        s = msp_score(head, queries).scores
    else:
        s = maxlogit_score(head, queries).scores
    return ScoreBatch(s, spec)
