"""Feature Bank Enhancement: per-dimension percentile boundaries and clamping.

Fitting works on the raw bank::

    mu      = column means
    D       = |z - mu|                 (deviation bank)
    d_star  = percentile(D, lam)       (per column, linear interpolation)

and clamping maps every entry into ``[mu - d_star, mu + d_star]``.

``mu`` and ``d_star`` are kept at float32 precision so that in-memory
boundaries and the on-disk ``FBDY`` file describe the same clamp. ``d_star``
is rounded *up* to the next float32, so at ``lam=100`` no entry is clipped.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bank import FeatureBank, PathLike, mean_vector

BOUNDARY_MAGIC = b"FBDY"
_BOUNDARY_HEADER = struct.Struct("<4sIId")


def _check_lambda(lam: float) -> float:
    lam = float(lam)
    if not 0.0 <= lam <= 100.0:
        raise ValueError(f"lambda must lie in [0, 100], got {lam}")
    return lam


def _transpose(x: np.ndarray, rows: int = 256) -> np.ndarray:
    """C-contiguous transpose, copied in row blocks (much faster than ``x.T.copy()``
    for tall matrices)."""
    out = np.empty((x.shape[1], x.shape[0]), dtype=x.dtype)
    for i in range(0, x.shape[0], rows):
        out[:, i:i + rows] = x[i:i + rows].T
    return out


def percentile_per_dim(dev: np.ndarray, lam: float) -> np.ndarray:
    """Linearly interpolated ``lam``-th percentile of each column.

    The order statistic is taken at fractional rank ``lam/100 * (n-1)`` of the
    ascending sort, so ``lam=0`` gives the column minimum and ``lam=100`` the
    maximum.
    """
    lam = _check_lambda(lam)
    dev = np.asarray(dev, dtype=np.float64)
    if dev.ndim == 1:
        dev = dev[:, None]
    n = dev.shape[0]
    if n < 1:
        raise ValueError("percentile of an empty column")
    rank = lam * (n - 1) / 100.0
    lo = int(np.floor(rank))
    hi = min(lo + 1, n - 1)
    frac = rank - lo
    # two order statistics per column: select on contiguous columns instead of
    # sorting, the upper neighbour is the minimum of the partitioned tail
    cols = _transpose(dev)
    cols.partition(lo, axis=1)
    a = cols[:, lo].copy()
    b = cols[:, hi:].min(axis=1) if hi > lo else a
    if frac == 0.0:
        return a
    out = a + (b - a) * frac
    return np.clip(out, a, b)


def deviation_bank(bank: FeatureBank, mu: np.ndarray) -> np.ndarray:
    """Absolute per-dimension deviations ``|z_ij - mu_j|`` in float64."""
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    if mu.shape[0] != bank.m:
        raise ValueError(f"mean vector has length {mu.shape[0]}, bank has m={bank.m}")
    return np.abs(bank.data.astype(np.float64) - mu)


def _ceil_f32(x: np.ndarray) -> np.ndarray:
    """Smallest float32 values >= x (elementwise), returned as float64."""
    x = np.asarray(x, dtype=np.float64)
    f = x.astype(np.float32)
    below = f.astype(np.float64) < x
    f[below] = np.nextafter(f[below], np.float32(np.inf))
    return f.astype(np.float64)


@dataclass(frozen=True, eq=False)
class DeviationBoundaries:
    mu: np.ndarray
    d_star: np.ndarray
    lam: float

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        d = np.asarray(self.d_star, dtype=np.float64).reshape(-1)
        if mu.shape != d.shape:
            raise ValueError(f"mu has length {mu.shape[0]} but d_star has {d.shape[0]}")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(d))):
            raise ValueError("boundaries must be finite")
        if np.any(d < 0):
            raise ValueError("d_star must be nonnegative")
        _check_lambda(self.lam)
        mu.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "d_star", d)
        object.__setattr__(self, "lam", float(self.lam))

    @property
    def m(self) -> int:
        return self.mu.shape[0]

    @property
    def lower(self) -> np.ndarray:
        return self.mu - self.d_star

    @property
    def upper(self) -> np.ndarray:
        return self.mu + self.d_star

    def to_bytes(self) -> bytes:
        return b"".join([
            _BOUNDARY_HEADER.pack(BOUNDARY_MAGIC, 1, self.m, self.lam),
            self.mu.astype("<f4").tobytes(),
            self.d_star.astype("<f4").tobytes(),
        ])

    @classmethod
    def from_bytes(cls, buf: bytes) -> "DeviationBoundaries":
        if len(buf) < _BOUNDARY_HEADER.size:
            raise ValueError("truncated boundaries header")
        magic, version, m, lam = _BOUNDARY_HEADER.unpack_from(buf)
        if magic != BOUNDARY_MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {BOUNDARY_MAGIC!r}")
        if version != 1:
            raise ValueError(f"unsupported boundaries version {version}")
        expected = _BOUNDARY_HEADER.size + 8 * m
        if len(buf) != expected:
            raise ValueError(f"boundaries payload is {len(buf)} bytes, expected {expected}")
        off = _BOUNDARY_HEADER.size
        mu = np.frombuffer(buf, dtype="<f4", count=m, offset=off)
        d = np.frombuffer(buf, dtype="<f4", count=m, offset=off + 4 * m)
        return cls(mu.astype(np.float64), d.astype(np.float64), lam)

    def equals(self, other: "DeviationBoundaries") -> bool:
        return (
            self.lam == other.lam
            and np.array_equal(self.mu, other.mu)
            and np.array_equal(self.d_star, other.d_star)
        )


def save_boundaries(b: DeviationBoundaries, path: PathLike) -> None:
    Path(path).write_bytes(b.to_bytes())


def load_boundaries(path: PathLike) -> DeviationBoundaries:
    return DeviationBoundaries.from_bytes(Path(path).read_bytes())


def fit_boundaries(bank: FeatureBank, lam: float) -> DeviationBoundaries:
    lam = _check_lambda(lam)
    mu = mean_vector(bank).astype(np.float32).astype(np.float64)
    d_star = _ceil_f32(percentile_per_dim(deviation_bank(bank, mu), lam))
    return DeviationBoundaries(mu, d_star, lam)


def _check_dims(bank: FeatureBank, b: DeviationBoundaries) -> None:
    if bank.m != b.m:
        raise ValueError(f"bank has m={bank.m} but boundaries have m={b.m}")


def clamp_bank(bank: FeatureBank, b: DeviationBoundaries) -> FeatureBank:
    _check_dims(bank, b)
    # test the same float64 deviation that fitting measured, so lam=100 never
    # clips; entries inside the band pass through untouched
    dev = bank.data.astype(np.float64)
    dev -= b.mu
    out = bank.data.copy()
    np.copyto(out, b.upper.astype(np.float32), where=dev > b.d_star)
    np.copyto(out, b.lower.astype(np.float32), where=dev < -b.d_star)
    return bank.with_data(out)


def clamp_counts(bank: FeatureBank, b: DeviationBoundaries) -> np.ndarray:
    """Per-dimension number of entries that ``clamp_bank`` would change."""
    return np.sum(clamp_bank(bank, b).data != bank.data, axis=0)


def enhance(bank: FeatureBank, lam: float) -> tuple[FeatureBank, DeviationBoundaries]:
    """Fit boundaries on ``bank`` and return the clamped bank with them."""
    b = fit_boundaries(bank, lam)
    return clamp_bank(bank, b), b
