"""Feature banks and linear heads: validated containers plus file I/O.

Binary layouts (all little-endian)::

    bank  FBNK | u32 version=1 | u64 n | u32 m | u8 has_labels | 3 x 0x00
          | n*m float32 row-major | [n int32 labels]
    head  FHED | u32 version=1 | u32 c | u32 m | c*m float32 | c float32
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

PathLike = Union[str, Path]

BANK_MAGIC = b"FBNK"
HEAD_MAGIC = b"FHED"
FORMAT_VERSION = 1

_BANK_HEADER = struct.Struct("<4sIQIB3x")
_HEAD_HEADER = struct.Struct("<4sIII")


class BankFormatError(ValueError):
    """Raised when a bank/head file or array fails validation."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


def _check_finite(data: np.ndarray, what: str) -> None:
    bad = ~np.isfinite(data)
    if bad.any():
        idx = np.argwhere(bad)[0]
        if data.ndim == 2:
            raise BankFormatError(
                f"{what}: non-finite value {data[tuple(idx)]!r} at row {idx[0]}, column {idx[1]}"
            )
        raise BankFormatError(f"{what}: non-finite value {data[tuple(idx)]!r} at index {idx[0]}")


@dataclass(frozen=True, eq=False)
class FeatureBank:
    """An ``n x m`` float32 feature matrix with optional integer labels.

    Arrays are copied on construction and marked read-only.
    """

    data: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32)
        if data.ndim == 1:
            data = data.reshape(1, -1)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise BankFormatError(f"bank must be a non-empty 2-D matrix, got shape {data.shape}")
        _check_finite(data, "bank")
        object.__setattr__(self, "data", _frozen(data))
        if self.labels is not None:
            raw = np.asarray(self.labels)
            if raw.dtype.kind == "f":
                if not np.all(raw == np.round(raw)):
                    raise BankFormatError("labels must be integers")
            labels = raw.astype(np.int32)
            if labels.shape != (data.shape[0],):
                raise BankFormatError(
                    f"labels length {labels.shape} does not match n={data.shape[0]}"
                )
            if labels.min() < 0:
                raise BankFormatError(f"label {labels.min()} out of range (must be >= 0)")
            object.__setattr__(self, "labels", _frozen(labels))

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def m(self) -> int:
        return self.data.shape[1]

    @property
    def num_classes(self) -> int:
        return 0 if self.labels is None else int(self.labels.max()) + 1

    def with_data(self, data: np.ndarray) -> "FeatureBank":
        """New bank with replaced data and the same labels."""
        return FeatureBank(data, self.labels)

    def equals(self, other: "FeatureBank") -> bool:
        """Bitwise equality of data and labels."""
        if self.data.shape != other.data.shape:
            return False
        if self.data.tobytes() != other.data.tobytes():
            return False
        if (self.labels is None) != (other.labels is None):
            return False
        return self.labels is None or np.array_equal(self.labels, other.labels)


@dataclass(frozen=True, eq=False)
class LinearHead:
    """Linear classifier ``logits = W z + b`` with ``W`` of shape ``(c, m)``."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float32)
        b = np.array(self.bias, dtype=np.float32).reshape(-1)
        if w.ndim != 2:
            raise BankFormatError(f"head weights must be 2-D, got shape {w.shape}")
        if w.shape[0] < 2:
            raise BankFormatError(f"head needs at least 2 classes, got {w.shape[0]}")
        if b.shape != (w.shape[0],):
            raise BankFormatError(f"bias length {b.shape[0]} does not match c={w.shape[0]}")
        _check_finite(w, "head weights")
        _check_finite(b, "head bias")
        object.__setattr__(self, "weights", _frozen(w))
        object.__setattr__(self, "bias", _frozen(b))

    @property
    def c(self) -> int:
        return self.weights.shape[0]

    @property
    def m(self) -> int:
        return self.weights.shape[1]

    def logits(self, features: np.ndarray) -> np.ndarray:
        """Float64 logits for an ``(q, m)`` feature array."""
        z = np.asarray(features, dtype=np.float64)
        if z.ndim != 2 or z.shape[1] != self.m:
            raise ValueError(f"head expects feature dimension {self.m}, got shape {z.shape}")
        return z @ self.weights.astype(np.float64).T + self.bias.astype(np.float64)

    def equals(self, other: "LinearHead") -> bool:
        return (
            self.weights.shape == other.weights.shape
            and self.weights.tobytes() == other.weights.tobytes()
            and self.bias.tobytes() == other.bias.tobytes()
        )


# ---------------------------------------------------------------------------
# serialization


def bank_to_bytes(bank: FeatureBank) -> bytes:
    has_labels = bank.labels is not None
    parts = [
        _BANK_HEADER.pack(BANK_MAGIC, FORMAT_VERSION, bank.n, bank.m, int(has_labels)),
        bank.data.astype("<f4").tobytes(),
    ]
    if has_labels:
        parts.append(bank.labels.astype("<i4").tobytes())
    return b"".join(parts)


def bank_from_bytes(buf: bytes, num_classes: Optional[int] = None) -> FeatureBank:
    if len(buf) < _BANK_HEADER.size:
        raise BankFormatError("truncated bank header")
    magic, version, n, m, flag = _BANK_HEADER.unpack_from(buf)
    if magic != BANK_MAGIC:
        raise BankFormatError(f"bad magic {magic!r}, expected {BANK_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise BankFormatError(f"unsupported bank version {version}")
    if flag not in (0, 1):
        raise BankFormatError(f"bad labels flag {flag}")
    if buf[_BANK_HEADER.size - 3:_BANK_HEADER.size] != b"\x00\x00\x00":
        raise BankFormatError("reserved header bytes must be zero")
    if n < 1 or m < 1:
        raise BankFormatError(f"bank dimensions must be positive, got n={n}, m={m}")
    expected = _BANK_HEADER.size + 4 * n * m + (4 * n if flag else 0)
    if len(buf) != expected:
        raise BankFormatError(f"bank payload is {len(buf)} bytes, expected {expected}")
    off = _BANK_HEADER.size
    data = np.frombuffer(buf, dtype="<f4", count=n * m, offset=off).reshape(n, m)
    labels = None
    if flag:
        labels = np.frombuffer(buf, dtype="<i4", count=n, offset=off + 4 * n * m)
    bank = FeatureBank(data, labels)
    _check_label_range(bank, num_classes)
    return bank


def head_to_bytes(head: LinearHead) -> bytes:
    return b"".join([
        _HEAD_HEADER.pack(HEAD_MAGIC, FORMAT_VERSION, head.c, head.m),
        head.weights.astype("<f4").tobytes(),
        head.bias.astype("<f4").tobytes(),
    ])


def head_from_bytes(buf: bytes) -> LinearHead:
    if len(buf) < _HEAD_HEADER.size:
        raise BankFormatError("truncated head header")
    magic, version, c, m = _HEAD_HEADER.unpack_from(buf)
    if magic != HEAD_MAGIC:
        raise BankFormatError(f"bad magic {magic!r}, expected {HEAD_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise BankFormatError(f"unsupported head version {version}")
    expected = _HEAD_HEADER.size + 4 * (c * m + c)
    if len(buf) != expected:
        raise BankFormatError(f"head payload is {len(buf)} bytes, expected {expected}")
    off = _HEAD_HEADER.size
    w = np.frombuffer(buf, dtype="<f4", count=c * m, offset=off).reshape(c, m)
    b = np.frombuffer(buf, dtype="<f4", count=c, offset=off + 4 * c * m)
    return LinearHead(w, b)


def _check_label_range(bank: FeatureBank, num_classes: Optional[int]) -> None:
    if num_classes is not None and bank.labels is not None and bank.num_classes > num_classes:
        raise BankFormatError(
            f"label {bank.num_classes - 1} out of range for {num_classes} classes"
        )


def _read_csv(path: Path, labels: bool) -> FeatureBank:
    rows: list[list[float]] = []
    label_col: list[int] = []
    width = None
    with open(path, newline="") as fh:
        for lineno, record in enumerate(csv.reader(fh)):
            if not record or all(not cell.strip() for cell in record):
                continue
            if width is None:
                width = len(record)
            elif len(record) != width:
                raise BankFormatError(
                    f"{path}: row {len(rows)} has {len(record)} columns, expected {width}"
                )
            feats = record[:-1] if labels else record
            if not feats:
                raise BankFormatError(f"{path}: no feature columns in row {len(rows)}")
            values = []
            for col, cell in enumerate(feats):
                try:
                    v = float(cell)
                except ValueError:
                    raise BankFormatError(
                        f"{path}: cannot parse {cell!r} at row {len(rows)}, column {col}"
                    ) from None
                if not np.isfinite(v):
                    raise BankFormatError(
                        f"{path}: non-finite value {cell.strip()!r} at row {len(rows)}, column {col}"
                    )
                values.append(v)
            if labels:
                try:
                    label_col.append(int(record[-1]))
                except ValueError:
                    raise BankFormatError(
                        f"{path}: bad label {record[-1]!r} at row {len(rows)}"
                    ) from None
            rows.append(values)
    if not rows:
        raise BankFormatError(f"{path}: empty CSV")
    return FeatureBank(np.array(rows), np.array(label_col) if labels else None)


def load_bank(path: PathLike, format: str = "binary", labels: bool = False,
              num_classes: Optional[int] = None) -> FeatureBank:
    """Load a bank from ``path``.

    ``format`` is ``"binary"`` or ``"csv"``. For CSV, ``labels=True`` reads the
    final column as integer class labels. ``num_classes`` enables a range check
    on the labels.
    """
    path = Path(path)
    if format == "binary":
        bank = bank_from_bytes(path.read_bytes(), num_classes)
    elif format == "csv":
        bank = _read_csv(path, labels)
        _check_label_range(bank, num_classes)
    else:
        raise ValueError(f"unknown bank format {format!r}")
    return bank


def save_bank(bank: FeatureBank, path: PathLike) -> None:
    if not str(path):
        raise OSError("empty output path")
    Path(path).write_bytes(bank_to_bytes(bank))


def save_bank_csv(bank: FeatureBank, path: PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for i, row in enumerate(bank.data):
            cells = [repr(float(v)) for v in row]
            if bank.labels is not None:
                cells.append(str(int(bank.labels[i])))
            w.writerow(cells)


def load_head(path: PathLike) -> LinearHead:
    return head_from_bytes(Path(path).read_bytes())


def save_head(head: LinearHead, path: PathLike) -> None:
    if not str(path):
        raise OSError("empty output path")
    Path(path).write_bytes(head_to_bytes(head))


def sniff_format(path: PathLike) -> str:
    """Guess ``binary`` or ``csv`` from the first bytes of a file."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    return "binary" if head == BANK_MAGIC else "csv"


# ---------------------------------------------------------------------------
# summaries


def mean_vector(bank: FeatureBank) -> np.ndarray:
    """Column means, accumulated in float64."""
    return bank.data.astype(np.float64).mean(axis=0)


def l2_normalize(x: np.ndarray) -> np.ndarray:
    """Row-wise L2 normalization in float64. Zero rows stay zero."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def l2_normalize_rows(bank: FeatureBank) -> FeatureBank:
    return bank.with_data(l2_normalize(bank.data))
