"""Regenerate the golden byte fixtures with plain struct packing.

Deliberately independent of the package writers so the round-trip tests
compare against bytes produced by a second implementation.
"""

import struct
from pathlib import Path

HERE = Path(__file__).parent

BANK = [[1.0, -2.5], [0.25, 3.0], [-0.0, 1e-3]]
LABELS = [0, 1, 1]
WEIGHTS = [[0.5, -1.0, 2.0], [1.5, 0.0, -0.25]]
BIAS = [0.125, -3.0]
MU = [0.5, -1.25, 4.0]
D_STAR = [1.0, 0.0, 2.5]
LAMBDA = 95.0


def bank_bytes(rows, labels=None):
    n, m = len(rows), len(rows[0])
    out = b"FBNK" + struct.pack("<I", 1) + struct.pack("<Q", n) + struct.pack("<I", m)
    out += bytes([1 if labels is not None else 0, 0, 0, 0])
    out += b"".join(struct.pack("<f", v) for row in rows for v in row)
    if labels is not None:
        out += b"".join(struct.pack("<i", v) for v in labels)
    return out


def head_bytes(weights, bias):
    c, m = len(weights), len(weights[0])
    out = b"FHED" + struct.pack("<III", 1, c, m)
    out += b"".join(struct.pack("<f", v) for row in weights for v in row)
    return out + b"".join(struct.pack("<f", v) for v in bias)


def boundary_bytes(mu, d_star, lam):
    out = b"FBDY" + struct.pack("<II", 1, len(mu)) + struct.pack("<d", lam)
    out += b"".join(struct.pack("<f", v) for v in mu)
    return out + b"".join(struct.pack("<f", v) for v in d_star)


if __name__ == "__main__":
    (HERE / "golden_labeled.fbnk").write_bytes(bank_bytes(BANK, LABELS))
    (HERE / "golden_unlabeled.fbnk").write_bytes(bank_bytes(BANK))
    (HERE / "golden.fhed").write_bytes(head_bytes(WEIGHTS, BIAS))
    (HERE / "golden.fbdy").write_bytes(boundary_bytes(MU, D_STAR, LAMBDA))
