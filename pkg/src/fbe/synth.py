"""Seeded Gaussian-cluster benchmark with ID, near-OOD and far-OOD query sets.

Training rows are Gaussian around their class mean. A ``heavy_tail_frac``
share of the training entries (row, dimension pairs) is drawn with 4x the
spread; these are the extreme training features that per-dimension clamping
targets. Class means share a common positive offset, like post-ReLU features,
so directions carry the class identity after L2 normalization.

Near-OOD clusters sit ``near_shift`` spreads away from a class mean; far-OOD
rows come from a distribution shifted by ``far_shift`` spreads and twice as
wide.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .bank import FeatureBank, LinearHead, PathLike, save_bank, save_head

HEAVY_TAIL_SCALE = 4.0
RIDGE = 1e-6

_STREAMS = ("means", "train", "id_test", "near_ood", "far_ood")


@dataclass(frozen=True)
class SynthConfig:
    classes: int = 10
    dim: int = 128
    per_class: int = 200
    class_spread: float = 1.0
    near_shift: float = 3.0
    far_shift: float = 40.0
    heavy_tail_frac: float = 0.05
    seed: int = 0
    n_test: int = 1000
    # class means: offset + center_scale * N(0, I), in units of class_spread
    center_scale: float = 0.5
    offset: float = 3.0

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError(f"classes must be >= 2, got {self.classes}")
        if self.dim < 2:
            raise ValueError(f"dim must be >= 2, got {self.dim}")
        if self.per_class < 10:
            raise ValueError(f"per_class must be >= 10, got {self.per_class}")
        if not self.class_spread > 0:
            raise ValueError(f"class_spread must be positive, got {self.class_spread}")
        if not self.near_shift > 0:
            raise ValueError(f"near_shift must be positive, got {self.near_shift}")
        if not self.far_shift > self.near_shift:
            raise ValueError(
                f"far_shift ({self.far_shift}) must exceed near_shift ({self.near_shift})"
            )
        if not 0 <= self.heavy_tail_frac < 1:
            raise ValueError(f"heavy_tail_frac must lie in [0, 1), got {self.heavy_tail_frac}")
        if self.n_test < 1:
            raise ValueError(f"n_test must be positive, got {self.n_test}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        names = cls.__dataclass_fields__
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True, eq=False)
class SynthBenchmark:
    train: FeatureBank
    id_test: FeatureBank
    near_ood: FeatureBank
    far_ood: FeatureBank
    head: LinearHead
    config: SynthConfig


def _unit(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    v = rng.standard_normal((count, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def fit_linear_head(bank: FeatureBank, ridge: float = RIDGE) -> LinearHead:
    """Ridge least squares from features (plus bias) to one-hot labels."""
    if bank.labels is None:
        raise ValueError("fitting a head needs labels")
    x = np.hstack([bank.data.astype(np.float64), np.ones((bank.n, 1))])
    y = np.eye(bank.num_classes)[bank.labels]
    sol = np.linalg.solve(x.T @ x + ridge * np.eye(x.shape[1]), x.T @ y)
    return LinearHead(sol[:-1].T, sol[-1])


def generate(cfg: SynthConfig) -> SynthBenchmark:
    streams = dict(zip(_STREAMS, np.random.SeedSequence(cfg.seed).spawn(len(_STREAMS))))
    rng = {k: np.random.default_rng(s) for k, s in streams.items()}
    c, m, s = cfg.classes, cfg.dim, cfg.class_spread

    g = rng["means"]
    means = cfg.offset * s + cfg.center_scale * s * g.standard_normal((c, m))
    near_centers = means + cfg.near_shift * s * _unit(g, c, m)
    far_center = means.mean(axis=0) + cfg.far_shift * s * _unit(g, 1, m)[0]

    g = rng["train"]
    labels = np.repeat(np.arange(c), cfg.per_class)
    noise = s * g.standard_normal((labels.size, m))
    heavy = g.random((labels.size, m)) < cfg.heavy_tail_frac
    noise[heavy] *= HEAVY_TAIL_SCALE
    train = means[labels] + noise

    g = rng["id_test"]
    id_lab = g.integers(0, c, cfg.n_test)
    id_test = means[id_lab] + s * g.standard_normal((cfg.n_test, m))

    g = rng["near_ood"]
    near_lab = g.integers(0, c, cfg.n_test)
    near = near_centers[near_lab] + s * g.standard_normal((cfg.n_test, m))

    g = rng["far_ood"]
    far = far_center + 2.0 * s * g.standard_normal((cfg.n_test, m))

    train_bank = FeatureBank(train, labels)
    return SynthBenchmark(
        train=train_bank,
        id_test=FeatureBank(id_test),
        near_ood=FeatureBank(near),
        far_ood=FeatureBank(far),
        head=fit_linear_head(train_bank),
        config=cfg,
    )


def write_benchmark(bench: SynthBenchmark, outdir: PathLike) -> dict:
    """Write the four banks, the head and ``manifest.json``; return the manifest."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for name in ("train", "id_test", "near_ood", "far_ood"):
        fname = f"{name}.fbnk"
        save_bank(getattr(bench, name), out / fname)
        files[name] = fname
    save_head(bench.head, out / "head.fhed")
    files["head"] = "head.fhed"
    manifest = {"config": bench.config.to_dict(), "seed": bench.config.seed, "files": files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
