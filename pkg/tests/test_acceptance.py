"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the summary lines
inline (they are printed with capture disabled either way).
"""

import itertools
import math
import time
from pathlib import Path

import numpy as np
import pytest

from fbe.bank import (
    FeatureBank,
    LinearHead,
    bank_from_bytes,
    bank_to_bytes,
    head_from_bytes,
    head_to_bytes,
    load_bank,
    load_head,
    save_bank,
    save_head,
)
from fbe.enhance import (
    DeviationBoundaries,
    clamp_bank,
    deviation_bank,
    enhance,
    fit_boundaries,
    load_boundaries,
    save_boundaries,
)
from fbe.metrics import auroc, fpr_at_tpr
from fbe.scores import knn_score
from fbe.synth import SynthConfig, generate
from fbe.theory import EsnParams, SimConfig, prob_pair, sample_clamped_normal, sample_esn

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}")
    return emit


def _elapsed(t0):
    return time.perf_counter() - t0


# -- 1: FBE algebra -----------------------------------------------------------

def _random_bank(rng, relu=False):
    n, m = int(rng.integers(2, 501)), int(rng.integers(1, 65))
    if relu:
        # post-ReLU style: many exact zeros, hence tied deviations
        x = np.maximum(rng.standard_normal((n, m)), 0) * rng.uniform(0.1, 20, m)
    elif rng.random() < 0.5:
        x = rng.standard_normal((n, m))
    else:
        x = rng.standard_t(2, (n, m))
    return FeatureBank(x * rng.uniform(0.01, 100) + rng.uniform(-50, 50, m))


def _algebra_failures(bank, rng):
    """Violated properties; retention ones are prefixed so tied banks can be told apart."""
    fails = []
    z = bank.data.astype(np.float64)
    lams = np.sort(rng.uniform(0, 100, 5))
    prev_dist = None
    for lam in lams:
        out, b = enhance(bank, lam)
        o = out.data.astype(np.float64)
        tol = 1e-6 * np.maximum(np.abs(b.mu) + b.d_star, 1e-30)
        if np.any(o < b.lower - tol) or np.any(o > b.upper + tol):
            fails.append(f"containment lam={lam}")
        if not clamp_bank(out, b).equals(out):
            fails.append(f"idempotence lam={lam}")
        dist = np.abs(o - z)
        if prev_dist is not None and np.any(dist > prev_dist):
            fails.append(f"monotone lam={lam}")
        prev_dist = dist
        kept = np.mean(deviation_bank(bank, b.mu) <= b.d_star, axis=0)
        if np.any(np.abs(kept - lam / 100) > 1 / bank.n):
            fails.append(f"retention lam={lam}")
        # equivariance under a positive affine map of the features
        a, c = rng.uniform(0.1, 10), rng.uniform(-100, 100, bank.m)
        moved, _ = enhance(bank.with_data(a * z + c), lam)
        expect = a * o + c
        scale = np.max(np.abs(expect)) + 1e-30
        if np.max(np.abs(moved.data - expect)) > 1e-6 * scale:
            fails.append(f"equivariance lam={lam}")
    if not enhance(bank, 100)[0].equals(bank):
        fails.append("identity at 100")
    return fails


def test_criterion_1_fbe_algebra(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    failures = []
    for i in range(100):
        failures += [f"bank {i}: {f}" for f in _algebra_failures(_random_bank(rng), rng)]
    # extra banks with ties: a tied column cannot meet the 1/n retention bound
    # (a constant column keeps everything at any lambda), so only the other
    # properties are enforced there and the retention misses are reported
    tied_retention = 0
    for i in range(30):
        for f in _algebra_failures(_random_bank(rng, relu=True), rng):
            if f.startswith("retention"):
                tied_retention += 1
            else:
                failures.append(f"tied bank {i}: {f}")
    dt = _elapsed(t0)
    ok = not failures and dt < 30
    report(1, ok, f"100 continuous + 30 tied banks, {len(failures)} violations, "
           f"{tied_retention} retention misses on tied banks (not enforced), {dt:.1f}s"
           + (f" first={failures[0]}" if failures else ""))
    assert ok


# -- 2: oracle equivalence ------------------------------------------------------

def _brute_knn(bank, queries, k):
    def norm(x):
        x = np.asarray(x, dtype=np.float64)
        n = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
        return np.divide(x, n, out=np.zeros_like(x), where=n > 0)
    b, q = norm(bank), norm(queries)
    out = []
    for row in q:
        diff = b - row
        out.append(-np.sort(np.sqrt(np.sum(diff * diff, axis=1)))[k - 1])
    return np.array(out)


def _pairwise_auroc(a, b):
    gt = (a[:, None] > b[None, :]).sum()
    eq = (a[:, None] == b[None, :]).sum()
    return (gt + 0.5 * eq) / (a.size * b.size)


def _exhaustive_fpr(a, b, tpr):
    feasible = [t for t in np.concatenate([a, b]) if np.mean(a >= t) >= tpr]
    return np.mean(b >= max(feasible))


def test_criterion_2_oracle_equivalence(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    knn_bad = 0
    for _ in range(50):
        n, m = int(rng.integers(1, 201)), int(rng.integers(1, 40))
        bank = FeatureBank(rng.standard_normal((n, m)))
        if rng.random() < 0.3:
            bank = FeatureBank(np.repeat(bank.data[: max(1, n // 3)], 3, axis=0)[:n])
        queries = FeatureBank(rng.standard_normal((int(rng.integers(1, 30)), m)))
        k = int(rng.integers(1, bank.n + 1))
        ours = knn_score(bank, queries, k).scores
        knn_bad += not np.array_equal(ours, _brute_knn(bank.data, queries.data, k))
    au_bad = fpr_bad = 0
    for i in range(100):
        p, q = rng.integers(1, 200, 2)
        if i % 2:
            a, b = rng.integers(0, 10, p).astype(float), rng.integers(0, 10, q).astype(float)
        else:
            a, b = rng.normal(0.5, 1, p), rng.normal(0, 1, q)
        au_bad += abs(auroc(a, b) - _pairwise_auroc(a, b)) > 1e-12
        tpr = float(rng.choice([0.95, rng.uniform(0.01, 1)]))
        fpr_bad += fpr_at_tpr(a, b, tpr) != _exhaustive_fpr(a, b, tpr)
    dt = _elapsed(t0)
    ok = knn_bad == 0 and au_bad == 0 and fpr_bad == 0 and dt < 30
    report(2, ok, f"knn mismatches {knn_bad}/50, auroc {au_bad}/100, fpr {fpr_bad}/100, {dt:.1f}s")
    assert ok


# -- 3: simulation sign property ---------------------------------------------------

def test_criterion_3_simulation_sign_property(report):
    t0 = time.perf_counter()
    rows = []
    for m in (1, 16, 64, 512):
        cfg = SimConfig(sigma_in=1.0, clamp=1.96, dim=m, trials=100_000, seed=0, grid=())
        for eps, s_out in itertools.product((-0.8, -0.5, -0.2), (1.5, 2.0, 2.5, 3.0)):
            rows.append((m, prob_pair(cfg, s_out, eps)))
    dt = _elapsed(t0)
    passed = [r["delta"] > 3 * r["stderr"] for _, r in rows]
    binom = [r["delta"] > 3 * max(r["se_base"], r["se_fbe"]) for _, r in rows]
    per_m = {m: sum(p for (mm, _), p in zip(rows, passed) if mm == m) for m in (1, 16, 64, 512)}
    saturated = sum(r["p_base"] == 1.0 and r["p_fbe"] == 1.0 for _, r in rows)
    ok = all(passed) and dt < 180
    report(3, ok, f"{sum(passed)}/48 grid points with delta > 3*stderr "
           f"(per m of 12: {per_m}); {sum(binom)}/48 against the single-proportion "
           f"binomial stderr; {saturated} points saturated at p_base=p_fbe=1; {dt:.0f}s")
    assert ok


# -- 4: distribution models ------------------------------------------------------

def test_criterion_4_distribution_models(report):
    t0 = time.perf_counter()
    n = 400_000
    checks = []
    for i, eps in enumerate((-0.8, -0.5, -0.2, 0.3, 0.7)):
        x = sample_esn(EsnParams(0.5, 1.5, eps), n, seed=i)
        p = (1 + eps) / 2
        checks.append(abs(np.mean(x < 0.5) - p) <= 5 * math.sqrt(p * (1 - p) / n))
    x = sample_esn(EsnParams(0.5, 1.5, 0.0), n, seed=10)
    checks.append(abs(x.mean() - 0.5) <= 5 * 1.5 / math.sqrt(n))
    checks.append(abs(x.var() - 2.25) <= 5 * 2.25 * math.sqrt(2 / n))
    c = sample_clamped_normal(0.0, 1.0, 1.96, n, seed=11)
    frac = np.mean(np.abs(c) == 1.96)
    checks.append(np.all(np.abs(c) <= 1.96)
                  and abs(frac - 0.05) <= 5 * math.sqrt(0.05 * 0.95 / n))
    dt = _elapsed(t0)
    ok = all(checks) and dt < 30
    report(4, ok, f"{sum(checks)}/{len(checks)} checks, clipped fraction {frac:.4f}, {dt:.1f}s")
    assert ok


# -- 5 and 6: synthetic benchmark ---------------------------------------------------

K = 10
LAMBDA = 90.0
SEEDS = range(20)


@pytest.fixture(scope="module")
def benchmarks():
    return [generate(SynthConfig(seed=s, heavy_tail_frac=0.05)) for s in SEEDS]


def _knn_auroc(bank, bench, ood):
    return auroc(knn_score(bank, bench.id_test, K).scores, knn_score(bank, ood, K).scores)


def test_criterion_5_synthetic_near_far(report, benchmarks):
    t0 = time.perf_counter()
    near_ok = far_ok = 0
    gains = []
    for bench in benchmarks:
        enhanced, _ = enhance(bench.train, LAMBDA)
        nb, nf = _knn_auroc(bench.train, bench, bench.near_ood), _knn_auroc(enhanced, bench, bench.near_ood)
        fb, ff = _knn_auroc(bench.train, bench, bench.far_ood), _knn_auroc(enhanced, bench, bench.far_ood)
        near_ok += nf >= nb
        far_ok += abs(ff - fb) <= 0.005
        gains.append(nf - nb)
    dt = _elapsed(t0)
    ok = near_ok >= 15 and far_ok >= 15 and dt < 300
    report(5, ok, f"near-OOD FBE >= base in {near_ok}/20 (median gain {np.median(gains):+.4f}); "
           f"far-OOD within 0.005 in {far_ok}/20; {dt:.0f}s")
    assert ok


def test_criterion_6_lambda_sweep_shape(report, benchmarks):
    t0 = time.perf_counter()
    good = 0
    best_lams = []
    for bench in benchmarks:
        curve = {lam: _knn_auroc(enhance(bench.train, lam)[0], bench, bench.near_ood)
                 for lam in range(5, 101, 5)}
        inner = {lam: a for lam, a in curve.items() if lam <= 95}
        best = max(inner, key=inner.get)
        best_lams.append(best)
        good += inner[best] > curve[100] and inner[best] > curve[5]
    dt = _elapsed(t0)
    ok = good >= 15 and dt < 300
    report(6, ok, f"interior maximum in {good}/20 seeds (median best lambda "
           f"{np.median(best_lams):g}); {dt:.0f}s")
    assert ok


# -- 7: overhead -------------------------------------------------------------------

def test_criterion_7_overhead(report):
    rng = np.random.default_rng(0)
    bank = FeatureBank(np.maximum(rng.standard_normal((100_000, 512), dtype=np.float32), 0))
    queries = FeatureBank(np.maximum(rng.standard_normal((10_000, 512), dtype=np.float32), 0))
    t0 = time.perf_counter()
    knn_score(bank, queries, 50)
    score_s = _elapsed(t0)
    t0 = time.perf_counter()
    b = fit_boundaries(bank, 90)
    clamp_bank(bank, b)
    fbe_s = _elapsed(t0)
    ratio = fbe_s / score_s
    report(7, ratio < 0.10, f"fit+apply {fbe_s:.2f}s vs knn scoring {score_s:.2f}s "
           f"= {100 * ratio:.1f}% (machine-relative, reported only)")


# -- 8: formats ---------------------------------------------------------------------

GOLDEN_BANK = [[1.0, -2.5], [0.25, 3.0], [-0.0, 1e-3]]


def test_criterion_8_format_round_trips(report, tmp_path):
    rng = np.random.default_rng(8)
    checks = {}
    trips = []
    for i in range(20):
        n, m = rng.integers(1, 300), rng.integers(1, 70)
        labels = rng.integers(0, 5, n) if i % 2 else None
        bank = FeatureBank(rng.standard_normal((n, m)) * 10 ** rng.uniform(-30, 30), labels)
        save_bank(bank, tmp_path / "b")
        c = int(rng.integers(2, 9))
        head = LinearHead(rng.standard_normal((c, m)), rng.standard_normal(c))
        save_head(head, tmp_path / "h")
        bnd = fit_boundaries(bank, rng.uniform(0, 100))
        save_boundaries(bnd, tmp_path / "d")
        trips.append(load_bank(tmp_path / "b").equals(bank)
                     and bank_to_bytes(bank_from_bytes(bank_to_bytes(bank))) == bank_to_bytes(bank)
                     and load_head(tmp_path / "h").equals(head)
                     and head_to_bytes(head_from_bytes(head_to_bytes(head))) == head_to_bytes(head)
                     and load_boundaries(tmp_path / "d").equals(bnd))
    checks["round trips"] = all(trips)

    labeled = FeatureBank(GOLDEN_BANK, [0, 1, 1])
    checks["bank golden"] = (bank_to_bytes(labeled) == (FIXTURES / "golden_labeled.fbnk").read_bytes()
                             and load_bank(FIXTURES / "golden_labeled.fbnk").equals(labeled))
    plain = FeatureBank(GOLDEN_BANK)
    checks["unlabeled golden"] = (
        bank_to_bytes(plain) == (FIXTURES / "golden_unlabeled.fbnk").read_bytes()
        and load_bank(FIXTURES / "golden_unlabeled.fbnk").equals(plain))
    head = LinearHead([[0.5, -1.0, 2.0], [1.5, 0.0, -0.25]], [0.125, -3.0])
    checks["head golden"] = (head_to_bytes(head) == (FIXTURES / "golden.fhed").read_bytes()
                             and load_head(FIXTURES / "golden.fhed").equals(head))
    bnd = DeviationBoundaries([0.5, -1.25, 4.0], [1.0, 0.0, 2.5], 95.0)
    checks["boundaries golden"] = (bnd.to_bytes() == (FIXTURES / "golden.fbdy").read_bytes()
                                   and load_boundaries(FIXTURES / "golden.fbdy").equals(bnd))
    ok = all(checks.values())
    report(8, ok, ", ".join(f"{k}={'ok' if v else 'FAIL'}" for k, v in checks.items()))
    assert ok
