"""``fbe`` command line: fit, apply, eval, sweep, simulate, synth.

Settings are resolved as defaults < ``--config`` JSON file < flags. A config
file may be flat or hold one section per command name. Exit codes: 0 on
success, 1 for runtime/data errors, 2 for usage/config errors.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import io
import json
import logging
import math
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .bank import BankFormatError, FeatureBank, load_bank, load_head, save_bank, sniff_format
from .enhance import clamp_bank, clamp_counts, fit_boundaries, load_boundaries, save_boundaries
from .metrics import EvalSet, auroc, fpr_at_tpr
from .scores import KINDS, ScoreBatch, ScoreSpec, react_clip, react_threshold, score
from .synth import SynthConfig, generate, write_benchmark
from .theory import (
    DEFAULT_EPSILONS,
    DEFAULT_SIGMAS,
    SimConfig,
    surface_to_csv,
    surface_to_json,
    sweep_surface,
)

log = logging.getLogger("fbe")

MIN_TRIALS_WARN = 1000


class UsageError(Exception):
    pass


@contextlib.contextmanager
def as_usage_error():
    try:
        yield
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# settings


def _config_section(path: Optional[str], command: str) -> dict:
    if not path:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise UsageError("config file must hold a JSON object")
    section = raw.get(command, raw)
    out = {}
    for k, v in section.items():
        if isinstance(v, dict):
            continue
        k = k.replace("-", "_")
        out["lam" if k == "lambda" else k] = v
    return out


def resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Merge defaults, config-file values and explicit flags (in that order)."""
    settings = dict(defaults)
    settings.update({k: v for k, v in _config_section(args.config, args.command).items()
                     if k in defaults})
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            settings[k] = v
    return settings


def _require(settings: dict, *keys: str) -> None:
    missing = [k for k in keys if settings.get(k) in (None, "")]
    if missing:
        flags = ", ".join("--" + ("lambda" if k == "lam" else k.replace("_", "-")) for k in missing)
        raise UsageError(f"missing required setting(s): {flags}")


def _float_list(value) -> list[float]:
    if value is None:
        return []
    if isinstance(value, str):
        parts = [p for p in value.replace(" ", "").split(",") if p]
        try:
            return [float(p) for p in parts]
        except ValueError:
            raise UsageError(f"cannot parse number list {value!r}") from None
    return [float(v) for v in value]


def _check_lambda(lam) -> float:
    lam = float(lam)
    if not 0.0 <= lam <= 100.0:
        raise UsageError(f"--lambda must lie in [0, 100], got {lam}")
    return lam


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _inputs(**paths) -> dict:
    return {name: {"path": str(p), "sha256": file_digest(p)}
            for name, p in paths.items() if p}


def _load(path, fmt=None, labels=False) -> FeatureBank:
    fmt = fmt or sniff_format(_existing(path))
    return load_bank(path, fmt, labels=labels)


def _write_text(path: Optional[str], text: str) -> None:
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def _report_header(command: str, settings: dict) -> dict:
    config = {("lambda" if k == "lam" else k): v for k, v in settings.items()}
    return {"tool": "fbe", "version": __version__, "command": command, "config": config}


def _existing(path) -> str:
    if not Path(path).is_file():
        raise UsageError(f"input file not found: {path}")
    return path


def _ms(t0: float) -> int:
    return int(round((time.perf_counter() - t0) * 1000))


# ---------------------------------------------------------------------------
# commands

FIT_DEFAULTS = {"bank": None, "format": None, "labels": False, "lam": None, "out": None}


def cmd_fit(args) -> int:
    s = resolve(args, FIT_DEFAULTS)
    _require(s, "bank", "lam", "out")
    lam = _check_lambda(s["lam"])
    bank = _load(s["bank"], s["format"], s["labels"])
    t0 = time.perf_counter()
    b = fit_boundaries(bank, lam)
    fit_ms = _ms(t0)
    save_boundaries(b, s["out"])
    d = b.d_star
    summary = {
        **_report_header("fit", s),
        "inputs": _inputs(bank=s["bank"]),
        "n": bank.n,
        "m": bank.m,
        "lambda": lam,
        "d_star": {"min": float(d.min()), "mean": float(d.mean()),
                   "median": float(np.median(d)), "max": float(d.max())},
        "wall_ms": fit_ms,
    }
    log.info("fitted boundaries on %d x %d bank at lambda=%g -> %s", bank.n, bank.m, lam, s["out"])
    print(json.dumps(summary, indent=2))
    return 0


APPLY_DEFAULTS = {"bank": None, "format": None, "labels": False, "boundaries": None, "out": None}


def cmd_apply(args) -> int:
    s = resolve(args, APPLY_DEFAULTS)
    _require(s, "bank", "boundaries", "out")
    bank = _load(s["bank"], s["format"], s["labels"])
    b = load_boundaries(_existing(s["boundaries"]))
    t0 = time.perf_counter()
    counts = clamp_counts(bank, b)
    out = clamp_bank(bank, b)
    apply_ms = _ms(t0)
    save_bank(out, s["out"])
    frac = counts / bank.n
    summary = {
        **_report_header("apply", s),
        "inputs": _inputs(bank=s["bank"], boundaries=s["boundaries"]),
        "clamped_entries": int(counts.sum()),
        "clamped_fraction": float(counts.sum() / (bank.n * bank.m)),
        "per_dim_fraction": {"min": float(frac.min()), "mean": float(frac.mean()),
                             "max": float(frac.max())},
        "wall_ms": apply_ms,
    }
    log.info("clamped %d of %d entries -> %s", counts.sum(), bank.n * bank.m, s["out"])
    print(json.dumps(summary, indent=2))
    return 0


SCORE_DEFAULTS = {
    "bank": None, "id": None, "ood": None, "head": None, "format": None, "labels": False,
    "score": "knn", "k": None, "temperature": 1.0, "react_percentile": None,
    "react_order": "bank",
}


def _spec(s: dict) -> ScoreSpec:
    with as_usage_error():
        return ScoreSpec(s["score"], k=s["k"], temperature=s["temperature"],
                         react_percentile=s["react_percentile"])


class Pipeline:
    """Loaded inputs plus the ReAct/FBE ordering shared by eval and sweep."""

    def __init__(self, s: dict):
        _require(s, "bank", "id", "ood")
        self.spec = _spec(s)
        if self.spec.needs_head and not s["head"]:
            raise UsageError(f"--score {self.spec.kind} needs --head")
        if s["react_order"] not in ("bank", "queries"):
            raise UsageError("--react-order must be 'bank' or 'queries'")
        self.raw_bank = _load(s["bank"], s["format"], s["labels"])
        self.id_q = _load(s["id"], s["format"])
        self.ood_q = _load(s["ood"], s["format"])
        self.head = load_head(_existing(s["head"])) if s["head"] else None
        self.bank = self.raw_bank
        self.tau = None
        if self.spec.react_percentile is not None:
            self.tau = react_threshold(self.raw_bank, self.spec.react_percentile)
            self.id_q = react_clip(self.id_q, self.raw_bank, 0, threshold=self.tau)
            self.ood_q = react_clip(self.ood_q, self.raw_bank, 0, threshold=self.tau)
            if s["react_order"] == "bank":
                self.bank = react_clip(self.raw_bank, self.raw_bank, 0, threshold=self.tau)
        # queries are already clipped; scoring must not clip again
        self.score_spec = ScoreSpec(self.spec.kind, k=self.spec.k,
                                    temperature=self.spec.temperature)

    def run(self, bank: FeatureBank) -> dict:
        t0 = time.perf_counter()
        s_id = score(self.score_spec, bank, self.id_q, self.head)
        s_ood = score(self.score_spec, bank, self.ood_q, self.head)
        wall = _ms(t0)
        e = EvalSet(s_id.scores, s_ood.scores)
        return {
            "score": self.spec.to_dict(),
            "auroc": auroc(e),
            "fpr95": fpr_at_tpr(e, tpr=0.95),
            "n_id": int(s_id.scores.size),
            "n_ood": int(s_ood.scores.size),
            "wall_ms": wall,
            "_batches": (ScoreBatch(s_id.scores, self.spec), ScoreBatch(s_ood.scores, self.spec)),
        }


def _dump_scores(outdir: Optional[str], tag: str, row: dict) -> None:
    batches = row.pop("_batches")
    if not outdir:
        return
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    for name, batch in zip(("id", "ood"), batches):
        (out / f"{tag}_{name}.csv").write_text(batch.to_csv())


EVAL_DEFAULTS = {**SCORE_DEFAULTS, "boundaries": None, "lam": None, "out": None,
                 "scores_dir": None}


def cmd_eval(args) -> int:
    s = resolve(args, EVAL_DEFAULTS)
    if s["boundaries"] and s["lam"] is not None:
        raise UsageError("give either --boundaries or --lambda, not both")
    if s["lam"] is not None:
        _check_lambda(s["lam"])
    t0 = time.perf_counter()
    pipe = Pipeline(s)
    timing = {"load_ms": _ms(t0)}

    base = pipe.run(pipe.bank)
    timing["base_score_ms"] = base["wall_ms"]
    _dump_scores(s["scores_dir"], "base", base)
    report = {
        **_report_header("eval", s),
        "inputs": _inputs(bank=s["bank"], id=s["id"], ood=s["ood"], head=s["head"],
                          boundaries=s["boundaries"]),
        "base": base,
    }
    if pipe.tau is not None:
        report["react_threshold"] = pipe.tau

    if s["boundaries"] or s["lam"] is not None:
        t0 = time.perf_counter()
        if s["boundaries"]:
            b = load_boundaries(_existing(s["boundaries"]))
        else:
            b = fit_boundaries(pipe.bank, s["lam"])
        timing["fbe_fit_ms"] = _ms(t0)
        t0 = time.perf_counter()
        enhanced = clamp_bank(pipe.bank, b)
        timing["fbe_apply_ms"] = _ms(t0)
        fbe = pipe.run(enhanced)
        timing["fbe_score_ms"] = fbe["wall_ms"]
        _dump_scores(s["scores_dir"], "fbe", fbe)
        fbe["lambda"] = b.lam
        fbe["clamped_fraction"] = float(np.mean(enhanced.data != pipe.bank.data))
        report["fbe"] = fbe
        report["delta"] = {"auroc": fbe["auroc"] - base["auroc"],
                           "fpr95": fbe["fpr95"] - base["fpr95"]}
    report["timing"] = timing
    log.info("base auroc=%.4f fpr95=%.4f", base["auroc"], base["fpr95"])
    if "fbe" in report:
        log.info("fbe  auroc=%.4f fpr95=%.4f", report["fbe"]["auroc"], report["fbe"]["fpr95"])
    _write_text(s["out"], json.dumps(report, indent=2) + "\n")
    return 0


SWEEP_DEFAULTS = {**SCORE_DEFAULTS, "lambdas": None, "out": None}


def dedupe_lambdas(values: list[float]) -> list[float]:
    seen, out = set(), []
    for v in values:
        if v in seen:
            log.warning("duplicate lambda %g dropped", v)
            continue
        seen.add(v)
        out.append(v)
    return out


def cmd_sweep(args) -> int:
    s = resolve(args, SWEEP_DEFAULTS)
    _require(s, "lambdas")
    lams = dedupe_lambdas([_check_lambda(v) for v in _float_list(s["lambdas"])])
    if not lams:
        raise UsageError("--lambdas is empty")
    pipe = Pipeline(s)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["lambda", "auroc", "fpr95"])
    for lam in lams:
        enhanced = clamp_bank(pipe.bank, fit_boundaries(pipe.bank, lam))
        row = pipe.run(enhanced)
        log.info("lambda=%g auroc=%.4f fpr95=%.4f", lam, row["auroc"], row["fpr95"])
        w.writerow([repr(lam), repr(row["auroc"]), repr(row["fpr95"])])
    _write_text(s["out"], buf.getvalue())
    return 0


SIM_DEFAULTS = {"sigma_in": 1.0, "clamp": 1.96, "dim": 64, "trials": 100_000, "seed": None,
                "epsilons": None, "sigmas": None, "grid": None, "out": None, "json_out": None}


def cmd_simulate(args) -> int:
    s = resolve(args, SIM_DEFAULTS)
    _require(s, "seed")
    if s["grid"] is not None:
        grid = tuple(tuple(p) for p in s["grid"])
    else:
        sigmas = _float_list(s["sigmas"]) or list(DEFAULT_SIGMAS)
        epsilons = _float_list(s["epsilons"]) or list(DEFAULT_EPSILONS)
        grid = tuple((so, e) for so in sigmas for e in epsilons)
    with as_usage_error():
        cfg = SimConfig(sigma_in=float(s["sigma_in"]), clamp=float(s["clamp"]),
                        dim=int(s["dim"]), trials=int(s["trials"]), seed=int(s["seed"]),
                        grid=grid)
        if not grid:
            raise ValueError("simulation grid is empty")
    if cfg.trials < MIN_TRIALS_WARN:
        log.warning("only %d trials: the standard error may swamp the delta", cfg.trials)
    rows = sweep_surface(cfg)
    worst = min(rows, key=lambda r: r["delta"] - 3 * r["stderr"])
    log.info("%d grid points; smallest delta - 3*stderr = %.3g at sigma_out=%g eps=%g",
             len(rows), worst["delta"] - 3 * worst["stderr"], worst["sigma_out"], worst["epsilon"])
    _write_text(s["out"], surface_to_csv(rows))
    if s["json_out"]:
        Path(s["json_out"]).write_text(json.dumps(
            {**_report_header("simulate", cfg.to_dict()), "rows": json.loads(surface_to_json(rows))},
            indent=2) + "\n")
    return 0


SYNTH_DEFAULTS = {name: None for name in SynthConfig.__dataclass_fields__}
SYNTH_DEFAULTS["out"] = None


def cmd_synth(args) -> int:
    s = resolve(args, SYNTH_DEFAULTS)
    _require(s, "seed", "out")
    fields = {k: v for k, v in s.items() if k != "out" and v is not None}
    with as_usage_error():
        cfg = SynthConfig(**fields)
    bench = generate(cfg)
    manifest = write_benchmark(bench, s["out"])
    manifest_path = Path(s["out"]) / "manifest.json"
    manifest.update({"tool": "fbe", "version": __version__,
                     "sha256": {k: file_digest(Path(s["out"]) / f)
                                for k, f in manifest["files"].items()}})
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    log.info("wrote synthetic benchmark to %s", s["out"])
    return 0


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (flat or sectioned by command)")
    p.add_argument("--log-level", default="INFO")


def _bank_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--format", choices=["binary", "csv"], default=None,
                   help="bank file format (sniffed when omitted)")
    p.add_argument("--labels", action="store_true", default=None,
                   help="CSV bank: treat the final column as integer labels")


def _score_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bank", help="training feature bank")
    p.add_argument("--id", help="ID query bank")
    p.add_argument("--ood", help="OOD query bank")
    p.add_argument("--head", help="linear head file (FHED)")
    p.add_argument("--score", choices=KINDS)
    p.add_argument("--k", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--react-percentile", type=float)
    p.add_argument("--react-order", choices=["bank", "queries"],
                   help="'bank': clip bank and queries before FBE (default); "
                        "'queries': clip queries only")
    _bank_args(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fbe", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"fbe {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit percentile boundaries on a bank")
    _common(p)
    p.add_argument("--bank")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--out", help="boundaries file (FBDY)")
    _bank_args(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("apply", help="clamp a bank to fitted boundaries")
    _common(p)
    p.add_argument("--bank")
    p.add_argument("--boundaries")
    p.add_argument("--out", help="enhanced bank file (FBNK)")
    _bank_args(p)
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("eval", help="AUROC/FPR95 with and without FBE")
    _common(p)
    _score_args(p)
    p.add_argument("--boundaries", help="boundaries file to apply to the bank")
    p.add_argument("--lambda", dest="lam", type=float, help="fit boundaries inline instead")
    p.add_argument("--scores-dir", help="write per-query score CSVs here")
    p.add_argument("--out", help="report JSON (stdout when omitted)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="evaluate over a list of lambdas")
    _common(p)
    _score_args(p)
    p.add_argument("--lambdas", help="comma-separated lambda values")
    p.add_argument("--out", help="CSV output (stdout when omitted)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("simulate", help="Monte Carlo surface of the clamping gain")
    _common(p)
    p.add_argument("--sigma-in", type=float)
    p.add_argument("--clamp", type=float, help="clamp radius; 'inf' disables clamping")
    p.add_argument("--dim", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--sigmas", help="comma-separated sigma_out values")
    p.add_argument("--epsilons", help="comma-separated epsilon values")
    p.add_argument("--out", help="surface CSV (stdout when omitted)")
    p.add_argument("--json-out", help="also write the surface as JSON")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("synth", help="generate a synthetic near/far-OOD benchmark")
    _common(p)
    for name, f in SynthConfig.__dataclass_fields__.items():
        p.add_argument("--" + name.replace("_", "-"), type=f.type if callable(f.type) else
                       {"int": int, "float": float}[f.type])
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"fbe {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (BankFormatError, ValueError, OSError) as exc:
        print(f"fbe {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
