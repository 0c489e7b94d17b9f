"""Command line: ``msm-loal simulate | estimate | bootstrap``.

Settings come from defaults, then an optional JSON ``--config`` file, then
explicit flags. Every run writes CSV and markdown tables plus a
``manifest.json`` holding the resolved settings, the package version and a
SHA-256 of each output file.

Exit codes: 0 success, 2 invalid input or settings, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .bootstrap import BOOTSTRAP_ESTIMATORS, BootstrapError, NamedEstimator, bootstrap_both, m_out_of_n_ci, \
    naive_bootstrap_ci
from .data_model import ValidationError, read_long_csv
from .estimators import PositivityError, model_fit_table
from .glm_core import SeparationError
from .loal import LoalConfig, SelectionError
from .simulation import ESTIMATORS, SCENARIOS, ScenarioConfig, default_q_spec, make_rng, run_monte_carlo

logger = logging.getLogger("msm_loal")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3
ESTIMATE_ESTIMATORS = ("gcomp", "iptw_full", "iptw_loal", "iptw_fused_loal")
METHODS = ("mn", "naive", "both")

# setting name -> (type, default); shared by flags and the JSON config
COMMON = {
    "out": (str, "out"),
    "seed": (int, 0),
    "threads": (int, 1),
    "loal": (dict, {}),
}
SETTINGS = {
    "simulate": {**COMMON, "scenario": (str, "1a"), "n": (int, 200), "reps": (int, 10),
                 "estimators": (list, list(ESTIMATORS)), "nu0": (float, 0.0), "nuI": (float, 1.0)},
    "estimate": {**COMMON, "terms": (list, None), "data": (str, None), "sidecar": (str, None),
                 "estimators": (list, ["iptw_full", "iptw_loal", "iptw_fused_loal"])},
    "bootstrap": {**COMMON, "terms": (list, None), "data": (str, None), "sidecar": (str, None), "scenario": (str, None),
                  "n": (int, 500), "reps": (int, 0), "estimator": (str, "iptw_loal"), "method": (str, "both"),
                  "q": (float, 0.95), "K": (int, 14), "B": (int, 200), "nu0": (float, 0.0), "nuI": (float, 1.0)},
}


class NumericFailure(RuntimeError):
    pass


NUMERIC_ERRORS = (np.linalg.LinAlgError, SeparationError, SelectionError, PositivityError, BootstrapError,
                  FloatingPointError, NumericFailure)


# ---------------------------------------------------------------------------
# settings


def _coerce(name, kind, value):
    if value is None:
        return None
    try:
        if kind is list:
            if isinstance(value, str):
                return [v.strip() for v in value.split(",") if v.strip()]
            if not isinstance(value, list):
                raise TypeError
            return [str(v) for v in value]
        if kind is dict:
            if isinstance(value, str):
                value = json.loads(value)
            if not isinstance(value, dict):
                raise TypeError
            return value
        if kind is int and (isinstance(value, bool) or (isinstance(value, float) and not value.is_integer())):
            raise TypeError
        return kind(value)
    except (TypeError, ValueError):
        raise ValidationError(f"setting {name!r} expects {kind.__name__}, got {value!r}") from None


def resolve_settings(command: str, config_file: str | None, flags: dict) -> dict:
    """Defaults, overridden by the JSON config, overridden by explicit flags."""
    schema = SETTINGS[command]
    out = {k: default for k, (_, default) in schema.items()}
    if config_file:
        try:
            loaded = json.loads(Path(config_file).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {config_file}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ValidationError("config file must hold a JSON object")
        unknown = sorted(set(loaded) - set(schema))
        if unknown:
            raise ValidationError(f"unknown settings for {command}: {unknown}")
        out.update(loaded)
    out.update({k: v for k, v in flags.items() if v is not None and k in schema})
    for k, (kind, _) in schema.items():
        out[k] = _coerce(k, kind, out[k])
    if out["threads"] < 1:
        raise ValidationError("threads must be >= 1")
    return out


def loal_config(settings: dict, scenario: str | None = None) -> LoalConfig:
    raw = dict(settings.get("loal") or {})
    names = {f.name for f in fields(LoalConfig)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ValidationError(f"unknown LOAL settings {unknown}")
    if "gamma1_grid" in raw:
        raw["gamma1_grid"] = tuple(raw["gamma1_grid"])
    if "q_spec" not in raw and scenario is not None:
        raw["q_spec"] = default_q_spec(scenario)
    cfg = replace(LoalConfig(), **raw)
    if cfg.gamma <= 0 or cfg.gamma1 <= 0:
        raise ValidationError("gamma and gamma1 must be positive")
    if cfg.n_lambda < 2 or not 0 < cfg.lambda_ratio < 1:
        raise ValidationError("n_lambda must be >= 2 and lambda_ratio in (0, 1)")
    return cfg


def _check_choices(values, allowed, what):
    bad = [v for v in values if v not in allowed]
    if bad:
        raise ValidationError(f"unknown {what} {bad}; choose from {list(allowed)}")


# ---------------------------------------------------------------------------
# output


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def write_table(rows: list[dict], path: Path, title: str | None = None) -> list[Path]:
    """Write ``rows`` to ``path.csv`` and ``path.md``; returns both paths."""
    cols = []
    for r in rows:
        cols += [c for c in r if c not in cols]
    csv_path = path.with_suffix(".csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: (repr(v) if isinstance(v, float) else v) for c, v in r.items()})
    md = [f"# {title}", ""] if title else []
    md.append("| " + " | ".join(cols) + " |")
    md.append("|" + "---|" * len(cols))
    md += ["| " + " | ".join(_fmt(r.get(c, "")) for c in cols) + " |" for r in rows]
    md_path = path.with_suffix(".md")
    md_path.write_text("\n".join(md) + "\n")
    return [csv_path, md_path]


def write_manifest(out: Path, command: str, settings: dict, files: list[Path]) -> Path:
    digest = {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(files)}
    manifest = {"command": command, "version": __version__, "settings": settings, "outputs": digest}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _outdir(settings) -> Path:
    out = Path(settings["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(settings: dict) -> list[Path]:
    s = settings
    if s["scenario"] not in SCENARIOS:
        raise ValidationError(f"unknown scenario {s['scenario']!r}; choose from {list(SCENARIOS)}")
    if s["reps"] < 1 or s["n"] < 1:
        raise ValidationError("n and reps must be positive")
    _check_choices(s["estimators"], ESTIMATORS + ("fused_oracle_alpha",), "estimators")
    cfg = ScenarioConfig(s["scenario"], s["n"], s["seed"], s["nu0"], s["nuI"])
    table = run_monte_carlo(cfg, s["estimators"], s["reps"], s["threads"], loal_config(s, s["scenario"]))
    out = _outdir(s)
    files = [out / "metrics.csv", out / "metrics.md"]
    table.to_csv(files[0])
    files[1].write_text(table.to_markdown())
    failed = [r for r in table.replicates if r.errors]
    files += write_table([{"rep": r.rep, "estimator": k, "error": v} for r in failed for k, v in sorted(r.errors.items())]
                         or [{"rep": "", "estimator": "", "error": ""}], out / "failures", "Estimator failures")
    return files


def _load_dataset(s):
    if not s.get("data") or not s.get("sidecar"):
        raise ValidationError("--data and --sidecar are required")
    return read_long_csv(s["data"], s["sidecar"])


def cmd_estimate(settings: dict) -> list[Path]:
    from .estimators import MsmSpec, cumulative_treatment_probability, full_fit, g_computation, iptw, \
        weight_diagnostics, compute_cumulative_weights
    from .loal import run_loal_pipeline
    from .outcome_models import estimate_q_sequence

    s = settings
    _check_choices(s["estimators"], ESTIMATE_ESTIMATORS, "estimators")
    ds = _load_dataset(s)
    spec = MsmSpec(tuple(s["terms"])) if s["terms"] else MsmSpec.default(ds)
    cfg = loal_config(s)
    results, weights, models = [], [], []
    fits = {}
    if "iptw_full" in s["estimators"]:
        fits["iptw_full"] = full_fit(ds)
    if "iptw_fused_loal" in s["estimators"]:
        pf = run_loal_pipeline(ds, replace(cfg, fuse=True))
        fits["iptw_fused_loal"] = pf
        if "iptw_loal" in s["estimators"]:
            fits["iptw_loal"] = pf.trail["loal_fit"]
    elif "iptw_loal" in s["estimators"]:
        fits["iptw_loal"] = run_loal_pipeline(ds, replace(cfg, fuse=False))
    for name in s["estimators"]:
        if name == "gcomp":
            est = g_computation(ds, estimate_q_sequence(ds, q_spec=cfg.q_spec), spec)
        else:
            fit = fits[name]
            est = iptw(ds, fit, spec, estimator=name)
            w = compute_cumulative_weights(ds, fit)
            cp = cumulative_treatment_probability(ds, fit.treatment.probabilities())
            weights.append({"estimator": name, **weight_diagnostics(w, cp)})
            for part, model in (("treatment", fit.treatment), ("censoring", fit.censoring)):
                if model is not None:
                    models += [{"estimator": name, "model": part, **r} for r in model_fit_table(model)]
        row = {"estimator": name}
        for t, m, se in zip(est.terms, est.mu, est.se):
            row[f"mu[{t}]"] = float(m)
            row[f"se[{t}]"] = float(se)
            row[f"lower[{t}]"] = float(m - 1.96 * se)
            row[f"upper[{t}]"] = float(m + 1.96 * se)
        results.append(row)
    out = _outdir(s)
    files = write_table(results, out / "estimates", "MSM estimates (sandwich SEs ignore variable selection)")
    if weights:
        files += write_table(weights, out / "weights", "Weight and cumulative treatment probability distribution")
    if models:
        files += write_table(models, out / "coefficients", "Propensity coefficients (group > 0: fused group label)")
    return files


def _bootstrap_one(ds, est, s, seed):
    if s["method"] == "both":
        return list(bootstrap_both(ds, est, s["q"], s["K"], s["B"], seed, s["threads"]))
    if s["method"] == "mn":
        return [m_out_of_n_ci(ds, est, s["q"], s["K"], s["B"], seed, s["threads"])]
    return [naive_bootstrap_ci(ds, est, s["B"], seed, s["threads"])]


def cmd_bootstrap(settings: dict) -> list[Path]:
    s = settings
    if s["method"] not in METHODS:
        raise ValidationError(f"method must be one of {list(METHODS)}")
    _check_choices([s["estimator"]], BOOTSTRAP_ESTIMATORS, "estimator")
    out = _outdir(s)
    if s["scenario"] is None:
        ds = _load_dataset(s)
        est = NamedEstimator(s["estimator"], tuple(s["terms"]) if s["terms"] else None, loal_config(s))
        results = _bootstrap_one(ds, est, s, s["seed"])
        files = write_table([r for res in results for r in res.rows()], out / "bootstrap", "Bootstrap intervals")
        for res in results:
            if res.method == "mn":
                files += write_table(res.m_rows(), out / "bootstrap_m", "m-out-of-n diagnostics per subsample size")
        return files
    if s["scenario"] not in SCENARIOS:
        raise ValidationError(f"unknown scenario {s['scenario']!r}")
    if s["reps"] < 1:
        raise ValidationError("a scenario run needs reps >= 1")
    cfg = ScenarioConfig(s["scenario"], s["n"], s["seed"], s["nu0"], s["nuI"])
    lc = loal_config(s, s["scenario"])
    per_rep = []
    for r in range(s["reps"]):
        sim = cfg.draw(r)
        terms = tuple(s["terms"]) if s["terms"] else tuple(sim.truth.msm_terms)
        est = NamedEstimator(s["estimator"], terms, lc)
        boot_seed = int(make_rng(s["seed"], r, 1).integers(2**31))
        for res in _bootstrap_one(sim.data, est, s, boot_seed):
            cover = res.covers(sim.truth.mu)
            for l, term in enumerate(res.terms):
                per_rep.append({"rep": r, "method": res.method, "term": term, "truth": float(sim.truth.mu[l]),
                                "lower": float(res.lower[l]), "upper": float(res.upper[l]),
                                "covered": int(cover[l])})
    summary = []
    for method in dict.fromkeys(row["method"] for row in per_rep):
        for term in dict.fromkeys(row["term"] for row in per_rep):
            rows = [row for row in per_rep if row["method"] == method and row["term"] == term]
            summary.append({"method": method, "term": term, "reps": len(rows),
                            "coverage": float(np.mean([row["covered"] for row in rows])),
                            "mean_width": float(np.mean([row["upper"] - row["lower"] for row in rows]))})
    files = write_table(per_rep, out / "bootstrap_reps", "Per-replicate intervals")
    files += write_table(summary, out / "coverage", f"Coverage of 95% intervals, scenario {s['scenario']}, n={s['n']}")
    return files


COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "bootstrap": cmd_bootstrap}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msm-loal", description=__doc__.splitlines()[0])
    p.add_argument("--list-scenarios", action="store_true", help="print the simulation scenarios and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")

    def common(sp):
        sp.add_argument("--config", help="JSON file of settings (flags override it)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, help="worker processes (results do not depend on it)")
        sp.add_argument("--loal", help='LOAL settings as JSON, e.g. \'{"gamma": 2.5}\'')

    sp = sub.add_parser("simulate", help="Monte Carlo comparison of estimators")
    common(sp)
    sp.add_argument("--scenario")
    sp.add_argument("--n", type=int)
    sp.add_argument("--reps", type=int)
    sp.add_argument("--estimators")
    sp.add_argument("--nu0", type=float)
    sp.add_argument("--nuI", type=float)

    sp = sub.add_parser("estimate", help="estimate MSM parameters from a long-format CSV")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--sidecar")
    sp.add_argument("--estimators")
    sp.add_argument("--terms", help="MSM terms, e.g. intercept,modifier,cum")

    sp = sub.add_parser("bootstrap", help="bootstrap intervals for one dataset or coverage over a scenario")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--sidecar")
    sp.add_argument("--scenario")
    sp.add_argument("--n", type=int)
    sp.add_argument("--reps", type=int)
    sp.add_argument("--estimator")
    sp.add_argument("--terms", help="MSM terms, e.g. intercept,modifier,cum")
    sp.add_argument("--method", help="mn, naive or both")
    sp.add_argument("--q", type=float)
    sp.add_argument("--K", type=int)
    sp.add_argument("--B", type=int)
    sp.add_argument("--nu0", type=float)
    sp.add_argument("--nuI", type=float)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.list_scenarios:
        print(",".join(SCENARIOS))
        return EXIT_OK
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_INVALID
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose", "list_scenarios")}
    try:
        settings = resolve_settings(args.command, args.config, flags)
        with np.errstate(over="ignore", under="ignore"):
            files = COMMANDS[args.command](settings)
        write_manifest(Path(settings["out"]), args.command, settings, files)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
