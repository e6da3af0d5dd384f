"""Command-line front end: ``cocyclelab <experiment> --config FILE --seed N --out DIR``.

Every experiment writes ``summary.json`` and ``samples.csv`` into the output
directory, only after the whole computation succeeded.  Exit codes: 0 on
success, 2 when the configuration is invalid, 3 when the numerics cannot
deliver (insufficient singular-value gap, return cap exceeded, breakdown).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from importlib import resources

import numpy as np

from . import fgboundary, oseledets, stationary
from .cocycle import CocycleSpec, SkewObservable, SkewSystem, integrability, skew_ergodicity_test
from .dynamics import Cylinder, SymbolicSystem, induce, member_seed, sample_orbit
from .errors import (ConfigError, EmptyIndicator, InsufficientGap, NotTransverse, NumericalBreakdown,
                     ReturnCapExceeded, WindowTooSmall)

EXPERIMENTS = ("spectrum", "stationary", "induce", "boundary", "flags", "skew")
NUMERIC_ERRORS = (InsufficientGap, ReturnCapExceeded, NumericalBreakdown, NotTransverse, EmptyIndicator,
                  WindowTooSmall)


# ---------------------------------------------------------------------------
# config helpers


def _clean(obj):
    """JSON-safe copy: numpy scalars and arrays become Python values, non-finite floats become null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def _need(cfg: dict, key: str, kind=None):
    if key not in cfg:
        raise ConfigError(f"config lacks required field {key!r}")
    v = cfg[key]
    if kind is int and (isinstance(v, bool) or not isinstance(v, int)):
        raise ConfigError(f"field {key!r} must be an integer")
    return v


def _cylinder(obj) -> Cylinder:
    if obj is None or obj == "all":
        return Cylinder.everything()
    if not isinstance(obj, dict):
        raise ConfigError("indicator must be an object {offset: symbol or [symbols]}")
    try:
        return Cylinder({int(k): (set(v) if isinstance(v, list) else v) for k, v in obj.items()})
    except ValueError as exc:
        raise ConfigError(f"bad indicator: {exc}") from None


def load_fixture(name: str) -> dict:
    try:
        text = resources.files("cocyclelab").joinpath("fixtures", f"{name}.json").read_text()
    except FileNotFoundError:
        raise ConfigError(f"no fixture named {name!r}") from None
    return json.loads(text)


def list_fixture_configs() -> list:
    folder = resources.files("cocyclelab").joinpath("fixtures")
    names = sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".json"))
    return [load_fixture(n) for n in names]


def _read_config(path: str) -> dict:
    if path.startswith("fixture:"):
        return load_fixture(path[len("fixture:"):])
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


# ---------------------------------------------------------------------------
# experiments: each returns (summary dict, csv text)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def run_spectrum(cfg: dict, seed: int, jobs: int):
    system = SymbolicSystem.from_json(_need(cfg, "system"))
    c = CocycleSpec.from_json(_need(cfg, "cocycle"))
    c.check_total(system)
    n, ens = _need(cfg, "n", int), _need(cfg, "ensemble", int)
    spec = oseledets.lyapunov_spectrum(c, system, n, ens, seed, jobs=jobs)
    oracle = oseledets.norm_growth_oracle(c, system, n, ens, seed, jobs=jobs)
    integ = integrability(c, system, max(ens, 1000), seed)
    summary = {"spectrum": spec.to_json(), "trace_ok": spec.trace_ok(),
               "norm_growth_lambda1": {"value": oracle[0], "stderr": oracle[1]},
               "integrability": {"value": integ[0], "stderr": integ[1]}}
    if cfg.get("flags"):
        x = sample_orbit(system, member_seed(seed, 0), -1, 1)
        summary["flags"] = oseledets.oseledets_flags(c, x, int(cfg.get("flag_n", 200))).to_json()
    return summary, spec.csv()


def run_flags(cfg: dict, seed: int, jobs: int):
    system = SymbolicSystem.from_json(_need(cfg, "system"))
    c = CocycleSpec.from_json(_need(cfg, "cocycle"))
    c.check_total(system)
    n, ens = _need(cfg, "n", int), _need(cfg, "ensemble", int)
    x = sample_orbit(system, member_seed(seed, 0), -1, 1)
    pair = oseledets.oseledets_flags(c, x, n)
    eq = oseledets.equivariance_check(c, system, n, ens, seed)
    length = int(cfg.get("orbit_length", 200))
    of = oseledets.orbit_frames(c, system, n, length, int(cfg.get("orbits", 16)), seed)
    lam, lam_se = of.exponents()
    sines = eq.pop("sines")
    summary = {"flags": pair.to_json(), "equivariance": eq,
               "frame": {"median_offdiag": float(np.median(of.offdiag)), "usable_fraction": float(of.usable.mean()),
                         "log_diag_exponents": lam.tolist(), "log_diag_stderrs": lam_se.tolist()}}
    rows = [[k] + list(row) for k, row in enumerate(sines)]
    return summary, _csv(["sample"] + [f"sin_{j + 1}" for j in range(c.d)], rows)


def run_induce(cfg: dict, seed: int, jobs: int):
    system = SymbolicSystem.from_json(_need(cfg, "system"))
    c = CocycleSpec.from_json(_need(cfg, "cocycle"))
    c.check_total(system)
    cyl = _cylinder(cfg.get("indicator"))
    n, ens = _need(cfg, "n", int), _need(cfg, "ensemble", int)
    ref = oseledets.lyapunov_spectrum(c, system, int(cfg.get("base_n", n)), ens, seed, jobs=jobs)
    rep = oseledets.induced_spectrum_check(c, system, cyl, n, ens, seed,
                                           mass_ensemble=int(cfg.get("mass_ensemble", 20000)), spectrum=ref)
    kac_sys = induce(system, cyl, int(cfg.get("mass_ensemble", 20000)), seed)
    rep["kac_within_3sigma"] = abs(kac_sys.kac()[0] - 1.0) <= 3 * kac_sys.kac()[1]
    rows = [[i, r, rep["target_ratio"]] for i, r in enumerate(rep["ratios"])]
    return rep, _csv(["exponent", "ratio", "target_ratio"], rows)


def run_stationary(cfg: dict, seed: int, jobs: int):
    system = SymbolicSystem.from_json(_need(cfg, "system"))
    c = CocycleSpec.from_json(_need(cfg, "cocycle"))
    c.check_total(system)
    nu = stationary.estimate_stationary(c, system, int(cfg.get("burn", 200)), int(cfg.get("samples", 4000)), seed)
    top = stationary.furstenberg_top_exponent(c, nu, system)
    subspaces = cfg.get("subspaces", [[1.0] + [0.0] * (c.d - 1)])
    labels = [",".join(f"{v:g}" for v in np.ravel(w)) for w in subspaces]
    eps = cfg.get("eps_grid", [0.2, 0.1, 0.05, 0.025])
    prof = stationary.properness_profile(nu, subspaces, eps, seed=seed, labels=labels)
    n_list = cfg.get("n_list", [10, 25, 50, 100, 200])
    points = int(cfg.get("points", 20))
    diam, growth = [], []
    for k in range(points):
        x = sample_orbit(system, member_seed(seed, 10_000 + k), -1, 1)
        diam.append(stationary.dirac_contraction(c, x, nu, n_list).diameter)
        growth.append(stationary.contraction_growth_check(c, x, n_list).chi)
    diam = np.asarray(diam)
    summary = {"atoms": len(nu), "max_atom": nu.max_weight(), "refresh": nu.diagnostics["refresh"],
               "furstenberg_lambda1": {"value": top[0], "stderr": top[1]},
               "properness": prof.to_json(),
               "contraction": {"n": n_list, "median_diameter": np.median(diam, axis=0).tolist(),
                               "fraction_below_0.01": (diam < 0.01).mean(axis=0).tolist()},
               "growth": {"n": n_list, "mean_chi_per_step": (np.mean(growth, axis=0) /
                                                             np.asarray(n_list)[:, None]).tolist()}}
    rows = [["contraction", n, float(m), float(s)] for n, m, s in
            zip(n_list, diam.mean(axis=0), diam.std(axis=0, ddof=1) / np.sqrt(points))] if points > 1 else []
    for label, masses in prof.masses.items():
        rows += [[f"mass:{label}", e, float(m), float(np.sqrt(m * (1 - m) / len(nu)))] for e, m in zip(eps, masses)]
    return summary, _csv(["table", "x", "statistic", "stderr"], rows)


def run_boundary(cfg: dict, seed: int, jobs: int):
    e = fgboundary.PathEnsemble.from_json({**_need(cfg, "ensemble"), "seed": seed})
    s = int(cfg.get("stability", 50))
    cylinders = cfg.get("cylinders", ["a", "ab"])
    hm = fgboundary.harmonic_measure(e, cylinders, s=s)
    D = cfg.get("D", "a")
    curve = fgboundary.martingale_check(e, D, float(cfg.get("eps", 0.05)), cfg.get("n_grid"), s=s)
    summary = {"harmonic_measure": {k: v.to_json() for k, v in hm.items()},
               "martingale": curve.to_json(), "martingale_monotone": curve.monotone()}
    if cfg.get("skew_samples"):
        se = fgboundary.PathEnsemble(e.k, e.mu, int(cfg["skew_samples"]), e.n, seed)
        rep = fgboundary.boundary_skew_invariance(se, int(cfg.get("n_shift", 1)), s=s)
        summary["skew_invariance"] = {k: rep[k] for k in ("n_shift", "samples", "dropped", "max_z")}
    return summary, curve.csv()


def run_skew(cfg: dict, seed: int, jobs: int):
    system = SymbolicSystem.from_json(_need(cfg, "system"))
    s = SkewSystem.from_json(system, _need(cfg, "skew"))
    obs = []
    for item in _need(cfg, "observables"):
        obs.append(SkewObservable.product_cylinder(_cylinder(item.get("cylinder", {})), item.get("z"),
                                                   system.alphabet))
    rep = skew_ergodicity_test(s, obs, _need(cfg, "n", int), _need(cfg, "ensemble", int), seed)
    rows = [[r["observable"], r["birkhoff_mean"], r["stderr"], r["space_average"], r["deviation_sigma"]]
            for r in rep["rows"]]
    return rep, _csv(["observable", "birkhoff_mean", "stderr", "space_average", "deviation_sigma"], rows)


RUNNERS = {"spectrum": run_spectrum, "flags": run_flags, "induce": run_induce,
           "stationary": run_stationary, "boundary": run_boundary, "skew": run_skew}


def run(experiment: str, cfg: dict, seed: int | None = None, jobs: int = 1) -> tuple:
    """Run one experiment; returns ``(summary, csv_text)``."""
    if experiment not in RUNNERS:
        raise ConfigError(f"unknown experiment {experiment!r}")
    if cfg.get("experiment", experiment) != experiment:
        raise ConfigError(f"config is for {cfg['experiment']!r}, not {experiment!r}")
    if seed is None:
        seed = cfg.get("seed", (cfg.get("system") or {}).get("seed"))
    if seed is None or isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("a non-negative integer seed must be given (--seed or config 'seed')")
    try:
        summary, text = RUNNERS[experiment](cfg, seed, jobs)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad config: {exc!r}") from None
    head = {"experiment": experiment, "seed": seed}
    if "name" in cfg:
        head["fixture"] = cfg["name"]
    return _clean({**head, **summary}), text


def write_atomic(out_dir: str, files: dict) -> None:
    """Write every file to a temporary sibling first, then rename into place."""
    os.makedirs(out_dir, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".tmp-", dir=out_dir)
    try:
        for name, text in files.items():
            with open(os.path.join(tmp, name), "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        for name in files:
            os.replace(os.path.join(tmp, name), os.path.join(out_dir, name))
    finally:
        for name in os.listdir(tmp):
            os.remove(os.path.join(tmp, name))
        os.rmdir(tmp)


def _headline(summary: dict) -> str:
    exp = summary["experiment"]
    if exp == "spectrum":
        sp = summary["spectrum"]
        return f"exponents={[round(v, 6) for v in sp['exponents']]} classification={sp['classification']}"
    if exp == "flags":
        return f"median_sin={summary['equivariance']['median_sin']} offdiag={summary['frame']['median_offdiag']:.3g}"
    if exp == "induce":
        return f"ratios={[round(v, 4) for v in summary['ratios']]} target={summary['target_ratio']:.4f}"
    if exp == "stationary":
        return (f"refresh_max_z={summary['refresh']['max_z']:.2f} "
                f"lambda1={summary['furstenberg_lambda1']['value']:.5f} "
                f"properness={summary['properness']['verdict']}")
    if exp == "boundary":
        return f"martingale_final={summary['martingale']['fraction'][-1]:.4f}"
    return f"max_deviation_sigma={summary['max_deviation_sigma']:.2f}"


def print_fixtures(stream=None) -> None:
    stream = stream or sys.stdout
    rows = [(f["name"], f["experiment"], f["expected"]["headline"], f["expected"]["provenance"])
            for f in list_fixture_configs()]
    widths = [max(len(r[i]) for r in rows + [("name", "experiment", "expected", "source")]) for i in range(4)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    print(fmt.format("name", "experiment", "expected", "source").rstrip(), file=stream)
    for r in rows:
        print(fmt.format(*r).rstrip(), file=stream)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cocyclelab", description="Matrix cocycle experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        sp = sub.add_parser(name, help=f"run a {name} experiment")
        sp.add_argument("--config", required=True, help="JSON config path, or fixture:NAME")
        sp.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
        sp.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="ensemble threads")
        sp.add_argument("--out", default=".", help="output directory")
    sub.add_parser("fixtures", help="list bundled reference experiments")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "fixtures":
        print_fixtures()
        return 0
    try:
        cfg = _read_config(args.config)
        summary, text = run(args.command, cfg, args.seed, max(1, args.jobs))
    except ConfigError as exc:
        print(f"cocyclelab {args.command}: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except NUMERIC_ERRORS as exc:
        print(f"cocyclelab {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"cocyclelab {args.command}: invalid configuration: {exc}", file=sys.stderr)
        return 2
    write_atomic(args.out, {"summary.json": json.dumps(summary, indent=2, sort_keys=True) + "\n",
                            "samples.csv": text})
    print(f"{args.command}: {_headline(summary)} -> {os.path.join(args.out, 'summary.json')}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
