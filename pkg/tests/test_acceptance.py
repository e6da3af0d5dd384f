"""End-to-end acceptance checks, one test per criterion.

Each test prints a ``criterion NN PASS|FAIL`` line and the session summary
repeats all of them.  Reference values come from closed forms, independent
estimators or exact enumeration, never from the code path under test.
"""
import json
import math
import time

import numpy as np
import pytest

from cocyclelab import cli, oseledets, stationary
from cocyclelab.cocycle import SkewObservable, SkewSystem, evaluate, skew_ergodicity_test
from cocyclelab.dynamics import Cylinder, SymbolicSystem, member_seed, sample_orbit
from cocyclelab.fgboundary import PathEnsemble, boundary_skew_invariance, harmonic_measure, martingale_check
from cocyclelab.flagspace import (LineTuple, Flag, compose, flag_distance, pr1, pr2, tuple_from_flag_pair,
                                  w_long, weyl_act)

from conftest import system_and_cocycle


@pytest.fixture(scope="module", autouse=True)
def warm_kernels(sl2z):
    # compile the jitted kernels once so the timed criteria measure the computation
    system, c = sl2z
    oseledets.lyapunov_spectrum(c, system, 100, 2, 0)
    oseledets.norm_growth_oracle(c, system, 100, 2, 0)


@pytest.fixture(scope="module")
def sl2z_spectrum(sl2z):
    system, c = sl2z
    return oseledets.lyapunov_spectrum(c, system, 100_000, 32, 7)


@pytest.mark.criterion(1, "cocycle identity")
def test_01_cocycle_identity(criterion, sl2z):
    system, c = sl2z
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for trial in range(100):
        k, n = (int(v) for v in rng.integers(-12, 13, size=2))
        x = sample_orbit(system, member_seed(101, trial), -30, 30)
        lhs = evaluate(c, x, k + n)
        rhs = evaluate(c, x.shift(n), k) @ evaluate(c, x, n)
        worst = max(worst, np.linalg.norm(lhs - rhs) / np.linalg.norm(lhs))
    elapsed = time.perf_counter() - t0
    criterion(1, "cocycle identity", worst < 1e-8 and elapsed < 5,
              f"max rel err {worst:.2e} (< 1e-8), {elapsed:.2f}s (< 5s)")


@pytest.mark.criterion(2, "constant diagonal")
def test_02_constant_diagonal(criterion):
    system, c, cfg = system_and_cocycle("diag-constant")
    t0 = time.perf_counter()
    sp = oseledets.lyapunov_spectrum(c, system, cfg["n"], cfg["ensemble"], cfg["seed"])
    elapsed = time.perf_counter() - t0
    exact = np.array([math.log(2), -math.log(2)])
    err = float(np.max(np.abs(sp.exponents - exact)))
    criterion(2, "constant diagonal", err < 1e-12 and sp.classification == "simple" and elapsed < 1,
              f"err {err:.1e} (< 1e-12), {sp.classification}, {elapsed:.2f}s (< 1s)")


@pytest.mark.criterion(3, "biased diagonal walk")
def test_03_biased_diagonal(criterion):
    system, c, cfg = system_and_cocycle("diag-p075")
    assert cfg["n"] == 100_000 and cfg["ensemble"] == 32
    t0 = time.perf_counter()
    sp = oseledets.lyapunov_spectrum(c, system, cfg["n"], cfg["ensemble"], cfg["seed"])
    elapsed = time.perf_counter() - t0
    # law of large numbers for the top-left entry: E log = 0.75 * 1 + 0.25 * (-1)
    exact = 0.75 * 1.0 + 0.25 * -1.0
    z = abs(sp.lambda1 - exact) / sp.stderrs[0]
    criterion(3, "biased diagonal walk", z < 3 and elapsed < 30,
              f"lambda1 {sp.lambda1:.5f} vs {exact} ({z:.2f} sigma), {elapsed:.1f}s (< 30s)")


@pytest.mark.criterion(4, "balanced diagonal walk")
def test_04_balanced_diagonal(criterion):
    system, c, cfg = system_and_cocycle("diag-p050")
    sp = oseledets.lyapunov_spectrum(c, system, cfg["n"], cfg["ensemble"], cfg["seed"])
    z = abs(sp.lambda1) / sp.stderrs[0]
    criterion(4, "balanced diagonal walk", z < 3 and sp.classification == "degenerate",
              f"|lambda1| = {z:.2f} sigma (< 3), {sp.classification}")


@pytest.mark.criterion(5, "SL(2,Z) walk")
def test_05_sl2z_walk(criterion, sl2z):
    system, c = sl2z
    t0 = time.perf_counter()
    sp = oseledets.lyapunov_spectrum(c, system, 100_000, 32, 7)
    oracle, oracle_se = oseledets.norm_growth_oracle(c, system, 100_000, 32, 8)
    elapsed = time.perf_counter() - t0
    z_pos = sp.lambda1 / sp.stderrs[0]
    z_gap = sp.gaps()[0] / sp.gap_stderrs()[0]
    z_or = abs(sp.lambda1 - oracle) / math.hypot(sp.stderrs[0], oracle_se)
    ok = z_pos > 5 and z_gap > 5 and sp.classification == "simple" and z_or < 2 and elapsed < 120
    criterion(5, "SL(2,Z) walk", ok,
              f"lambda1 {sp.lambda1:.5f} ({z_pos:.0f} sigma), gap {z_gap:.0f} sigma, "
              f"norm-growth {oracle:.5f} ({z_or:.2f} combined sigma), {elapsed:.1f}s (< 120s)")


@pytest.mark.criterion(6, "SL(3,Z) fixture")
def test_06_sl3(criterion, sl3):
    system, c = sl3
    for m in c.table.values():
        assert np.array_equal(m, np.round(m)) and round(np.linalg.det(m)) == 1
    sp = oseledets.lyapunov_spectrum(c, system, 100_000, 32, 11)
    z_gaps = sp.gaps() / sp.gap_stderrs()
    trace = abs(sp.exponents.sum())
    trace_sigma = math.sqrt(float(np.sum(sp.stderrs ** 2)))
    ok = bool(np.all(z_gaps > 3)) and trace < 5 * trace_sigma
    criterion(6, "SL(3,Z) fixture", ok,
              f"exponents {np.round(sp.exponents, 5).tolist()}, gaps {np.round(z_gaps, 1).tolist()} sigma, "
              f"|sum| {trace:.1e} (< {5 * trace_sigma:.1e})")


@pytest.mark.criterion(7, "Kakutani rescaling")
def test_07_kakutani(criterion):
    cfg = cli.load_fixture("sl2z-induced")
    summary, _ = cli.run("induce", cfg, jobs=1)
    rel = abs(summary["ratios"][0] * summary["measured_mass"] - 1.0)
    kac_z = abs(summary["kac"] - 1.0) / summary["kac_sigma"]
    criterion(7, "Kakutani rescaling", rel < 0.05 and kac_z < 3,
              f"lambda*/lambda {summary['ratios'][0]:.4f} vs 1/m {1 / summary['measured_mass']:.4f} "
              f"({100 * rel:.2f}% < 5%), Kac {summary['kac']:.4f} ({kac_z:.2f} sigma)")


@pytest.mark.criterion(8, "Oseledets equivariance")
def test_08_equivariance(criterion, sl2z):
    system, c = sl2z
    rep = oseledets.equivariance_check(c, system, 400, 400, 17)
    med = max(rep["median_sin"])
    ok = med < 1e-3 and rep["transverse_fraction"] >= 0.99 and rep["insufficient_fraction"] == 0
    criterion(8, "Oseledets equivariance", ok,
              f"median sin {med:.1e} (< 1e-3), transverse {rep['transverse_fraction']:.3f} (>= 0.99)")


@pytest.mark.criterion(9, "frame reduction")
def test_09_frame_reduction(criterion, sl2z, sl2z_spectrum):
    system, c = sl2z
    of = oseledets.orbit_frames(c, system, 400, 200, 16, 17)
    lam, lam_se = of.exponents()
    z = np.abs(lam - sl2z_spectrum.exponents) / np.hypot(lam_se, sl2z_spectrum.stderrs)
    med = float(np.median(of.offdiag))
    ok = med < 1e-3 and bool(np.all(z < 3)) and of.usable.all()
    criterion(9, "frame reduction", ok,
              f"median off-diagonal {med:.1e} (< 1e-3), log-diagonal means {np.round(lam, 4).tolist()} "
              f"({np.round(z, 2).tolist()} sigma)")


@pytest.fixture(scope="module")
def sl2z_stationary():
    system, c, cfg = system_and_cocycle("sl2z-stationary")
    nu = stationary.estimate_stationary(c, system, cfg["burn"], cfg["samples"], cfg["seed"])
    return system, c, cfg, nu


@pytest.mark.criterion(10, "stationary measure")
def test_10_stationary(criterion, sl2z_stationary, sl2z_spectrum):
    system, c, _, nu = sl2z_stationary
    refresh = nu.diagnostics["refresh"]["max_z"]
    top, top_se = stationary.furstenberg_top_exponent(c, nu, system)
    z = abs(top - sl2z_spectrum.lambda1) / math.hypot(top_se, sl2z_spectrum.stderrs[0])
    criterion(10, "stationary measure", refresh < 3 and z < 2,
              f"refresh max |z| {refresh:.2f} (< 3), integral {top:.5f} vs QR {sl2z_spectrum.lambda1:.5f} "
              f"({z:.2f} combined sigma)")


@pytest.mark.criterion(11, "Dirac contraction")
def test_11_dirac(criterion, sl2z_stationary):
    system, c, _, nu = sl2z_stationary
    diam, match = [], []
    for k in range(40):
        x = sample_orbit(system, member_seed(404, k), -1, 1)
        curve = stationary.dirac_contraction(c, x, nu, [200])
        diam.append(curve.diameter[0])
        psi = oseledets.oseledets_flags(c, x, 200).psi_minus
        match.append(flag_distance(Flag(curve.limit[0], check=False), psi))
    diam, match = np.array(diam), np.array(match)
    frac = float(np.mean(diam < 0.01))
    ok = frac >= 0.95 and float(match[diam < 0.01].max()) < 0.01
    criterion(11, "Dirac contraction", ok,
              f"{100 * frac:.0f}% of points below 0.01 (>= 95%), limit vs psi_- max {match.max():.1e}")


@pytest.mark.criterion(12, "properness")
def test_12_properness(criterion, sl2z_stationary):
    system, c, cfg, nu = sl2z_stationary
    good = stationary.properness_profile(nu, cfg["subspaces"], seed=cfg["seed"])
    rsys, rc, rcfg = system_and_cocycle("reducible-upper")
    rnu = stationary.estimate_stationary(rc, rsys, rcfg["burn"], rcfg["samples"], rcfg["seed"])
    bad = stationary.properness_profile(rnu, rcfg["subspaces"], seed=rcfg["seed"])
    bad_masses = [m for ms in bad.masses.values() for m in ms]
    ok = (not bad.verdict and min(bad_masses) >= 0.5 and good.verdict
          and min(good.lower.values()) > 0)
    criterion(12, "properness", ok,
              f"reducible: {'proper' if bad.verdict else 'not proper'}, min mass {min(bad_masses):.3f}; "
              f"SL(2,Z): {'proper' if good.verdict else 'not proper'}, "
              f"c lower bounds {np.round(list(good.lower.values()), 2).tolist()}")


@pytest.mark.criterion(13, "contraction and growth")
def test_13_growth(criterion, sl2z, sl2z_spectrum):
    system, c = sl2z
    n = 10_000
    chi = []
    for k in range(64):
        x = sample_orbit(system, member_seed(99, k), -1, 1)
        ls = stationary.log_singular_values(c, x, n)
        chi.append((ls[0] - ls[1]) / n)
    chi = np.array(chi)
    m, se = chi.mean(), chi.std(ddof=1) / math.sqrt(len(chi))
    gap, gap_se = sl2z_spectrum.gaps()[0], sl2z_spectrum.gap_stderrs()[0]
    z = abs(m - gap) / math.hypot(se, gap_se)
    criterion(13, "contraction and growth", z < 3,
              f"chi/n {m:.5f} vs lambda1-lambda2 {gap:.5f} ({z:.2f} combined sigma)")


@pytest.mark.criterion(14, "martingale convergence on F_2")
def test_14_martingale(criterion):
    e = PathEnsemble.uniform(2, 2000, 200, 29)
    curve = martingale_check(e, "a", 0.05, [200])
    hm = harmonic_measure(PathEnsemble.uniform(2, 10_000, 200, 29), ["a", "ab"])
    # every automorphism of the 4-regular tree fixing e preserves the simple
    # walk, so the first boundary letter is uniform over 4 and the second
    # uniform over the 3 letters that do not cancel it
    exact = {"a": 1 / 4, "ab": 1 / 12}
    zs = {w: abs(hm[w].value - p) / hm[w].stderr for w, p in exact.items()}
    ok = curve.fraction[-1] >= 0.95 and all(z < 3 for z in zs.values())
    criterion(14, "martingale convergence on F_2", ok,
              f"fraction {curve.fraction[-1]:.4f} (>= 0.95), nu(a) {hm['a'].value:.4f} ({zs['a']:.2f} sigma), "
              f"nu(ab) {hm['ab'].value:.4f} ({zs['ab']:.2f} sigma)")


@pytest.mark.criterion(15, "boundary skew product")
def test_15_boundary_skew(criterion):
    e = PathEnsemble.uniform(2, 10_000, 200, 31)
    rep = boundary_skew_invariance(e, 1, 2)
    ok = rep["max_z"] < 4 and rep["samples"] >= 0.99 * 10_000
    criterion(15, "boundary skew product", ok,
              f"{len(rep['cells'])} cells, max |z| {rep['max_z']:.2f} (< 4), {rep['samples']} samples")


@pytest.mark.criterion(16, "skew-product ergodicity")
def test_16_skew_ergodicity(criterion):
    cfg = cli.load_fixture("f2-skew-z3")
    system = SymbolicSystem.from_json(cfg["system"])
    s = SkewSystem.from_json(system, cfg["skew"])
    obs, exact = [], []
    probs = dict(zip(cfg["system"]["alphabet"], cfg["system"]["probs"]))
    for item in cfg["observables"]:
        cyl = Cylinder(item["cylinder"])
        obs.append(SkewObservable.product_cylinder(cyl, item["z"], system.alphabet))
        # product measure of {x_0 = s} x {z} with the uniform measure on Z/3
        exact.append(probs[item["cylinder"]["0"]] / 3)
    assert cfg["n"] == 100_000 and len(obs) == 6
    rep = skew_ergodicity_test(s, obs, cfg["n"], cfg["ensemble"], cfg["seed"])
    zs = [abs(r["birkhoff_mean"] - p) / r["stderr"] for r, p in zip(rep["rows"], exact)]
    criterion(16, "skew-product ergodicity", max(zs) < 3,
              f"max deviation {max(zs):.2f} sigma (< 3) over {len(zs)} product cylinders")


@pytest.mark.criterion(17, "flag algebra")
def test_17_flag_algebra(criterion):
    rng = np.random.default_rng(17)
    err_pr, err_rt, involution, deterministic = 0.0, 0.0, True, True
    for d in (2, 3, 4, 5):
        w = w_long(d)
        involution &= compose(w, w) == tuple(range(d))
        for _ in range(50):
            t = LineTuple(rng.standard_normal((d, d)))
            err_pr = max(err_pr, float(np.max(np.abs(pr2(t).basis - pr1(weyl_act(w, t)).basis))))
            involution &= np.array_equal(weyl_act(w, weyl_act(w, t)).vectors, t.vectors)
            back = tuple_from_flag_pair(pr1(t), pr2(t))
            err_rt = max(err_rt, float(np.max(back.line_errors(t))))
            again = tuple_from_flag_pair(pr1(t), pr2(t))
            deterministic &= np.array_equal(back.vectors, again.vectors)
    ok = err_pr < 1e-12 and err_rt < 1e-8 and involution and deterministic
    criterion(17, "flag algebra", ok,
              f"pr2 vs pr1 o w_long {err_pr:.1e}, round trip {err_rt:.1e}, "
              f"involution {involution}, deterministic {deterministic}")


@pytest.mark.criterion(18, "determinism")
def test_18_determinism(criterion, tmp_path):
    names = sorted(f["name"] for f in cli.list_fixture_configs())
    mismatched = []
    for name in names:
        cfg = cli.load_fixture(name)
        outs = []
        for run, jobs in enumerate((1, 2)):
            out = tmp_path / f"{name}-{run}"
            code = cli.main([cfg["experiment"], "--config", f"fixture:{name}", "--out", str(out),
                             "--jobs", str(jobs)])
            path = out / "summary.json"
            outs.append((code, path.read_bytes() if path.exists() else None))
        if outs[0] != outs[1] or outs[0][0] not in (0, 3):
            mismatched.append(name)
    criterion(18, "determinism", not mismatched,
              f"{len(names) - len(mismatched)}/{len(names)} fixtures byte-identical across runs"
              + (f"; differing: {mismatched}" if mismatched else ""))


def test_fixture_files_are_valid_json():
    for cfg in cli.list_fixture_configs():
        json.dumps(cfg)
        assert {"name", "experiment", "seed", "expected"} <= set(cfg)
