import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cocyclelab import oseledets
from cocyclelab.cocycle import evaluate
from cocyclelab.dynamics import Cylinder, sample_orbit
from cocyclelab.errors import InsufficientGap
from cocyclelab.flagspace import Flag, flag_distance

from conftest import system_and_cocycle


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=2, max_size=5), st.floats(1e-4, 0.1))
def test_classify_merges_close_exponents(raw, se):
    lam = np.sort(np.asarray(raw))[::-1]
    mult, label = oseledets.classify(lam, np.full(len(lam), se))
    assert sum(mult) == len(lam)
    assert label in ("simple", "degenerate", "non_degenerate", "inconclusive")
    gaps_resolved = np.all(-np.diff(lam) >= 5 * math.hypot(se, se))
    if lam[0] >= 3 * se:
        assert (label == "simple") == bool(gaps_resolved)


def test_classify_cases():
    assert oseledets.classify([1.0, -1.0], [0.01, 0.01]) == ([1, 1], "simple")
    assert oseledets.classify([0.001, -0.001], [0.01, 0.01])[1] == "degenerate"
    assert oseledets.classify([1.0, 1.0, -2.0], [0.01] * 3) == ([2, 1], "non_degenerate")
    assert oseledets.classify([0.04, 0.03, -0.07], [0.01] * 3)[1] == "inconclusive"


def test_exact_diagonal_spectrum():
    system, c, cfg = system_and_cocycle("diag-constant")
    sp = oseledets.lyapunov_spectrum(c, system, 500, 4, 0)
    np.testing.assert_allclose(sp.exponents, [math.log(2), -math.log(2)], atol=1e-13)
    assert sp.multiplicities == [1, 1] and sp.trace_ok()


def test_spectrum_is_independent_of_jobs(sl2z):
    system, c = sl2z
    a = oseledets.lyapunov_spectrum(c, system, 2000, 12, 5, jobs=1)
    b = oseledets.lyapunov_spectrum(c, system, 2000, 12, 5, jobs=3)
    np.testing.assert_array_equal(a.samples, b.samples)
    assert a.csv() == b.csv()


def test_spectrum_sorted_and_traceless(sl3):
    system, c = sl3
    sp = oseledets.lyapunov_spectrum(c, system, 5000, 8, 2)
    assert np.all(np.diff(sp.exponents) <= 0)
    assert sp.trace_ok()
    assert sp.to_json()["ensemble"] == 8


def test_norm_growth_oracle_for_commuting_generators():
    # diag(e, 1/e) with prob p and its inverse otherwise: top exponent |2p - 1|
    system, c, _ = system_and_cocycle("diag-p075")
    value, se = oseledets.norm_growth_oracle(c, system, 20_000, 16, 3)
    assert abs(value - 0.5) < 4 * se


def test_rotation_has_no_gap():
    system, c, _ = system_and_cocycle("rotation")
    sp = oseledets.lyapunov_spectrum(c, system, 2000, 4, 1)
    assert sp.classification == "degenerate"
    x = sample_orbit(system, 1, -1, 1)
    with pytest.raises(InsufficientGap):
        oseledets.oseledets_flags(c, x, 200)


def test_flags_match_singular_vectors(sl2z):
    system, c = sl2z
    x = sample_orbit(system, 3, -1, 1)
    n = 60
    pair = oseledets.oseledets_flags(c, x, n)
    # psi_- is the top left-singular line of F_n(T^{-n} x), psi_+ reversed
    # holds the top right-singular line of F_n(x)
    back = evaluate(c, x.shift(-n), n)
    u = np.linalg.svd(back)[0]
    assert flag_distance(pair.psi_minus, Flag.from_matrix(u)) < 1e-10
    fwd = evaluate(c, x, n)
    vt = np.linalg.svd(fwd)[2]
    assert abs(abs(pair.psi_plus.basis[:, -1] @ vt[0]) - 1) < 1e-10
    assert pair.transversality > 0


def test_flags_are_equivariant_and_sharpen(sl2z):
    system, c = sl2z
    coarse = oseledets.equivariance_check(c, system, 20, 200, 1)
    fine = oseledets.equivariance_check(c, system, 80, 200, 1)
    assert max(fine["p95_sin"]) < max(coarse["p95_sin"])
    assert fine["median_sin_max"] < 1e-8


def test_frame_diagonalizes(sl3):
    system, c = sl3
    x = sample_orbit(system, 8, -1, 1)
    fr = oseledets.frame(c, x, 200)
    assert fr.offdiag_mass < 1e-8
    assert fr.conditioning > 0
    np.testing.assert_allclose(np.linalg.norm(fr.c, axis=0), 1.0)


def test_frame_fails_without_gap():
    system, c, _ = system_and_cocycle("rotation")
    with pytest.raises(InsufficientGap):
        oseledets.frame(c, sample_orbit(system, 0, -1, 1), 100)


def test_orbit_frames_reproduce_exponents_for_diagonal():
    system, c, _ = system_and_cocycle("diag-p075")
    of = oseledets.orbit_frames(c, system, 100, 400, 8, 4)
    # the Oseledets lines are the axes, so D equals F exactly
    assert np.max(of.offdiag) < 1e-12
    lam, se = of.exponents()
    assert abs(lam[0] - 0.5) < 4 * se[0]


def test_induced_spectrum_full_indicator_is_identity(sl2z):
    system, c = sl2z
    rep = oseledets.induced_spectrum_check(c, system, Cylinder.everything(), 500, 4, 2, mass_ensemble=200)
    np.testing.assert_allclose(rep["ratios"], 1.0, rtol=1e-12)
    assert rep["measured_mass"] == 1.0


def test_induced_spectrum_rescales(sl2z):
    system, c = sl2z
    rep = oseledets.induced_spectrum_check(c, system, Cylinder({0: "A"}), 5000, 16, 3, mass_ensemble=8000)
    assert rep["relative_deviation"][0] < 0.1
    # the norm of the induced products grows at the same rate
    assert abs(rep["oracle_lambda1"] - rep["induced_spectrum"]["exponents"][0]) < 4 * rep["oracle_stderr"] + 0.02


def test_invalid_arguments(sl2z):
    system, c = sl2z
    with pytest.raises(ValueError):
        oseledets.lyapunov_spectrum(c, system, 10, 4, 0)
    with pytest.raises(ValueError):
        oseledets.lyapunov_spectrum(c, system, 1000, 1, 0)
