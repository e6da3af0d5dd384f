import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cocyclelab import stationary
from cocyclelab.cocycle import evaluate
from cocyclelab.dynamics import sample_orbit
from cocyclelab.flagspace import Flag, flag_distance
from cocyclelab.oseledets import norm_growth_oracle, oseledets_flags
from cocyclelab.stationary import EmpiricalMeasure

from conftest import system_and_cocycle


def random_flags(n, d, seed):
    m = np.random.default_rng(seed).standard_normal((n, d, d))
    return np.linalg.qr(m)[0]


@pytest.fixture(scope="module")
def sl2z_nu():
    system, c, _ = system_and_cocycle("sl2z-stationary")
    return system, c, stationary.estimate_stationary(c, system, 150, 3000, 19)


def test_panel_is_fixed_and_bounded():
    a = stationary.panel_directions(3)
    np.testing.assert_array_equal(a, stationary.panel_directions(3))
    np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0)
    v = stationary.panel_values(random_flags(50, 3, 0))
    assert v.shape == (50, 8) and v.min() >= 0 and v.max() <= 1


def test_haar_cloud_matches_invariant_panel():
    # Haar-random orthonormal frames: every |<u, a>|^2 has mean 1/d
    nu = EmpiricalMeasure.uniform_cloud(random_flags(20_000, 3, 1))
    assert stationary.invariant_discrepancy(nu)["max_z"] < 4


def test_compress_merges_duplicates():
    base = random_flags(3, 2, 2)
    nu = EmpiricalMeasure.uniform_cloud(np.concatenate([base, base[:1], -base[:1]]))
    small = nu.compress()
    assert len(small) == 3
    assert small.max_weight() == pytest.approx(0.6)


def test_json_round_trip():
    nu = EmpiricalMeasure.uniform_cloud(random_flags(5, 3, 3))
    again = EmpiricalMeasure.from_json(nu.to_json())
    np.testing.assert_array_equal(again.atoms, nu.atoms)
    np.testing.assert_array_equal(again.weights, nu.weights)


def test_weights_validated():
    with pytest.raises(ValueError):
        EmpiricalMeasure(random_flags(2, 2, 0), [0.7, 0.7])


def test_distance_to_locus_two_lines():
    # in P^1 the locus of the line w is {w}; the distance is the angle to it
    theta = np.linspace(0, np.pi / 2, 7)
    atoms = np.stack([np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]]) for t in theta])
    nu = EmpiricalMeasure.uniform_cloud(atoms)
    np.testing.assert_allclose(nu.distance_to_locus([1.0, 0.0]), theta, atol=1e-12)


def test_stationary_refresh_and_integral(sl2z_nu):
    system, c, nu = sl2z_nu
    assert nu.diagnostics["refresh"]["max_z"] < 3.5
    top, se = stationary.furstenberg_top_exponent(c, nu, system)
    ref, ref_se = norm_growth_oracle(c, system, 50_000, 16, 1)
    assert abs(top - ref) < 4 * np.hypot(se, ref_se)


def test_stationary_measure_for_rotations_is_invariant():
    system, c, _ = system_and_cocycle("rotation")
    nu = stationary.estimate_stationary(c, system, 200, 4000, 5)
    assert stationary.invariant_discrepancy(nu)["max_z"] < 4
    top, _ = stationary.furstenberg_top_exponent(c, nu, system)
    assert abs(top) < 1e-12


def test_push_is_the_flag_action():
    nu = EmpiricalMeasure.uniform_cloud(random_flags(4, 3, 4))
    g = np.array([[1.0, 2.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    pushed = nu.push(g)
    for f, h in zip(nu.flags(), pushed.flags()):
        np.testing.assert_allclose(f.act(g).basis, h.basis, atol=1e-12)


def test_dirac_contraction_reaches_psi_minus(sl2z_nu):
    system, c, nu = sl2z_nu
    x = sample_orbit(system, 44, -1, 1)
    curve = stationary.dirac_contraction(c, x, nu, [5, 20, 80, 200])
    assert curve.decreasing(slack=1e-12)
    assert curve.diameter[-1] < 1e-8
    psi = oseledets_flags(c, x, 200).psi_minus
    assert flag_distance(Flag(curve.limit[-1], check=False), psi) < 1e-8


def test_harmonic_family_concentrates(sl2z_nu):
    system, c, _ = sl2z_nu
    x = sample_orbit(system, 7, -1, 1)
    fam = stationary.harmonic_family(c, x, 400, 80, 3)
    assert len(fam.measure) == 400
    assert fam.discrepancy["max_z"] < 4.5


def test_properness_of_uniform_circle():
    theta = np.random.default_rng(6).uniform(0, np.pi, 5000)
    atoms = np.stack([np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]]) for t in theta])
    prof = stationary.properness_profile(EmpiricalMeasure.uniform_cloud(atoms), [[1, 0], [0, 1]])
    # mass within eps of a point is 2 eps / pi, so the fitted exponent is 1
    for label in prof.exponents:
        assert abs(prof.exponents[label] - 1.0) < 0.15
    assert prof.verdict


def test_properness_detects_atoms():
    atoms = np.concatenate([np.repeat(np.eye(2)[None], 500, axis=0), random_flags(500, 2, 8)])
    nu = EmpiricalMeasure.uniform_cloud(atoms).compress()
    prof = stationary.properness_profile(nu, [[1, 0]])
    assert not prof.verdict and prof.max_atom > prof.atom_limit


@settings(max_examples=30, deadline=None)
@given(d=st.integers(2, 4), k=st.integers(1, 3), seed=st.integers(0, 2**32 - 1))
def test_compound_is_multiplicative(d, k, seed):
    if k > d:
        k = d
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, d, d))
    np.testing.assert_allclose(stationary.compound(a @ b, k),
                               stationary.compound(a, k) @ stationary.compound(b, k), atol=1e-9)


def test_compound_norm_gives_singular_value_products():
    m = np.random.default_rng(2).standard_normal((4, 4))
    s = np.linalg.svd(m, compute_uv=False)
    for k in range(1, 5):
        assert np.linalg.norm(stationary.compound(m, k), 2) == pytest.approx(np.prod(s[:k]))


def test_log_singular_values_match_svd(sl3):
    system, c = sl3
    x = sample_orbit(system, 4, -1, 1)
    ls = stationary.log_singular_values(c, x, 30)
    direct = np.log(np.linalg.svd(evaluate(c, x.shift(-30), 30), compute_uv=False))
    np.testing.assert_allclose(ls, direct, atol=1e-8)


def test_growth_table_monotone_for_long_products(sl2z_nu):
    system, c, _ = sl2z_nu
    x = sample_orbit(system, 9, -1, 1)
    table = stationary.contraction_growth_check(c, x, [50, 200, 800])
    assert table.contracting
    assert "chi_1_per_step" in table.csv()


def test_weighted_quantile_and_medoid():
    vals = np.array([3.0, 1.0, 2.0])
    w = np.array([0.2, 0.5, 0.3])
    assert stationary._weighted_quantile(vals, w, 0.5) == 1.0
    assert stationary._weighted_quantile(vals, w, 0.9) == 3.0
    atoms = np.stack([np.eye(2)] * 3 + [np.eye(2)[:, ::-1]])
    k, _ = stationary._medoid(atoms, np.full(4, 0.25))
    assert k in (0, 1, 2)


def test_reference_flag_is_generic():
    for d in (2, 3, 4):
        u = stationary.reference_flag(d)
        np.testing.assert_allclose(u.T @ u, np.eye(d), atol=1e-12)
        # no entry vanishes, so no coordinate subspace is met
        assert np.min(np.abs(u)) > 1e-3
