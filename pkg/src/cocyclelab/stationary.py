"""Stationary measures on the flag space and the harmonic family ``nu_-(x)``.

Measures are finite weighted clouds of flags.  Weak-* comparisons go through
a fixed panel of eight Lipschitz test functions ``|<u, a_k>|^2`` where ``u``
is the top line of the flag (even ``k``) or the unit normal of its hyperplane
``E_{d-1}`` (odd ``k``).
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from . import _kernels
from .cocycle import CocycleSpec
from .dynamics import OrbitWindow, SymbolicSystem, member_seed
from .errors import InsufficientGap
from .flagspace import Flag, canonical_signs, flag_distances

PANEL_SIZE = 8
GAP_THRESHOLD = 1e3
MAX_CLOUD = 200


def _rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(tag,))))


def panel_directions(d: int) -> np.ndarray:
    """The fixed unit directions ``a_1, ..., a_8`` of the test panel in ``R^d``."""
    a = np.random.default_rng([d, PANEL_SIZE]).standard_normal((PANEL_SIZE, d))
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def reference_flag(d: int) -> np.ndarray:
    """Fixed generic starting flag (avoids the coordinate subspaces that algebraic fixtures preserve)."""
    m = np.random.default_rng([d, 1]).standard_normal((d, d))
    return canonical_signs(np.linalg.qr(m)[0])


def panel_values(bases: np.ndarray) -> np.ndarray:
    """``(N, 8)`` test-function values on a stack of flag bases."""
    d = bases.shape[-1]
    a = panel_directions(d)
    top = bases[..., :, 0] @ a.T
    bottom = bases[..., :, d - 1] @ a.T
    out = np.where(np.arange(PANEL_SIZE) % 2 == 0, top, bottom)
    return out ** 2


@dataclass
class EmpiricalMeasure:
    """Weighted cloud of flags (orthonormal bases ``(N, d, d)``)."""

    atoms: np.ndarray
    weights: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.atoms = canonical_signs(np.asarray(self.atoms, dtype=float))
        w = np.asarray(self.weights, dtype=float)
        if len(self.atoms) == 0:
            raise ValueError("a measure needs at least one atom")
        if np.any(w < 0):
            raise ValueError("weights must be non-negative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {w.sum()!r}, not 1")
        self.weights = w

    @classmethod
    def uniform_cloud(cls, atoms) -> "EmpiricalMeasure":
        atoms = np.asarray(atoms, dtype=float)
        return cls(atoms, np.full(len(atoms), 1.0 / len(atoms)))

    @property
    def d(self) -> int:
        return self.atoms.shape[-1]

    def __len__(self):
        return len(self.atoms)

    def flags(self) -> list:
        return [Flag(a, check=False) for a in self.atoms]

    def max_weight(self) -> float:
        return float(self.weights.max())

    def compress(self, decimals: int = 12) -> "EmpiricalMeasure":
        """Merge atoms that agree to ``decimals`` places."""
        keys = np.round(self.atoms.reshape(len(self), -1), decimals) + 0.0
        uniq, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
        w = np.bincount(inverse.ravel(), weights=self.weights, minlength=len(uniq))
        return EmpiricalMeasure(self.atoms[first], w / w.sum(), dict(self.diagnostics))

    def subsample(self, size: int = MAX_CLOUD) -> "EmpiricalMeasure":
        """At most ``size`` atoms, evenly spaced in storage order, reweighted."""
        if len(self) <= size:
            return self
        keep = np.linspace(0, len(self) - 1, size).round().astype(int)
        w = self.weights[keep]
        return EmpiricalMeasure(self.atoms[keep], w / w.sum())

    def panel_mean(self) -> tuple:
        """Weighted means of the test panel and their standard errors."""
        v = panel_values(self.atoms)
        m = self.weights @ v
        n_eff = 1.0 / np.sum(self.weights ** 2)
        var = self.weights @ (v - m) ** 2 * n_eff / max(n_eff - 1.0, 1.0)
        return m, np.sqrt(var / n_eff)

    def distance_to_locus(self, w: np.ndarray) -> np.ndarray:
        """Angle from each atom to the flags whose ``E_{d-k}`` meets the ``k``-dim subspace ``w``.

        Zero exactly on the locus; it is ``arcsin`` of the smallest singular
        value of ``U[:, d-k:]^T W`` with ``W`` orthonormalized.
        """
        w = np.linalg.qr(np.asarray(w, dtype=float).reshape(self.d, -1))[0]
        k = w.shape[1]
        cross = np.swapaxes(self.atoms[:, :, self.d - k:], 1, 2) @ w
        s = np.linalg.svd(cross, compute_uv=False)[:, -1]
        return np.arcsin(np.clip(s, 0.0, 1.0))

    def neighborhood_mass(self, w, eps: float) -> float:
        return float(self.weights[self.distance_to_locus(w) < eps].sum())

    def push(self, g) -> "EmpiricalMeasure":
        g = np.asarray(g, dtype=float)
        q = np.linalg.qr(g @ self.atoms)[0]
        return EmpiricalMeasure(q, self.weights)

    def to_json(self) -> dict:
        return {"atoms": [{"flag": a.tolist(), "weight": float(w)} for a, w in zip(self.atoms, self.weights)]}

    @classmethod
    def from_json(cls, obj) -> "EmpiricalMeasure":
        atoms = np.array([a["flag"] for a in obj["atoms"]], dtype=float)
        return cls(atoms, np.array([a["weight"] for a in obj["atoms"]], dtype=float))


def panel_discrepancy(a: EmpiricalMeasure, b: EmpiricalMeasure) -> dict:
    """Two-sample z-scores of the test panel for independent clouds."""
    ma, sa = a.panel_mean()
    mb, sb = b.panel_mean()
    z = (ma - mb) / np.maximum(np.hypot(sa, sb), 1e-300)
    z = np.where(np.hypot(sa, sb) > 0, z, np.where(np.isclose(ma, mb, atol=1e-12), 0.0, np.inf))
    return {"z": z.tolist(), "max_z": float(np.max(np.abs(z)))}


def invariant_discrepancy(nu: EmpiricalMeasure) -> dict:
    """z-scores of the test panel against the rotation-invariant measure (mean ``1/d``)."""
    m, s = nu.panel_mean()
    z = (m - 1.0 / nu.d) / np.maximum(s, 1e-300)
    return {"z": z.tolist(), "max_z": float(np.max(np.abs(z)))}


def _law(c: CocycleSpec, system: SymbolicSystem) -> tuple:
    law = c.generator_law(system)
    p = np.array([w for w, _ in law])
    mats = np.array([m for _, m in law], dtype=float)
    return p / p.sum(), mats


# ---------------------------------------------------------------------------
# stationary measure


def estimate_stationary(c: CocycleSpec, system: SymbolicSystem, burn: int, samples: int, seed: int) -> EmpiricalMeasure:
    """Atoms ``F_burn(x_k) . reference_flag(d)`` over independent orbits ``x_k``.

    ``diagnostics["refresh"]`` holds the one-step stationarity test: each atom
    is pushed by an independent generator and the paired panel differences
    are reported as z-scores.
    """
    if burn < 10:
        raise ValueError("burn must be at least 10")
    if samples < 2:
        raise ValueError("samples must be at least 2")
    comp = c.compile(system.alphabet)
    lo, hi = c.window
    codes = np.stack([system.sample_codes(member_seed(seed, k), lo, burn - 1 + hi) for k in range(samples)])
    q0 = np.broadcast_to(reference_flag(c.d), (samples, c.d, c.d))
    _, qs, _ = _kernels.qr_sweep(comp.mats, comp.indices(codes, lo, 0, burn - 1), q0=q0, keep=1)
    atoms = qs[:, 0]
    p, mats = _law(c, system)
    g = _rng(seed, 3).choice(len(p), size=samples, p=p)
    pushed = canonical_signs(np.linalg.qr(mats[g] @ atoms)[0])
    diff = panel_values(pushed) - panel_values(canonical_signs(atoms))
    mean = diff.mean(axis=0)
    se = diff.std(axis=0, ddof=1) / np.sqrt(samples)
    z = np.where(se > 0, mean / np.maximum(se, 1e-300), np.where(np.abs(mean) < 1e-12, 0.0, np.inf))
    nu = EmpiricalMeasure.uniform_cloud(atoms).compress()
    nu.diagnostics = {"burn": burn, "samples": samples,
                      "refresh": {"z": z.tolist(), "max_z": float(np.max(np.abs(z)))}}
    return nu


def furstenberg_top_exponent(c: CocycleSpec, nu: EmpiricalMeasure, system: SymbolicSystem) -> tuple:
    """``sum_g mu(g) int log ||g v|| dnu`` with ``v`` the unit top line of each atom.

    The generator law is integrated exactly; the standard error comes from
    the spread across atoms.
    """
    p, mats = _law(c, system)
    v = nu.atoms[:, :, 0]
    vals = np.log(np.linalg.norm(np.einsum("gij,nj->ngi", mats, v), axis=2)) @ p
    w = nu.weights
    m = float(w @ vals)
    n_eff = 1.0 / np.sum(w ** 2)
    var = float(w @ (vals - m) ** 2) * n_eff / max(n_eff - 1.0, 1.0)
    return m, float(np.sqrt(var / n_eff))


# ---------------------------------------------------------------------------
# harmonic family


@dataclass
class HarmonicFamily:
    x: OrbitWindow
    M: int
    measure: EmpiricalMeasure
    n: int
    discrepancy: dict

    def to_json(self) -> dict:
        return {"M": self.M, "n": self.n, "discrepancy": self.discrepancy, "measure": self.measure.to_json()}


def _resampled_pasts(c: CocycleSpec, x: OrbitWindow, count: int, depth: int, seed: int, tag: int) -> tuple:
    # coordinates i >= lo (everything the generators F(T^k x), k >= 0, read)
    # are frozen; i < lo are redrawn given x_lo
    system = x.system
    lo, hi = c.window
    future = x.take(lo, max(lo, hi - 1))
    keys = np.random.SeedSequence(int(seed), spawn_key=(tag,)).generate_state(count, np.uint64)
    rows = []
    for key in keys:
        past = system.sample_codes(int(key), -depth, 0, start=int(future[0]))
        rows.append(np.concatenate([past[:-1], future]))
    return np.stack(rows), lo - depth


def _psi_minus_cloud(c: CocycleSpec, alphabet, codes: np.ndarray, base: int, n: int) -> tuple:
    comp = c.compile(alphabet)
    idx = comp.indices(codes, base, -n, -1)
    logdiag, qs, _ = _kernels.qr_sweep(comp.mats, idx, keep=1)
    gaps = -np.diff(logdiag, axis=1)
    return qs[:, 0], gaps


def harmonic_family(c: CocycleSpec, x: OrbitWindow, M: int, n: int, seed: int) -> HarmonicFamily:
    """``nu_-(x)``: law of ``psi_-`` over ``M`` redrawn pasts with the future of ``x`` frozen.

    The martingale identity is probed by a second cloud, ``F(T^{-1}x) psi_-(T^{-1}x)``
    with the coordinate ``x_{lo-1}`` redrawn too; ``discrepancy`` holds the
    two-sample panel z-scores.
    """
    if x.system is None:
        raise ValueError("harmonic_family needs a window attached to a system")
    if M < 2:
        raise ValueError("M must be at least 2")
    codes, base = _resampled_pasts(c, x, M, n, seed, 5)
    atoms, gaps = _psi_minus_cloud(c, x.alphabet, codes, base, n)
    if np.median(gaps.min(axis=1)) <= np.log(GAP_THRESHOLD):
        raise InsufficientGap(f"backward products of length {n} do not contract")
    # one extra redrawn step: n+1 factors ending with F(T^{-1}x)
    codes2, base2 = _resampled_pasts(c, x, M, n + 1, seed, 6)
    atoms2, _ = _psi_minus_cloud(c, x.alphabet, codes2, base2, n + 1)
    nu = EmpiricalMeasure.uniform_cloud(atoms)
    disc = panel_discrepancy(nu, EmpiricalMeasure.uniform_cloud(atoms2))
    return HarmonicFamily(x, M, nu, n, disc)


# ---------------------------------------------------------------------------
# contraction


def _medoid(atoms: np.ndarray, weights: np.ndarray) -> tuple:
    dist = flag_distances(atoms[:, None], atoms[None, :])
    k = int(np.argmin(dist @ weights))
    return k, dist[k]


def _weighted_quantile(values: np.ndarray, weights: np.ndarray, q: float) -> float:
    order = np.argsort(values)
    cw = np.cumsum(weights[order])
    return float(values[order][min(np.searchsorted(cw, q * cw[-1]), len(values) - 1)])


@dataclass
class ContractionCurve:
    n: list
    diameter: list
    limit: list   # centre flag basis for each n

    def decreasing(self, slack: float = 0.0) -> bool:
        d = np.asarray(self.diameter)
        return bool(np.all(np.diff(d) <= slack))

    def to_json(self) -> dict:
        return {"n": self.n, "diameter": self.diameter, "limit": [np.asarray(u).tolist() for u in self.limit]}

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "diameter", "stderr"])
        for n, dia in zip(self.n, self.diameter):
            w.writerow([n, repr(float(dia)), ""])
        return buf.getvalue()


def dirac_contraction(c: CocycleSpec, x: OrbitWindow, nu: EmpiricalMeasure, n_list) -> ContractionCurve:
    """Push ``nu`` by ``F(T^{-1}x) ... F(T^{-n}x)`` and record its diameter.

    The diameter is the weighted 90th percentile of the flag distance to the
    medoid atom; clouds above ``MAX_CLOUD`` atoms are thinned first.
    """
    nu = nu.subsample()
    comp = c.compile(x.alphabet)
    lo, hi = c.window
    out_d, out_l = [], []
    for n in n_list:
        n = int(n)
        row = comp.indices(x.take(-n + lo, hi - 1), -n + lo, -n, -1)
        idx = np.broadcast_to(row, (len(nu), n))
        _, qs, _ = _kernels.qr_sweep(comp.mats, idx, q0=nu.atoms, keep=1)
        pushed = canonical_signs(qs[:, 0])
        k, dist = _medoid(pushed, nu.weights)
        out_d.append(_weighted_quantile(dist, nu.weights, 0.9))
        out_l.append(pushed[k])
    return ContractionCurve([int(n) for n in n_list], out_d, out_l)


# ---------------------------------------------------------------------------
# properness


@dataclass
class ProperProfile:
    eps: list
    masses: dict          # subspace label -> list of masses on the eps grid
    exponents: dict       # label -> fitted c
    lower: dict           # label -> one-sided 95% lower bound on c
    max_atom: float
    atom_limit: float
    proper: dict          # label -> verdict
    n_atoms: int = 1

    @property
    def verdict(self) -> bool:
        return all(self.proper.values())

    def to_json(self) -> dict:
        return {"eps": self.eps, "masses": self.masses, "exponents": self.exponents, "lower": self.lower,
                "max_atom": self.max_atom, "atom_limit": self.atom_limit, "proper": self.proper,
                "verdict": "proper" if self.verdict else "not proper"}

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["subspace", "eps", "mass", "stderr"])
        for label, masses in self.masses.items():
            for e, m in zip(self.eps, masses):
                w.writerow([label, repr(float(e)), repr(float(m)), repr(float(np.sqrt(m * (1 - m) / self.n_atoms)))])
        return buf.getvalue()


def _fit_exponent(dist: np.ndarray, weights: np.ndarray, eps: np.ndarray) -> tuple:
    # least-squares slope of log mass against log eps; half-atom continuity
    # correction keeps empty neighbourhoods finite
    n = len(dist)
    mass = np.array([weights[dist < e].sum() for e in eps])
    logm = np.log((mass * n + 0.5) / (n + 1.0))
    return float(np.polyfit(np.log(eps), logm, 1)[0]), mass


def properness_profile(nu: EmpiricalMeasure, subspaces, eps_grid=(0.2, 0.1, 0.05, 0.025), seed: int = 0,
                       bootstrap: int = 200, labels=None) -> ProperProfile:
    """Neighbourhood masses of the loci of ``subspaces`` and fitted power laws ``mass ~ C eps^c``.

    A subspace counts as avoided when the bootstrap 5% quantile of ``c`` is
    positive, no atom weighs more than ``2/N`` and the mass at the smallest
    ``eps`` is below one half.
    """
    eps = np.asarray(eps_grid, dtype=float)
    if np.any(np.diff(eps) >= 0) or np.any(eps <= 0):
        raise ValueError("eps_grid must be positive and strictly decreasing")
    labels = labels or [f"W{i}" for i in range(len(subspaces))]
    n = len(nu)
    atom_limit = 2.0 / n
    rng = _rng(seed, 7)
    boot = rng.choice(n, size=(bootstrap, n), p=nu.weights)
    masses, exps, lower, proper = {}, {}, {}, {}
    for label, w in zip(labels, subspaces):
        dist = nu.distance_to_locus(w)
        c_hat, mass = _fit_exponent(dist, nu.weights, eps)
        flat = np.full(n, 1.0 / n)
        cs = np.array([_fit_exponent(dist[b], flat, eps)[0] for b in boot])
        masses[label] = mass.tolist()
        exps[label] = c_hat
        lower[label] = float(np.quantile(cs, 0.05))
        proper[label] = bool(lower[label] > 0 and nu.max_weight() <= atom_limit and mass[-1] < 0.5)
    return ProperProfile(eps.tolist(), masses, exps, lower, nu.max_weight(), atom_limit, proper, n)


# ---------------------------------------------------------------------------
# contraction -> growth


def compound(m: np.ndarray, k: int) -> np.ndarray:
    """``k``-th exterior power of ``m`` (``(..., d, d)``) in the lexicographic basis."""
    d = m.shape[-1]
    sets = list(combinations(range(d), k))
    out = np.empty(m.shape[:-2] + (len(sets), len(sets)))
    for a, rows in enumerate(sets):
        for b, cols in enumerate(sets):
            out[..., a, b] = np.linalg.det(m[..., list(rows), :][..., :, list(cols)])
    return out


@dataclass
class GrowthTable:
    n: list
    chi: list         # per n, the d-1 simple-root values log s_i - log s_{i+1}
    contracting: bool
    monotone: bool

    def to_json(self) -> dict:
        return {"n": self.n, "chi": self.chi, "contracting": self.contracting, "monotone": self.monotone}

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        d1 = len(self.chi[0]) if self.chi else 0
        w.writerow(["n"] + [f"chi_{i + 1}" for i in range(d1)] + [f"chi_{i + 1}_per_step" for i in range(d1)])
        for n, ch in zip(self.n, self.chi):
            w.writerow([n] + [repr(float(v)) for v in ch] + [repr(float(v) / n) for v in ch])
        return buf.getvalue()


def log_singular_values(c: CocycleSpec, x: OrbitWindow, n: int) -> np.ndarray:
    """``log s_1 >= ... >= log s_d`` of ``F(T^{-1}x) ... F(T^{-n}x)`` without overflow.

    Uses norms of the exterior powers: ``log ||L^k B|| = log s_1 + ... + log s_k``.
    """
    comp = c.compile(x.alphabet)
    lo, hi = c.window
    idx = comp.indices(x.take(-n + lo, hi - 1), -n + lo, -n, -1)[None, :]
    d = c.d
    partial = [0.0]
    for k in range(1, d):
        table = compound(np.where(comp.defined[:, None, None], comp.mats, 0.0), k)
        prod, scale = _kernels.product(table, idx)
        partial.append(float(np.log(np.linalg.norm(prod[0], ord=2)) + scale[0]))
    partial.append(0.0)  # log det = 0 in SL_d
    return np.diff(partial)


def contraction_growth_check(c: CocycleSpec, x: OrbitWindow, n_list) -> GrowthTable:
    """Simple-root values ``chi_i(a_n)`` of the Cartan projection of the backward products."""
    chis = []
    for n in n_list:
        ls = log_singular_values(c, x, int(n))
        chis.append((ls[:-1] - ls[1:]).tolist())
    arr = np.asarray(chis)
    contracting = bool(np.all(arr[-1] > np.log(GAP_THRESHOLD)))
    monotone = bool(np.all(np.diff(arr, axis=0) >= 0))
    return GrowthTable([int(n) for n in n_list], chis, contracting, monotone)
