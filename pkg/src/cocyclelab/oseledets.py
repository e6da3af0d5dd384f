"""Lyapunov spectra, finite-horizon Oseledets flags and diagonalizing frames.

Flags come from two QR sweeps.  The forward sweep over ``F(T^{-n}x), ...,
F(T^{-1}x)`` yields the unstable flag ``psi_-(x)`` (its ``E_j`` spans the
``j`` fastest Oseledets lines); the sweep over the transposed matrices
``F(T^{n-1}x)^T, ..., F(x)^T`` yields the fastest right-singular flag of
``F_n(x)``, whose reversal is the stable flag ``psi_+(x)``.  The Oseledets
lines are ``L_j = E_j(psi_-) ∩ E_{d-j+1}(psi_+)``.
"""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .cocycle import CocycleSpec, orbit_indices
from .dynamics import Cylinder, OrbitWindow, SymbolicSystem, _first_entrance, induce, member_seed, sample_orbit
from .errors import InsufficientGap, NotTransverse, NumericalBreakdown
from .flagspace import (GENERAL_POSITION_THRESHOLD, Flag, general_position_margins, intersection_lines,
                        transversality as _transversality)

GAP_THRESHOLD = 1e3
MULTIPLICITY_SIGMAS = 5.0
DEGENERATE_SIGMAS = 3.0
# stderr floor: zero-variance fixtures are decided on exact values up to rounding
SIGMA_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# spectrum


@dataclass
class Spectrum:
    exponents: np.ndarray
    stderrs: np.ndarray
    multiplicities: list
    classification: str
    samples: np.ndarray = field(repr=False)
    n: int = 0

    @property
    def d(self) -> int:
        return len(self.exponents)

    @property
    def lambda1(self) -> float:
        return float(self.exponents[0])

    def gaps(self) -> np.ndarray:
        return -np.diff(self.exponents)

    def gap_stderrs(self) -> np.ndarray:
        """Standard errors of consecutive gaps from the per-member gap samples."""
        g = self.samples[:, :-1] - self.samples[:, 1:]
        return g.std(axis=0, ddof=1) / np.sqrt(len(g))

    def trace_ok(self) -> bool:
        return abs(float(self.exponents.sum())) <= 5.0 * float(self.stderrs.sum()) + SIGMA_FLOOR

    def to_json(self) -> dict:
        return {"exponents": self.exponents.tolist(), "stderrs": self.stderrs.tolist(),
                "multiplicities": list(self.multiplicities), "classification": self.classification,
                "n": self.n, "ensemble": int(len(self.samples))}

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["member"] + [f"lambda_{i + 1}" for i in range(self.d)])
        for k, row in enumerate(self.samples):
            w.writerow([k] + [repr(float(v)) for v in row])
        return buf.getvalue()


def classify(exponents, stderrs) -> tuple:
    """Group exponents into multiplicities and classify the spectrum.

    Adjacent exponents closer than 5 combined standard errors are merged.
    Returns ``(multiplicities, label)`` with label one of ``simple``,
    ``degenerate``, ``non_degenerate``, ``inconclusive``.
    """
    lam = np.asarray(exponents, dtype=float)
    se = np.maximum(np.asarray(stderrs, dtype=float), SIGMA_FLOOR)
    mult = [1]
    resolved = True
    for i in range(len(lam) - 1):
        gap = lam[i] - lam[i + 1]
        if gap >= MULTIPLICITY_SIGMAS * np.hypot(se[i], se[i + 1]):
            mult.append(1)
        else:
            mult[-1] += 1
            resolved = False
    if lam[0] < DEGENERATE_SIGMAS * se[0]:
        label = "degenerate"
    elif resolved:
        label = "simple"
    elif lam[0] >= MULTIPLICITY_SIGMAS * se[0]:
        label = "non_degenerate"
    else:
        label = "inconclusive"
    return mult, label


def _member_chunks(seed: int, ensemble: int, jobs: int) -> list:
    seeds = [member_seed(seed, k) for k in range(ensemble)]
    jobs = max(1, min(int(jobs), ensemble))
    step = -(-ensemble // jobs)
    return [seeds[i:i + step] for i in range(0, ensemble, step)]


def _run_chunks(fn, chunks: list, jobs: int) -> list:
    if jobs <= 1 or len(chunks) == 1:
        return [fn(ch) for ch in chunks]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, chunks))


def lyapunov_spectrum(c: CocycleSpec, system: SymbolicSystem, n: int, ensemble: int, seed: int,
                      jobs: int = 1) -> Spectrum:
    """QR estimate of the Lyapunov spectrum over ``ensemble`` independent orbits of length ``n``."""
    if n < 100:
        raise ValueError("n must be at least 100")
    if ensemble < 2:
        raise ValueError("ensemble must be at least 2")
    comp = c.compile(system.alphabet)

    def work(seeds):
        logdiag, _, bad = _kernels.qr_sweep(comp.mats, orbit_indices(c, system, seeds, 0, n - 1))
        return logdiag, bad

    parts = _run_chunks(work, _member_chunks(seed, ensemble, jobs), jobs)
    logdiag = np.concatenate([p[0] for p in parts])
    if np.concatenate([p[1] for p in parts]).any():
        raise NumericalBreakdown("an R diagonal entry under-flowed in the QR sweep")
    return _spectrum_from_samples(logdiag / n, n)


def _spectrum_from_samples(samples: np.ndarray, n: int) -> Spectrum:
    means = samples.mean(axis=0)
    order = np.argsort(-means, kind="stable")
    samples = samples[:, order]
    means = means[order]
    stderrs = samples.std(axis=0, ddof=1) / np.sqrt(len(samples))
    mult, label = classify(means, stderrs)
    return Spectrum(means, stderrs, mult, label, samples, n)


def norm_growth_oracle(c: CocycleSpec, system: SymbolicSystem, n: int, ensemble: int, seed: int,
                       jobs: int = 1) -> tuple:
    """``(1/n) log ||F_n(x)||`` averaged over orbits: an independent estimate of ``lambda_1``."""
    if ensemble < 2:
        raise ValueError("ensemble must be at least 2")
    comp = c.compile(system.alphabet)

    def work(seeds):
        prods, scales = _kernels.product(comp.mats, orbit_indices(c, system, seeds, 0, n - 1))
        return (np.log(np.linalg.norm(prods, ord=2, axis=(1, 2))) + scales) / n

    vals = np.concatenate(_run_chunks(work, _member_chunks(seed, ensemble, jobs), jobs))
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(len(vals)))


# ---------------------------------------------------------------------------
# flags and frames


@dataclass
class _Sweeps:
    minus: np.ndarray       # (E, J, d, d) bases of psi_- at T^j x
    plus: np.ndarray        # (E, J, d, d) bases of psi_+ at T^j x
    gap_ok: np.ndarray      # (E, J) log-singular gaps of both products exceed log(GAP_THRESHOLD)
    gaps: np.ndarray        # (E, J, 2, d-1) log gaps of the backward and forward products


def _sweeps(c: CocycleSpec, alphabet, codes: np.ndarray, base: int, j_min: int, j_max: int, n: int) -> _Sweeps:
    # every point T^j x gets its own pair of length-n sweeps, so flags at
    # neighbouring points are independent finite-horizon estimates
    comp = c.compile(alphabet)
    n_pts = j_max - j_min + 1
    full = comp.indices(codes, base, j_min - n, j_max + n - 1)
    n_orb = full.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(full, n, axis=1)
    idx_f = win[:, :n_pts].reshape(-1, n)
    idx_b = win[:, n:n + n_pts, ::-1].reshape(-1, n)
    logd_f, qf, bad_f = _kernels.qr_sweep(comp.mats, idx_f, keep=1)
    mats_t = np.ascontiguousarray(np.swapaxes(comp.mats, 1, 2))
    logd_b, qb, bad_b = _kernels.qr_sweep(mats_t, idx_b, keep=1)
    if (bad_f | bad_b).any():
        raise NumericalBreakdown("an R diagonal entry under-flowed while computing flags")
    gaps = np.stack([-np.diff(logd_f, axis=1), -np.diff(logd_b, axis=1)], axis=1)
    gaps = gaps.reshape(n_orb, n_pts, 2, -1)
    gap_ok = np.all(gaps > np.log(GAP_THRESHOLD), axis=(2, 3))
    minus = qf[:, 0].reshape(n_orb, n_pts, c.d, c.d)
    plus = qb[:, 0, :, ::-1].reshape(n_orb, n_pts, c.d, c.d)
    return _Sweeps(minus, np.ascontiguousarray(plus), gap_ok, gaps)


def _point_codes(c: CocycleSpec, x: OrbitWindow, j_min: int, j_max: int, n: int):
    lo, hi = c.window
    a, b = j_min - n + lo, j_max + n - 1 + hi
    return x.take(a, b)[None, :], a


@dataclass
class FlagPair:
    psi_plus: Flag
    psi_minus: Flag
    transversality: float
    log_gaps: np.ndarray

    def to_json(self) -> dict:
        return {"psi_plus": self.psi_plus.to_json(), "psi_minus": self.psi_minus.to_json(),
                "transversality": self.transversality, "log_gaps": self.log_gaps.tolist()}


def oseledets_flags(c: CocycleSpec, x: OrbitWindow, n: int) -> FlagPair:
    """Finite-horizon stable/unstable flags at ``x`` from products of length ``n``.

    Raises :class:`InsufficientGap` unless every consecutive singular-value
    ratio of ``F_n(x)`` and ``F_{-n}(x)`` (estimated from the QR diagonals)
    exceeds ``1e3``.
    """
    codes, base = _point_codes(c, x, 0, 0, n)
    sw = _sweeps(c, x.alphabet, codes, base, 0, 0, n)
    if not sw.gap_ok[0, 0]:
        raise InsufficientGap(
            f"singular values not separated at n={n}: log gaps {np.round(sw.gaps[0, 0], 3).tolist()}")
    minus, plus = sw.minus[0, 0], sw.plus[0, 0]
    return FlagPair(Flag(plus, check=False), Flag(minus, check=False),
                    float(_transversality(minus, plus)), sw.gaps[0, 0])


@dataclass
class OseledetsFrame:
    """Columns of ``c`` are unit vectors on ``L_1(x), ..., L_d(x)``.

    The one-step matrix in these frames is ``D(x) = c(Tx)^{-1} F(x) c(x)``; it
    is diagonal for the exact splitting.
    """

    c: np.ndarray
    conditioning: float
    D: np.ndarray
    offdiag_mass: float

    def to_json(self) -> dict:
        return {"c": self.c.tolist(), "conditioning": self.conditioning, "D": self.D.tolist(),
                "offdiag_mass": self.offdiag_mass}


def _frames_from_sweeps(sw: _Sweeps) -> tuple:
    margins = general_position_margins(sw.minus, sw.plus)
    return intersection_lines(sw.minus, sw.plus), margins > GENERAL_POSITION_THRESHOLD


def _conjugate(frames: np.ndarray, mats: np.ndarray) -> np.ndarray:
    # frames (..., J, d, d) at T^j x, mats (..., J-1, d, d) = F(T^j x)
    return np.linalg.solve(frames[..., 1:, :, :], mats @ frames[..., :-1, :, :])


def _offdiag(D: np.ndarray) -> np.ndarray:
    d = D.shape[-1]
    off = D * (1.0 - np.eye(d))
    return np.linalg.norm(off, axis=(-2, -1)) / np.linalg.norm(D, axis=(-2, -1))


def frame(c: CocycleSpec, x: OrbitWindow, n: int) -> OseledetsFrame:
    """Frame ``c(x)`` of Oseledets lines and the conjugated step ``D(x)``."""
    codes, base = _point_codes(c, x, 0, 1, n)
    sw = _sweeps(c, x.alphabet, codes, base, 0, 1, n)
    if not sw.gap_ok[0].all():
        raise InsufficientGap(f"singular values not separated at n={n}")
    frames, transverse = _frames_from_sweeps(sw)
    if not transverse.all():
        raise NotTransverse("stable and unstable flags are not in general position")
    frames = frames[0]
    comp = c.compile(x.alphabet)
    F = comp.mats[comp.indices(codes, base, 0, 0)[0]]
    D = _conjugate(frames, F)[0]
    cx = frames[0]
    return OseledetsFrame(cx, float(np.linalg.svd(cx, compute_uv=False)[-1]), D, float(_offdiag(D)))


@dataclass
class OrbitFrames:
    """Frames along ``ensemble`` orbit segments ``x, Tx, ..., T^length x``."""

    frames: np.ndarray          # (E, length + 1, d, d)
    D: np.ndarray               # (E, length, d, d)
    offdiag: np.ndarray         # (E, length)
    log_diag_means: np.ndarray  # (E, d): orbit average of log|D_jj|
    usable: np.ndarray          # (E,) every point had separated, transverse flags

    def exponents(self) -> tuple:
        vals = self.log_diag_means[self.usable]
        return vals.mean(axis=0), vals.std(axis=0, ddof=1) / np.sqrt(len(vals))


def orbit_frames(c: CocycleSpec, system: SymbolicSystem, n: int, length: int, ensemble: int,
                 seed: int) -> OrbitFrames:
    """Frames and conjugated steps at every point of seeded orbit segments."""
    lo, hi = c.window
    seeds = [member_seed(seed, k) for k in range(ensemble)]
    a, b = -n + lo, length + n - 1 + hi
    codes = np.stack([system.sample_codes(s, a, b) for s in seeds])
    sw = _sweeps(c, system.alphabet, codes, a, 0, length, n)
    frames, transverse = _frames_from_sweeps(sw)
    comp = c.compile(system.alphabet)
    F = comp.mats[comp.indices(codes, a, 0, length - 1)]
    D = _conjugate(frames, F)
    logs = np.log(np.abs(np.diagonal(D, axis1=-2, axis2=-1))).mean(axis=1)
    return OrbitFrames(frames, D, _offdiag(D), logs, (sw.gap_ok & transverse).all(axis=1))


def equivariance_check(c: CocycleSpec, system: SymbolicSystem, n: int, ensemble: int, seed: int) -> dict:
    """Sine of the angle between ``F(x) L_j(x)`` and ``L_j(Tx)`` over sampled ``x``.

    Samples whose products lack the singular-value gap are counted in
    ``insufficient_fraction``; :class:`InsufficientGap` is raised when no
    sample qualifies.
    """
    lo, hi = c.window
    seeds = [member_seed(seed, k) for k in range(ensemble)]
    a, b = -n + lo, n + hi
    codes = np.stack([system.sample_codes(s, a, b) for s in seeds])
    sw = _sweeps(c, system.alphabet, codes, a, 0, 1, n)
    ok = sw.gap_ok.all(axis=1)
    if not ok.any():
        raise InsufficientGap(f"no sampled point has separated singular values at n={n}")
    minus, plus = sw.minus[ok], sw.plus[ok]
    trans = _transversality(minus[:, 0], plus[:, 0])
    lines = intersection_lines(minus, plus)
    comp = c.compile(system.alphabet)
    F = comp.mats[comp.indices(codes[ok], a, 0, 0)[:, 0]]
    pushed = F @ lines[:, 0]
    pushed /= np.linalg.norm(pushed, axis=1, keepdims=True)
    target = lines[:, 1]
    resid = pushed - np.sum(pushed * target, axis=1, keepdims=True) * target
    sines = np.linalg.norm(resid, axis=1)  # (E_ok, d)
    return {
        "n": n, "ensemble": ensemble,
        "insufficient_fraction": float(1.0 - ok.mean()),
        "median_sin": np.median(sines, axis=0).tolist(),
        "p95_sin": np.percentile(sines, 95, axis=0).tolist(),
        "median_sin_max": float(np.median(sines.max(axis=1))),
        "transverse_fraction": float(np.mean(trans > GENERAL_POSITION_THRESHOLD)),
        "sines": sines,
    }


# ---------------------------------------------------------------------------
# induced systems


def induced_spectrum_check(c: CocycleSpec, system: SymbolicSystem, indicator: Cylinder, n: int, ensemble: int,
                           seed: int, mass_ensemble: int = 20000, spectrum: Spectrum | None = None) -> dict:
    """Spectrum of ``F*(x) = F_{n(x)}(x)`` over the first-return system on ``indicator``.

    ``n`` is the number of induced steps per orbit (and the orbit length of
    the reference spectrum unless one is passed).  The induced spectrum should
    equal the original one scaled by ``1/m(X*)``.
    """
    induced = induce(system, indicator, mass_ensemble, seed)
    if induced.measured_mass < 0.05:
        raise ValueError(f"indicator mass {induced.measured_mass:.3g} below 0.05")
    if spectrum is None:
        spectrum = lyapunov_spectrum(c, system, n, ensemble, seed)
    comp = c.compile(system.alphabet)
    lo, hi = c.window
    tables, idx_rows, scale_sums, oracle = [], [], [], []
    for k in range(ensemble):
        x = sample_orbit(system, member_seed(seed, k), min(lo, 0), max(hi, 0))
        y = x.shift(_first_entrance(x, indicator, induced.return_cap))
        times = induced.returns(y, n)
        total = int(times.sum())
        idx = comp.indices(y.take(lo, total - 1 + hi), lo, 0, total - 1)
        bounds = np.concatenate([[0], np.cumsum(times)])
        blocks, scales = _kernels.block_products(comp.mats, idx, bounds)
        tables.append(blocks)
        scale_sums.append(scales.sum())
        idx_rows.append(np.arange(n) + k * n)
        prod, pscale = _kernels.product(blocks, np.arange(n)[None, :])
        oracle.append((np.log(np.linalg.norm(prod[0], ord=2)) + pscale[0] + scales.sum()) / n)
    logdiag, _, bad = _kernels.qr_sweep(np.concatenate(tables), np.stack(idx_rows))
    if bad.any():
        raise NumericalBreakdown("an R diagonal entry under-flowed in the induced QR sweep")
    induced_spec = _spectrum_from_samples((logdiag + np.asarray(scale_sums)[:, None]) / n, n)
    ratios = induced_spec.exponents / spectrum.exponents
    target = 1.0 / induced.measured_mass
    kac, kac_sigma = induced.kac()
    oracle = np.asarray(oracle)
    return {
        "measured_mass": induced.measured_mass, "mass_stderr": induced.mass_stderr,
        "mean_return": induced.mean_return, "return_stderr": induced.return_stderr,
        "kac": kac, "kac_sigma": kac_sigma,
        "spectrum": spectrum.to_json(), "induced_spectrum": induced_spec.to_json(),
        "ratios": ratios.tolist(), "target_ratio": target,
        "relative_deviation": (np.abs(ratios / target - 1.0)).tolist(),
        "oracle_lambda1": float(oracle.mean()),
        "oracle_stderr": float(oracle.std(ddof=1) / np.sqrt(len(oracle))),
    }

