"""Random walks on free groups, their boundary points and harmonic measure.

Letters of ``F_k`` are integers: ``2i`` is the generator ``a_i`` and
``2i + 1`` its inverse, so the inverse of letter ``l`` is ``l ^ 1``.  As
strings, ``a_i`` prints as the ``i``-th lowercase letter and its inverse as
the uppercase one (``a``, ``A``, ``b``, ``B``, ...).
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from itertools import product as iproduct
from typing import Sequence

import numpy as np

from . import _kernels
from .dynamics import SymbolicSystem, member_seed
from .errors import ConfigError


def letter_name(l: int) -> str:
    ch = chr(ord("a") + l // 2)
    return ch.upper() if l % 2 else ch


def letter_code(ch: str) -> int:
    base = ord(ch.lower()) - ord("a")
    if not (0 <= base < 26) or len(ch) != 1:
        raise ValueError(f"bad letter {ch!r}")
    return 2 * base + (1 if ch.isupper() else 0)


@dataclass(frozen=True)
class ReducedWord:
    letters: tuple = ()

    def __post_init__(self):
        lt = tuple(int(l) for l in self.letters)
        for u, v in zip(lt, lt[1:]):
            if v == u ^ 1:
                raise ValueError(f"word {lt} is not reduced")
        object.__setattr__(self, "letters", lt)

    @classmethod
    def reduce(cls, letters: Sequence[int]) -> "ReducedWord":
        out: list = []
        for l in letters:
            l = int(l)
            if out and out[-1] == l ^ 1:
                out.pop()
            else:
                out.append(l)
        return cls(tuple(out))

    @classmethod
    def parse(cls, text: str) -> "ReducedWord":
        return cls.reduce([letter_code(ch) for ch in text])

    def __mul__(self, other: "ReducedWord") -> "ReducedWord":
        a, b = list(self.letters), other.letters
        i = 0
        while a and i < len(b) and a[-1] == b[i] ^ 1:
            a.pop()
            i += 1
        return ReducedWord(tuple(a) + b[i:])

    def inverse(self) -> "ReducedWord":
        return ReducedWord(tuple(l ^ 1 for l in reversed(self.letters)))

    def startswith(self, prefix: "ReducedWord") -> bool:
        return self.letters[:len(prefix)] == prefix.letters

    def __len__(self):
        return len(self.letters)

    def __str__(self):
        return "".join(letter_name(l) for l in self.letters)

    def __repr__(self):
        return f"ReducedWord({str(self) or 'e'})"


# ---------------------------------------------------------------------------
# ensembles


@dataclass
class PathEnsemble:
    """``count`` paths of ``n`` i.i.d. steps with law ``mu`` on the ``2k`` letters."""

    k: int
    mu: np.ndarray
    count: int
    n: int
    seed: int

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("rank k must be at least 1")
        mu = np.asarray(self.mu, dtype=float)
        if mu.shape != (2 * self.k,):
            raise ConfigError(f"mu needs {2 * self.k} entries, got {mu.shape}")
        if np.any(mu < 0) or abs(mu.sum() - 1.0) > 1e-12:
            raise ConfigError("mu must be a probability vector")
        if np.any(mu[0::2] + mu[1::2] <= 0):
            raise ConfigError("mu must charge every generator or its inverse")
        if self.n < 1 or self.count < 1:
            raise ConfigError("n and count must be positive")
        self.mu = mu

    @classmethod
    def uniform(cls, k: int, count: int, n: int, seed: int) -> "PathEnsemble":
        return cls(k, np.full(2 * k, 1.0 / (2 * k)), count, n, seed)

    @classmethod
    def from_json(cls, obj) -> "PathEnsemble":
        try:
            k = int(obj["k"])
            mu = obj.get("mu")
            if mu is None:
                mu = np.full(2 * k, 1.0 / (2 * k))
            elif isinstance(mu, dict):
                vec = np.zeros(2 * k)
                for name, p in mu.items():
                    vec[letter_code(name)] = p
                mu = vec
            return cls(k, mu, int(obj["count"]), int(obj["n"]), int(obj["seed"]))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad ensemble config: {exc}") from None

    def to_json(self) -> dict:
        return {"k": self.k, "mu": self.mu.tolist(), "count": self.count, "n": self.n, "seed": self.seed}

    @property
    def is_simple(self) -> bool:
        """Uniform law on all ``2k`` letters (simple random walk on the tree)."""
        return bool(np.allclose(self.mu, 1.0 / (2 * self.k), rtol=0, atol=1e-15))

    def step_system(self) -> SymbolicSystem:
        return SymbolicSystem.bernoulli([letter_name(l) for l in range(2 * self.k)], self.mu.tolist())

    def sample_letters(self, n: int | None = None, count: int | None = None, tag: int = 0) -> np.ndarray:
        """``(count, n)`` steps ``omega_1 .. omega_n``, path ``p`` keyed on ``(seed, p)``."""
        n = self.n if n is None else n
        count = self.count if count is None else count
        sys = self.step_system()
        key = self.seed if tag == 0 else member_seed(self.seed, (1 << 40) + tag)
        return np.stack([sys.sample_codes(member_seed(key, p), 1, n) for p in range(count)]).astype(np.int8)


@dataclass
class Paths:
    """Forward products ``pi_t = omega_1 ... omega_t`` and ``check pi_t = omega_1^-1 ... omega_t^-1``."""

    letters: np.ndarray
    stack: np.ndarray
    length: np.ndarray
    hist: np.ndarray
    check_stack: np.ndarray
    check_length: np.ndarray
    check_hist: np.ndarray

    @property
    def n(self) -> int:
        return self.letters.shape[1]

    def __len__(self):
        return self.letters.shape[0]

    def pi(self, p: int, t: int | None = None) -> ReducedWord:
        if t is None:
            return ReducedWord(tuple(self.stack[p, :self.length[p]]))
        return ReducedWord.reduce(self.letters[p, :t])

    def pi_check(self, p: int, t: int | None = None) -> ReducedWord:
        if t is None:
            return ReducedWord(tuple(self.check_stack[p, :self.check_length[p]]))
        return ReducedWord.reduce(self.letters[p, :t] ^ 1)


def walk(letters) -> Paths:
    letters = np.atleast_2d(np.asarray(letters, dtype=np.int8))
    stack, length, hist = _kernels.free_walk(letters)
    cstack, clength, chist = _kernels.free_walk(letters ^ 1)
    return Paths(letters, stack, length, hist, cstack, clength, chist)


def walk_paths(e: PathEnsemble) -> Paths:
    return walk(e.sample_letters())


# ---------------------------------------------------------------------------
# boundary points


def stable_lengths(hist: np.ndarray, s: int) -> np.ndarray:
    """Length of the prefix of ``pi_n`` that did not change during the last ``s`` steps.

    A prefix of length ``L`` survives steps ``t0..n`` exactly when the reduced
    length never drops below ``L`` there.  Zero when ``n < s``.
    """
    n = hist.shape[1] - 1
    if n < s:
        return np.zeros(hist.shape[0], dtype=np.int64)
    return hist[:, n - s:].min(axis=1)


def boundary_point(paths: Paths, p: int, s: int = 50, check: bool = False) -> ReducedWord | None:
    """Resolved boundary prefix of path ``p`` (``None`` when unresolved)."""
    if s < 1:
        raise ValueError("stability window must be at least 1")
    hist = paths.check_hist if check else paths.hist
    stack = paths.check_stack if check else paths.stack
    L = int(stable_lengths(hist[p:p + 1], s)[0])
    if L == 0:
        return None
    return ReducedWord(tuple(stack[p, :L]))


@dataclass
class Estimate:
    value: float
    stderr: float
    count: int

    def to_json(self) -> dict:
        return {"value": self.value, "stderr": self.stderr, "count": self.count}


def _prefix_hits(stack: np.ndarray, resolved: np.ndarray, w: ReducedWord) -> tuple:
    ok = resolved >= len(w)
    if len(w) == 0:
        return ok, ok
    hit = ok & np.all(stack[:, :len(w)] == np.asarray(w.letters, dtype=stack.dtype), axis=1)
    return ok, hit


def harmonic_measure(e: PathEnsemble, cylinders, s: int = 50, paths: Paths | None = None) -> dict:
    """``nu(cylinder(w))`` as the fraction of resolved boundary points extending ``w``.

    Only paths whose stable prefix is at least ``|w|`` long count.  The
    empty prefix gets weight 1 exactly.
    """
    paths = walk_paths(e) if paths is None else paths
    resolved = stable_lengths(paths.hist, s)
    out = {}
    for w in cylinders:
        w = ReducedWord.parse(w) if isinstance(w, str) else w
        if len(w) == 0:
            out[str(w)] = Estimate(1.0, 0.0, len(paths))
            continue
        ok, hit = _prefix_hits(paths.stack, resolved, w)
        m = int(ok.sum())
        p = hit.sum() / m if m else float("nan")
        out[str(w)] = Estimate(float(p), float(np.sqrt(p * (1 - p) / m)) if m else float("nan"), m)
    return out


# ---------------------------------------------------------------------------
# harmonic functions h_D(g) = nu(g^{-1} D)


def tree_harmonic(g: ReducedWord, w: ReducedWord, k: int) -> float:
    """``nu(g^{-1} cylinder(w))`` for the simple random walk on ``F_k`` (closed form).

    With ``q = 2k - 1`` the walk from a vertex moves away from any fixed
    vertex with probability ``q/(q+1)``, so it ever reaches a vertex at
    distance ``r`` with probability ``q^-r``.
    """
    if len(w) == 0:
        return 1.0
    if k < 2:
        raise ValueError("the simple walk on Z is recurrent and has no boundary convergence")
    q = 2 * k - 1
    if g.startswith(w):
        m = len(g) - len(w)
        return 1.0 - q ** (-m) / (q + 1)
    common = 0
    while common < min(len(g), len(w)) and g.letters[common] == w.letters[common]:
        common += 1
    dist = (len(g) - common) + (len(w) - common)
    return q ** (-dist) * q / (q + 1)


def mc_harmonic(e: PathEnsemble, g: ReducedWord, w: ReducedWord, inner: int, inner_n: int, tag: int) -> float:
    """Nested Monte Carlo ``P(prefix of g . pi_{inner_n} is w)`` for a general step law."""
    if len(w) == 0:
        return 1.0
    letters = e.sample_letters(n=inner_n, count=inner, tag=tag)
    paths = walk(letters)
    hits = 0
    for p in range(inner):
        if (g * paths.pi(p)).startswith(w):
            hits += 1
    return hits / inner


def _tree_harmonic_batch(stack: np.ndarray, length: np.ndarray, w: ReducedWord, k: int) -> np.ndarray:
    if len(w) == 0:
        return np.ones(len(length))
    if k < 2:
        raise ValueError("the simple walk on Z is recurrent and has no boundary convergence")
    q = 2.0 * k - 1.0
    L = len(w)
    width = min(L, stack.shape[1])
    match = np.zeros((len(length), L), dtype=bool)
    match[:, :width] = stack[:, :width] == np.asarray(w.letters[:width], dtype=stack.dtype)
    match &= np.arange(L)[None, :] < length[:, None]
    common = np.cumprod(match, axis=1).sum(axis=1)
    inside = common == L
    dist = (length - common) + (L - common)
    return np.where(inside, 1.0 - q ** (-(length - L).astype(float)) / (q + 1),
                    q ** (1.0 - dist) / (q + 1))


@dataclass
class Curve:
    n: list
    fraction: list
    stderr: list
    unresolved: int

    def monotone(self, sigmas: float = 1.0) -> bool:
        f, se = np.asarray(self.fraction), np.asarray(self.stderr)
        return bool(np.all(np.diff(f) >= -sigmas * np.hypot(se[1:], se[:-1]) - 1e-15))

    def to_json(self) -> dict:
        return {"n": self.n, "fraction": self.fraction, "stderr": self.stderr, "unresolved": self.unresolved}

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "fraction", "stderr"])
        for row in zip(self.n, self.fraction, self.stderr):
            w.writerow([row[0], repr(float(row[1])), repr(float(row[2]))])
        return buf.getvalue()


def martingale_check(e: PathEnsemble, D, eps: float = 0.05, n_grid=None, s: int = 50, complement: bool = False,
                     inner: int = 64, inner_n: int = 100) -> Curve:
    """Fraction of paths with ``|h_D(check pi_n) - 1_D(check bnd)| < eps`` along ``n_grid``.

    Paths run for ``max(n_grid) + s`` steps and the boundary point of the
    ``check pi`` walk is its prefix stable over the last ``s`` of them;
    unresolved paths count as failures.  ``h_D`` uses the closed tree form
    for the simple walk and nested Monte Carlo otherwise.
    """
    if not 0 < eps < 0.5:
        raise ValueError("eps must lie in (0, 1/2)")
    D = ReducedWord.parse(D) if isinstance(D, str) else D
    grid = sorted({int(t) for t in (n_grid or _default_grid(e.n))})
    horizon = grid[-1] + s
    letters = e.sample_letters(n=horizon)
    paths = walk(letters)
    resolved = stable_lengths(paths.check_hist, s)
    ok, in_D = _prefix_hits(paths.check_stack, resolved, D)
    target = in_D.astype(float)
    if complement:
        target = 1.0 - target
    fractions, errs = [], []
    cache: dict = {}
    for t in grid:
        stack_t, len_t, _ = _kernels.free_walk(letters[:, :t] ^ 1)
        if e.is_simple:
            vals = _tree_harmonic_batch(stack_t, len_t, D, e.k)
        else:
            vals = np.empty(len(paths))
            for p in range(len(paths)):
                g = ReducedWord(tuple(stack_t[p, :len_t[p]]))
                if g not in cache:
                    cache[g] = mc_harmonic(e, g, D, inner, inner_n, tag=1 + len(cache))
                vals[p] = cache[g]
        if complement:
            vals = 1.0 - vals
        good = ok & (np.abs(vals - target) < eps)
        f = float(good.mean())
        fractions.append(f)
        errs.append(float(np.sqrt(f * (1 - f) / len(paths))))
    return Curve(grid, fractions, errs, int((~ok).sum()))


def _default_grid(n: int) -> list:
    grid = [t for t in (1, 2, 5, 10, 20, 50, 100, 200, 500, 1000) if t < n]
    return grid + [n]


# ---------------------------------------------------------------------------
# boundary skew product S(omega, x) = (shift omega, omega_1 . x)


def boundary_skew_invariance(e: PathEnsemble, n_shift: int = 1, max_len: int = 2, s: int = 50) -> dict:
    """Paired test of ``mu^N x nu``-invariance of ``S^n_shift`` on joint cylinders.

    Cells are pairs (first ``a`` steps of ``omega``, reduced ``b``-prefix of
    the boundary point) with ``1 <= a + b <= max_len``.  Each sample yields
    the indicator difference after minus before; the report holds the
    z-score of every cell and the largest ``|z|``.
    """
    if n_shift < 0:
        raise ValueError("n_shift must be non-negative")
    steps = e.sample_letters(n=n_shift + max_len, tag=7919)
    bnd_paths = walk(e.sample_letters(tag=104729))
    resolved = stable_lengths(bnd_paths.hist, s)
    keep = np.flatnonzero(resolved >= max_len + n_shift)
    x_before = [ReducedWord(tuple(bnd_paths.stack[p, :resolved[p]])) for p in keep]
    x_after = []
    for j, p in enumerate(keep):
        g = ReducedWord.reduce(steps[p, :n_shift][::-1])   # omega_m ... omega_1
        x_after.append(g * x_before[j])
    om_before = steps[keep, :max_len]
    om_after = steps[keep, n_shift:n_shift + max_len]
    letters = range(2 * e.k)
    cells = []
    for a in range(max_len + 1):
        for b in range(max_len + 1 - a):
            if a + b == 0:
                continue
            for om in iproduct(letters, repeat=a):
                for xw in iproduct(letters, repeat=b):
                    if any(v == u ^ 1 for u, v in zip(xw, xw[1:])):
                        continue
                    cells.append((om, xw))
    xb = np.array([list(w.letters[:max_len]) for w in x_before], dtype=np.int64).reshape(len(keep), -1)
    xa = np.array([list(w.letters[:max_len]) for w in x_after], dtype=np.int64).reshape(len(keep), -1)
    report = []
    worst = 0.0
    for om, xw in cells:
        a, b = len(om), len(xw)
        before = np.all(om_before[:, :a] == om, axis=1) & np.all(xb[:, :b] == xw, axis=1)
        after = np.all(om_after[:, :a] == om, axis=1) & np.all(xa[:, :b] == xw, axis=1)
        diff = after.astype(float) - before.astype(float)
        m = diff.mean() if len(diff) else 0.0
        se = diff.std(ddof=1) / np.sqrt(len(diff)) if len(diff) > 1 else 0.0
        if se > 0:
            z = m / se
        else:
            z = 0.0 if m == 0 else float("inf")
        worst = max(worst, abs(z))
        report.append({"omega": "".join(letter_name(l) for l in om), "x": "".join(letter_name(l) for l in xw),
                       "before": float(before.mean()) if len(before) else 0.0,
                       "after": float(after.mean()) if len(after) else 0.0, "z": float(z)})
    return {"n_shift": n_shift, "samples": int(len(keep)), "dropped": int(e.count - len(keep)),
            "cells": report, "max_z": float(worst)}
