"""Matrix cocycles over symbolic systems and permutation skew products.

A :class:`CocycleSpec` assigns an ``SL_d(R)`` matrix to each word read from a
fixed coordinate window of the point (by default the single coordinate
``x_1``).  Products along orbits are accumulated with multiplicative
rescaling so that long products keep a finite mantissa and a separate log
scale.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import _kernels
from .dynamics import Cylinder, OrbitWindow, SymbolicSystem, member_seed
from .errors import ConfigError, WindowTooSmall

DET_TOL = 1e-9
BATCHES = 10


def check_sl(m, d: int | None = None) -> np.ndarray:
    """Validate and return ``m`` as a float matrix in ``SL_d(R)``."""
    m = np.array(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 2:
        raise ConfigError(f"expected a square matrix of size >= 2, got shape {m.shape}")
    if d is not None and m.shape[0] != d:
        raise ConfigError(f"expected a {d}x{d} matrix, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ConfigError("matrix entries must be finite")
    det = np.linalg.det(m)
    if abs(det - 1.0) > DET_TOL:
        raise ConfigError(f"matrix has determinant {det!r}, not 1")
    return m


def _word_key(key, width: int) -> tuple:
    if isinstance(key, str):
        parts = tuple(key.split(",")) if width > 1 else (key,)
    else:
        parts = tuple(str(k) for k in key)
    if len(parts) != width:
        raise ConfigError(f"table key {key!r} does not have {width} symbols")
    return parts


@dataclass(frozen=True)
class Compiled:
    """Table of generator matrices indexed by mixed-radix word codes."""

    mats: np.ndarray
    inverses: np.ndarray
    radix: int
    lo: int
    hi: int
    defined: np.ndarray

    def indices(self, codes: np.ndarray, base: int, k_min: int, k_max: int) -> np.ndarray:
        """Table index of ``F(T^k x)`` for ``k_min <= k <= k_max`` (``codes[i - base] = x_i``)."""
        a = k_min + self.lo - base
        b = k_max + self.hi - base
        if a < 0 or b >= codes.shape[-1]:
            raise WindowTooSmall(
                f"generator window needs coordinates [{k_min + self.lo}, {k_max + self.hi}]")
        width = self.hi - self.lo + 1
        seg = codes[..., a:b + 1].astype(np.int64)
        if width == 1:
            idx = seg
        else:
            idx = np.zeros(seg.shape[:-1] + (seg.shape[-1] - width + 1,), dtype=np.int64)
            for j in range(width):
                idx = idx * self.radix + seg[..., j:seg.shape[-1] - width + 1 + j]
        if not self.defined[idx].all():
            raise ConfigError("orbit visits a symbol window missing from the cocycle table")
        return idx


class CocycleSpec:
    """Generator ``F: X -> SL_d(R)`` given by a table on symbol windows.

    ``table`` maps a word (tuple of symbols, or a comma-separated string; a
    bare symbol for width one) to a ``d x d`` matrix of determinant one.
    """

    def __init__(self, d: int, table: Mapping, window: Sequence[int] = (1, 1)):
        self.d = int(d)
        lo, hi = (int(window[0]), int(window[1]))
        if hi < lo:
            raise ConfigError("cocycle window must satisfy lo <= hi")
        self.window = (lo, hi)
        self.table = {_word_key(k, hi - lo + 1): check_sl(v, self.d) for k, v in table.items()}
        if not self.table:
            raise ConfigError("cocycle table is empty")
        self._compiled: dict = {}

    @property
    def width(self) -> int:
        return self.window[1] - self.window[0] + 1

    @classmethod
    def from_json(cls, obj: Mapping) -> "CocycleSpec":
        if not isinstance(obj, Mapping):
            raise ConfigError("cocycle config must be a JSON object")
        try:
            return cls(obj["d"], obj["table"], obj.get("window", (1, 1)))
        except KeyError as exc:
            raise ConfigError(f"cocycle config lacks field {exc}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad cocycle config: {exc}") from None

    def to_json(self) -> dict:
        return {"d": self.d, "window": list(self.window),
                "table": {",".join(k): v.tolist() for k, v in self.table.items()}}

    def compile(self, alphabet) -> Compiled:
        alphabet = tuple(alphabet)
        if alphabet not in self._compiled:
            k, w = len(alphabet), self.width
            mats = np.full((k ** w, self.d, self.d), np.nan)
            defined = np.zeros(k ** w, dtype=bool)
            for word, m in self.table.items():
                try:
                    codes = [alphabet.index(s) for s in word]
                except ValueError:
                    raise ConfigError(f"table word {word} uses symbols outside {alphabet}") from None
                i = 0
                for c in codes:
                    i = i * k + c
                mats[i] = m
                defined[i] = True
            inv = np.full_like(mats, np.nan)
            inv[defined] = np.linalg.inv(mats[defined])
            self._compiled[alphabet] = Compiled(mats, inv, k, self.window[0], self.window[1], defined)
        return self._compiled[alphabet]

    def generator_law(self, system: SymbolicSystem) -> list:
        """``[(probability, matrix)]`` for every word of positive probability.

        Raises :class:`ConfigError` when such a word is missing from the table.
        """
        out = []
        for codes in itertools.product(range(len(system.alphabet)), repeat=self.width):
            p = system.word_probability(codes)
            if p <= 0:
                continue
            word = tuple(system.alphabet[c] for c in codes)
            if word not in self.table:
                raise ConfigError(f"cocycle table misses reachable word {word}")
            out.append((p, self.table[word]))
        return out

    def check_total(self, system: SymbolicSystem) -> None:
        self.generator_law(system)

    def __repr__(self):
        return f"CocycleSpec(d={self.d}, window={self.window}, words={len(self.table)})"


# ---------------------------------------------------------------------------
# evaluation


def evaluate(c: CocycleSpec, x: OrbitWindow, n: int, log_scale: bool = False):
    """``F_n(x)``: forward products for ``n >= 1``, ``I`` for ``n = 0``, inverses for ``n < 0``.

    With ``log_scale=True`` returns ``(M, s)`` such that ``F_n(x) = exp(s) M``;
    otherwise the matrix itself (which may overflow for very long products).
    """
    comp = c.compile(x.alphabet)
    lo, hi = c.window
    if n == 0:
        out, scale = np.eye(c.d), 0.0
    elif n > 0:
        idx = comp.indices(x.take(lo, n - 1 + hi), lo, 0, n - 1)
        prods, scales = _kernels.product(comp.mats, idx[None, :])
        out, scale = prods[0], float(scales[0])
    else:
        idx = comp.indices(x.take(n + lo, hi - 1), n + lo, n, -1)
        prods, scales = _kernels.product(comp.inverses, idx[None, ::-1])
        out, scale = prods[0], float(scales[0])
    if log_scale:
        return out, scale
    return out * np.exp(scale) if scale else out


def orbit_indices(c: CocycleSpec, system: SymbolicSystem, seeds: Sequence[int], k_min: int, k_max: int,
                  start=None) -> np.ndarray:
    """``(E, k_max - k_min + 1)`` table indices of ``F(T^k x)`` along each seeded orbit."""
    comp = c.compile(system.alphabet)
    lo, hi = c.window
    codes = np.stack([system.sample_codes(s, k_min + lo, k_max + hi, start=start) for s in seeds])
    return comp.indices(codes, k_min + lo, k_min, k_max)


def integrability(c: CocycleSpec, system: SymbolicSystem, ensemble: int, seed: int) -> tuple:
    """Monte Carlo estimate of ``E log ||F(x)||`` (operator norm) with its standard error."""
    if ensemble < 1:
        raise ValueError("ensemble must be positive")
    comp = c.compile(system.alphabet)
    seeds = [member_seed(seed, k) for k in range(ensemble)]
    idx = orbit_indices(c, system, seeds, 0, 0)[:, 0]
    table_logs = np.full(len(comp.mats), np.nan)
    table_logs[comp.defined] = np.log(np.linalg.norm(comp.mats[comp.defined], ord=2, axis=(1, 2)))
    vals = table_logs[idx]
    stderr = float(vals.std(ddof=1) / np.sqrt(ensemble)) if ensemble > 1 else 0.0
    return float(vals.mean()), stderr


# ---------------------------------------------------------------------------
# skew products


class SkewSystem:
    """Skew product ``(x, z) -> (Tx, f(x).z)`` with ``f(x)`` acting on ``{0..m-1}`` by permutations.

    ``perms`` maps each word of the action window (default ``x_1``) to a
    permutation list ``p`` with ``f.z = p[z]``.
    """

    def __init__(self, base: SymbolicSystem, perms: Mapping, z_size: int, zeta=None,
                 window: Sequence[int] = (1, 1)):
        self.base = base
        self.z_size = int(z_size)
        lo, hi = int(window[0]), int(window[1])
        self.window = (lo, hi)
        width = hi - lo + 1
        k = len(base.alphabet)
        table = np.full((k ** width, self.z_size), -1, dtype=np.int64)
        for key, p in perms.items():
            word = _word_key(key, width)
            p = np.asarray(p, dtype=np.int64)
            if sorted(p.tolist()) != list(range(self.z_size)):
                raise ConfigError(f"action of {word} is not a permutation of 0..{self.z_size - 1}")
            i = 0
            for s in word:
                i = i * k + base.code(s)
            table[i] = p
        self.perm_table = table
        self.zeta = np.full(self.z_size, 1.0 / self.z_size) if zeta is None else np.asarray(zeta, dtype=float)
        if self.zeta.shape != (self.z_size,) or abs(self.zeta.sum() - 1.0) > 1e-12 or np.any(self.zeta < 0):
            raise ConfigError("zeta must be a probability vector on Z")
        for p in table:
            if p[0] >= 0 and not np.array_equal(self.zeta[p], self.zeta):
                raise ConfigError("zeta is not invariant under the permutation action")
        self._defined = table[:, 0] >= 0

    @classmethod
    def from_json(cls, system: SymbolicSystem, obj: Mapping) -> "SkewSystem":
        try:
            return cls(system, obj["perms"], obj["z_size"], obj.get("zeta"), obj.get("action_window", (1, 1)))
        except KeyError as exc:
            raise ConfigError(f"skew config lacks field {exc}") from None

    def indices(self, codes: np.ndarray, base: int, k_min: int, k_max: int) -> np.ndarray:
        lo, hi = self.window
        comp = Compiled(np.zeros((len(self.perm_table), 1, 1)), np.zeros((len(self.perm_table), 1, 1)),
                        len(self.base.alphabet), lo, hi, self._defined)
        return comp.indices(codes, base, k_min, k_max)

    def markov_matrix(self) -> np.ndarray:
        """Transition matrix of ``z`` alone when the action reads i.i.d. coordinates."""
        k = len(self.base.alphabet)
        width = self.window[1] - self.window[0] + 1
        out = np.zeros((self.z_size, self.z_size))
        for i, codes in enumerate(itertools.product(range(k), repeat=width)):
            p = self.base.word_probability(codes)
            if p > 0:
                out[np.arange(self.z_size), self.perm_table[i]] += p
        return out


def skew_orbit(s: SkewSystem, x: OrbitWindow, z0: int, n: int) -> np.ndarray:
    """``z_0, ..., z_n`` along ``T_f^k (x, z0)``."""
    if not 0 <= z0 < s.z_size:
        raise ValueError(f"z0 must lie in 0..{s.z_size - 1}")
    if n == 0:
        return np.array([z0])
    lo, hi = s.window
    idx = s.indices(x.take(lo, n - 1 + hi), lo, 0, n - 1)
    return _kernels.perm_walk(s.perm_table, idx[None, :], [z0])[0]


@dataclass(frozen=True)
class SkewObservable:
    """Function of ``(x_lo..x_hi, z)``; ``fn(block, z)`` is vectorized over rows."""

    lo: int
    hi: int
    fn: Callable[[np.ndarray, np.ndarray], np.ndarray] = field(compare=False)
    name: str = ""

    @classmethod
    def product_cylinder(cls, cyl: Cylinder, z_value: int | None, alphabet) -> "SkewObservable":
        lo, hi = cyl.window
        oks = {j: np.array([a in allowed for a in alphabet]) for j, allowed in cyl.constraints.items()}

        def fn(block, z):
            out = np.ones(len(z), dtype=bool)
            for j, ok in oks.items():
                out &= ok[block[:, j - lo]]
            if z_value is not None:
                out &= z == z_value
            return out.astype(float)

        label = ",".join(f"x{j}={'|'.join(sorted(a))}" for j, a in cyl.constraints.items())
        if z_value is not None:
            label = f"{label},z={z_value}" if label else f"z={z_value}"
        return cls(lo, hi, fn, label)

    def space_average(self, system: SymbolicSystem, zeta: np.ndarray) -> float:
        """Exact integral against ``m x zeta`` by enumerating the coordinate window."""
        k = len(system.alphabet)
        width = self.hi - self.lo + 1
        words = np.array(list(itertools.product(range(k), repeat=width)), dtype=np.int64)
        probs = np.array([system.word_probability(w) for w in words])
        total = 0.0
        for z, pz in enumerate(zeta):
            if pz > 0:
                total += pz * float(probs @ self.fn(words, np.full(len(words), z)))
        return total


def skew_ergodicity_test(s: SkewSystem, observables: Sequence[SkewObservable], n: int, ensemble: int,
                         seed: int) -> dict:
    """Birkhoff averages along ``T_f`` orbits against exact ``m x zeta`` averages."""
    if ensemble < 2:
        raise ValueError("ensemble must be at least 2")
    lo_a, hi_a = s.window
    lo = min([lo_a] + [o.lo for o in observables])
    hi = max([hi_a] + [o.hi for o in observables])
    seeds = [member_seed(seed, k) for k in range(ensemble)]
    codes = np.stack([s.base.sample_codes(m, lo, n - 1 + hi) for m in seeds])
    z0 = np.array([np.random.default_rng(np.random.SeedSequence(m, spawn_key=(2,))).choice(s.z_size, p=s.zeta)
                   for m in seeds])
    z = _kernels.perm_walk(s.perm_table, s.indices(codes, lo, 0, n - 1), z0)[:, :n]
    rows = []
    for obs in observables:
        w = obs.hi - obs.lo + 1
        nb = BATCHES if n >= 10 * BATCHES else 1
        avgs = np.empty((ensemble, nb))
        for e in range(ensemble):
            a = obs.lo - lo
            block = np.lib.stride_tricks.sliding_window_view(codes[e, a:a + n + w - 1], w)
            vals = obs.fn(block, z[e])
            # batch means: short-memory chains make these close to independent
            avgs[e] = [b.mean() for b in np.array_split(vals, nb)]
        mean = float(avgs.mean())
        stderr = float(avgs.std(ddof=1) / np.sqrt(avgs.size))
        target = obs.space_average(s.base, s.zeta)
        dev = abs(mean - target)
        sigmas = dev / stderr if stderr > 0 else (0.0 if dev == 0 else float("inf"))
        rows.append({"observable": obs.name, "birkhoff_mean": mean, "stderr": stderr,
                     "space_average": target, "deviation_sigma": sigmas})
    return {"n": n, "ensemble": ensemble, "rows": rows,
            "max_deviation_sigma": max((r["deviation_sigma"] for r in rows), default=0.0)}
