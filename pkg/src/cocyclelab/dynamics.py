"""Symbolic p.m.p. systems: two-sided shifts with Bernoulli or Markov laws.

Points of the shift space are materialized lazily.  Coordinate ``i`` of the
orbit keyed by ``seed`` is a deterministic function of ``(seed, i)`` (for
Markov chains, of the uniforms between 0 and ``i``), so windows can be grown
in either direction without touching symbols that already exist.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Mapping, Sequence

import numpy as np

from . import _kernels
from .errors import ConfigError, EmptyIndicator, ReturnCapExceeded, WindowTooSmall

BLOCK = 4096
DEFAULT_RETURN_CAP = 10**6
_SEED_MASK = (1 << 64) - 1


# ---------------------------------------------------------------------------
# seeding


def member_seed(seed: int, k: int) -> int:
    """64-bit sub-seed for ensemble member ``k``, derived by hashing."""
    words = np.random.SeedSequence(int(seed), spawn_key=(int(k), 1)).generate_state(2, np.uint32)
    return int(words[0]) | (int(words[1]) << 32)


@lru_cache(maxsize=1024)
def _uniform_block(seed: int, block: int) -> np.ndarray:
    zigzag = 2 * block if block >= 0 else -2 * block - 1
    ss = np.random.SeedSequence(seed, spawn_key=(zigzag, 0))
    out = np.random.Generator(np.random.PCG64(ss)).random(BLOCK)
    out.flags.writeable = False
    return out


def uniforms(seed: int, i_min: int, i_max: int) -> np.ndarray:
    """Uniforms ``u_i`` for ``i_min <= i <= i_max``, keyed on ``(seed, i)``."""
    if i_max < i_min:
        return np.empty(0)
    b_lo, b_hi = i_min // BLOCK, i_max // BLOCK
    parts = [_uniform_block(seed, b) for b in range(b_lo, b_hi + 1)]
    flat = parts[0] if len(parts) == 1 else np.concatenate(parts)
    start = i_min - b_lo * BLOCK
    return flat[start:start + (i_max - i_min + 1)]


# ---------------------------------------------------------------------------
# systems


def _check_seed(seed) -> int:
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)):
        raise ConfigError(f"seed must be an integer, got {seed!r}")
    seed = int(seed)
    if not 0 <= seed <= _SEED_MASK:
        raise ConfigError("seed must lie in [0, 2**64)")
    return seed


def _stationary_vector(p: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eig(p.T)
    ones = np.flatnonzero(np.abs(w - 1.0) < 1e-9)
    if len(ones) != 1:
        raise ConfigError("transition matrix has no unique stationary vector; pass one explicitly")
    pi = np.real(v[:, ones[0]])
    pi = pi / pi.sum()
    pi[np.abs(pi) < 1e-15] = 0.0
    return pi


def _cumulative(rows: np.ndarray) -> np.ndarray:
    cum = np.cumsum(rows, axis=-1)
    cum[..., -1] = 1.0
    return cum


@dataclass(eq=False)
class SymbolicSystem:
    """Invertible shift on ``alphabet^Z`` with a product or stationary Markov law.

    Exactly one of ``probs`` (Bernoulli) and ``transition`` (Markov) is given.
    For Markov chains the stationary vector is computed when omitted; it must
    be supplied when it is not unique.
    """

    alphabet: tuple
    probs: np.ndarray | None = None
    transition: np.ndarray | None = None
    stationary: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        self.alphabet = tuple(str(a) for a in self.alphabet)
        k = len(self.alphabet)
        if k == 0 or len(set(self.alphabet)) != k:
            raise ConfigError("alphabet must be a non-empty list of distinct symbols")
        self.seed = _check_seed(self.seed)
        if (self.probs is None) == (self.transition is None):
            raise ConfigError("give exactly one of probs or transition")
        if self.probs is not None:
            p = np.asarray(self.probs, dtype=float)
            if p.shape != (k,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
                raise ConfigError("probs must be a probability vector over the alphabet")
            self.probs = p
            self._cum = _cumulative(p)
        else:
            P = np.asarray(self.transition, dtype=float)
            if P.shape != (k, k) or np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-12):
                raise ConfigError("transition must be a row-stochastic k x k matrix")
            self.transition = P
            if self.stationary is None:
                pi = _stationary_vector(P)
            else:
                pi = np.asarray(self.stationary, dtype=float)
            if pi.shape != (k,) or np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-12:
                raise ConfigError("stationary must be a probability vector")
            if np.max(np.abs(pi @ P - pi)) > 1e-10:
                raise ConfigError("stationary vector is not invariant under the transition matrix")
            self.stationary = pi
            # time reversal: P_rev[a, b] = pi_b P[b, a] / pi_a; unused rows fall back to pi
            rev = np.tile(pi, (k, 1))
            pos = pi > 0
            rev[pos] = (P.T[pos] * pi[None, :]) / pi[pos, None]
            self._rev = rev
            self._cum = _cumulative(P)
            self._cum_rev = _cumulative(rev)
            self._cum_pi = _cumulative(pi)

    # constructors -------------------------------------------------------
    @classmethod
    def bernoulli(cls, alphabet, probs, seed=0):
        return cls(tuple(alphabet), probs=probs, seed=seed)

    @classmethod
    def markov(cls, alphabet, transition, stationary=None, seed=0):
        return cls(tuple(alphabet), transition=transition, stationary=stationary, seed=seed)

    @classmethod
    def from_json(cls, obj: Mapping) -> "SymbolicSystem":
        if not isinstance(obj, Mapping):
            raise ConfigError("system config must be a JSON object")
        kind = obj.get("kind")
        try:
            if kind == "bernoulli":
                return cls(tuple(obj["alphabet"]), probs=obj["probs"], seed=obj.get("seed", 0))
            if kind == "markov":
                return cls(tuple(obj["alphabet"]), transition=obj["transition"],
                           stationary=obj.get("stationary"), seed=obj.get("seed", 0))
        except KeyError as exc:
            raise ConfigError(f"system config lacks field {exc}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad system config: {exc}") from None
        raise ConfigError(f"system kind must be 'bernoulli' or 'markov', got {kind!r}")

    def to_json(self) -> dict:
        out = {"kind": self.kind, "alphabet": list(self.alphabet)}
        if self.kind == "bernoulli":
            out["probs"] = self.probs.tolist()
        else:
            out["transition"] = self.transition.tolist()
            out["stationary"] = self.stationary.tolist()
        out["seed"] = self.seed
        return out

    # queries ------------------------------------------------------------
    @property
    def kind(self) -> str:
        return "bernoulli" if self.probs is not None else "markov"

    @property
    def marginal(self) -> np.ndarray:
        """Law of a single coordinate."""
        return self.probs if self.probs is not None else self.stationary

    def code(self, symbol) -> int:
        try:
            return self.alphabet.index(str(symbol))
        except ValueError:
            raise KeyError(f"symbol {symbol!r} not in alphabet {self.alphabet}") from None

    def word_probability(self, codes: Sequence[int]) -> float:
        """Probability of the cylinder ``x_j = codes[j]`` on consecutive coordinates."""
        codes = list(codes)
        if not codes:
            return 1.0
        if self.kind == "bernoulli":
            return float(np.prod(self.probs[codes]))
        p = self.stationary[codes[0]]
        for a, b in zip(codes, codes[1:]):
            p *= self.transition[a, b]
        return float(p)

    # sampling -----------------------------------------------------------
    def sample_codes(self, seed: int, i_min: int, i_max: int, start=None) -> np.ndarray:
        """Symbol codes ``x_i`` for ``i_min <= i <= i_max`` (see :func:`sample_orbit`)."""
        seed = _check_seed(seed)
        k = len(self.alphabet)
        start = None if start is None else (start if isinstance(start, (int, np.integer)) else self.code(start))
        if self.kind == "bernoulli":
            u = uniforms(seed, i_min, i_max)
            codes = np.minimum(np.searchsorted(self._cum, u, side="right"), k - 1).astype(np.int64)
            if start is not None and i_min <= 0 <= i_max:
                codes[-i_min] = start
            return codes
        lo, hi = min(i_min, 0), max(i_max, 0)
        u = uniforms(seed, lo, hi)
        x0 = start if start is not None else min(int(np.searchsorted(self._cum_pi, u[-lo], side="right")), k - 1)
        fwd = _kernels.markov_chain(self._cum, x0, u[-lo:])
        bwd = _kernels.markov_chain(self._cum_rev, x0, u[:-lo + 1][::-1])[::-1]
        full = np.concatenate([bwd[:-1], fwd])
        return full[i_min - lo:i_max - lo + 1]


# ---------------------------------------------------------------------------
# orbit windows


@dataclass(eq=False)
class _Store:
    lo: int
    codes: np.ndarray


class OrbitWindow:
    """A lazily materialized point ``x`` of the shift space.

    ``window[i]`` is the symbol ``x_i``.  ``shift(n)`` returns ``T^n x`` sharing
    the same storage, so ``x.shift(n)[i] == x[i + n]`` exactly.
    """

    def __init__(self, system: SymbolicSystem | None, seed: int | None, store: _Store,
                 offset: int = 0, start=None, extendable: bool = True):
        self.system = system
        self.seed = seed
        self._store = store
        self.offset = offset
        self.start = start
        self.extendable = extendable and system is not None

    @classmethod
    def from_symbols(cls, symbols: Sequence, i_min: int = 0, system: SymbolicSystem | None = None):
        """Fixed window from explicit symbols; it cannot be extended."""
        if system is not None:
            codes = np.array([system.code(s) for s in symbols], dtype=np.int64)
            alphabet = system.alphabet
        else:
            alphabet = tuple(dict.fromkeys(str(s) for s in symbols))
            codes = np.array([alphabet.index(str(s)) for s in symbols], dtype=np.int64)
        win = cls(system, None, _Store(i_min, codes), extendable=False)
        win._alphabet = alphabet
        return win

    @property
    def alphabet(self) -> tuple:
        return self.system.alphabet if self.system is not None else self._alphabet

    @property
    def i_min(self) -> int:
        return self._store.lo - self.offset

    @property
    def i_max(self) -> int:
        return self._store.lo + len(self._store.codes) - 1 - self.offset

    def covers(self, i_min: int, i_max: int) -> bool:
        return self.i_min <= i_min and i_max <= self.i_max

    def extend(self, i_min: int, i_max: int) -> "OrbitWindow":
        """Grow the materialized range to include ``[i_min, i_max]``; returns self."""
        if self.covers(i_min, i_max):
            return self
        if not self.extendable:
            raise WindowTooSmall(
                f"need coordinates [{i_min}, {i_max}], window holds [{self.i_min}, {self.i_max}]")
        lo = min(i_min, self.i_min) + self.offset
        hi = max(i_max, self.i_max) + self.offset
        codes = self.system.sample_codes(self.seed, lo, hi, start=self.start)
        self._store.lo, self._store.codes = lo, codes
        return self

    def codes(self, i_min: int, i_max: int) -> np.ndarray:
        """Codes of ``x_i`` for ``i_min <= i <= i_max``; raises if not materialized."""
        if not self.covers(i_min, i_max):
            raise WindowTooSmall(
                f"need coordinates [{i_min}, {i_max}], window holds [{self.i_min}, {self.i_max}]")
        a = i_min + self.offset - self._store.lo
        return self._store.codes[a:a + (i_max - i_min + 1)]

    def take(self, i_min: int, i_max: int) -> np.ndarray:
        """Like :meth:`codes`, growing extendable windows first."""
        if self.extendable:
            self.extend(i_min, i_max)
        return self.codes(i_min, i_max)

    def symbols(self, i_min: int, i_max: int) -> list:
        return [self.alphabet[c] for c in self.codes(i_min, i_max)]

    def __getitem__(self, i: int) -> str:
        return self.alphabet[self.codes(i, i)[0]]

    def shift(self, n: int) -> "OrbitWindow":
        """The point ``T^n x``."""
        win = OrbitWindow(self.system, self.seed, self._store, self.offset + n,
                          start=self.start, extendable=self.extendable)
        if self.system is None:
            win._alphabet = self._alphabet
        return win

    def __repr__(self):
        return f"OrbitWindow([{self.i_min}, {self.i_max}], seed={self.seed}, offset={self.offset})"


def sample_orbit(system: SymbolicSystem, seed: int | None = None, i_min: int = 0, i_max: int = 0,
                 start=None) -> OrbitWindow:
    """Materialize ``x_i`` for ``i_min <= i <= i_max`` of the orbit keyed by ``seed``.

    ``start`` pins ``x_0`` (for Markov chains the rest of the orbit is then the
    chain conditioned on ``x_0``, forward with the transition matrix and
    backward with its time reversal).
    """
    if i_min > i_max:
        raise ValueError("i_min must not exceed i_max")
    seed = system.seed if seed is None else _check_seed(seed)
    codes = system.sample_codes(seed, i_min, i_max, start=start)
    return OrbitWindow(system, seed, _Store(i_min, codes), start=start)


# ---------------------------------------------------------------------------
# cylinders and observables


class Cylinder:
    """Predicate ``x_{j} in S_j`` for finitely many offsets ``j``.

    ``Cylinder({0: "a", 1: {"a", "b"}})``; the empty cylinder is the whole space.
    """

    def __init__(self, constraints: Mapping[int, object] | None = None):
        cons = {}
        for j, allowed in (constraints or {}).items():
            if isinstance(allowed, str):
                allowed = {allowed}
            cons[int(j)] = frozenset(str(a) for a in allowed)
        self.constraints = dict(sorted(cons.items()))

    @classmethod
    def everything(cls) -> "Cylinder":
        return cls()

    @property
    def window(self) -> tuple:
        if not self.constraints:
            return (0, 0)
        return (min(self.constraints), max(self.constraints))

    @property
    def is_full(self) -> bool:
        return not self.constraints

    def mask(self, codes: np.ndarray, base: int, k_min: int, k_max: int, alphabet) -> np.ndarray:
        """Boolean ``[indicator(T^k x) for k in k_min..k_max]`` from raw codes.

        ``codes[i - base]`` holds ``x_i`` and must cover every needed index.
        """
        out = np.ones(k_max - k_min + 1, dtype=bool)
        for j, allowed in self.constraints.items():
            ok = np.array([a in allowed for a in alphabet])
            a = k_min + j - base
            if a < 0 or k_max + j - base >= len(codes):
                raise WindowTooSmall("codes do not cover the cylinder window")
            out &= ok[codes[a:a + len(out)]]
        return out

    def __call__(self, x: OrbitWindow, k: int = 0) -> bool:
        lo, hi = self.window
        codes = x.codes(lo + k, hi + k)
        return bool(self.mask(codes, lo + k, k, k, x.alphabet)[0])

    def probability(self, system: SymbolicSystem) -> float:
        """Exact measure of the cylinder under the system's law."""
        if self.is_full:
            return 1.0
        lo, hi = self.window
        choices = []
        for j in range(lo, hi + 1):
            allowed = self.constraints.get(j)
            choices.append([c for c, a in enumerate(system.alphabet) if allowed is None or a in allowed])
        return float(sum(system.word_probability(w) for w in itertools.product(*choices)))

    def to_json(self) -> dict:
        return {str(j): sorted(s) for j, s in self.constraints.items()}

    def __repr__(self):
        return f"Cylinder({ {j: sorted(s) for j, s in self.constraints.items()} })"


@dataclass(frozen=True)
class Observable:
    """A function of the finite coordinate window ``x_lo .. x_hi``.

    ``fn`` maps an ``(m, hi - lo + 1)`` array of symbol codes to ``m`` values.
    """

    lo: int
    hi: int
    fn: Callable[[np.ndarray], np.ndarray] = field(compare=False)

    @classmethod
    def constant(cls, c: float) -> "Observable":
        return cls(0, 0, lambda block: np.full(len(block), float(c)))

    @classmethod
    def symbol_values(cls, alphabet, values: Mapping[str, float], offset: int = 0) -> "Observable":
        table = np.array([float(values.get(a, 0.0)) for a in alphabet])
        return cls(offset, offset, lambda block: table[block[:, 0]])

    @classmethod
    def indicator(cls, cyl: Cylinder, alphabet) -> "Observable":
        lo, hi = cyl.window
        oks = {j: np.array([a in s for a in alphabet]) for j, s in cyl.constraints.items()}

        def fn(block):
            out = np.ones(len(block), dtype=bool)
            for j, ok in oks.items():
                out &= ok[block[:, j - lo]]
            return out.astype(float)

        return cls(lo, hi, fn)

    def values(self, codes: np.ndarray, base: int, k_min: int, k_max: int) -> np.ndarray:
        """``[h(T^k x) for k in k_min..k_max]`` with ``codes[i - base] = x_i``."""
        a = k_min + self.lo - base
        b = k_max + self.hi - base
        if a < 0 or b >= len(codes):
            raise WindowTooSmall("codes do not cover the observable window")
        block = np.lib.stride_tricks.sliding_window_view(codes[a:b + 1], self.hi - self.lo + 1)
        return np.asarray(self.fn(block), dtype=float)


# ---------------------------------------------------------------------------
# induced systems


def first_return(system: SymbolicSystem, indicator: Cylinder, x: OrbitWindow,
                 return_cap: int = DEFAULT_RETURN_CAP) -> int:
    """Smallest ``n >= 1`` with ``indicator(T^n x)``.

    Extendable windows are grown forward in doubling chunks; fixed windows
    raise :class:`WindowTooSmall` when the search runs off their end.
    """
    if not indicator(x):
        raise ValueError("first_return needs a point of the induced set")
    lo, hi = indicator.window
    k0, chunk = 1, 64
    while k0 <= return_cap:
        k1 = min(k0 + chunk - 1, return_cap)
        if x.extendable:
            x.extend(x.i_min, k1 + hi)
        elif not x.covers(k0 + lo, k1 + hi):
            k1 = x.i_max - hi
            if k1 < k0:
                raise WindowTooSmall("fixed window ended before a return was found")
        hits = np.flatnonzero(indicator.mask(x.codes(k0 + lo, k1 + hi), k0 + lo, k0, k1, x.alphabet))
        if len(hits):
            return int(k0 + hits[0])
        if not x.extendable and k1 < min(k0 + chunk - 1, return_cap):
            raise WindowTooSmall("fixed window ended before a return was found")
        k0, chunk = k1 + 1, chunk * 2
    raise ReturnCapExceeded(f"no return to {indicator!r} within {return_cap} steps")


@dataclass
class InducedSystem:
    """First-return system on the cylinder ``indicator``."""

    base: SymbolicSystem
    indicator: Cylinder
    return_cap: int
    measured_mass: float
    mass_stderr: float
    mean_return: float
    return_stderr: float
    n_sampled: int
    n_hits: int

    def kac(self) -> tuple:
        """``(measured_mass * mean_return, combined standard error)``."""
        value = self.measured_mass * self.mean_return
        sigma = float(np.hypot(self.mass_stderr * self.mean_return, self.measured_mass * self.return_stderr))
        return value, sigma

    def entrance(self, seed: int) -> OrbitWindow:
        """A point of the induced set: ``T^k x`` for the first ``k >= 0`` hitting it."""
        x = sample_orbit(self.base, seed, -64, 64)
        return x.shift(_first_entrance(x, self.indicator, self.return_cap))

    def returns(self, x: OrbitWindow, count: int) -> np.ndarray:
        """Successive return times along the induced orbit ``x, T*x, T*^2 x, ...``."""
        if not self.indicator(x):
            raise ValueError("returns needs a point of the induced set")
        lo, hi = self.indicator.window
        horizon = int(2 * count / max(self.measured_mass, 1e-9)) + 64
        while True:
            last = horizon
            if x.extendable:
                x.extend(min(x.i_min, lo), last + hi)
            else:
                last = min(last, x.i_max - hi)
            mask = self.indicator.mask(x.codes(lo, last + hi), lo, 0, last, x.alphabet)
            hits = np.flatnonzero(mask)
            gaps = np.diff(hits)
            if len(gaps) and gaps[:count].max() > self.return_cap:
                raise ReturnCapExceeded(f"no return to {self.indicator!r} within {self.return_cap} steps")
            if len(gaps) >= count:
                return gaps[:count].astype(np.int64)
            if last - (hits[-1] if len(hits) else 0) > self.return_cap:
                raise ReturnCapExceeded(f"no return to {self.indicator!r} within {self.return_cap} steps")
            if not x.extendable:
                raise WindowTooSmall("fixed window ended before enough returns were found")
            horizon *= 2


def _first_entrance(x: OrbitWindow, indicator: Cylinder, cap: int) -> int:
    lo, hi = indicator.window
    k0, chunk = 0, 64
    while k0 <= cap:
        k1 = min(k0 + chunk - 1, cap)
        x.extend(min(x.i_min, k0 + lo), k1 + hi)
        hits = np.flatnonzero(indicator.mask(x.codes(k0 + lo, k1 + hi), k0 + lo, k0, k1, x.alphabet))
        if len(hits):
            return int(k0 + hits[0])
        k0, chunk = k1 + 1, chunk * 2
    raise ReturnCapExceeded(f"orbit did not enter {indicator!r} within {cap} steps")


def induce(system: SymbolicSystem, indicator: Cylinder, ensemble: int, seed: int,
           return_cap: int = DEFAULT_RETURN_CAP) -> InducedSystem:
    """Estimate ``m(X*)`` and the return-time law for the cylinder ``X*``.

    Each ensemble member samples an independent point; members in ``X*`` also
    contribute their first return time.
    """
    if ensemble < 1:
        raise ValueError("ensemble must be positive")
    lo, hi = indicator.window
    hits, times = 0, []
    for k in range(ensemble):
        x = sample_orbit(system, member_seed(seed, k), min(lo, 0), max(hi, 0) + 63)
        if indicator(x):
            hits += 1
            times.append(first_return(system, indicator, x, return_cap))
    if hits == 0:
        raise EmptyIndicator(f"no sampled point satisfies {indicator!r}")
    mass = hits / ensemble
    times = np.asarray(times, dtype=float)
    mass_se = float(np.sqrt(mass * (1.0 - mass) / ensemble))
    ret_se = float(times.std(ddof=1) / np.sqrt(len(times))) if len(times) > 1 else 0.0
    return InducedSystem(system, indicator, return_cap, mass, mass_se, float(times.mean()), ret_se,
                         ensemble, hits)


# ---------------------------------------------------------------------------
# Birkhoff sums


@dataclass
class BirkhoffStats:
    mean: float
    stderr: float
    dip_fraction: float          # orbits whose partial sums ever go below 0
    final_positive_fraction: float
    min_partial_mean: float      # ensemble mean of min_m S_m
    averages: np.ndarray         # per-member (1/n) S_n


def birkhoff(system: SymbolicSystem, h: Observable | Cylinder, n: int, ensemble: int, seed: int) -> BirkhoffStats:
    """Ensemble statistics of ``(1/n) sum_{k<n} h(T^k x)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if isinstance(h, Cylinder):
        h = Observable.indicator(h, system.alphabet)
    avgs, dips, finals, mins = [], [], [], []
    for k in range(ensemble):
        codes = system.sample_codes(member_seed(seed, k), h.lo, n - 1 + h.hi)
        partial = np.cumsum(h.values(codes, h.lo, 0, n - 1))
        avgs.append(partial[-1] / n)
        m = partial.min()
        mins.append(m)
        dips.append(m < 0)
        finals.append(partial[-1] > 0)
    avgs = np.asarray(avgs)
    stderr = float(avgs.std(ddof=1) / np.sqrt(ensemble)) if ensemble > 1 else 0.0
    return BirkhoffStats(float(avgs.mean()), stderr, float(np.mean(dips)), float(np.mean(finals)),
                         float(np.mean(mins)), avgs)
