"""Full flags and spanning line tuples of R^d, the SL_d(R) model of G/P and G/A'.

A :class:`Flag` is stored as an orthonormal matrix ``U``; its ``j``-th
subspace is the span of the first ``j`` columns.  A :class:`LineTuple` stores
one unit vector per line.  Both carry a per-column sign ambiguity, which is
normalized so that the first entry of each column with magnitude above
``1e-12`` is positive.

Permutations are 0-based tuples ``w`` with ``w[j]`` the image of ``j``.
"""
from __future__ import annotations

import numpy as np

from .errors import DegenerateTuple, NotTransverse

GENERAL_POSITION_THRESHOLD = 1e-6
DEGENERATE_DET = 1e-12


def canonical_signs(u: np.ndarray) -> np.ndarray:
    """Flip column signs so the leading non-negligible entry is positive."""
    u = np.array(u, dtype=float)
    big = np.abs(u) > 1e-12
    lead = np.argmax(big, axis=-2)
    vals = np.take_along_axis(u, lead[..., None, :], axis=-2)[..., 0, :]
    sign = np.where(vals < 0, -1.0, 1.0)
    return u * sign[..., None, :]


def orthonormalize(v: np.ndarray) -> np.ndarray:
    """Gram-Schmidt (via QR) of the columns of ``v`` in order, canonical signs."""
    q, _ = np.linalg.qr(v)
    return canonical_signs(q)


class Flag:
    """Complete flag ``E_1 < E_2 < ... < E_d = R^d``."""

    __slots__ = ("basis",)

    def __init__(self, basis, check: bool = True):
        u = np.array(basis, dtype=float)
        if check:
            if u.ndim != 2 or u.shape[0] != u.shape[1] or u.shape[0] < 2:
                raise ValueError("flag basis must be a square matrix of size >= 2")
            if np.max(np.abs(u.T @ u - np.eye(len(u)))) > 1e-10:
                raise ValueError("flag basis must be orthonormal")
        self.basis = canonical_signs(u)

    @classmethod
    def from_matrix(cls, v) -> "Flag":
        """Flag whose ``E_j`` is spanned by the first ``j`` columns of ``v``."""
        v = np.asarray(v, dtype=float)
        return cls(orthonormalize(v), check=False)

    @classmethod
    def standard(cls, d: int) -> "Flag":
        return cls(np.eye(d), check=False)

    @classmethod
    def reversed(cls, d: int) -> "Flag":
        return cls(np.eye(d)[:, ::-1], check=False)

    @property
    def d(self) -> int:
        return self.basis.shape[0]

    def subspace(self, j: int) -> np.ndarray:
        """Orthonormal basis of ``E_j`` as a ``(d, j)`` array."""
        return self.basis[:, :j]

    @property
    def line(self) -> np.ndarray:
        """Unit vector spanning ``E_1``."""
        return self.basis[:, 0]

    def act(self, g) -> "Flag":
        """The flag ``g . F`` for an invertible matrix ``g``."""
        return Flag.from_matrix(np.asarray(g, dtype=float) @ self.basis)

    def to_json(self) -> list:
        return self.basis.tolist()

    @classmethod
    def from_json(cls, rows) -> "Flag":
        return cls(np.asarray(rows, dtype=float))

    def __repr__(self):
        return f"Flag({np.array2string(self.basis, precision=4)})"


class LineTuple:
    """``d`` lines spanning ``R^d``, each stored as a unit vector (a column)."""

    __slots__ = ("vectors",)

    def __init__(self, vectors, check: bool = True):
        v = np.array(vectors, dtype=float)
        if check:
            if v.ndim != 2 or v.shape[0] != v.shape[1] or v.shape[0] < 2:
                raise ValueError("line tuple must be a square matrix of size >= 2")
            norms = np.linalg.norm(v, axis=0)
            if np.any(norms == 0):
                raise DegenerateTuple("zero vector in line tuple")
            v = v / norms
            if abs(np.linalg.det(v)) == 0.0:
                raise DegenerateTuple("lines do not span R^d")
        self.vectors = canonical_signs(v)

    @classmethod
    def standard(cls, d: int) -> "LineTuple":
        return cls(np.eye(d), check=False)

    @property
    def d(self) -> int:
        return self.vectors.shape[0]

    def volume(self) -> float:
        """``|det[l_1 ... l_d]|`` for the unit representatives."""
        return float(abs(np.linalg.det(self.vectors)))

    def act(self, g) -> "LineTuple":
        return LineTuple(np.asarray(g, dtype=float) @ self.vectors)

    def same_lines(self, other: "LineTuple", tol: float = 1e-8) -> bool:
        """Line-by-line equality up to sign: ``1 - |<u, v>| <= tol`` for all pairs."""
        cos = np.abs(np.sum(self.vectors * other.vectors, axis=0))
        return bool(np.all(1.0 - cos <= tol))

    def line_errors(self, other: "LineTuple") -> np.ndarray:
        """Sine of the angle between corresponding lines."""
        # residual of projecting one unit vector on the other; sqrt(1 - cos^2)
        # loses half the digits near zero
        u, v = self.vectors, other.vectors
        resid = u - np.sum(u * v, axis=0) * v
        return np.minimum(np.linalg.norm(resid, axis=0), 1.0)

    def to_json(self) -> list:
        return self.vectors.tolist()

    def __repr__(self):
        return f"LineTuple({np.array2string(self.vectors, precision=4)})"


# ---------------------------------------------------------------------------
# projections and the Weyl group


def pr1(t: LineTuple) -> Flag:
    """``(l_1, ..., l_d) -> (l_1, l_1+l_2, ..., R^d)``."""
    if t.volume() < DEGENERATE_DET:
        raise DegenerateTuple(f"|det| = {t.volume():.3g} below {DEGENERATE_DET}")
    return Flag(orthonormalize(t.vectors), check=False)


def pr2(t: LineTuple) -> Flag:
    """``(l_1, ..., l_d) -> (l_d, l_{d-1}+l_d, ..., R^d)``."""
    if t.volume() < DEGENERATE_DET:
        raise DegenerateTuple(f"|det| = {t.volume():.3g} below {DEGENERATE_DET}")
    return Flag(orthonormalize(t.vectors[:, ::-1]), check=False)


def w_long(d: int) -> tuple:
    """Order-reversing involution ``j -> d - 1 - j``."""
    return tuple(range(d - 1, -1, -1))


def compose(v, w) -> tuple:
    """``v o w`` (apply ``w`` first)."""
    return tuple(v[w[j]] for j in range(len(w)))


def inverse_perm(w) -> tuple:
    out = [0] * len(w)
    for j, wj in enumerate(w):
        out[wj] = j
    return tuple(out)


def weyl_act(w, t: LineTuple) -> LineTuple:
    """Permute lines: line ``j`` of ``t`` becomes line ``w[j]`` of the result."""
    w = tuple(int(a) for a in w)
    if sorted(w) != list(range(t.d)):
        raise ValueError(f"{w} is not a permutation of 0..{t.d - 1}")
    return LineTuple(t.vectors[:, list(inverse_perm(w))], check=False)


# ---------------------------------------------------------------------------
# relative position and distance


def general_position(f: Flag, g: Flag, threshold: float = GENERAL_POSITION_THRESHOLD) -> tuple:
    """Whether ``E_j(f) ∩ E_{d-j}(g) = 0`` for every ``j``, with the margin.

    The margin is the smallest singular value of ``[basis E_j(f), basis E_{d-j}(g)]``
    minimized over ``j``; the pair counts as transverse when it exceeds ``threshold``.
    """
    margin = float(general_position_margins(f.basis, g.basis))
    return margin > threshold, margin


def general_position_margins(uf: np.ndarray, ug: np.ndarray) -> np.ndarray:
    """Batched margin for stacks of orthonormal bases (``(..., d, d)``)."""
    d = uf.shape[-1]
    margins = []
    for j in range(1, d):
        stacked = np.concatenate([uf[..., :, :j], ug[..., :, :d - j]], axis=-1)
        margins.append(np.linalg.svd(stacked, compute_uv=False)[..., -1])
    return np.min(margins, axis=0)


def transversality(uf: np.ndarray, ug: np.ndarray) -> np.ndarray:
    """Smallest ``|det[basis E_j(f), basis E_{d-j}(g)]|`` over ``j`` (batched)."""
    d = uf.shape[-1]
    dets = []
    for j in range(1, d):
        stacked = np.concatenate([uf[..., :, :j], ug[..., :, :d - j]], axis=-1)
        dets.append(np.abs(np.linalg.det(stacked)))
    return np.min(dets, axis=0)


def flag_distances(uf: np.ndarray, ug: np.ndarray) -> np.ndarray:
    """Batched :func:`flag_distance` on orthonormal bases (broadcasting)."""
    d = uf.shape[-1]
    worst = 0.0
    for j in range(1, d):
        # sine of the largest principal angle between E_j(f) and E_j(g)
        cross = np.swapaxes(uf[..., :, j:], -1, -2) @ ug[..., :, :j]
        s = np.linalg.svd(cross, compute_uv=False)[..., 0]
        worst = np.maximum(worst, s)
    return np.arcsin(np.clip(worst, 0.0, 1.0))


def flag_distance(f: Flag, g: Flag) -> float:
    """Largest principal angle between ``E_j(f)`` and ``E_j(g)``, maximized over ``j``."""
    return float(flag_distances(f.basis, g.basis))


def tuple_from_flag_pair(f: Flag, g: Flag) -> LineTuple:
    """Lines ``l_j = E_j(f) ∩ E_{d-j+1}(g)`` for a transverse pair.

    Inverse of ``t -> (pr1(t), pr2(t))`` on pairs in general position.
    """
    ok, margin = general_position(f, g)
    if not ok:
        raise NotTransverse(f"flags not in general position (margin {margin:.3g})")
    return LineTuple(_intersection_lines(f.basis, g.basis), check=False)


def _intersection_lines(uf: np.ndarray, ug: np.ndarray) -> np.ndarray:
    # l_j lies in E_j(f) and is orthogonal to the last j-1 columns of g
    d = uf.shape[-1]
    cols = [uf[..., :, 0]]
    for j in range(2, d + 1):
        a = np.swapaxes(ug[..., :, d - j + 1:], -1, -2) @ uf[..., :, :j]
        _, _, vt = np.linalg.svd(a)
        coef = vt[..., -1, :]
        v = (uf[..., :, :j] @ coef[..., None])[..., 0]
        cols.append(v / np.linalg.norm(v, axis=-1, keepdims=True))
    return canonical_signs(np.stack(cols, axis=-1))


def intersection_lines(uf: np.ndarray, ug: np.ndarray) -> np.ndarray:
    """Batched :func:`tuple_from_flag_pair` on bases, without the transversality check."""
    return _intersection_lines(np.asarray(uf, dtype=float), np.asarray(ug, dtype=float))
