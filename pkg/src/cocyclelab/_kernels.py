"""Hot inner loops, each with a numba and a pure-numpy implementation.

The numba path is used when numba imports and ``COCYCLELAB_NO_NUMBA`` is unset
(or set to ``0``).  Every public kernel accepts ``backend="numba"|"numpy"`` to
force one side, which is how the tests check that both paths agree.

Conventions shared by all kernels: ``mats`` is a table ``(G, d, d)`` of
generator matrices, ``idx`` is an ``(E, n)`` integer array of table indices
(one row per ensemble member, steps in application order).
"""
import os

import numpy as np

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("COCYCLELAB_NO_NUMBA", "0") in ("", "0")

RESCALE_THRESHOLD = 1e100
TINY = 1e-300


def _jit(func):
    if HAS_NUMBA:
        return numba.njit(cache=True, nogil=True)(func)
    return func


def _pick(backend):
    if backend is None:
        return "numba" if USE_NUMBA else "numpy"
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    return backend


# ---------------------------------------------------------------------------
# QR sweep: Q_{k+1} R_{k+1} = M_k Q_k


@_jit
def _gram_schmidt(a, r):
    # modified Gram-Schmidt, two passes; leaves a orthonormal, r upper triangular
    d = a.shape[0]
    for j in range(d):
        for i in range(d):
            r[i, j] = 0.0
        for _ in range(2):
            for i in range(j):
                s = 0.0
                for k in range(d):
                    s += a[k, i] * a[k, j]
                r[i, j] += s
                for k in range(d):
                    a[k, j] -= s * a[k, i]
        nrm = 0.0
        for k in range(d):
            nrm += a[k, j] * a[k, j]
        nrm = np.sqrt(nrm)
        r[j, j] = nrm
        if nrm > 0.0:
            for k in range(d):
                a[k, j] /= nrm


@_jit
def _qr_sweep_numba(mats, idx, q0, keep):
    n_orb, n = idx.shape
    d = mats.shape[1]
    logdiag = np.zeros((n_orb, d))
    qs = np.zeros((n_orb, keep, d, d))
    bad = np.zeros(n_orb, dtype=np.bool_)
    a = np.empty((d, d))
    r = np.empty((d, d))
    q = np.empty((d, d))
    for e in range(n_orb):
        for i in range(d):
            for j in range(d):
                q[i, j] = q0[e, i, j]
        for t in range(n):
            m = mats[idx[e, t]]
            for i in range(d):
                for j in range(d):
                    s = 0.0
                    for k in range(d):
                        s += m[i, k] * q[k, j]
                    a[i, j] = s
            _gram_schmidt(a, r)
            for i in range(d):
                rii = r[i, i]
                if not (rii > 1e-300) or not np.isfinite(rii):
                    bad[e] = True
                    rii = 1e-300
                logdiag[e, i] += np.log(rii)
            for i in range(d):
                for j in range(d):
                    q[i, j] = a[i, j]
            slot = t - (n - keep)
            if slot >= 0:
                for i in range(d):
                    for j in range(d):
                        qs[e, slot, i, j] = q[i, j]
    return logdiag, qs, bad


def _qr_sweep_numpy(mats, idx, q0, keep):
    n_orb, n = idx.shape
    d = mats.shape[1]
    logdiag = np.zeros((n_orb, d))
    qs = np.zeros((n_orb, keep, d, d))
    bad = np.zeros(n_orb, dtype=bool)
    q = q0.copy()
    for t in range(n):
        q, r = np.linalg.qr(mats[idx[:, t]] @ q)
        diag = np.diagonal(r, axis1=1, axis2=2)
        sign = np.where(diag < 0, -1.0, 1.0)
        q = q * sign[:, None, :]
        rii = np.abs(diag)
        broken = ~(rii > TINY) | ~np.isfinite(rii)
        bad |= broken.any(axis=1)
        logdiag += np.log(np.where(broken, TINY, rii))
        slot = t - (n - keep)
        if slot >= 0:
            qs[:, slot] = q
    return logdiag, qs, bad


def qr_sweep(mats, idx, q0=None, keep=0, backend=None):
    """Run the QR re-orthogonalization along each row of ``idx``.

    Returns ``(logdiag, qs, bad)``: the summed ``log R_ii`` per member, the
    orthonormal frames after each of the last ``keep`` steps, and a per-member
    flag set when some ``R_ii`` under-flowed or was not finite.
    """
    mats = np.ascontiguousarray(mats, dtype=np.float64)
    idx = np.ascontiguousarray(np.atleast_2d(idx), dtype=np.int64)
    n_orb = idx.shape[0]
    d = mats.shape[1]
    if q0 is None:
        q0 = np.broadcast_to(np.eye(d), (n_orb, d, d))
    q0 = np.ascontiguousarray(q0, dtype=np.float64)
    keep = int(min(keep, idx.shape[1]))
    if _pick(backend) == "numba":
        return _qr_sweep_numba(mats, idx, q0, keep)
    return _qr_sweep_numpy(mats, idx, q0, keep)


# ---------------------------------------------------------------------------
# rescaled products M_{n-1} ... M_1 M_0


@_jit
def _product_numba(mats, idx, threshold):
    n_orb, n = idx.shape
    d = mats.shape[1]
    out = np.zeros((n_orb, d, d))
    logscale = np.zeros(n_orb)
    p = np.empty((d, d))
    tmp = np.empty((d, d))
    for e in range(n_orb):
        for i in range(d):
            for j in range(d):
                p[i, j] = 1.0 if i == j else 0.0
        for t in range(n):
            m = mats[idx[e, t]]
            big = 0.0
            for i in range(d):
                for j in range(d):
                    s = 0.0
                    for k in range(d):
                        s += m[i, k] * p[k, j]
                    tmp[i, j] = s
                    if abs(s) > big:
                        big = abs(s)
            if big > threshold:
                logscale[e] += np.log(big)
                for i in range(d):
                    for j in range(d):
                        p[i, j] = tmp[i, j] / big
            else:
                for i in range(d):
                    for j in range(d):
                        p[i, j] = tmp[i, j]
        out[e] = p
    return out, logscale


def _product_numpy(mats, idx, threshold):
    n_orb, n = idx.shape
    d = mats.shape[1]
    p = np.broadcast_to(np.eye(d), (n_orb, d, d)).copy()
    logscale = np.zeros(n_orb)
    for t in range(n):
        p = mats[idx[:, t]] @ p
        big = np.abs(p).max(axis=(1, 2))
        over = big > threshold
        if over.any():
            logscale[over] += np.log(big[over])
            p[over] /= big[over, None, None]
    return p, logscale


def product(mats, idx, threshold=RESCALE_THRESHOLD, backend=None):
    """Ordered products with multiplicative rescaling.

    The true product of row ``e`` equals ``exp(logscale[e]) * out[e]``; a
    rescale happens whenever an entry magnitude exceeds ``threshold``.
    """
    mats = np.ascontiguousarray(mats, dtype=np.float64)
    idx = np.ascontiguousarray(np.atleast_2d(idx), dtype=np.int64)
    if _pick(backend) == "numba":
        return _product_numba(mats, idx, float(threshold))
    return _product_numpy(mats, idx, float(threshold))


# ---------------------------------------------------------------------------
# free group walks: reduced words kept as stacks, letter l has inverse l ^ 1


@_jit
def _free_walk_numba(letters):
    n_paths, n = letters.shape
    stack = np.zeros((n_paths, n), dtype=np.int8)
    length = np.zeros(n_paths, dtype=np.int64)
    hist = np.zeros((n_paths, n + 1), dtype=np.int64)
    for p in range(n_paths):
        top = 0
        for t in range(n):
            l = letters[p, t]
            if top > 0 and stack[p, top - 1] == (l ^ 1):
                top -= 1
            else:
                stack[p, top] = l
                top += 1
            hist[p, t + 1] = top
        length[p] = top
    return stack, length, hist


def _free_walk_numpy(letters):
    n_paths, n = letters.shape
    stack = np.zeros((n_paths, n), dtype=np.int8)
    length = np.zeros(n_paths, dtype=np.int64)
    hist = np.zeros((n_paths, n + 1), dtype=np.int64)
    rows = np.arange(n_paths)
    for t in range(n):
        l = letters[:, t]
        top = stack[rows, np.maximum(length - 1, 0)]
        cancel = (length > 0) & (top == (l ^ 1))
        length[cancel] -= 1
        push = ~cancel
        stack[rows[push], length[push]] = l[push]
        length[push] += 1
        hist[:, t + 1] = length
    return stack, length, hist


def free_walk(letters, backend=None):
    """Multiply letters left to right with free cancellation.

    Returns ``(stack, length, hist)``: reduced words (first ``length[p]``
    entries of ``stack[p]``) and the reduced length after every step.
    """
    letters = np.ascontiguousarray(np.atleast_2d(letters), dtype=np.int8)
    if _pick(backend) == "numba":
        return _free_walk_numba(letters)
    return _free_walk_numpy(letters)


# ---------------------------------------------------------------------------
# permutation walk z_{k+1} = perm[idx_k][z_k]


@_jit
def _perm_walk_numba(perms, idx, z0):
    n_orb, n = idx.shape
    z = np.zeros((n_orb, n + 1), dtype=np.int64)
    for e in range(n_orb):
        cur = z0[e]
        z[e, 0] = cur
        for t in range(n):
            cur = perms[idx[e, t], cur]
            z[e, t + 1] = cur
    return z


def _perm_walk_numpy(perms, idx, z0):
    n_orb, n = idx.shape
    z = np.zeros((n_orb, n + 1), dtype=np.int64)
    z[:, 0] = z0
    for t in range(n):
        z[:, t + 1] = perms[idx[:, t], z[:, t]]
    return z


def perm_walk(perms, idx, z0, backend=None):
    perms = np.ascontiguousarray(perms, dtype=np.int64)
    idx = np.ascontiguousarray(np.atleast_2d(idx), dtype=np.int64)
    z0 = np.ascontiguousarray(np.atleast_1d(z0), dtype=np.int64)
    if _pick(backend) == "numba":
        return _perm_walk_numba(perms, idx, z0)
    return _perm_walk_numpy(perms, idx, z0)


# ---------------------------------------------------------------------------
# Markov chain from uniforms: x_{i+1} = first j with cum[x_i, j] > u_{i+1}


@_jit
def _markov_chain_numba(cum, start, u):
    m = u.shape[0]
    k = cum.shape[1]
    out = np.empty(m, dtype=np.int64)
    if m == 0:
        return out
    cur = start
    out[0] = cur
    for i in range(1, m):
        row = cum[cur]
        j = 0
        while j < k - 1 and row[j] <= u[i]:
            j += 1
        cur = j
        out[i] = cur
    return out


def _markov_chain_numpy(cum, start, u):
    m = u.shape[0]
    k = cum.shape[1]
    out = np.empty(m, dtype=np.int64)
    if m == 0:
        return out
    cur = int(start)
    out[0] = cur
    for i in range(1, m):
        cur = min(int(np.searchsorted(cum[cur], u[i], side="right")), k - 1)
        out[i] = cur
    return out


def markov_chain(cum, start, u, backend=None):
    """Chain started at ``start`` (``out[0]``), later states driven by ``u[1:]``."""
    cum = np.ascontiguousarray(cum, dtype=np.float64)
    u = np.ascontiguousarray(u, dtype=np.float64)
    if _pick(backend) == "numba":
        return _markov_chain_numba(cum, int(start), u)
    return _markov_chain_numpy(cum, int(start), u)


# ---------------------------------------------------------------------------
# products over consecutive blocks of one index sequence


@_jit
def _block_products_numba(mats, idx, bounds, threshold):
    n_blocks = bounds.shape[0] - 1
    d = mats.shape[1]
    out = np.zeros((n_blocks, d, d))
    logscale = np.zeros(n_blocks)
    p = np.empty((d, d))
    tmp = np.empty((d, d))
    for b in range(n_blocks):
        for i in range(d):
            for j in range(d):
                p[i, j] = 1.0 if i == j else 0.0
        for t in range(bounds[b], bounds[b + 1]):
            m = mats[idx[t]]
            big = 0.0
            for i in range(d):
                for j in range(d):
                    s = 0.0
                    for k in range(d):
                        s += m[i, k] * p[k, j]
                    tmp[i, j] = s
                    if abs(s) > big:
                        big = abs(s)
            if big > threshold:
                logscale[b] += np.log(big)
                for i in range(d):
                    for j in range(d):
                        p[i, j] = tmp[i, j] / big
            else:
                for i in range(d):
                    for j in range(d):
                        p[i, j] = tmp[i, j]
        out[b] = p
    return out, logscale


def _block_products_numpy(mats, idx, bounds, threshold):
    n_blocks = len(bounds) - 1
    d = mats.shape[1]
    lengths = np.diff(bounds)
    p = np.broadcast_to(np.eye(d), (n_blocks, d, d)).copy()
    logscale = np.zeros(n_blocks)
    for step in range(int(lengths.max(initial=0))):
        act = np.flatnonzero(lengths > step)
        q = mats[idx[bounds[act] + step]] @ p[act]
        big = np.abs(q).max(axis=(1, 2))
        over = big > threshold
        if over.any():
            logscale[act[over]] += np.log(big[over])
            q[over] /= big[over, None, None]
        p[act] = q
    return p, logscale


def block_products(mats, idx, bounds, threshold=RESCALE_THRESHOLD, backend=None):
    """Products of ``idx[bounds[b]:bounds[b+1]]`` for each block ``b`` (rescaled as in :func:`product`)."""
    mats = np.ascontiguousarray(mats, dtype=np.float64)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    bounds = np.ascontiguousarray(bounds, dtype=np.int64)
    if _pick(backend) == "numba":
        return _block_products_numba(mats, idx, bounds, float(threshold))
    return _block_products_numpy(mats, idx, bounds, float(threshold))
