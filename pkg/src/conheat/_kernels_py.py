"""Pure-numpy versions of the compiled loops in ``_kernels.pyx``.

Same signatures and results (up to round-off); used when the extension is not
built or ``CONHEAT_PURE_PYTHON=1``.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist


def _quad(u: np.ndarray) -> np.ndarray:
    n = u.shape[-1]
    return np.stack([u[..., a] * u[..., b] for a in range(n) for b in range(a, n)], axis=-1)


def _solve_padded(feat, w, mask, rel_tol):
    """Batched weighted normal equations; returns (coef (N, P, K), ok (N,))."""
    wm = w * mask
    A = np.einsum("pk,pki,pkj->pij", wm, feat, feat)
    B = np.transpose(feat * wm[..., None], (0, 2, 1))
    diag = np.einsum("pii->pi", A)
    evals = np.linalg.eigvalsh(A)
    ok = evals[:, 0] > rel_tol * diag.max(axis=1)
    coef = np.zeros_like(B)
    if np.any(ok):
        coef[ok] = np.linalg.solve(A[ok], B[ok])
    return coef, ok


def local_fit(indptr, disp, weights, order, rel_tol=1e-10):
    indptr = np.asarray(indptr, dtype=np.int64)
    disp = np.asarray(disp, dtype=float)
    weights = np.asarray(weights, dtype=float)
    N = indptr.size - 1
    E, n = disp.shape
    deg = np.diff(indptr)
    K = int(deg.max(initial=1))
    rows = np.repeat(np.arange(N), deg)
    slot = np.arange(E) - indptr[rows]

    pad = np.zeros((N, K, n))
    pad[rows, slot] = disp
    mask = np.zeros((N, K))
    mask[rows, slot] = 1.0
    wpad = np.zeros((N, K))
    wpad[rows, slot] = weights

    norms = np.linalg.norm(pad, axis=2)
    scale = norms.sum(axis=1) / np.maximum(deg, 1)
    status = np.full(N, 2, dtype=np.int8)
    G = np.zeros((E, n))
    valid = (deg > 0) & (scale > 0)
    safe = np.where(valid, scale, 1.0)
    u = pad / safe[:, None, None]

    nq = n * (n + 1) // 2
    todo = valid.copy()
    if order >= 2 and nq > 0:
        quad_ok = valid & (deg >= n + nq + 1)
        feat = np.concatenate([u, _quad(u) * mask[..., None]], axis=2)
        coef, ok = _solve_padded(feat[quad_ok], wpad[quad_ok], mask[quad_ok], rel_tol)
        idx = np.flatnonzero(quad_ok)[ok]
        status[idx] = 0
        grad = coef[ok][:, :n, :] / scale[idx, None, None]
        sel = np.isin(rows, idx)
        where = np.searchsorted(idx, rows[sel])
        G[sel] = grad[where, :, slot[sel]]
        todo &= status != 0
    if np.any(todo):
        coef, ok = _solve_padded(u[todo], wpad[todo], mask[todo], rel_tol)
        idx = np.flatnonzero(todo)[ok]
        status[idx] = 1 if (order >= 2 and nq > 0) else 0
        grad = coef[ok] / scale[idx, None, None]
        sel = np.isin(rows, idx)
        where = np.searchsorted(idx, rows[sel])
        G[sel] = grad[where, :, slot[sel]]
    return G, status


def pair_extrema(H, sources, dist, separation):
    H = np.asarray(H, dtype=float)
    sources = np.asarray(sources, dtype=np.int64)
    N = H.shape[0]
    emb = cdist(H[sources], H)
    cols = np.arange(N)[None, :]
    valid = (cols > sources[:, None]) & (dist >= separation)
    count = int(valid.sum())
    if count == 0:
        return np.inf, -1, -1, -np.inf, -1, -1, 0
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(valid, emb / np.where(valid, dist, 1.0), np.nan)
    bmin = np.nanargmin(ratio)
    bmax = np.nanargmax(ratio)
    bi, j = np.unravel_index(bmin, ratio.shape)
    ci, k = np.unravel_index(bmax, ratio.shape)
    return (float(ratio[bi, j]), int(sources[bi]), int(j),
            float(ratio[ci, k]), int(sources[ci]), int(k), count)
