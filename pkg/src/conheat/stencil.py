"""Tangent-coordinate differentials on the neighbor graph.

Each neighbor q of p gets tangent coordinates in p's frame: the projection of
the ambient displacement onto the frame, rescaled to the edge length so that
it approximates the inverse exponential map to first order. A weighted local
quadratic fit of f(q) - f(p) against those coordinates yields the gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from . import kernels
from .errors import GeometryError
from .manifold import FRAME_K, FrameField, SampledManifold


def nearest_edges(M: SampledManifold, k: int) -> sparse.csr_matrix:
    """Sub-graph keeping, for every vertex, its k shortest edges (not symmetrized)."""
    E = M.edges
    deg = np.diff(E.indptr)
    rows = np.repeat(np.arange(M.n_vertices), deg)
    order = np.lexsort((E.indices, E.data, rows))
    rank = np.arange(order.size) - E.indptr[rows[order]]
    keep = order[rank < k]
    keep.sort()
    return sparse.csr_matrix((E.data[keep], E.indices[keep], np.concatenate(
        [[0], np.cumsum(np.minimum(deg, k))])), shape=E.shape)


def tangent_coordinates(M: SampledManifold, frames: FrameField,
                        edges: sparse.csr_matrix | None = None) -> np.ndarray:
    """(E, n) coordinates of every directed edge entry in the source frame."""
    E = M.edges if edges is None else edges
    rows = np.repeat(np.arange(M.n_vertices), np.diff(E.indptr))
    disp = M.vertices[E.indices] - M.vertices[rows]
    u = np.einsum("ed,eda->ea", disp, frames.frames[rows])
    norm = np.linalg.norm(u, axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        u = np.where(norm > 0, u / norm * E.data[:, None], 0.0)
    return np.ascontiguousarray(u)


@dataclass(frozen=True, eq=False)
class TangentStencil:
    """Sparse operator mapping vertex functions to per-vertex gradients (N*n x N)."""

    operator: sparse.csr_matrix
    n: int
    status: np.ndarray
    edges: sparse.csr_matrix

    @classmethod
    def build(cls, M: SampledManifold, frames: FrameField, order: int = 2,
              k: int | None = None) -> "TangentStencil":
        """Fit over each vertex's k nearest graph neighbors (default: the local-PCA size)."""
        n = frames.n
        k = FRAME_K.get(n, 4 * n + 4) if k is None else int(k)
        E = nearest_edges(M, k)
        N = M.n_vertices
        u = tangent_coordinates(M, frames, E)
        rows = np.repeat(np.arange(N), np.diff(E.indptr))
        mean_len = np.bincount(rows, E.data, N) / np.maximum(np.diff(E.indptr), 1)
        w = np.exp(-((E.data / mean_len[rows]) ** 2))
        G, status = kernels.local_fit(
            np.ascontiguousarray(E.indptr, dtype=np.int64), u, np.ascontiguousarray(w), order
        )
        bad = np.flatnonzero(status == 2)
        if bad.size:
            raise GeometryError(
                f"degenerate neighbor configuration at {bad.size} vertices (first: {bad[0]})"
            )
        a = np.arange(n)
        r_off = (rows[:, None] * n + a).ravel()
        c_off = np.repeat(E.indices, n)
        r_diag = (np.arange(N)[:, None] * n + a).ravel()
        c_diag = np.repeat(np.arange(N), n)
        diag = np.zeros((N, n))
        np.add.at(diag, rows, -G)
        op = sparse.coo_matrix(
            (np.concatenate([G.ravel(), diag.ravel()]),
             (np.concatenate([r_off, r_diag]), np.concatenate([c_off, c_diag]))),
            shape=(N * n, N),
        ).tocsr()
        return cls(op, n, status, E)

    def gradient(self, f: np.ndarray) -> np.ndarray:
        """Gradient in each vertex frame: (N, n) for f of shape (N,), (N, n, Q) for (N, Q)."""
        f = np.asarray(f, dtype=float)
        g = self.operator @ f
        N = self.operator.shape[1]
        return g.reshape(N, self.n) if f.ndim == 1 else g.reshape(N, self.n, f.shape[1])
