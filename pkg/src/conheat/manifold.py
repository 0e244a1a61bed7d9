"""Sampled closed manifolds: generators, loaders, tangent frames, geodesics.

A :class:`SampledManifold` is a finite set of vertices in ambient space carrying
positive measure weights and a symmetric neighbor graph whose edge lengths
approximate geodesic distance. Generated manifolds (circle, flat torus, sphere)
also carry a closed-form geodesic distance that overrides graph shortest paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.spatial import cKDTree

from .errors import GeometryError, InputError

MIN_RESOLUTION = 8
MIN_VERTICES = 8
# graph neighbors: the default Gaussian bandwidth is resolved to ~exp(-12)
DEFAULT_K = {1: 10, 2: 80}
# local PCA neighborhoods
FRAME_K = {1: 4, 2: 12}

# (i, j) -> geodesic distance, broadcasting over integer index arrays
PairMetric = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class SampledManifold:
    vertices: np.ndarray
    weights: np.ndarray
    intrinsic_dim: int
    edges: sparse.csr_matrix
    label: str
    faces: np.ndarray | None = None
    metric: PairMetric | None = field(default=None, repr=False)
    # (continuum value, multiplicity) of the first nonzero Laplace-Beltrami eigenvalue
    first_eigenvalue: tuple[float, int] | None = None
    exact_volume: float | None = None
    params: dict = field(default_factory=dict)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def ambient_dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def total_weight(self) -> float:
        return math.fsum(self.weights)

    def neighbors(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Neighbor indices of vertex ``i`` and the corresponding edge lengths."""
        lo, hi = self.edges.indptr[i], self.edges.indptr[i + 1]
        return self.edges.indices[lo:hi], self.edges.data[lo:hi]

    def edge_list(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Undirected edges (p < q) with their lengths."""
        upper = sparse.triu(self.edges, k=1).tocoo()
        order = np.lexsort((upper.col, upper.row))
        return upper.row[order], upper.col[order], upper.data[order]

    def mean_spacing(self) -> float:
        """Mean distance from a vertex to its nearest neighbor."""
        E = self.edges
        return float(np.minimum.reduceat(E.data, E.indptr[:-1]).mean())

    def mean_edge_length(self) -> float:
        _, _, lengths = self.edge_list()
        return float(lengths.mean())

    def validate(self) -> None:
        if self.intrinsic_dim < 1 or self.intrinsic_dim > self.ambient_dim:
            raise GeometryError(
                f"intrinsic_dim={self.intrinsic_dim} incompatible with ambient dimension {self.ambient_dim}"
            )
        if self.weights.shape != (self.n_vertices,) or np.any(self.weights <= 0):
            raise GeometryError("vertex weights must be positive, one per vertex")
        if (abs(self.edges - self.edges.T) > 0).nnz:
            raise GeometryError("edge relation is not symmetric")
        ncomp, _ = csgraph.connected_components(self.edges, directed=False)
        if ncomp != 1:
            raise GeometryError(f"neighbor graph is disconnected ({ncomp} components)")


@dataclass(frozen=True, eq=False)
class FrameField:
    """Orthonormal tangent basis per vertex, shape (N, D, n)."""

    frames: np.ndarray

    @property
    def n(self) -> int:
        return self.frames.shape[2]

    def __getitem__(self, i) -> np.ndarray:
        return self.frames[i]

    def rotated(self, gauge: np.ndarray) -> "FrameField":
        """Right-multiply every frame by its own n x n orthogonal matrix."""
        return FrameField(np.einsum("pda,pab->pdb", self.frames, gauge))

    def orthonormality_error(self) -> float:
        gram = np.einsum("pda,pdb->pab", self.frames, self.frames)
        return float(np.abs(gram - np.eye(self.n)).max())


# --------------------------------------------------------------------------
# graph construction


def knn_graph(points: np.ndarray, k: int, metric: PairMetric | None = None) -> sparse.csr_matrix:
    """Symmetrized (union) k-nearest-neighbor graph weighted by edge length.

    Neighbors are selected by ambient distance; lengths come from ``metric``
    when a closed-form geodesic is available.
    """
    npts = points.shape[0]
    if npts <= k:
        raise GeometryError(f"need more than k={k} vertices, got {npts}")
    tree = cKDTree(points)
    dist, idx = tree.query(points, k=k + 1)
    rows = np.repeat(np.arange(npts), k)
    cols = idx[:, 1:].ravel()
    lengths = dist[:, 1:].ravel()
    keep = rows != cols
    rows, cols, lengths = rows[keep], cols[keep], lengths[keep]
    if metric is not None:
        lengths = metric(rows, cols)
    if np.any(lengths <= 0):
        raise GeometryError("duplicate vertices (zero-length edge)")
    g = sparse.coo_matrix((lengths, (rows, cols)), shape=(npts, npts)).tocsr()
    # union symmetrization; duplicates carry identical lengths so max is exact
    g = g.maximum(g.T).tocsr()
    g.sort_indices()
    return g


def _finish(vertices, weights, dim, k, label, metric=None, **kwargs) -> SampledManifold:
    k = DEFAULT_K.get(dim, 4 * dim + 4) if k is None else k
    edges = knn_graph(vertices, k, metric)
    m = SampledManifold(
        vertices=np.ascontiguousarray(vertices, dtype=float),
        weights=np.ascontiguousarray(weights, dtype=float),
        intrinsic_dim=dim,
        edges=edges,
        label=label,
        metric=metric,
        **kwargs,
    )
    m.validate()
    return m


# --------------------------------------------------------------------------
# generators


def _circle(resolution: int, radius: float = 1.0, k: int | None = None) -> SampledManifold:
    n = resolution
    theta = 2 * np.pi * np.arange(n) / n
    verts = radius * np.column_stack([np.cos(theta), np.sin(theta)])

    def metric(i, j):
        steps = np.abs(np.asarray(i) - np.asarray(j)) % n
        steps = np.minimum(steps, n - steps)
        return radius * (2 * np.pi / n) * steps

    w = np.full(n, 2 * np.pi * radius / n)
    return _finish(
        verts, w, 1, k, f"circle(resolution={n}, radius={radius})", metric,
        first_eigenvalue=(1.0 / radius**2, 2),
        exact_volume=2 * np.pi * radius,
        params={"name": "circle", "resolution": n, "radius": radius},
    )


def _flat_torus(resolution: int, side: float = 1.0, k: int | None = None) -> SampledManifold:
    """Square flat torus of the given side, isometrically embedded in R^4
    as a product of two circles of circumference ``side``."""
    n = resolution
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    rho = side / (2 * np.pi)
    a, b = 2 * np.pi * ii / n, 2 * np.pi * jj / n
    verts = rho * np.column_stack([np.cos(a), np.sin(a), np.cos(b), np.sin(b)])
    h = side / n

    def metric(p, q):
        p, q = np.asarray(p), np.asarray(q)
        di = np.abs(p // n - q // n)
        dj = np.abs(p % n - q % n)
        di = np.minimum(di, n - di)
        dj = np.minimum(dj, n - dj)
        return h * np.sqrt(di * di + dj * dj)

    w = np.full(n * n, side * side / (n * n))
    return _finish(
        verts, w, 2, k, f"flat_torus(resolution={n}, side={side})", metric,
        first_eigenvalue=(4 * np.pi**2 / side**2, 4),
        exact_volume=side * side,
        params={"name": "flat_torus", "resolution": n, "side": side,
                "grid": np.column_stack([ii, jj]) * h},
    )


def icosphere(subdivisions: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit icosphere vertices and triangles after repeated 4-to-1 subdivision."""
    phi = (1 + 5**0.5) / 2
    v = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=float)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(subdivisions):
        e = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        uniq, inv = np.unique(e, axis=0, return_inverse=True)
        inv = inv.ravel()
        mid = v[uniq[:, 0]] + v[uniq[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        nf = len(f)
        ab, bc, ca = (len(v) + inv[:nf], len(v) + inv[nf:2 * nf], len(v) + inv[2 * nf:])
        a, b, c = f[:, 0], f[:, 1], f[:, 2]
        f = np.concatenate([
            np.column_stack([a, ab, ca]), np.column_stack([b, bc, ab]),
            np.column_stack([c, ca, bc]), np.column_stack([ab, bc, ca]),
        ])
        v = np.vstack([v, mid])
    return v, f


def simplex_lumped_weights(vertices: np.ndarray, simplices: np.ndarray) -> np.ndarray:
    """Each simplex's n-volume (sqrt Gram determinant / n!) split evenly among its vertices."""
    k = simplices.shape[1] - 1
    edges = vertices[simplices[:, 1:]] - vertices[simplices[:, :1]]
    gram = np.einsum("fia,fja->fij", edges, edges)
    vol = np.sqrt(np.clip(np.linalg.det(gram), 0, None)) / math.factorial(k)
    w = np.zeros(len(vertices))
    np.add.at(w, simplices.ravel(), np.repeat(vol / (k + 1), k + 1))
    return w


def _sphere(resolution: int, radius: float = 1.0, k: int | None = None) -> SampledManifold:
    v, f = icosphere(resolution)
    verts = radius * v

    def metric(p, q):
        x, y = v[np.asarray(p)], v[np.asarray(q)]
        cross = np.linalg.norm(np.cross(x, y), axis=-1)
        return radius * np.arctan2(cross, np.sum(x * y, axis=-1))

    return _finish(
        verts, simplex_lumped_weights(verts, f), 2, k,
        f"sphere(subdivisions={resolution}, radius={radius})", metric,
        faces=f,
        first_eigenvalue=(2.0 / radius**2, 3),
        exact_volume=4 * np.pi * radius**2,
        params={"name": "sphere", "resolution": resolution, "radius": radius},
    )


GENERATORS = {"circle": _circle, "flat_torus": _flat_torus, "sphere": _sphere}


def generate_manifold(name: str, resolution: int, k: int | None = None, **geometry) -> SampledManifold:
    """Sample a circle, square flat torus or icosphere.

    ``resolution`` is the number of points per circle for ``circle`` and
    ``flat_torus`` (at least 8) and the subdivision level for ``sphere``
    (1 to 7). Geometry keywords: ``radius`` (circle, sphere), ``side`` (torus).
    """
    if name not in GENERATORS:
        raise InputError(f"unknown manifold {name!r}; choose from {sorted(GENERATORS)}")
    resolution = int(resolution)
    if name == "sphere":
        if not 1 <= resolution <= 7:
            raise InputError(f"sphere subdivision level must be in [1, 7], got {resolution}")
    elif resolution < MIN_RESOLUTION:
        raise InputError(f"resolution must be >= {MIN_RESOLUTION}, got {resolution}")
    allowed = {"circle": {"radius"}, "flat_torus": {"side"}, "sphere": {"radius"}}[name]
    geometry = {key: val for key, val in geometry.items() if val is not None}
    for key, val in geometry.items():
        if key not in allowed:
            raise InputError(f"{name} does not take parameter {key!r}")
        if val <= 0:
            raise InputError(f"{key} must be positive")
    return GENERATORS[name](resolution, k=k, **geometry)


# --------------------------------------------------------------------------
# loaders


def _read_csv(path: Path) -> np.ndarray:
    lines = [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise InputError(f"{path}: empty file")
    try:
        [float(x) for x in lines[0].split(",")]
    except ValueError:
        lines = lines[1:]  # header row
    try:
        pts = np.array([[float(x) for x in ln.split(",")] for ln in lines], dtype=float)
    except ValueError as exc:
        raise InputError(f"{path}: cannot parse CSV ({exc})") from None
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise InputError(f"{path}: ragged or empty CSV")
    return pts


def _read_off(path: Path) -> tuple[np.ndarray, np.ndarray]:
    tokens: list[str] = []
    for ln in path.read_text().splitlines():
        ln = ln.split("#", 1)[0].strip()
        if ln:
            tokens.extend(ln.split())
    if not tokens or not tokens[0].endswith("OFF"):
        raise InputError(f"{path}: missing OFF header")
    try:
        it = iter(tokens[1:])
        nv, nf, _ = int(next(it)), int(next(it)), int(next(it))
        verts = np.array([[float(next(it)) for _ in range(3)] for _ in range(nv)])
        faces = []
        for _ in range(nf):
            cnt = int(next(it))
            faces.append([int(next(it)) for _ in range(cnt)])
    except (StopIteration, ValueError) as exc:
        raise InputError(f"{path}: truncated or malformed OFF ({exc!r})") from None
    if not faces or len({len(f) for f in faces}) != 1:
        raise InputError(f"{path}: faces must be simplices of a single arity")
    faces = np.array(faces, dtype=int)
    if faces.min() < 0 or faces.max() >= nv:
        raise InputError(f"{path}: face index out of range")
    return verts, faces


def load_manifold(
    path: str | Path,
    format: str,
    k: int | None = None,
    intrinsic_dim: int | None = None,
    total_volume: float | None = None,
) -> SampledManifold:
    """Read a point cloud (``csv_points``) or simplicial mesh (``off_mesh``).

    Meshes get lumped simplex measures and their intrinsic dimension from the
    face arity. Point clouds need ``intrinsic_dim`` and get uniform weights
    ``total_volume / N``; without ``total_volume`` the volume is estimated from
    k-th neighbor balls.
    """
    path = Path(path)
    if not path.is_file():
        raise InputError(f"no such file: {path}")
    if format == "off_mesh":
        verts, faces = _read_off(path)
        dim = faces.shape[1] - 1
        if intrinsic_dim is not None and intrinsic_dim != dim:
            raise InputError(f"mesh has simplices of dimension {dim}, not {intrinsic_dim}")
        if len(verts) < MIN_VERTICES:
            raise GeometryError(f"mesh has {len(verts)} vertices, below minimum {MIN_VERTICES}")
        weights = simplex_lumped_weights(verts, faces)
        if np.any(weights <= 0):
            raise GeometryError(f"{int(np.sum(weights <= 0))} vertices belong to no non-degenerate face")
        return _finish(verts, weights, dim, k, str(path), faces=faces)
    if format == "csv_points":
        pts = _read_csv(path)
        dim = 2 if intrinsic_dim is None else int(intrinsic_dim)
        if len(pts) < MIN_VERTICES:
            raise GeometryError(f"point cloud has {len(pts)} points, below minimum {MIN_VERTICES}")
        kk = DEFAULT_K.get(dim, 4 * dim + 4) if k is None else k
        if total_volume is None:
            rk = cKDTree(pts).query(pts, k=kk + 1)[0][:, -1]
            unit_ball = np.pi ** (dim / 2) / math.gamma(dim / 2 + 1)
            total_volume = float(np.sum(unit_ball * rk**dim / kk))
        weights = np.full(len(pts), total_volume / len(pts))
        return _finish(pts, weights, dim, kk, str(path))
    raise InputError(f"unknown format {format!r}; use csv_points or off_mesh")


def save_csv(M: SampledManifold, path: str | Path) -> None:
    np.savetxt(path, M.vertices, delimiter=",", fmt="%.17g")


def save_off(vertices: np.ndarray, faces: np.ndarray, path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write(f"OFF\n{len(vertices)} {len(faces)} 0\n")
        for v in vertices:
            fh.write(" ".join(f"{x:.17g}" for x in v) + "\n")
        for f in faces:
            fh.write(f"{len(f)} " + " ".join(str(int(i)) for i in f) + "\n")


# --------------------------------------------------------------------------
# frames and distances


def _sign_fix(frames: np.ndarray) -> np.ndarray:
    pos = np.argmax(np.abs(frames), axis=1)
    signs = np.sign(np.take_along_axis(frames, pos[:, None, :], axis=1))
    return frames * signs


def _quad_features(u: np.ndarray) -> np.ndarray:
    n = u.shape[-1]
    cols = [u[..., a] * u[..., b] for a in range(n) for b in range(a, n)]
    return np.stack(cols, axis=-1)


def estimate_frames(M: SampledManifold, k: int | None = None, refine: bool = True) -> FrameField:
    """Local-PCA tangent frames from the k nearest ambient neighbors.

    Principal directions are sorted by decreasing variance and each column's
    sign is fixed so that its largest-magnitude entry is positive. With
    ``refine`` the PCA plane is tilted by the linear part of a local quadric
    fit of the normal offsets, removing the first-order bias that asymmetric
    neighborhoods introduce on curved samples.
    """
    n = M.intrinsic_dim
    k = FRAME_K.get(n, 4 * n + 4) if k is None else int(k)
    if k < n + 1:
        raise InputError(f"k={k} must be at least intrinsic_dim + 1 = {n + 1}")
    pts = M.vertices
    _, idx = cKDTree(pts).query(pts, k=min(k + 1, M.n_vertices))
    nb = pts[idx]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("pka,pkb->pab", centered, centered)
    evals, evecs = np.linalg.eigh(cov)
    frames = evecs[:, :, ::-1][:, :, :n]
    top_vals = evals[:, ::-1][:, :n]
    scale = np.maximum(evals[:, -1], np.finfo(float).tiny)
    bad = np.flatnonzero(top_vals[:, -1] <= 1e-12 * scale)
    if bad.size:
        raise GeometryError(
            f"rank-deficient neighborhood at {bad.size} vertices (first: {bad[0]}); increase k"
        )
    nq = n * (n + 1) // 2
    if refine and M.ambient_dim > n and k >= n + nq + 1:
        disp = nb[:, 1:] - pts[:, None, :]
        for _ in range(2):
            u = np.einsum("pkd,pda->pka", disp, frames)
            z = disp - np.einsum("pka,pda->pkd", u, frames)
            design = np.concatenate([u, _quad_features(u)], axis=2)
            gram = np.einsum("pki,pkj->pij", design, design)
            rhs = np.einsum("pki,pkd->pid", design, z)
            sol = np.linalg.solve(gram, rhs)
            frames = frames + np.transpose(sol[:, :n, :], (0, 2, 1))
            frames, _ = np.linalg.qr(frames)
    frames = _sign_fix(frames)
    # re-orthonormalize against round-off while keeping the sign convention
    q, r = np.linalg.qr(frames)
    frames = q * np.sign(np.einsum("paa->pa", r))[:, None, :]
    return FrameField(np.ascontiguousarray(frames))


def geodesic_rows(M: SampledManifold, sources) -> np.ndarray:
    """Geodesic distances from each source to every vertex, shape (S, N)."""
    src = np.atleast_1d(np.asarray(sources, dtype=int))
    if M.metric is not None:
        return M.metric(src[:, None], np.arange(M.n_vertices)[None, :]).astype(float)
    return csgraph.dijkstra(M.edges, directed=False, indices=src)


def geodesic_distance(M: SampledManifold, source: int) -> np.ndarray:
    """Per-vertex geodesic distance from ``source``: closed form for generated
    manifolds, weighted shortest paths otherwise."""
    return geodesic_rows(M, [source])[0]


def graph_distance(M: SampledManifold, source: int) -> np.ndarray:
    """Shortest-path distance over the edge graph, ignoring any closed form."""
    return csgraph.dijkstra(M.edges, directed=False, indices=[int(source)])[0]
