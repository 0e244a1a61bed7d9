"""Local charts and comparisons of the rescaled heat kernel with Gaussian models.

A chart around a vertex p covers the vertices within geodesic ``radius``.
Its coordinates start from the log-map estimate (tangent projection stretched
to geodesic length) and are refined by stress majorization against geodesic
distances. At scale r the rescaled kernel is

    Kbar(x, s; y) = r^n K(u^-1(x r), s r^2; u^-1(y r)),

expressed in chart components, and is compared with the Euclidean kernel and
with the frozen-coefficient kernel built from the fitted chart metric at y.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.linalg import orthogonal_procrustes
from scipy.spatial import cKDTree
from sklearn.manifold import smacof

from . import kernels
from .errors import GeometryError, InputError
from .heat import kernel_column
from .laplacian import Spectrum
from .manifold import FrameField, SampledManifold, geodesic_rows
from .stencil import TangentStencil

MIN_CHART_VERTICES = 12
# (x, s) with |x - y| < EXCLUDE_RADIUS and s < EXCLUDE_TIME are never compared
EXCLUDE_RADIUS = 0.5
EXCLUDE_TIME = 0.25


# ------------------------------------------------------------------ model kernels


def _quad_form(diff: np.ndarray, metric: np.ndarray) -> np.ndarray:
    return np.einsum("...a,ab,...b->...", diff, metric, diff)


def _gaussian_block(x, s: float, y, metric: np.ndarray) -> np.ndarray:
    """sqrt(det g) (4 pi s)^(-n/2) exp(-g(x-y, x-y) / 4s) I_n, broadcast over x."""
    if not s > 0:
        raise InputError("s must be positive")
    diff = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    n = metric.shape[0]
    scal = math.sqrt(np.linalg.det(metric)) * (4 * math.pi * s) ** (-n / 2) \
        * np.exp(-_quad_form(diff, metric) / (4 * s))
    return scal[..., None, None] * np.eye(n)


def euclidean_kernel(x, s: float, y, n: int | None = None) -> np.ndarray:
    """(4 pi s)^(-n/2) exp(-|x-y|^2 / 4s) I_n for points x (..., n) and y (n,)."""
    y = np.asarray(y, dtype=float)
    n = y.shape[-1] if n is None else int(n)
    return _gaussian_block(x, s, y, np.eye(n))


def z_kernel(x, s: float, y, chart_or_metric) -> np.ndarray:
    """Gaussian with the metric frozen at y: an explicit (n, n) metric, or a
    Chart from which the fitted metric at the vertex nearest to y is taken."""
    if isinstance(chart_or_metric, Chart):
        metric = chart_or_metric.metric_at(y)
    else:
        metric = np.asarray(chart_or_metric, dtype=float)
    if metric.ndim != 2 or metric.shape[0] != metric.shape[1] or not np.all(np.isfinite(metric)):
        raise GeometryError("metric fit unavailable at y")
    return _gaussian_block(x, s, y, metric)


# ------------------------------------------------------------------ charts


@dataclass(frozen=True, eq=False)
class Chart:
    center: int
    r: float
    radius: float
    members: np.ndarray
    coords: np.ndarray          # unscaled chart coordinates of members, (K, n)
    metric: np.ndarray          # fitted metric at members, (K, n, n); NaN if unavailable
    jacobian: np.ndarray        # frame -> chart components at members, (K, n, n); NaN if unavailable
    interior: np.ndarray        # members whose stencil neighbors are all in the chart
    core: np.ndarray            # interior members whose stencil neighbors are all interior
    grad_op: sparse.csr_matrix  # chart-coordinate gradient over members (rescaled units)
    stress: float

    @property
    def n(self) -> int:
        return self.coords.shape[1]

    @property
    def scaled(self) -> np.ndarray:
        return self.coords / self.r

    @property
    def scaled_radius(self) -> float:
        return self.radius / self.r

    def rescaled(self, r: float) -> "Chart":
        """Same chart viewed at another scale (gradient operator rescaled)."""
        if not r > 0:
            raise InputError("r must be positive")
        return replace(self, r=float(r), grad_op=self.grad_op * (float(r) / self.r))

    def distortion(self) -> float:
        """max |gbar_ab - delta_ab| over members with a metric fit."""
        ok = np.all(np.isfinite(self.metric), axis=(1, 2))
        return float(np.abs(self.metric[ok] - np.eye(self.n)).max())

    def snap(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Local indices of the members nearest to rescaled points x, and the snapping distances."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if np.any(np.linalg.norm(x, axis=1) > self.scaled_radius * (1 + 1e-12)):
            raise InputError("point outside the chart")
        d, idx = cKDTree(self.scaled).query(x)
        return idx, d

    def metric_at(self, y) -> np.ndarray:
        idx, _ = self.snap(y)
        return self.metric[idx[0]]


def _fit_metric(coords: np.ndarray, local: dict, nb_idx, nb_len) -> np.ndarray:
    """Least-squares metric at each member from squared edge lengths."""
    K, n = coords.shape
    iu = np.triu_indices(n)
    out = np.full((K, n, n), np.nan)
    nq = iu[0].size
    for a in range(K):
        q = nb_idx[a]
        sel = np.array([j in local for j in q], dtype=bool)
        if sel.sum() < nq + 1:
            continue
        lq = np.array([local[j] for j in q[sel]])
        d = coords[lq] - coords[a]
        design = d[:, iu[0]] * d[:, iu[1]] * np.where(iu[0] == iu[1], 1.0, 2.0)
        ell2 = nb_len[a][sel] ** 2
        w = np.exp(-ell2 / np.mean(ell2))
        sol, *_ = np.linalg.lstsq(design * w[:, None], ell2 * w, rcond=None)
        g = np.zeros((n, n))
        g[iu] = sol
        out[a] = g + np.triu(g, 1).T
    return out


def build_chart(M: SampledManifold, frames: FrameField, center: int, r: float, radius: float,
                max_radius: float | None = None, stencil: TangentStencil | None = None,
                max_iter: int = 3000) -> Chart:
    """Chart of the geodesic ball of ``radius`` around ``center`` at scale r.

    ``max_radius`` is the user's bound on admissible chart radii. The ball
    should be geodesically convex (radius below half the injectivity radius);
    otherwise distances between members wrap and the stress fit degrades.
    """
    if not r > 0 or not radius > 0:
        raise InputError("r and radius must be positive")
    if max_radius is not None and radius > max_radius:
        raise InputError(f"chart radius {radius} exceeds the admissible {max_radius}")
    n = M.intrinsic_dim
    dist_c = geodesic_rows(M, [center])[0]
    members = np.flatnonzero(dist_c <= radius)
    if members.size < MIN_CHART_VERTICES:
        raise GeometryError(f"only {members.size} vertices in the chart; increase the radius")
    members = np.concatenate([[center], members[members != center]])
    local = {int(v): i for i, v in enumerate(members)}

    # log-map start: tangent projection stretched to geodesic length
    disp = M.vertices[members] - M.vertices[center]
    u = disp @ frames[center]
    norm = np.linalg.norm(u, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        init = np.where(norm[:, None] > 0, u / norm[:, None] * dist_c[members, None], 0.0)
    D = geodesic_rows(M, members)[:, members]
    D = 0.5 * (D + D.T)
    refined, stress = smacof(D, metric=True, n_components=n, init=init, n_init=1,
                             max_iter=max_iter, eps=1e-12, normalized_stress=False)
    refined = refined - refined[0]
    rot, _ = orthogonal_procrustes(refined, init)
    coords = refined @ rot
    coords[0] = 0.0

    stencil = TangentStencil.build(M, frames) if stencil is None else stencil
    E = stencil.edges
    nb_idx = [E.indices[E.indptr[v]:E.indptr[v + 1]] for v in members]
    nb_len = [E.data[E.indptr[v]:E.indptr[v + 1]] for v in members]
    interior = np.array([all(int(j) in local for j in q) for q in nb_idx], dtype=bool)
    core = interior & np.array([all(interior[local[int(j)]] for j in q) if ok else False
                                for q, ok in zip(nb_idx, interior)], dtype=bool)
    metric = _fit_metric(coords, local, nb_idx, nb_len)

    # Jacobian from frame components to chart components at interior members
    full = np.zeros((M.n_vertices, n))
    full[members] = coords
    grads = stencil.gradient(full)[members]             # (K, n_frame, n_chart)
    jac = np.transpose(grads, (0, 2, 1)).copy()
    jac[~interior] = np.nan

    # gradient in (rescaled) chart coordinates from chart-coordinate differences
    rows, cols = [], []
    for a in np.flatnonzero(interior):
        for j in nb_idx[a]:
            rows.append(a)
            cols.append(local[int(j)])
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    K = members.size
    indptr = np.zeros(K + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    indptr = np.cumsum(indptr)
    dx = np.ascontiguousarray((coords[cols] - coords[rows]) / r)
    ell = np.linalg.norm(dx, axis=1)
    mean = np.bincount(rows, ell, K) / np.maximum(np.bincount(rows, minlength=K), 1)
    w = np.ascontiguousarray(np.exp(-(ell / np.where(mean[rows] > 0, mean[rows], 1.0)) ** 2))
    G, status = kernels.local_fit(indptr, dx, w, 2)
    if np.any(status[interior] == 2):
        raise GeometryError("degenerate chart neighborhood")
    a_idx = np.arange(n)
    r_off = (rows[:, None] * n + a_idx).ravel()
    c_off = np.repeat(cols, n)
    diag = np.zeros((K, n))
    np.add.at(diag, rows, -G)
    r_d = (np.arange(K)[:, None] * n + a_idx).ravel()
    c_d = np.repeat(np.arange(K), n)
    grad_op = sparse.coo_matrix(
        (np.concatenate([G.ravel(), diag.ravel()]),
         (np.concatenate([r_off, r_d]), np.concatenate([c_off, c_d]))),
        shape=(K * n, K),
    ).tocsr()
    return Chart(int(center), float(r), float(radius), members, coords, metric, jac,
                 interior, core, grad_op, float(stress))


# ------------------------------------------------------------------ rescaled kernel


def _to_chart(chart: Chart, blocks: np.ndarray, x_loc: np.ndarray, y_loc: int) -> np.ndarray:
    """Frame-component blocks K(x, .; y) to chart components J_x K J_y^-1."""
    jy = chart.jacobian[y_loc]
    if not np.all(np.isfinite(jy)):
        raise GeometryError("no Jacobian at y (too close to the chart boundary)")
    jy_inv = np.linalg.inv(jy)
    return np.einsum("kab,kbc,cd->kad", chart.jacobian[x_loc], blocks, jy_inv)


@dataclass(frozen=True)
class RescaledBlock:
    matrix: np.ndarray
    x_vertex: int
    y_vertex: int
    snap_x: float
    snap_y: float
    t: float


def rescaled_kernel(spec: Spectrum, chart: Chart, x, s: float, y) -> RescaledBlock:
    """Kbar at rescaled chart points x and y (snapped to the nearest members)."""
    if not s > 0:
        raise InputError("s must be positive")
    (xi,), (dx,) = chart.snap(x)
    (yi,), (dy,) = chart.snap(y)
    t = s * chart.r ** 2
    X = spec.require_fields()
    w, k = np.exp(-spec.eigenvalues * t), spec.resolve_m(t, None)
    p, q = chart.members[xi], chart.members[yi]
    block = (X[p, :, :k] * w[:k]) @ X[q, :, :k].T
    mat = chart.r ** chart.n * _to_chart(chart, block[None], np.array([xi]), yi)[0]
    return RescaledBlock(mat, int(p), int(q), float(dx), float(dy), t)


# ------------------------------------------------------------------ comparison


@dataclass
class KernelComparison:
    center: int
    r: float
    distortion: float
    s_values: list
    y_vertices: list
    n_samples: int
    sup_euclid: float
    sup_diff_euclid: float
    sup_diff_euclid_hs: float
    sup_diff_z: float
    sup_diff_z_hs: float
    grad_sup_diff: float
    grad_sup_diff_z: float
    sup_grad_euclid: float
    decay_fit_C: float
    samples: list = field(default_factory=list)

    @property
    def relative_diff_euclid(self) -> float:
        return self.sup_diff_euclid / self.sup_euclid

    def to_dict(self, with_samples: bool = True) -> dict:
        out = {
            "chart_center": self.center, "r": self.r, "distortion": self.distortion,
            "s_values": self.s_values, "y_vertices": self.y_vertices, "n_samples": self.n_samples,
            "sup_euclid": self.sup_euclid, "sup_diff_euclid": self.sup_diff_euclid,
            "sup_diff_euclid_hs": self.sup_diff_euclid_hs, "relative_diff_euclid": self.relative_diff_euclid,
            "sup_diff_Z": self.sup_diff_z, "sup_diff_Z_hs": self.sup_diff_z_hs,
            "grad_sup_diff": self.grad_sup_diff, "grad_sup_diff_Z": self.grad_sup_diff_z,
            "sup_grad_euclid": self.sup_grad_euclid,
            "decay_fit_C": self.decay_fit_C,
        }
        if with_samples:
            out["samples"] = self.samples
        return out

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def excluded(x, s: float, y) -> np.ndarray:
    """Mask of points (x, s) inside the parabolic cylinder around y."""
    d = np.linalg.norm(np.atleast_2d(x) - np.asarray(y), axis=-1)
    return (d < EXCLUDE_RADIUS) & (s < EXCLUDE_TIME)


def compare_kernels(spec: Spectrum, chart: Chart, s_values=(0.25, 0.5, 1.0, 2.0),
                    y_points=None, keep_samples: int = 200) -> KernelComparison:
    """Sup differences of Kbar against the Euclidean and frozen-metric kernels.

    x runs over core chart members, y over ``y_points`` (local member
    indices; default the chart center) and s over ``s_values``. Samples inside
    the excluded parabolic cylinder around y are skipped. Gradients in x are
    least-squares fits in chart coordinates.
    """
    s_values = [float(s) for s in s_values]
    if not s_values or any(not 0 < s <= 2 for s in s_values):
        raise InputError("s values must lie in (0, 2]")
    y_points = [0] if y_points is None else [int(v) for v in y_points]
    n = chart.n
    xs = np.flatnonzero(chart.core)
    xc = chart.scaled[xs]
    eye = np.eye(n)
    sup_e = sup_de = sup_de_hs = sup_dz = sup_dz_hs = 0.0
    sup_ge = sup_gde = sup_gdz = 0.0
    C = 0.0
    count = 0
    samples = []
    for yl in y_points:
        if not chart.interior[yl]:
            raise InputError(f"y point {yl} is not an interior chart vertex")
        yc = chart.scaled[yl]
        g_y = chart.metric[yl]
        for s in s_values:
            t = s * chart.r ** 2
            col = kernel_column(spec, t, chart.members[yl])[chart.members]   # (K, n, n) frames
            kbar_all = np.zeros((chart.members.size, n, n))
            inner = np.flatnonzero(chart.interior)
            kbar_all[inner] = chart.r ** n * _to_chart(chart, col[inner], inner, yl)
            keep = ~excluded(xc, s, yc)
            kbar = kbar_all[xs]
            ge = _gaussian_block(xc, s, yc, eye)
            zk = _gaussian_block(xc, s, yc, g_y)
            de = np.abs(kbar - ge)[keep]
            dz = np.abs(kbar - zk)[keep]
            if not keep.any():
                continue
            count += int(keep.sum())
            sup_e = max(sup_e, float(np.abs(ge[keep]).max()))
            sup_de = max(sup_de, float(de.max()))
            sup_dz = max(sup_dz, float(dz.max()))
            sup_de_hs = max(sup_de_hs, float(np.sqrt(np.einsum("kab,kab->k", de, de)).max()))
            sup_dz_hs = max(sup_dz_hs, float(np.sqrt(np.einsum("kab,kab->k", dz, dz)).max()))
            # x-gradients of every entry: chart fit vs closed forms
            grad = (chart.grad_op @ kbar_all.reshape(-1, n * n)).reshape(-1, n, n * n)[xs]
            diff = xc - yc
            ge_s = ge[:, 0, 0]
            grad_e = -(diff / (2 * s)) * ge_s[:, None]
            grad_z = -(diff @ g_y / (2 * s)) * zk[:, 0, 0][:, None]
            eflat = eye.ravel()
            grad_ge = grad_e[:, :, None] * eflat
            grad_zk = grad_z[:, :, None] * eflat
            sup_ge = max(sup_ge, float(np.abs(grad_ge[keep]).max()))
            sup_gde = max(sup_gde, float(np.abs(grad - grad_ge)[keep].max()))
            sup_gdz = max(sup_gdz, float(np.abs(grad - grad_zk)[keep].max()))
            hs = np.sqrt(np.einsum("kab,kab->k", kbar, kbar))
            d2 = np.sum(diff * diff, axis=1)
            env = hs * s ** (n / 2) * np.exp(d2 / (8 * s))
            C = max(C, float(env[keep].max()))
            step = max(1, int(keep.sum()) // max(1, keep_samples // (len(s_values) * len(y_points))))
            for k in np.flatnonzero(keep)[::step]:
                samples.append({"x": xc[k].tolist(), "s": s, "y": yc.tolist(),
                                "kbar": kbar[k].tolist(), "euclid": float(ge_s[k]),
                                "z": float(zk[k, 0, 0])})
    return KernelComparison(
        chart.center, chart.r, chart.distortion(), s_values,
        [int(chart.members[v]) for v in y_points], count,
        sup_e, sup_de, sup_de_hs, sup_dz, sup_dz_hs, sup_gde, sup_gdz, sup_ge, C, samples,
    )


def distortion_sweep(M: SampledManifold, frames: FrameField, spec: Spectrum, center: int,
                     r_values, radius_factor: float = 2.0, s_values=(0.25, 0.5, 1.0, 2.0),
                     max_radius: float | None = None,
                     stencil: TangentStencil | None = None) -> list[KernelComparison]:
    """compare_kernels over several scales, with charts covering radius_factor * r."""
    stencil = TangentStencil.build(M, frames) if stencil is None else stencil
    out = []
    for r in r_values:
        ch = build_chart(M, frames, center, r, radius_factor * r, max_radius, stencil)
        out.append(compare_kernels(spec, ch, s_values))
    return out
