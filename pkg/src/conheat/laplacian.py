"""Discrete scalar and connection Laplacians and their low-lying spectra.

Both operators use Gaussian edge weights on the neighbor graph, multiplied by
the two endpoint measures so that the kernel sum approximates an integral
against the Riemannian volume regardless of sampling density::

    W_pq = exp(-l_pq^2 / bandwidth) * m_p * m_q

The connection Laplacian replaces the scalar coupling by the n x n orthogonal
transport O_pq between tangent frames. Eigenpairs solve the generalized problem
``L x = lam M x`` with ``M = diag(m) (x) I_n``. A single calibration constant,
shared by both operators, rescales the graph operator to continuum units.

The calibrated Gaussian-weight operator approximates (4/bw)(I - exp(bw Delta / 4))
rather than -Delta itself, which underestimates high eigenvalues by a factor
1 - bw lam / 8 + ... . With ``spectral_map="log"`` (the default) each operator
eigenvalue lam is reported as -(4/bw) log(1 - bw lam / 4), the same matrix
function applied to every eigenpair; eigenvectors are unchanged.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.linalg as sla
from scipy import sparse
from scipy.sparse.linalg import eigsh

from .errors import GeometryError, InputError, SpectrumError
from .manifold import FrameField, SampledManifold

log = logging.getLogger(__name__)

DENSE_LIMIT = 9000
# below this size dense LAPACK is always used
SMALL_DENSE = 2000
RESIDUAL_TOL = 1e-6


def align_frames(frame_p: np.ndarray, frame_q: np.ndarray) -> np.ndarray:
    """Orthogonal transport taking coefficients in ``frame_p`` to ``frame_q``.

    Returns the orthogonal matrix closest in Hilbert-Schmidt distance to the
    projection ``frame_q.T @ frame_p`` (polar factor). The determinant is not
    constrained.
    """
    return _polar(np.asarray(frame_q).T @ np.asarray(frame_p)[None])[0]


def _polar(proj: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    u, s, vt = np.linalg.svd(proj)
    if np.any(s[..., -1] < tol):
        worst = int(np.argmin(s[..., -1]))
        raise GeometryError(
            f"frame projection is singular (smallest singular value {s[worst, -1]:.2e}); "
            "neighboring tangent spaces are nearly orthogonal"
        )
    return u @ vt


def transport_blocks(frames: FrameField, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """O_pq for each edge: maps coefficients in the frame at q into the frame at p."""
    proj = np.einsum("eda,edb->eab", frames.frames[rows], frames.frames[cols])
    return _polar(proj)


@dataclass(frozen=True, eq=False)
class Laplacian:
    """Symmetric PSD operator of size (N*n) x (N*n) with lumped mass ``masses``.

    ``matrix`` is already divided by ``calibration``.
    """

    matrix: sparse.csr_matrix
    masses: np.ndarray
    n: int
    bandwidth: float
    calibration: float
    kind: str
    spectral_map: str = "log"

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.masses.shape[0]

    def mass_diagonal(self) -> np.ndarray:
        return np.repeat(self.masses, self.n)


SPECTRAL_MAPS = ("log", "none")


def default_bandwidth(M: SampledManifold) -> float:
    """Twice the squared mean nearest-neighbor spacing."""
    return 2.0 * M.mean_spacing() ** 2


def _check_map(spectral_map: str) -> str:
    if spectral_map not in SPECTRAL_MAPS:
        raise InputError(f"spectral_map must be one of {SPECTRAL_MAPS}, got {spectral_map!r}")
    return spectral_map


def map_eigenvalues(raw, bandwidth: float, spectral_map: str = "log") -> np.ndarray:
    """Operator eigenvalues to reported eigenvalues (inf where 1 - bw lam/4 <= 0)."""
    raw = np.asarray(raw, dtype=float)
    if _check_map(spectral_map) == "none":
        return raw.copy()
    arg = 1.0 - 0.25 * bandwidth * raw
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(arg > 0, -np.log(np.where(arg > 0, arg, 1.0)) * 4.0 / bandwidth, np.inf)


def unmap_eigenvalues(mapped, bandwidth: float, spectral_map: str = "log") -> np.ndarray:
    """Inverse of :func:`map_eigenvalues`."""
    mapped = np.asarray(mapped, dtype=float)
    if _check_map(spectral_map) == "none":
        return mapped.copy()
    return -np.expm1(-0.25 * bandwidth * mapped) * 4.0 / bandwidth


def _edge_weights(M: SampledManifold, bandwidth: float):
    rows, cols, lengths = M.edge_list()
    if rows.size == 0:
        raise GeometryError("manifold has no edges (empty neighborhoods)")
    deg = np.bincount(np.concatenate([rows, cols]), minlength=M.n_vertices)
    if np.any(deg == 0):
        raise GeometryError(f"{int(np.sum(deg == 0))} vertices have empty neighborhoods")
    w = np.exp(-(lengths**2) / bandwidth) * M.weights[rows] * M.weights[cols]
    return rows, cols, lengths, w


def _assemble(npts: int, n: int, rows, cols, w, blocks=None) -> sparse.csr_matrix:
    """Block operator with diagonal (sum_q w_pq) I_n and off-diagonal -w_pq O_pq."""
    if blocks is None:
        blocks = np.broadcast_to(np.eye(n), (rows.size, n, n))
    a, b = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    vals = -(w[:, None, None] * blocks)
    r_up = (rows[:, None, None] * n + a).ravel()
    c_up = (cols[:, None, None] * n + b).ravel()
    degree = np.bincount(rows, w, npts) + np.bincount(cols, w, npts)
    diag = np.repeat(degree, n)
    idx = np.arange(npts * n)
    # lower blocks are the exact transposes of the upper ones
    all_r = np.concatenate([r_up, c_up, idx])
    all_c = np.concatenate([c_up, r_up, idx])
    all_v = np.concatenate([vals.ravel(), vals.ravel(), diag])
    mat = sparse.coo_matrix((all_v, (all_r, all_c)), shape=(npts * n, npts * n)).tocsr()
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


def moment_calibration(M: SampledManifold, bandwidth: float) -> float:
    """Continuum constant of the graph operator from second kernel moments.

    For f smooth, sum_q W_pq/m_p (f(p) - f(q)) ~ c * (-Delta f)(p) with
    c = (1/2n) sum_q exp(-l^2/bw) m_q l^2; returns the mass-weighted mean of c.
    """
    rows, cols, lengths, _ = _edge_weights(M, bandwidth)
    k = np.exp(-(lengths**2) / bandwidth) * lengths**2
    per = np.bincount(rows, k * M.weights[cols], M.n_vertices) + np.bincount(
        cols, k * M.weights[rows], M.n_vertices
    )
    per /= 2 * M.intrinsic_dim
    return float(np.sum(per * M.weights) / np.sum(M.weights))


def calibration_constant(M: SampledManifold, bandwidth: float | None = None,
                         spectral_map: str = "log") -> float:
    """Factor dividing the graph operator so its spectrum is in continuum units.

    When the continuum first nonzero Laplace-Beltrami eigenvalue is known
    (generated manifolds) the constant matches the mean of the discrete first
    nonzero multiplet to it (after the spectral map); otherwise the
    kernel-moment estimate is used.
    """
    bandwidth = default_bandwidth(M) if bandwidth is None else bandwidth
    if M.first_eigenvalue is None:
        return moment_calibration(M, bandwidth)
    target, mult = M.first_eigenvalue
    raw = build_scalar_laplacian(M, bandwidth, calibration=1.0, spectral_map="none")
    vals = eigendecompose(raw, mult + 1, vectors=False).eigenvalues
    goal = float(unmap_eigenvalues(target, bandwidth, spectral_map))
    return float(np.mean(vals[1 : mult + 1]) / goal)


def build_scalar_laplacian(
    M: SampledManifold,
    bandwidth: float | None = None,
    calibration: float | None = None,
    spectral_map: str = "log",
) -> Laplacian:
    bandwidth = default_bandwidth(M) if bandwidth is None else float(bandwidth)
    if bandwidth <= 0:
        raise InputError("bandwidth must be positive")
    _check_map(spectral_map)
    if calibration is None:
        calibration = calibration_constant(M, bandwidth, spectral_map)
    rows, cols, _, w = _edge_weights(M, bandwidth)
    mat = _assemble(M.n_vertices, 1, rows, cols, w) / calibration
    return Laplacian(mat.tocsr(), M.weights.copy(), 1, bandwidth, float(calibration), "scalar",
                     spectral_map)


def build_connection_laplacian(
    M: SampledManifold,
    frames: FrameField,
    bandwidth: float | None = None,
    calibration: float | None = None,
    spectral_map: str = "log",
) -> Laplacian:
    bandwidth = default_bandwidth(M) if bandwidth is None else float(bandwidth)
    if bandwidth <= 0:
        raise InputError("bandwidth must be positive")
    _check_map(spectral_map)
    if calibration is None:
        calibration = calibration_constant(M, bandwidth, spectral_map)
    rows, cols, _, w = _edge_weights(M, bandwidth)
    blocks = transport_blocks(frames, rows, cols)
    mat = _assemble(M.n_vertices, frames.n, rows, cols, w, blocks) / calibration
    return Laplacian(mat.tocsr(), M.weights.copy(), frames.n, bandwidth, float(calibration),
                     "connection", spectral_map)


def build_laplacians(
    M: SampledManifold, frames: FrameField, bandwidth: float | None = None,
    spectral_map: str = "log",
) -> tuple[Laplacian, Laplacian]:
    """Connection and scalar Laplacians sharing one calibration constant."""
    bandwidth = default_bandwidth(M) if bandwidth is None else float(bandwidth)
    c = calibration_constant(M, bandwidth, spectral_map)
    return (
        build_connection_laplacian(M, frames, bandwidth, c, spectral_map),
        build_scalar_laplacian(M, bandwidth, c, spectral_map),
    )


# --------------------------------------------------------------------------
# spectra


@dataclass(frozen=True, eq=False)
class Spectrum:
    """Ascending eigenvalues and mass-orthonormal eigenvector fields.

    ``fields[p, :, i]`` holds the n coefficients of the i-th field at vertex p
    in that vertex's frame.
    """

    eigenvalues: np.ndarray
    fields: np.ndarray | None
    masses: np.ndarray
    n: int
    bandwidth: float
    calibration: float
    kind: str = "connection"
    residuals: np.ndarray | None = None
    operator_size: int = 0
    meta: dict = field(default_factory=dict)
    raw_eigenvalues: np.ndarray | None = None
    spectral_map: str = "none"
    # every eigenvalue up to this value is present (set by an eigenvalue-cutoff solve)
    complete_below: float | None = None

    @property
    def m(self) -> int:
        return self.eigenvalues.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.masses.shape[0]

    @property
    def is_complete(self) -> bool:
        return self.m == self.operator_size

    def require_fields(self) -> np.ndarray:
        if self.fields is None:
            raise SpectrumError("spectrum was computed without eigenvectors")
        return self.fields

    def gram(self) -> np.ndarray:
        X = self.require_fields()
        return np.einsum("p,pai,paj->ij", self.masses, X, X)

    def heat_trace(self, t: float, m: int | None = None) -> float:
        lam = self.eigenvalues[: self.m if m is None else m]
        return math.fsum(np.exp(-lam * t))

    def full_truncation(self, t: float, tol: float = 1e-10) -> int:
        """Number of eigenpairs kept by the "full" kernel at time t: all with
        exp(-lam t) >= tol. Raises when the spectrum stops short of the cutoff."""
        if t <= 0:
            raise InputError("t must be positive")
        cut = -math.log(tol) / t
        keep = int(np.searchsorted(self.eigenvalues, cut, side="right"))
        covered = self.complete_below is not None and self.complete_below >= cut
        if keep == self.m and not (self.is_complete or covered):
            raise SpectrumError(
                f"spectrum ends at lambda={self.eigenvalues[-1]:.4g} with "
                f"exp(-lambda t)={math.exp(-self.eigenvalues[-1] * t):.2e} > {tol:g}; "
                "compute more eigenpairs"
            )
        return keep

    def resolve_m(self, t: float, m: int | None) -> int:
        if m is None:
            return self.full_truncation(t)
        m = int(m)
        if m > self.m:
            raise SpectrumError(f"truncation m={m} exceeds the {self.m} computed eigenpairs")
        if m < 0:
            raise InputError("m must be non-negative")
        return m

    def rotated(self, gauge: np.ndarray) -> "Spectrum":
        """Express the fields in frames rotated by per-vertex ``gauge`` (F -> F G)."""
        X = np.einsum("pba,pbi->pai", gauge, self.require_fields())
        return replace(self, fields=X, meta=dict(self.meta))


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    pos = np.argmax(np.abs(vecs), axis=0)
    return vecs * np.sign(vecs[pos, np.arange(vecs.shape[1])])


def eigendecompose(
    L: Laplacian,
    m: int | None = None,
    *,
    max_eigenvalue: float | None = None,
    vectors: bool = True,
    seed: int = 0,
    method: str = "auto",
) -> Spectrum:
    """The m smallest eigenpairs of ``L x = lam M x`` (or all with lam <= max_eigenvalue).

    ``method="auto"`` uses dense LAPACK up to ``DENSE_LIMIT`` unknowns, except
    for a few eigenpairs (m <= size/10) of an operator larger than
    ``SMALL_DENSE``, which go to shift-invert Lanczos like everything beyond
    ``DENSE_LIMIT``. Fields are mass-orthonormal and each eigenvector's largest entry is
    made positive. ``max_eigenvalue`` and the returned eigenvalues are in
    mapped units (see ``Laplacian.spectral_map``).
    """
    size = L.size
    requested_max = max_eigenvalue
    if max_eigenvalue is not None:
        max_eigenvalue = float(unmap_eigenvalues(max_eigenvalue, L.bandwidth, L.spectral_map))
    if m is None and max_eigenvalue is None:
        m = size
    if m is not None:
        m = int(m)
        if not 0 < m <= size:
            raise InputError(f"requested m={m} eigenpairs from an operator of size {size}")
    dinv = 1.0 / np.sqrt(L.mass_diagonal())
    A = sparse.diags(dinv) @ L.matrix @ sparse.diags(dinv)
    A = ((A + A.T) * 0.5).tocsr()

    if method == "auto":
        # shift-invert Lanczos wins for a few eigenpairs of a large operator
        few = m is not None and max_eigenvalue is None and m <= size // 10 and size > SMALL_DENSE
        method = "dense" if size <= DENSE_LIMIT and not few else "sparse"
    if method == "dense":
        dense = A.toarray()
        if max_eigenvalue is not None:
            vals, vecs = sla.eigh(dense, subset_by_value=(-np.inf, max_eigenvalue),
                                  eigvals_only=not vectors, driver="evr")
            if m is not None:
                vals = vals[:m]
                vecs = vecs[:, :m] if vectors else None
        elif m == size:
            out = sla.eigh(dense, eigvals_only=not vectors, driver="evd")
            vals, vecs = (out, None) if not vectors else out
        else:
            out = sla.eigh(dense, subset_by_index=(0, m - 1), eigvals_only=not vectors, driver="evr")
            vals, vecs = (out, None) if not vectors else out
        del dense
    elif method == "sparse":
        if m is None:
            raise InputError("sparse eigensolver needs an explicit count m")
        if m >= size - 1:
            raise InputError("use the dense method for (nearly) complete spectra")
        rng = np.random.default_rng(seed)
        v0 = rng.standard_normal(size)
        sigma = -1e-3 * float(A.diagonal().mean())
        try:
            out = eigsh(A, k=m, sigma=sigma, which="LM", v0=v0, tol=0,
                        return_eigenvectors=vectors, ncv=min(size, max(2 * m + 1, m + 32)))
        except Exception as exc:  # ARPACK convergence failures
            raise SpectrumError(f"eigensolver did not converge: {exc}") from exc
        if vectors:
            vals, vecs = out
            order = np.argsort(vals)
            vals, vecs = vals[order], vecs[:, order]
        else:
            vals, vecs = np.sort(out), None
    else:
        raise InputError(f"unknown eigensolver method {method!r}")

    vals = np.asarray(vals, dtype=float)
    complete_below = None
    if max_eigenvalue is not None and (m is None or vals.size < m):
        complete_below = float(requested_max)
    residuals = None
    X = None
    if vectors:
        vecs = _fix_signs(np.asarray(vecs))
        residuals = np.linalg.norm(A @ vecs - vecs * vals, axis=0)
        if np.any(residuals > RESIDUAL_TOL * np.maximum(1.0, np.abs(vals))):
            raise SpectrumError(
                f"eigen-residuals too large (max {residuals.max():.2e}); solver did not converge"
            )
        X = (vecs * dinv[:, None]).reshape(L.n_vertices, L.n, -1)
    lam_max = vals.max() if vals.size else 0.0
    if vals.size and vals[0] < -1e-9 * max(abs(lam_max), 1.0):
        raise SpectrumError(f"operator is not PSD: smallest eigenvalue {vals[0]:.3e}")
    return Spectrum(
        eigenvalues=map_eigenvalues(np.maximum(vals, 0.0), L.bandwidth, L.spectral_map),
        fields=X,
        masses=L.masses.copy(),
        n=L.n,
        bandwidth=L.bandwidth,
        calibration=L.calibration,
        kind=L.kind,
        residuals=residuals,
        operator_size=size,
        raw_eigenvalues=vals,
        spectral_map=L.spectral_map,
        complete_below=complete_below,
    )


# --------------------------------------------------------------------------
# export


def write_spectrum(spec: Spectrum, prefix: str | Path) -> tuple[Path, Path]:
    """``<prefix>.csv`` (one eigenpair per row: eigenvalue then N*n coefficients)
    and ``<prefix>.json`` header."""
    prefix = Path(prefix)
    csv_path, json_path = prefix.with_suffix(".csv"), prefix.with_suffix(".json")
    X = spec.require_fields().reshape(-1, spec.m)
    with open(csv_path, "w") as fh:
        for i in range(spec.m):
            row = np.concatenate([[spec.eigenvalues[i]], X[:, i]])
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    header = {
        "N": spec.n_vertices,
        "n": spec.n,
        "m": spec.m,
        "bandwidth": spec.bandwidth,
        "calibration": spec.calibration,
        "kind": spec.kind,
        "operator_size": spec.operator_size,
        "spectral_map": spec.spectral_map,
        "complete_below": spec.complete_below,
        "raw_eigenvalues": None if spec.raw_eigenvalues is None
        else [float(x) for x in spec.raw_eigenvalues],
        "masses": [float(x) for x in spec.masses],
        "max_residual": None if spec.residuals is None else float(spec.residuals.max(initial=0.0)),
    }
    json_path.write_text(json.dumps(header, indent=2))
    return csv_path, json_path


def read_spectrum(prefix: str | Path) -> Spectrum:
    prefix = Path(prefix)
    csv_path, json_path = prefix.with_suffix(".csv"), prefix.with_suffix(".json")
    if not csv_path.is_file() or not json_path.is_file():
        raise InputError(f"missing spectrum files for {prefix}")
    head = json.loads(json_path.read_text())
    text = csv_path.read_text().strip()
    N, n = head["N"], head["n"]
    if text:
        rows = np.array([[float(x) for x in ln.split(",")] for ln in text.splitlines()])
    else:
        rows = np.zeros((0, 1 + N * n))
    if rows.shape[1] != 1 + N * n:
        raise InputError(f"{csv_path}: expected {1 + N * n} columns, got {rows.shape[1]}")
    return Spectrum(
        eigenvalues=rows[:, 0].copy(),
        fields=rows[:, 1:].T.reshape(N, n, -1).copy(),
        masses=np.asarray(head["masses"], dtype=float),
        n=n,
        bandwidth=head["bandwidth"],
        calibration=head["calibration"],
        kind=head.get("kind", "connection"),
        operator_size=head.get("operator_size", N * n),
        raw_eigenvalues=None if head.get("raw_eigenvalues") is None
        else np.asarray(head["raw_eigenvalues"], dtype=float),
        spectral_map=head.get("spectral_map", "none"),
        complete_below=head.get("complete_below"),
    )
