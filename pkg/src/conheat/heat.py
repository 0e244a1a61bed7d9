"""Truncated vector heat kernels, their Hilbert-Schmidt norms and diagnostics.

For a spectrum with eigenvalues lam_i and mass-orthonormal fields X_i the
truncated kernel between vertices p and q is

    K_m(p, t; q) = sum_{i < m} exp(-lam_i t) X_i(p) X_i(q)^T,

an n x n block mapping q's frame to p's frame. ``m=None`` selects the "full"
kernel: every eigenpair with exp(-lam t) >= 1e-10.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError, SpectrumError
from .laplacian import Spectrum
from .manifold import SampledManifold, geodesic_rows
from .stencil import TangentStencil

FULL = "full"
_CHUNK = 256


@dataclass(frozen=True)
class HeatKernelBlock:
    """Kernel block from the frame at q to the frame at p."""

    matrix: np.ndarray
    t: float
    p: int
    q: int
    m: int | str

    @property
    def hs_norm_sq(self) -> float:
        return float(np.sum(self.matrix * self.matrix))


@dataclass(frozen=True)
class HSNormField:
    """Squared HS norm of the kernel column at q, one value per vertex."""

    values: np.ndarray
    t: float
    q: int
    m: int | str

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["vertex", "value"])
            for i, v in enumerate(self.values):
                w.writerow([i, repr(float(v))])


def _check_t(t: float) -> float:
    t = float(t)
    if not t > 0 or not math.isfinite(t):
        raise InputError(f"t must be positive and finite, got {t}")
    return t


def _decay(spec: Spectrum, t: float, m: int | None) -> tuple[np.ndarray, int]:
    t = _check_t(t)
    k = spec.resolve_m(t, m)
    return np.exp(-spec.eigenvalues[:k] * t), k


def _label(m: int | None, k: int) -> int | str:
    return FULL if m is None else k


def truncated_kernel(spec: Spectrum, p: int, t: float, q: int, m: int | None = None) -> HeatKernelBlock:
    X = spec.require_fields()
    w, k = _decay(spec, t, m)
    block = (X[p, :, :k] * w) @ X[q, :, :k].T
    return HeatKernelBlock(block, float(t), int(p), int(q), _label(m, k))


def kernel_column(spec: Spectrum, t: float, q: int, m: int | None = None) -> np.ndarray:
    """All blocks K(p, t; q) for fixed q, shape (N, n, n)."""
    X = spec.require_fields()
    w, k = _decay(spec, t, m)
    return np.einsum("pai,bi->pab", X[:, :, :k] * w, X[q, :, :k])


def hs_norm_sq(spec: Spectrum, p: int, t: float, q: int, m: int | None = None,
               method: str = "matrix") -> float:
    """Squared HS norm of K(p, t; q).

    ``method="matrix"`` sums the squared block entries; ``method="spectral"``
    uses the double sum over eigenpairs of exp(-(lam_i + lam_j) t) times the
    pointwise Gram products at p and q.
    """
    if method == "matrix":
        return truncated_kernel(spec, p, t, q, m).hs_norm_sq
    if method != "spectral":
        raise InputError(f"unknown method {method!r}")
    X = spec.require_fields()
    w, k = _decay(spec, t, m)
    Xp, Xq = X[p, :, :k], X[q, :, :k]
    gram_p = Xp.T @ Xp
    gram_q = Xq.T @ Xq
    return float(w @ (gram_p * gram_q) @ w)


def hs_norm_fields(spec: Spectrum, t: float, sources, m: int | None = None) -> np.ndarray:
    """(N, J) array of squared HS norms ||K(p, t; q_j)||^2 for every vertex p."""
    X = spec.require_fields()
    w, k = _decay(spec, t, m)
    sources = np.atleast_1d(np.asarray(sources, dtype=np.int64))
    N, n = X.shape[0], X.shape[1]
    left = np.ascontiguousarray((X[:, :, :k] * w).reshape(N * n, k))
    out = np.empty((N, sources.size))
    for start in range(0, sources.size, _CHUNK):
        idx = sources[start:start + _CHUNK]
        right = X[idx, :, :k].reshape(idx.size * n, k)
        blocks = (left @ right.T).reshape(N, n, idx.size, n)
        out[:, start:start + idx.size] = np.einsum("pajb,pajb->pj", blocks, blocks)
    return out


def hs_norm_field(spec: Spectrum, t: float, q: int, m: int | None = None) -> HSNormField:
    _, k = _decay(spec, t, m)
    vals = hs_norm_fields(spec, t, [q], k)[:, 0]
    return HSNormField(vals, float(t), int(q), _label(m, k))


def kernel_gradient_hs(spec: Spectrum, stencil: TangentStencil, t: float, q: int,
                       m: int | None = None) -> np.ndarray:
    """Per-vertex gradient of p -> ||K(p, t; q)||^2 in p's frame, shape (N, n).

    ``stencil`` must be built from the same frames the spectrum is expressed in.
    """
    return stencil.gradient(hs_norm_field(spec, t, q, m).values)


# ---------------------------------------------------------------- diagnostics

# relative round-off level of spectral kernel sums
ROUNDOFF = 1e-10


@dataclass
class GaussianBoundReport:
    t: float
    pairs: np.ndarray
    distances: np.ndarray
    hs_norms: np.ndarray
    scalar_bounds: np.ndarray
    ratios: np.ndarray
    fit_slope: float
    fit_intercept: float
    fit_window: tuple[float, float]
    fit_count: int
    tolerance: float
    violations: list = field(default_factory=list)
    unresolved: int = 0

    @property
    def passed(self) -> bool:
        return not self.violations

    @property
    def normalized_slope(self) -> float:
        """Fitted slope in units of -1/(4t); 1 for an exact Gaussian."""
        return -4.0 * self.t * self.fit_slope

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "pairs": self.pairs.tolist(),
            "distances": self.distances.tolist(),
            "hs_norms": self.hs_norms.tolist(),
            "scalar_bounds": self.scalar_bounds.tolist(),
            "ratios": self.ratios.tolist(),
            "fit_slope": self.fit_slope,
            "fit_slope_normalized": self.normalized_slope,
            "fit_window": list(self.fit_window),
            "fit_count": self.fit_count,
            "tolerance": self.tolerance,
            "violations": self.violations,
            "unresolved": self.unresolved,
            "pass": self.passed,
        }


def _pair_distances(M: SampledManifold, pairs: np.ndarray) -> np.ndarray:
    out = np.empty(len(pairs))
    for p in np.unique(pairs[:, 0]):
        sel = pairs[:, 0] == p
        out[sel] = geodesic_rows(M, [p])[0, pairs[sel, 1]]
    return out


def gaussian_bound_check(M: SampledManifold, spec_conn: Spectrum, spec_scalar: Spectrum,
                         t: float, pairs, m: int | None = None, tolerance: float = 1.05,
                         fit_window: tuple[float, float] | None = None) -> GaussianBoundReport:
    """Compare ||K_vec(p,t;q)||_HS with n K_scalar(p,t;q) and fit the Gaussian decay.

    The ratio reported is ||K_vec||_HS / (n K_scalar); pairs above ``tolerance``
    are listed as violations. Both kernels carry round-off of order
    ``ROUNDOFF`` times n sqrt(K_scalar(p,p) K_scalar(q,q)); a pair is a violation
    only if it exceeds the bound by more than that floor, and pairs whose
    scalar value lies below the floor are counted as unresolved. The decay fit regresses log ||K_vec||_HS on d^2
    over pairs with d in ``fit_window`` (default [3 sqrt t, 6 sqrt t]); an
    exact Gaussian gives slope -1/(4t).
    """
    t = _check_t(t)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if spec_conn.n_vertices != spec_scalar.n_vertices:
        raise InputError("spectra belong to different vertex sets")
    n = spec_conn.n
    Xc = spec_conn.require_fields()
    Xs = spec_scalar.require_fields()
    wc, kc = _decay(spec_conn, t, m)
    ws, ks = _decay(spec_scalar, t, None if m is None else min(m, spec_scalar.m))
    P, Q = pairs[:, 0], pairs[:, 1]
    blocks = np.einsum("kai,kbi->kab", Xc[P, :, :kc] * wc, Xc[Q, :, :kc])
    hs = np.sqrt(np.einsum("kab,kab->k", blocks, blocks))
    scal = np.einsum("ki,ki->k", Xs[P, 0, :ks] * ws, Xs[Q, 0, :ks])
    bound = n * scal
    diag = np.einsum("ki,ki->k", Xs[:, 0, :ks] ** 2, np.broadcast_to(ws, (Xs.shape[0], ks)))
    floor = ROUNDOFF * n * np.sqrt(np.abs(diag[P] * diag[Q]))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(bound > 0, hs / bound, np.inf)
    d = _pair_distances(M, pairs)
    lo, hi = fit_window if fit_window is not None else (3 * math.sqrt(t), 6 * math.sqrt(t))
    sel = (d >= lo) & (d <= hi) & (hs > 0)
    slope = intercept = float("nan")
    if np.count_nonzero(sel) >= 2 and np.ptp(d[sel]) > 0:
        slope, intercept = np.polyfit(d[sel] ** 2, np.log(hs[sel]), 1)
    bad = np.flatnonzero(~(hs <= tolerance * bound + floor))
    violations = [{"p": int(P[i]), "q": int(Q[i]), "ratio": float(ratios[i])} for i in bad]
    return GaussianBoundReport(t, pairs, d, hs, bound, ratios, float(slope), float(intercept),
                               (lo, hi), int(np.count_nonzero(sel)), tolerance, violations,
                               int(np.count_nonzero(bound <= floor)))


@dataclass
class TraceDominationReport:
    t: float
    n: int
    trace_connection: float
    trace_scalar: float
    ratio: float
    tail_connection: float
    tail_scalar: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.ratio <= 1.0 + self.tolerance

    def to_dict(self) -> dict:
        return {
            "t": self.t, "n": self.n,
            "trace_connection": self.trace_connection, "trace_scalar": self.trace_scalar,
            "ratio": self.ratio, "tail_connection": self.tail_connection,
            "tail_scalar": self.tail_scalar, "tolerance": self.tolerance, "pass": self.passed,
        }


def _trace_tail(spec: Spectrum, t: float) -> float:
    """Upper estimate of the heat trace carried by uncomputed eigenvalues."""
    missing = spec.operator_size - spec.m
    if missing <= 0:
        return 0.0
    if spec.m == 0:
        return float(missing)
    floor = spec.eigenvalues[-1]
    if spec.complete_below is not None:
        # every missing eigenvalue lies above the solve cutoff
        floor = max(floor, spec.complete_below)
    return missing * math.exp(-floor * t)


def trace_domination_check(spec_conn: Spectrum, spec_scalar: Spectrum, t: float,
                           tolerance: float = 0.02, tail_tol: float = 1e-8) -> TraceDominationReport:
    """Ratio Tr exp(-t L_vec) / (n Tr exp(-t L_scalar)) from the two spectra.

    Only eigenvalues are needed. Raises SpectrumError when the uncomputed part
    of either spectrum could move a trace by more than ``tail_tol`` relative.
    """
    t = _check_t(t)
    n = spec_conn.n
    tc = spec_conn.heat_trace(t)
    ts = spec_scalar.heat_trace(t)
    tail_c, tail_s = _trace_tail(spec_conn, t), _trace_tail(spec_scalar, t)
    for name, tr, tail in (("connection", tc, tail_c), ("scalar", ts, tail_s)):
        if tail > tail_tol * max(tr, 1e-300):
            raise SpectrumError(
                f"{name} spectrum truncated too early for t={t:g}: "
                f"tail estimate {tail:.3e} vs trace {tr:.6g}"
            )
    ratio = tc / (n * ts)
    return TraceDominationReport(t, n, tc, ts, ratio, tail_c, tail_s, tolerance)


def tail_energy(M: SampledManifold, spec: Spectrum, stencil: TangentStencil, t: float,
                radius: float, sources=None, m: int | None = None) -> float:
    """Scaled far-field gradient energy of the squared HS norm.

    For each sampled vertex p, sums over q with d(p, q) >= radius the vertex
    measure times |grad_q ||K(p, t; q)||^2|^2, multiplies by (2t)^((3n+2)/2)
    and returns the maximum over p. ``sources`` defaults to every vertex.
    """
    t = _check_t(t)
    if not radius > 0:
        raise InputError("radius must be positive")
    src = np.arange(M.n_vertices) if sources is None else np.atleast_1d(np.asarray(sources, dtype=np.int64))
    n = spec.n
    scale = (2 * t) ** ((3 * n + 2) / 2)
    best = 0.0
    for start in range(0, src.size, 64):
        idx = src[start:start + 64]
        fields = hs_norm_fields(spec, t, idx, m)
        grads = stencil.gradient(fields)
        sq = np.einsum("paj,paj->jp", grads, grads)
        far = geodesic_rows(M, idx) >= radius
        vals = np.where(far, sq, 0.0) @ M.weights
        best = max(best, float(vals.max(initial=0.0)))
    return scale * best


@dataclass
class TruncationReport:
    t: float
    m: int
    m_prime: int
    sup_difference: float
    bound: float

    @property
    def passed(self) -> bool:
        return self.sup_difference <= self.bound

    def to_dict(self) -> dict:
        return {"t": self.t, "m": self.m, "m_prime": self.m_prime,
                "sup_difference": self.sup_difference, "bound": self.bound, "pass": self.passed}


def truncation_bound(spec: Spectrum, t: float, m: int, m_prime: int) -> float:
    """Bound on sup_{p,q} | ||K_m'||^2 - ||K_m||^2 | from the spectrum alone.

    With s_i = max_p |X_i(p)|, the head satisfies ||K_m||_HS <= a and the
    added modes ||K_m' - K_m||_HS <= tau, so the gap is at most 2 a tau + tau^2.
    """
    X = spec.require_fields()
    w = np.exp(-spec.eigenvalues[:m_prime] * _check_t(t))
    s2 = np.max(np.einsum("pai,pai->pi", X[:, :, :m_prime], X[:, :, :m_prime]), axis=0)
    head = math.fsum(w[:m] * s2[:m])
    tail = math.fsum(w[m:m_prime] * s2[m:m_prime])
    return 2 * head * tail + tail * tail


def truncation_error(spec: Spectrum, t: float, m: int, m_prime: int, sources=None) -> TruncationReport:
    """Sup over all p and sampled q of the change in ||K(p,t;q)||^2 from m to m' modes."""
    t = _check_t(t)
    m, m_prime = spec.resolve_m(t, m), spec.resolve_m(t, m_prime)
    if m > m_prime:
        raise InputError("need m <= m_prime")
    if m == m_prime:
        return TruncationReport(t, m, m_prime, 0.0, 0.0)
    src = np.arange(spec.n_vertices) if sources is None else np.atleast_1d(np.asarray(sources, dtype=np.int64))
    sup = 0.0
    for start in range(0, src.size, _CHUNK):
        idx = src[start:start + _CHUNK]
        gap = hs_norm_fields(spec, t, idx, m_prime) - hs_norm_fields(spec, t, idx, m)
        sup = max(sup, float(np.abs(gap).max()))
    return TruncationReport(t, m, m_prime, sup, truncation_bound(spec, t, m, m_prime))
