"""Heat-kernel embeddings into R^N0 and their empirical isometry checks.

Coordinate j of a vertex p is

    (2t)^((3n+2)/4) / V_e * w_j * ||K(p, t; q_j)||_HS^2,

where q_j runs over net centers (weighted variant, w_j = |A_j|^(1/2)) or over
replicated centers (uniform variant, w_j = per-copy mass^(1/2)). V_e is the
L2 norm of the x_1-derivative of the squared HS norm of the Euclidean vector
heat kernel at time 1/2, which makes the map asymptotically isometric.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate

from . import kernels
from .errors import InputError
from .heat import FULL, hs_norm_fields
from .laplacian import Spectrum
from .manifold import FrameField, SampledManifold, geodesic_rows
from .net import Partition, Replication, farthest_point_net, replicate_centers, voronoi_partition
from .stencil import TangentStencil

VARIANTS = ("weighted", "uniform")


# ------------------------------------------------------------------ constants


def euclidean_hs_sq(sq_dist, s: float, n: int):
    """||Gamma_E(x, s; y)||_HS^2 as a function of |x - y|^2."""
    return n * (4 * math.pi * s) ** (-n) * np.exp(-np.asarray(sq_dist) / (2 * s))


def compute_Ve(n: int, rtol: float = 1e-11) -> float:
    """V_e by adaptive cubature of its defining integral over R^n.

    The integrand is (d/dx_1 ||Gamma_E(x, 1/2; y)||^2 at x = 0)^2. The squared
    HS norm decays like exp(-|y|^2), so the box [-9, 9]^n loses < 1e-30.
    """
    if int(n) != n or n < 1:
        raise InputError("n must be a positive integer")
    n = int(n)
    s = 0.5

    def integrand(y):
        # chain rule on exp(-|x - y|^2 / 2s) at x = 0
        deriv = (y[:, 0] / s) * euclidean_hs_sq(np.sum(y * y, axis=1), s, n)
        return deriv * deriv

    res = integrate.cubature(integrand, [-9.0] * n, [9.0] * n, rule="gk21", rtol=rtol, atol=0.0)
    if res.status != "converged":
        raise RuntimeError(f"V_e cubature did not converge for n={n}")
    return math.sqrt(float(res.estimate))


def ve_closed_form(n: int) -> float:
    return n * (2 * math.pi) ** (-n) * (math.pi / 2) ** (n / 4)


# ------------------------------------------------------------------ embedding


@dataclass(frozen=True)
class EmbeddingConfig:
    t: float
    delta: float
    m: int | None = None
    variant: str = "weighted"
    A: float | None = None
    copy_weight: str = "split"

    def __post_init__(self):
        if not self.t > 0:
            raise InputError("t must be positive")
        if not self.delta > 0:
            raise InputError("delta must be positive")
        if self.variant not in VARIANTS:
            raise InputError(f"variant must be one of {VARIANTS}")
        if self.variant == "uniform" and not (self.A is not None and self.A > 0):
            raise InputError("the uniform variant needs A > 0")


@dataclass(frozen=True, eq=False)
class EmbeddedCloud:
    coords: np.ndarray
    config: EmbeddingConfig
    partition: Partition
    column_centers: np.ndarray
    column_weights: np.ndarray
    time_factor: float
    Ve: float
    m_used: int
    replication: Replication | None = None

    @property
    def n_columns(self) -> int:
        return self.coords.shape[1]

    @property
    def prefactor(self) -> float:
        return self.time_factor / self.Ve

    def sidecar(self) -> dict:
        c = self.config
        return {
            "t": c.t,
            "m": FULL if c.m is None else c.m,
            "m_used": self.m_used,
            "delta": c.delta,
            "variant": c.variant,
            "A": c.A,
            "Ve": self.Ve,
            "prefactor": self.prefactor,
            "time_factor": self.time_factor,
            "N0": self.n_columns,
            "column_centers": self.column_centers.tolist(),
            "column_weights": self.column_weights.tolist(),
        }

    def write_csv(self, path: str | Path) -> tuple[Path, Path]:
        """Coordinates as CSV plus a JSON sidecar next to it."""
        path = Path(path)
        side = path.with_suffix(".json")
        side.write_text(json.dumps(self.sidecar(), indent=2))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["vertex"] + [f"h{j}" for j in range(self.n_columns)])
            for i, row in enumerate(self.coords):
                w.writerow([i] + [repr(float(v)) for v in row])
        return path, side


def _time_factor(t: float, n: int) -> float:
    return (2 * t) ** ((3 * n + 2) / 4)


def _resolve_Ve(n: int, Ve: float | None) -> float:
    return compute_Ve(n) if Ve is None else float(Ve)


def embed_weighted(M: SampledManifold, spec: Spectrum, partition: Partition, t: float,
                   m: int | None = None, Ve: float | None = None) -> EmbeddedCloud:
    n = M.intrinsic_dim
    if spec.n_vertices != M.n_vertices or spec.n != n:
        raise InputError("spectrum does not match the manifold")
    k = spec.resolve_m(t, m)
    centers = partition.net.centers
    weights = np.sqrt(partition.masses)
    Ve = _resolve_Ve(n, Ve)
    tf = _time_factor(t, n)
    fields = hs_norm_fields(spec, t, centers, k)
    coords = fields * (weights * (tf / Ve))
    cfg = EmbeddingConfig(t, partition.delta, m, "weighted")
    return EmbeddedCloud(coords, cfg, partition, centers.copy(), weights, tf, Ve, k)


def embed_uniform(M: SampledManifold, spec: Spectrum, partition: Partition, t: float, A: float,
                  m: int | None = None, Ve: float | None = None,
                  copy_weight: str = "split") -> EmbeddedCloud:
    """Uniform-weight variant: centers repeated ceil(|A_i|/A) times."""
    n = M.intrinsic_dim
    if spec.n_vertices != M.n_vertices or spec.n != n:
        raise InputError("spectrum does not match the manifold")
    rep = replicate_centers(partition, A, copy_weight)
    if A >= partition.masses.max():
        warnings.warn("A exceeds every cell mass; every center is used once", stacklevel=2)
    k = spec.resolve_m(t, m)
    Ve = _resolve_Ve(n, Ve)
    tf = _time_factor(t, n)
    fields = hs_norm_fields(spec, t, partition.net.centers, k)[:, rep.source_cell]
    weights = np.sqrt(rep.copy_mass)
    coords = fields * (weights * (tf / Ve))
    cfg = EmbeddingConfig(t, partition.delta, m, "uniform", float(A), copy_weight)
    return EmbeddedCloud(coords, cfg, partition, rep.centers, weights, tf, Ve, k, rep)


# ------------------------------------------------------------------ checks


@dataclass
class DilatationReport:
    dilatation: np.ndarray
    codilatation: np.ndarray

    @property
    def dilatation_sq(self) -> np.ndarray:
        return self.dilatation ** 2

    @property
    def min(self) -> float:
        return float(self.dilatation.min())

    @property
    def max(self) -> float:
        return float(self.dilatation.max())

    @property
    def epsilon_achieved(self) -> float:
        """max_p | dil_p^2 - 1 |."""
        return float(np.abs(self.dilatation_sq - 1).max())

    @property
    def epsilon_unsquared(self) -> float:
        """max_p | dil_p - 1 |."""
        return float(np.abs(self.dilatation - 1).max())

    @property
    def isometry_defect(self) -> float:
        """Largest deviation of any squared singular value from 1."""
        return float(max(np.abs(self.dilatation ** 2 - 1).max(), np.abs(self.codilatation ** 2 - 1).max()))

    def to_dict(self) -> dict:
        return {
            "per_vertex_dil": self.dilatation.tolist(),
            "per_vertex_dil_sq": self.dilatation_sq.tolist(),
            "per_vertex_codil": self.codilatation.tolist(),
            "min": self.min,
            "max": self.max,
            "epsilon_achieved": self.epsilon_achieved,
            "epsilon_unsquared": self.epsilon_unsquared,
            "isometry_defect": self.isometry_defect,
        }


def estimate_dilatation(M: SampledManifold, frames: FrameField, cloud,
                        stencil: TangentStencil | None = None) -> DilatationReport:
    """Largest and smallest singular value of the fitted differential at every vertex.

    ``cloud`` is an EmbeddedCloud or an (N, Q) coordinate array.
    """
    coords = cloud.coords if isinstance(cloud, EmbeddedCloud) else np.asarray(cloud, dtype=float)
    if coords.ndim == 1:
        coords = coords[:, None]
    if coords.shape[0] != M.n_vertices:
        raise InputError("cloud does not match the manifold")
    stencil = TangentStencil.build(M, frames) if stencil is None else stencil
    jac = stencil.gradient(coords)  # (N, n, Q)
    sv = np.linalg.svd(jac, compute_uv=False)
    return DilatationReport(sv[:, 0].copy(), sv[:, -1].copy())


@dataclass
class IsometryCheck:
    epsilon: float
    passed: bool
    margin: float
    worst: list

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "pass": self.passed, "margin": self.margin, "worst": self.worst}


def verify_almost_isometry(report: DilatationReport, epsilon: float, n_worst: int = 10) -> IsometryCheck:
    """Pass iff 1 - eps < dil_p^2 < 1 + eps at every vertex."""
    dev = np.abs(report.dilatation_sq - 1)
    order = np.argsort(-dev, kind="stable")[:n_worst]
    worst = [{"vertex": int(i), "dil_sq": float(report.dilatation_sq[i])} for i in order]
    passed = bool(np.all(dev < epsilon))
    return IsometryCheck(float(epsilon), passed, float(epsilon - dev.max()), worst)


@dataclass
class InjectivityReport:
    separation: float
    min_ratio: float
    min_pair: tuple[int, int]
    max_ratio: float
    max_pair: tuple[int, int]
    n_pairs: int
    threshold: float

    @property
    def passed(self) -> bool:
        return self.n_pairs > 0 and self.min_ratio > self.threshold

    def to_dict(self) -> dict:
        return {
            "separation": self.separation, "min_ratio": self.min_ratio, "min_pair": list(self.min_pair),
            "max_ratio": self.max_ratio, "max_pair": list(self.max_pair), "n_pairs": self.n_pairs,
            "threshold": self.threshold, "pass": self.passed,
        }


def verify_injectivity(M: SampledManifold, cloud, separation: float, threshold: float = 0.1,
                       block: int = 256) -> InjectivityReport:
    """Exhaustive scan of |H(p) - H(q)| / d(p, q) over pairs with d >= separation."""
    if not separation > 0:
        raise InputError("separation must be positive")
    coords = cloud.coords if isinstance(cloud, EmbeddedCloud) else np.asarray(cloud, dtype=float)
    if coords.ndim == 1:
        coords = coords[:, None]
    H = np.ascontiguousarray(coords, dtype=float)
    best_min = (math.inf, -1, -1)
    best_max = (-math.inf, -1, -1)
    total = 0
    for start in range(0, M.n_vertices, block):
        src = np.arange(start, min(start + block, M.n_vertices), dtype=np.int64)
        dist = np.ascontiguousarray(geodesic_rows(M, src))
        lo, i0, j0, hi, i1, j1, cnt = kernels.pair_extrema(H, src, dist, float(separation))
        total += int(cnt)
        if cnt and lo < best_min[0]:
            best_min = (float(lo), int(i0), int(j0))
        if cnt and hi > best_max[0]:
            best_max = (float(hi), int(i1), int(j1))
    return InjectivityReport(float(separation), best_min[0], best_min[1:], best_max[0], best_max[1:],
                             total, float(threshold))


# ------------------------------------------------------------------ scan


@dataclass
class ScanCell:
    t: float
    delta: float
    n_columns: int
    epsilon_achieved: float
    epsilon_unsquared: float
    min_ratio: float
    dil_min: float
    dil_max: float
    passed: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class ScanReport:
    cells: list[ScanCell] = field(default_factory=list)
    epsilon: float = 0.25
    threshold: float = 0.1

    @property
    def best(self) -> ScanCell | None:
        ok = [c for c in self.cells if c.min_ratio > self.threshold]
        pool = ok or self.cells
        return min(pool, key=lambda c: c.epsilon_achieved) if pool else None

    @property
    def passed(self) -> bool:
        return any(c.passed for c in self.cells)

    def to_dict(self) -> dict:
        best = self.best
        return {"epsilon": self.epsilon, "threshold": self.threshold,
                "cells": [c.to_dict() for c in self.cells],
                "best": None if best is None else best.to_dict(), "pass": self.passed}


def scan_parameters(M: SampledManifold, frames: FrameField, spec: Spectrum, t_grid, delta_grid,
                    m: int | None = None, epsilon: float = 0.25, threshold: float = 0.1,
                    separation_factor: float = 2.0, variant: str = "weighted",
                    A: float | None = None, stencil: TangentStencil | None = None) -> ScanReport:
    """Grid scan over (t, delta) recording the achieved epsilon and injectivity margin."""
    stencil = TangentStencil.build(M, frames) if stencil is None else stencil
    Ve = compute_Ve(M.intrinsic_dim)
    report = ScanReport(epsilon=epsilon, threshold=threshold)
    for delta in delta_grid:
        part = voronoi_partition(M, farthest_point_net(M, delta))
        for t in t_grid:
            if variant == "uniform":
                cloud = embed_uniform(M, spec, part, t, A, m, Ve)
            else:
                cloud = embed_weighted(M, spec, part, t, m, Ve)
            dil = estimate_dilatation(M, frames, cloud, stencil)
            inj = verify_injectivity(M, cloud, separation_factor * delta, threshold)
            ok = dil.epsilon_achieved <= epsilon and inj.passed
            report.cells.append(ScanCell(float(t), float(delta), cloud.n_columns, dil.epsilon_achieved,
                                         dil.epsilon_unsquared, inj.min_ratio, dil.min, dil.max, ok))
    return report
