"""Covering nets of sample vertices and the cell partitions they induce."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError
from .manifold import SampledManifold, geodesic_rows

# relative slack when comparing a covering radius to delta (round-off only)
_COVER_SLACK = 1e-12


@dataclass(frozen=True, eq=False)
class DeltaNet:
    centers: np.ndarray
    delta: float
    covering_radius: float
    # distance from every vertex to its nearest center, and that center's position in ``centers``
    nearest_distance: np.ndarray
    nearest_center: np.ndarray

    @property
    def size(self) -> int:
        return self.centers.size

    @classmethod
    def from_centers(cls, M: SampledManifold, centers, delta: float) -> "DeltaNet":
        """Net from a given center list; the covering radius is measured, not assumed."""
        centers = np.asarray(centers, dtype=np.int64)
        if centers.size == 0:
            raise InputError("a net needs at least one center")
        if np.unique(centers).size != centers.size:
            raise InputError("duplicate centers")
        dist = geodesic_rows(M, centers)
        # argmin returns the first minimum, i.e. the lowest center index on ties
        nearest = np.argmin(dist, axis=0)
        nd = dist[nearest, np.arange(M.n_vertices)]
        return cls(centers, float(delta), float(nd.max()), nd, nearest)

    def center_distances(self, M: SampledManifold) -> np.ndarray:
        return geodesic_rows(M, self.centers)


def farthest_point_net(M: SampledManifold, delta: float, seed_vertex: int = 0) -> DeltaNet:
    """Greedy farthest-point net: add the vertex farthest from the current
    centers until every vertex lies within ``delta`` of one."""
    delta = float(delta)
    if not delta > 0:
        raise InputError("delta must be positive")
    N = M.n_vertices
    centers = [int(seed_vertex)]
    nd = geodesic_rows(M, centers)[0]
    nearest = np.zeros(N, dtype=np.int64)
    limit = delta * (1 + _COVER_SLACK)
    while True:
        far = int(np.argmax(nd))
        if nd[far] <= limit:
            break
        d_new = geodesic_rows(M, [far])[0]
        closer = d_new < nd
        nearest[closer] = len(centers)
        nd = np.where(closer, d_new, nd)
        centers.append(far)
    return DeltaNet(np.asarray(centers, dtype=np.int64), delta, float(nd.max()), nd, nearest)


@dataclass(frozen=True, eq=False)
class Partition:
    net: DeltaNet
    assignment: np.ndarray
    masses: np.ndarray
    total_measure: float

    @property
    def delta(self) -> float:
        return self.net.delta

    @property
    def n_cells(self) -> int:
        return self.masses.size

    @classmethod
    def from_assignment(cls, M: SampledManifold, net: DeltaNet, assignment) -> "Partition":
        assignment = np.asarray(assignment, dtype=np.int64)
        if assignment.shape != (M.n_vertices,):
            raise InputError("assignment must have one entry per vertex")
        if assignment.min() < 0 or assignment.max() >= net.size:
            raise InputError("assignment refers to a missing center")
        masses = np.bincount(assignment, weights=M.weights, minlength=net.size)
        return cls(net, assignment, masses, M.total_weight)

    def cell(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == i)

    def max_cell_radius(self, M: SampledManifold) -> float:
        """Largest distance from a vertex to the center of its own cell."""
        dist = geodesic_rows(M, self.net.centers)
        return float(dist[self.assignment, np.arange(M.n_vertices)].max())

    def mass_error(self) -> float:
        """Relative gap between summed cell masses and the total measure."""
        return abs(math.fsum(self.masses) - self.total_measure) / self.total_measure

    def to_dict(self) -> dict:
        return {
            "delta": self.delta,
            "centers": self.net.centers.tolist(),
            "assignment": self.assignment.tolist(),
            "masses": self.masses.tolist(),
        }

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def voronoi_partition(M: SampledManifold, net: DeltaNet) -> Partition:
    """Assign every vertex to its nearest center (lowest center index on ties)."""
    return Partition.from_assignment(M, net, net.nearest_center)


@dataclass(frozen=True, eq=False)
class Replication:
    """Flat list of center copies with per-copy weights."""

    centers: np.ndarray
    source_cell: np.ndarray
    counts: np.ndarray
    copy_mass: np.ndarray
    A: float

    @property
    def size(self) -> int:
        return self.centers.size


def replication_counts(masses, A: float) -> np.ndarray:
    """ceil(|A_i| / A), guarded so exact multiples are not bumped by round-off."""
    masses = np.asarray(masses, dtype=float)
    q = masses / A
    near = np.rint(q)
    q = np.where(np.abs(q - near) <= 1e-12 * np.maximum(near, 1.0), near, q)
    return np.maximum(np.ceil(q), 1).astype(np.int64)


def replicate_centers(partition: Partition, A: float, copy_weight: str = "split") -> Replication:
    """Repeat center i ceil(|A_i|/A) times.

    ``copy_weight="split"`` gives every copy of cell i the mass |A_i|/N_i, so
    the copy masses sum to the total measure; ``"constant"`` gives each copy A.
    """
    A = float(A)
    if not A > 0:
        raise InputError("A must be positive")
    counts = replication_counts(partition.masses, A)
    cells = np.repeat(np.arange(partition.n_cells), counts)
    if copy_weight == "split":
        mass = (partition.masses / counts)[cells]
    elif copy_weight == "constant":
        mass = np.full(cells.size, A)
    else:
        raise InputError(f"copy_weight must be 'split' or 'constant', got {copy_weight!r}")
    return Replication(partition.net.centers[cells], cells, counts, mass, A)
