"""Time the compiled loops against the numpy fallback.

    python benchmarks/bench_kernels.py [--resolution 64] [--repeat 3]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from conheat import _kernels_py, estimate_frames, generate_manifold
from conheat.stencil import nearest_edges, tangent_coordinates

try:
    from conheat import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--resolution", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    M = generate_manifold("flat_torus", args.resolution)
    frames = estimate_frames(M)
    edges = nearest_edges(M, 12)
    disp = np.ascontiguousarray(tangent_coordinates(M, frames, edges))
    indptr = edges.indptr.astype(np.int64)
    w = np.ascontiguousarray(np.exp(-(edges.data / edges.data.mean()) ** 2))

    rng = np.random.default_rng(0)
    H = rng.random((M.n_vertices, 64))
    sources = np.arange(0, M.n_vertices, 4, dtype=np.int64)
    dist = np.ascontiguousarray(np.abs(rng.standard_normal((sources.size, M.n_vertices))))

    cases = {
        "local_fit": lambda impl: impl.local_fit(indptr, disp, w, 2),
        "pair_extrema": lambda impl: impl.pair_extrema(H, sources, dist, 0.5),
    }
    print(f"flat_torus {args.resolution}^2, N={M.n_vertices}, best of {args.repeat}")
    print(f"{'kernel':<14}{'python [s]':>12}{'cython [s]':>12}{'speedup':>10}")
    for name, call in cases.items():
        tp = _best(lambda: call(_kernels_py), args.repeat)
        if _compiled is None:
            print(f"{name:<14}{tp:12.4f}{'n/a':>12}{'':>10}")
            continue
        tc = _best(lambda: call(_compiled), args.repeat)
        print(f"{name:<14}{tp:12.4f}{tc:12.4f}{tp / tc:10.1f}")


if __name__ == "__main__":
    main()
