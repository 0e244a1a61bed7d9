"""Command-line front end: ``conheat {spectrum,embed,diagnose,chart} ...``.

Every run writes ``report.json`` into ``--out`` (also on failure). Exit codes:
0 all checks passed, 1 a check failed, 2 bad input, 3 a pipeline stage failed.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .chart import build_chart, compare_kernels
from .embedding import (compute_Ve, embed_uniform, embed_weighted, estimate_dilatation,
                        scan_parameters, verify_almost_isometry, verify_injectivity)
from .errors import ConheatError, InputError
from .heat import gaussian_bound_check, tail_energy, trace_domination_check
from .laplacian import Spectrum, build_laplacians, eigendecompose, read_spectrum, write_spectrum
from .manifold import GENERATORS, estimate_frames, generate_manifold, load_manifold
from .net import farthest_point_net, replication_counts, voronoi_partition
from .report import write_json, write_rows
from .stencil import TangentStencil

EXIT_OK, EXIT_CHECK, EXIT_INPUT, EXIT_STAGE = 0, 1, 2, 3
# eigenpairs are computed while exp(-lam t) >= this, at the smallest requested t
KERNEL_TOL = 1e-10
# trace checks need a tail that is negligible even when summed over all missing modes
TRACE_TOL = 1e-12

DEFAULTS = {
    "manifold": None, "resolution": 64, "file": None, "format": None, "dim": None,
    "k": None, "bandwidth": None, "m": None, "t": None, "t_grid": None,
    "delta": None, "delta_grid": None, "variant": "weighted", "A": None,
    "epsilon": 0.25, "r": None, "chart_radius": None, "out": "conheat_out", "seed": 0,
    "spectrum_dir": None,
}


class StageError(Exception):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(str(exc))
        self.stage = stage
        self.exc = exc


@dataclass
class Run:
    cfg: dict
    out: Path
    report: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        except StageError:
            raise
        except Exception as exc:  # every failure is reported with its stage
            raise StageError(name, exc) from exc
        finally:
            self.timings[name] = time.perf_counter() - t0

    def check(self, name: str, ok: bool) -> None:
        self.checks[name] = bool(ok)


# ------------------------------------------------------------------ parsing


def _floats(text: str) -> list[float]:
    try:
        vals = [float(v) for v in str(text).replace(",", " ").split()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a list of numbers: {text!r}") from exc
    if not vals:
        raise argparse.ArgumentTypeError("empty grid")
    return vals


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conheat", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("manifold")
    g.add_argument("--manifold", choices=sorted(GENERATORS))
    g.add_argument("--resolution", type=int, help="points per circle, or sphere subdivision level")
    g.add_argument("--file", help="input point cloud or mesh")
    g.add_argument("--format", choices=["csv_points", "off_mesh"])
    g.add_argument("--dim", type=int, help="intrinsic dimension of a csv point cloud")
    g.add_argument("--k", type=int, help="neighbors per vertex in the graph")
    g.add_argument("--bandwidth", type=float)
    p = common.add_argument_group("pipeline")
    p.add_argument("--m", type=int, help="eigenpairs to compute / truncation order")
    p.add_argument("--t", type=float)
    p.add_argument("--t-grid", dest="t_grid", type=_floats)
    p.add_argument("--delta", type=float)
    p.add_argument("--delta-grid", dest="delta_grid", type=_floats)
    p.add_argument("--variant", choices=["weighted", "uniform"])
    p.add_argument("--A", type=float, help="per-copy mass for the uniform variant")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--r", type=float, help="chart scale")
    p.add_argument("--chart-radius", dest="chart_radius", type=float)
    p.add_argument("--spectrum-dir", dest="spectrum_dir", help="reuse spectra written by 'spectrum'")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="JSON file with the same keys; flags take precedence")
    for name, hlp in (("spectrum", "compute and write spectra"),
                      ("embed", "heat-kernel embedding with isometry checks"),
                      ("diagnose", "kernel bounds, trace domination, tail energy"),
                      ("chart", "chart comparison with Gaussian models")):
        sub.add_parser(name, parents=[common], help=hlp)
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise InputError(f"no such config file: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise InputError(f"config is not valid JSON: {exc}") from exc
        for key, val in data.items():
            key = key.lstrip("-").replace("-", "_")
            if key not in DEFAULTS:
                raise InputError(f"unknown config key {key!r}")
            cfg[key] = val
    for key in DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    for key in ("t_grid", "delta_grid"):
        if cfg[key] is not None and not isinstance(cfg[key], list):
            cfg[key] = _floats(cfg[key])
    _validate(cfg)
    cfg["command"] = args.command
    return cfg


def _validate(cfg: dict) -> None:
    if (cfg["manifold"] is None) == (cfg["file"] is None):
        raise InputError("give exactly one of --manifold or --file")
    if cfg["file"] is not None and cfg["format"] is None:
        raise InputError("--file needs --format")
    for key in ("k", "m", "resolution", "dim"):
        if cfg[key] is not None and int(cfg[key]) <= 0:
            raise InputError(f"{key} must be positive")
    for key in ("bandwidth", "t", "delta", "A", "epsilon", "r", "chart_radius"):
        if cfg[key] is not None and not float(cfg[key]) > 0:
            raise InputError(f"{key} must be positive")
    for key in ("t_grid", "delta_grid"):
        if cfg[key] is not None and (not cfg[key] or any(not v > 0 for v in cfg[key])):
            raise InputError(f"{key} must be a non-empty list of positive numbers")
    if cfg["variant"] not in ("weighted", "uniform"):
        raise InputError("variant must be weighted or uniform")


def _times(cfg: dict) -> list[float]:
    if cfg["t_grid"]:
        return list(cfg["t_grid"])
    return [cfg["t"]] if cfg["t"] is not None else []


def _deltas(cfg: dict) -> list[float]:
    if cfg["delta_grid"]:
        return list(cfg["delta_grid"])
    return [cfg["delta"]] if cfg["delta"] is not None else []


# ------------------------------------------------------------------ stages


def _ingest(run: Run):
    cfg = run.cfg
    with run.stage("ingest"):
        if cfg["manifold"] is not None:
            M = generate_manifold(cfg["manifold"], cfg["resolution"], k=cfg["k"])
        else:
            M = load_manifold(cfg["file"], cfg["format"], k=cfg["k"], intrinsic_dim=cfg["dim"])
        frames = estimate_frames(M)
    run.report["manifold"] = {"label": M.label, "N": M.n_vertices, "intrinsic_dim": M.intrinsic_dim,
                              "ambient_dim": M.ambient_dim, "total_measure": M.total_weight,
                              "frame_orthonormality_error": frames.orthonormality_error()}
    return M, frames


def _spectra(run: Run, M, frames, t_min: float | None, tol: float = KERNEL_TOL
             ) -> tuple[Spectrum, Spectrum]:
    cfg = run.cfg
    if cfg["spectrum_dir"]:
        with run.stage("spectrum"):
            d = Path(cfg["spectrum_dir"])
            conn = read_spectrum(d / "spectrum_connection")
            scal = read_spectrum(d / "spectrum_scalar")
        return conn, scal
    with run.stage("spectrum"):
        Lc, Ls = build_laplacians(M, frames, cfg["bandwidth"])
        if cfg["m"] is not None:
            conn = eigendecompose(Lc, min(cfg["m"], Lc.size), seed=cfg["seed"])
            scal = eigendecompose(Ls, min(max(1, cfg["m"] // frames.n), Ls.size),
                                  seed=cfg["seed"])
        elif t_min is not None:
            cut = -math.log(tol) * 1.0001 / t_min
            conn = eigendecompose(Lc, max_eigenvalue=cut, seed=cfg["seed"])
            scal = eigendecompose(Ls, max_eigenvalue=cut, seed=cfg["seed"])
        else:
            conn = eigendecompose(Lc, min(100, Lc.size), seed=cfg["seed"])
            scal = eigendecompose(Ls, min(50, Ls.size), seed=cfg["seed"])
    return conn, scal


def _spectrum_summary(spec: Spectrum) -> dict:
    return {"m": spec.m, "operator_size": spec.operator_size, "bandwidth": spec.bandwidth,
            "calibration": spec.calibration, "spectral_map": spec.spectral_map,
            "max_residual": None if spec.residuals is None else float(spec.residuals.max(initial=0.0)),
            "eigenvalues_head": spec.eigenvalues[:20].tolist()}


def lowest_cluster(eigenvalues, rel: float = 0.05, floor: float = 1e-6) -> dict:
    """First nonzero eigenvalue cluster: value and multiplicity."""
    lam = np.asarray(eigenvalues)
    nz = lam[lam > floor * max(1.0, float(lam.max(initial=0.0)))]
    if nz.size == 0:
        return {"value": None, "multiplicity": 0}
    first = nz[0]
    members = nz[np.abs(nz - first) <= rel * first]
    return {"value": float(members.mean()), "multiplicity": int(members.size)}


def cmd_spectrum(run: Run) -> None:
    M, frames = _ingest(run)
    ts = _times(run.cfg)
    conn, scal = _spectra(run, M, frames, min(ts) if ts else None)
    with run.stage("write"):
        write_spectrum(conn, run.out / "spectrum_connection")
        write_spectrum(scal, run.out / "spectrum_scalar")
        write_rows(run.out / "eigenvalue_staircase.csv", ["index", "connection", "scalar"],
                   [(i, conn.eigenvalues[i], scal.eigenvalues[i] if i < scal.m else "")
                    for i in range(conn.m)])
    run.report["spectrum"] = {"connection": _spectrum_summary(conn), "scalar": _spectrum_summary(scal),
                              "lowest_cluster": lowest_cluster(conn.eigenvalues)}
    for name, spec in (("connection", conn), ("scalar", scal)):
        res = spec.residuals
        run.check(f"residuals_{name}", res is None or bool(np.all(res < 1e-6 * np.maximum(1, spec.raw_eigenvalues))))


def cmd_embed(run: Run) -> None:
    cfg = run.cfg
    ts, deltas = _times(cfg), _deltas(cfg)
    if not ts or not deltas:
        raise StageError("config", InputError("embed needs --t/--t-grid and --delta/--delta-grid"))
    if cfg["variant"] == "uniform" and cfg["A"] is None:
        raise StageError("config", InputError("the uniform variant needs --A"))
    M, frames = _ingest(run)
    conn, _ = _spectra(run, M, frames, min(ts))
    with run.stage("embed"):
        stencil = TangentStencil.build(M, frames)
        Ve = compute_Ve(M.intrinsic_dim)
        eps = cfg["epsilon"]
        if len(ts) == 1 and len(deltas) == 1:
            t, delta = ts[0], deltas[0]
            net = farthest_point_net(M, delta)
            part = voronoi_partition(M, net)
            if cfg["variant"] == "uniform":
                cloud = embed_uniform(M, conn, part, t, cfg["A"], cfg["m"], Ve)
            else:
                cloud = embed_weighted(M, conn, part, t, cfg["m"], Ve)
            dil = estimate_dilatation(M, frames, cloud, stencil)
            iso = verify_almost_isometry(dil, eps)
            inj = verify_injectivity(M, cloud, 2 * delta)
            cloud.write_csv(run.out / "embedding.csv")
            part.write_json(run.out / "partition.json")
            write_json({**dil.to_dict(), "injectivity_min_ratio": inj.min_ratio}, run.out / "dilatation.json")
            cell = {"t": t, "delta": delta, "n_columns": cloud.n_columns, "n_centers": net.size,
                    "covering_radius": net.covering_radius, "epsilon_achieved": dil.epsilon_achieved,
                    "epsilon_unsquared": dil.epsilon_unsquared, "dil_min": dil.min, "dil_max": dil.max,
                    "isometry": iso.to_dict(), "injectivity": inj.to_dict(), "m_used": cloud.m_used,
                    "min_ratio": inj.min_ratio, "passed": iso.passed and inj.passed,
                    "Ve": Ve, "prefactor": cloud.prefactor}
            if cfg["variant"] == "uniform":
                cell["replication_total"] = int(replication_counts(part.masses, cfg["A"]).sum())
            run.report["embed"] = {"variant": cfg["variant"], "cells": [cell]}
            run.check("almost_isometry", iso.passed)
            run.check("injectivity", inj.passed)
        else:
            scan = scan_parameters(M, frames, conn, ts, deltas, cfg["m"], eps, variant=cfg["variant"],
                                   A=cfg["A"], stencil=stencil)
            run.report["embed"] = {"variant": cfg["variant"], **scan.to_dict()}
            write_rows(run.out / "scan.csv", ["t", "delta", "n_columns", "epsilon_achieved", "min_ratio", "pass"],
                       [(c.t, c.delta, c.n_columns, c.epsilon_achieved, c.min_ratio, int(c.passed))
                        for c in scan.cells])
            run.check("scan_has_passing_cell", scan.passed)


def cmd_diagnose(run: Run) -> None:
    cfg = run.cfg
    M, frames = _ingest(run)
    # by default the kernel width spans a couple of sample spacings
    E = M.edges.tocsr()
    spacing = float(np.median(np.minimum.reduceat(E.data, E.indptr[:-1])))
    ts = _times(cfg) or [max(0.01, (2 * spacing) ** 2)]
    conn, scal = _spectra(run, M, frames, min(ts), TRACE_TOL)
    with run.stage("diagnose"):
        if conn.m == 0 or scal.m == 0:
            raise ConheatError("empty spectrum")
        rng = np.random.default_rng(cfg["seed"])
        pairs = rng.integers(0, M.n_vertices, size=(400, 2))
        stencil = TangentStencil.build(M, frames)
        out = {"lowest_cluster": lowest_cluster(conn.eigenvalues), "t_values": ts, "times": []}
        rows = []
        for t in ts:
            entry = {"t": t}
            gb = gaussian_bound_check(M, conn, scal, t, pairs, cfg["m"])
            entry["gaussian_bound"] = gb.to_dict()
            run.check(f"gaussian_bound_t{t:g}", gb.passed)
            rows += [(t, d, math.log(h) if h > 0 else "") for d, h in zip(gb.distances, gb.hs_norms)]
            try:
                td = trace_domination_check(conn, scal, t)
                entry["trace_domination"] = td.to_dict()
                run.check(f"trace_domination_t{t:g}", td.passed)
            except ConheatError as exc:
                # a too-short spectrum fails this check but not the other diagnostics
                entry["trace_domination"] = {"error": str(exc)}
                run.check(f"trace_domination_t{t:g}", False)
            radius = 6 * math.sqrt(t)
            sources = np.linspace(0, M.n_vertices - 1, min(16, M.n_vertices)).astype(int)
            entry["tail_energy"] = {"radius": radius,
                                    "value": tail_energy(M, conn, stencil, t, radius, sources, cfg["m"])}
            out["times"].append(entry)
        write_rows(run.out / "distance_vs_log_kernel.csv", ["t", "distance", "log_hs_norm"], rows)
        write_rows(run.out / "eigenvalue_staircase.csv", ["index", "connection"],
                   [(i, conn.eigenvalues[i]) for i in range(conn.m)])
        if cfg["r"] is not None:
            ch = build_chart(M, frames, 0, cfg["r"], cfg["chart_radius"] or 2 * cfg["r"], stencil=stencil)
            out["chart"] = compare_kernels(conn, ch).to_dict()
        run.report["diagnose"] = out


def cmd_chart(run: Run) -> None:
    cfg = run.cfg
    if cfg["r"] is None:
        raise StageError("config", InputError("chart needs --r"))
    r = cfg["r"]
    radius = cfg["chart_radius"] or 2 * r
    M, frames = _ingest(run)
    conn, _ = _spectra(run, M, frames, 0.25 * r * r)
    with run.stage("chart"):
        ch = build_chart(M, frames, 0, r, radius)
        cmp = compare_kernels(conn, ch)
        cmp.write_json(run.out / "chart_comparison.json")
        write_rows(run.out / "chart_samples.csv", ["x0", "x1", "s", "kbar00", "euclid", "z"],
                   [(s["x"][0], s["x"][1] if len(s["x"]) > 1 else 0.0, s["s"], s["kbar"][0][0],
                     s["euclid"], s["z"]) for s in cmp.samples])
        centre = np.abs(ch.metric[0] - np.eye(ch.n)).max()
        run.report["chart"] = {**cmp.to_dict(with_samples=False), "center_metric_error": float(centre),
                               "stress": ch.stress, "members": int(ch.members.size)}
        run.check("center_metric_identity", centre <= 1e-3)


COMMANDS = {"spectrum": cmd_spectrum, "embed": cmd_embed, "diagnose": cmd_diagnose, "chart": cmd_chart}


def _exit_code(exc: Exception) -> int:
    return EXIT_INPUT if isinstance(exc, InputError) else EXIT_STAGE


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    out = Path(args.out or DEFAULTS["out"])
    try:
        cfg = resolve_config(args)
        out = Path(cfg["out"])
    except InputError as exc:
        out.mkdir(parents=True, exist_ok=True)
        write_json({"command": args.command, "error": {"stage": "config", "message": str(exc)},
                    "pass": False}, out / "report.json")
        print(f"conheat: config: {exc}", file=sys.stderr)
        return EXIT_INPUT
    out.mkdir(parents=True, exist_ok=True)
    run = Run(cfg, out)
    code = EXIT_OK
    error = None
    try:
        COMMANDS[cfg["command"]](run)
        if not all(run.checks.values()):
            code = EXIT_CHECK
    except StageError as exc:
        inner = exc.exc
        # input problems are labelled with the stage that found them
        code = _exit_code(inner)
        error = {"stage": exc.stage, "type": type(inner).__name__, "message": str(inner)}
        print(f"conheat: {exc.stage}: {inner}", file=sys.stderr)
    report = {"command": cfg["command"], "config": {k: v for k, v in cfg.items() if k != "command"},
              **run.report, "checks": run.checks, "error": error,
              "pass": code == EXIT_OK, "timings": run.timings}
    write_json(report, out / "report.json")
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
