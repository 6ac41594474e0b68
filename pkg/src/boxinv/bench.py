"""Benchmark harness: synthetic truth/data, noise, metrics, experiment runs.

Synthetic data are generated on a grid twice as fine as the inversion grid
to avoid an inverse crime.  Reconstruction quality is measured by the L1
error and by averaged errors on small squares at three designated spots
(inside each homogeneous region and on the interface).
"""

from __future__ import annotations

import csv
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from shapely.geometry import Polygon, box as shapely_box

from . import fem2d, gn, linalg
from .errors import InvalidTest
from .fem2d import build_mesh
from .gn import GNConfig, GNIterate, InverseProblem, gauss_newton_solve

SPOTS = ((0.5, 0.5), (-0.4, -0.3), (-0.4, -0.5))

DELTAS = (0.001, 0.01, 0.1)

_TEST_BOUNDS = {1: (1.0, 11.0), 2: (-9.0, 6.0), 3: (-10.0, 0.0)}

# target proximal shifts; the potential problem has the largest flat
# subspace (2N^2 parameters vs ~N^2 states) and profits from a tighter one
_KIND_EPS = {"source": 1e-8, "potential": 1e-9, "diffusion": 1e-8}

# cold-start continuation ladders (multiples of the target shift).  Source
# and potential profit from solving strongly shifted problems first; the
# diffusion Hessians are better behaved at the target shift and the extra
# ladder stages only add cost there.
_KIND_LADDER = {"source": None, "potential": None, "diffusion": (1.0,)}


@dataclass
class ExperimentConfig:
    kind: str = "potential"
    test_id: int = 1
    N: int = 32
    delta: float = 0.001
    tau: float = 1.1
    alpha: float | None = None     # None -> 1e-4*delta for diffusion, else 0
    seed: int = 0
    runs: int = 1
    start_mode: str = "warm"
    solver: str = "feasible_as"
    qp_mode: str = "dense"
    out: str | None = None
    max_k: int = 20
    cost_tol: float = 1e-8
    eps_rel: float | None = None   # None -> per-problem default

    def __post_init__(self):
        if self.kind not in gn.KINDS:
            raise InvalidTest(f"unknown problem kind {self.kind!r}")
        if self.test_id not in (1, 2, 3):
            raise InvalidTest(f"test_id must be 1, 2 or 3, got {self.test_id}")
        if self.test_id != 1 and self.kind != "potential":
            raise InvalidTest("tests 2 and 3 are defined for the potential problem only")

    def effective_alpha(self):
        if self.alpha is not None:
            return self.alpha
        return 1e-4 * self.delta if self.kind == "diffusion" else 0.0


@dataclass
class Metrics:
    err_spot1: float
    err_spot2: float
    err_spot3: float
    err_L1: float
    rel_residual: float
    k: int
    wall_time: float
    total_kkt_solves: int
    avg_system_size: float

    def as_dict(self):
        return dict(self.__dict__)


def make_truth(test_id: int, mesh, kind: str = "potential"):
    """Exact coefficient (P1 for source, P0 otherwise), exact state, bounds."""
    if test_id not in _TEST_BOUNDS:
        raise InvalidTest(f"unknown test {test_id}")
    if test_id != 1 and kind != "potential":
        raise InvalidTest("tests 2 and 3 require kind='potential'")
    target = "P1" if kind == "source" else "P0"
    coef = fem2d.sample_coefficient(f"test{test_id}", mesh, target)
    phi_ex = fem2d.sample_coefficient("exact_state", mesh, "P1")
    lo, up = _TEST_BOUNDS[test_id]
    n = coef.shape[0]
    return coef, phi_ex, np.full(n, lo), np.full(n, up)


def synthesize_data(config: ExperimentConfig, mesh):
    """Noise-free data y on the inversion mesh plus the coarse load vector.

    All forward computations happen on a mesh with twice the resolution; the
    fine load functional is carried to the coarse grid by the transpose of
    nodal interpolation.
    """
    fine = build_mesh(2 * config.N)
    k_fine = fem2d.assemble_stiffness(fine)
    fr_f = fine.free_nodes

    if config.kind == "source":
        b_fine = fem2d.sample_coefficient(f"test{config.test_id}", fine, "P1")
        m_fine = fem2d.assemble_mass_p1(fine)
        k_ff = fem2d.restrict_to_free(k_fine, fine)
        rhs = (m_fine @ b_fine)[fr_f]
        phi_f = linalg.solve(linalg.factorize(k_ff), rhs)
        phi_fine = fem2d.prolong_free(phi_f, fine)
        y = fem2d.restrict_nodal(phi_fine, fine, mesh)
        return y, np.zeros(mesh.n_free)

    phi_fine = fem2d.sample_coefficient("exact_state", fine, "P1")
    phi_fine = phi_fine * (~fine.dirichlet)  # exact state vanishes at x=+-1
    coef_fine = fem2d.sample_coefficient(f"test{config.test_id}", fine, "P0")
    if config.kind == "potential":
        mc = fem2d.assemble_weighted_mass(fine, coef_fine)
        g_fine = (k_fine @ phi_fine + mc @ phi_fine)[fr_f]
    else:
        ka = fem2d.assemble_stiffness(fine, coef_fine)
        g_fine = (ka @ phi_fine)[fr_f]
    p = fem2d.prolongation_matrix(fine, mesh)
    p_ff = p[fr_f][:, mesh.free_nodes]
    g_coarse = p_ff.T @ g_fine
    y = fem2d.sample_coefficient("exact_state", mesh, "P1")
    y = y * (~mesh.dirichlet)
    return y, g_coarse


def add_noise(y, delta, seed):
    """Componentwise uniform noise on [-delta, delta], seeded."""
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    if delta == 0:
        return np.asarray(y, dtype=float).copy()
    rng = np.random.default_rng(seed)
    return np.asarray(y, dtype=float) + rng.uniform(-delta, delta, size=len(y))


def _spot_square(spot, N):
    h = 0.5 / N
    return shapely_box(spot[0] - h, spot[1] - h, spot[0] + h, spot[1] + h)


def spot_error(diff_p0, mesh, spot):
    """Area-weighted mean of a P0 field over the (1/N)^2 square at a spot."""
    square = _spot_square(spot, mesh.N)
    minx, miny, maxx, maxy = square.bounds
    verts = mesh.nodes[mesh.triangles]
    bb_ok = (
        (verts[:, :, 0].min(axis=1) <= maxx)
        & (verts[:, :, 0].max(axis=1) >= minx)
        & (verts[:, :, 1].min(axis=1) <= maxy)
        & (verts[:, :, 1].max(axis=1) >= miny)
    )
    total = 0.0
    acc = 0.0
    for t in np.flatnonzero(bb_ok):
        tri = Polygon(verts[t])
        w = tri.intersection(square).area
        if w > 0:
            total += w
            acc += w * diff_p0[t]
    return abs(acc / total) if total > 0 else 0.0


def _as_p0(field_values, mesh):
    if field_values.shape[0] == mesh.n_triangles:
        return field_values
    # P1 field: value of the linear interpolant at each centroid
    return field_values[mesh.triangles].mean(axis=1)


def compute_metrics(p_rec, truth_descriptor, report, mesh,
                    wall_time=None) -> Metrics:
    """Spot errors, L1 error, and solver counters for one reconstruction.

    The truth is sampled in the reconstruction's own space (nodes for a
    nodal parameter, centroids for a cellwise one), so a pointwise-exact
    reconstruction scores exactly zero.
    """
    p_rec = np.asarray(p_rec, dtype=float)
    if p_rec.shape[0] == mesh.n_nodes:
        diff_nodal = p_rec - fem2d.sample_coefficient(
            truth_descriptor, mesh, "P1")
        diff = diff_nodal[mesh.triangles].mean(axis=1)
        err_l1 = float(np.sum(
            mesh.areas * np.abs(diff_nodal)[mesh.triangles].mean(axis=1)))
    else:
        truth_p0 = fem2d.sample_coefficient(truth_descriptor, mesh, "P0")
        diff = p_rec - truth_p0
        err_l1 = float(np.sum(mesh.areas * np.abs(diff)))
    spots = [spot_error(diff, mesh, s) for s in SPOTS]
    return Metrics(
        err_spot1=spots[0],
        err_spot2=spots[1],
        err_spot3=spots[2],
        err_L1=err_l1,
        rel_residual=report.cost_ratio(),
        k=report.iterations,
        wall_time=report.wall_time if wall_time is None else wall_time,
        total_kkt_solves=report.total_kkt_solves(),
        avg_system_size=report.avg_system_size(),
    )


def build_problem(config: ExperimentConfig, mesh=None):
    """Truth, data and InverseProblem for one configuration."""
    if mesh is None:
        mesh = build_mesh(config.N)
    truth, _, lower_p, upper_p = make_truth(config.test_id, mesh, config.kind)
    y, g = synthesize_data(config, mesh)
    y_delta = add_noise(y, config.delta, config.seed)
    eps_rel = (config.eps_rel if config.eps_rel is not None
               else _KIND_EPS[config.kind])
    problem = InverseProblem(
        kind=config.kind, mesh=mesh, y_delta=y_delta, delta=config.delta,
        tau=config.tau, lower_p=lower_p, upper_p=upper_p, g=g,
        alpha=config.effective_alpha(), eps_rel=eps_rel,
        qp_mode=config.qp_mode, cold_ladder=_KIND_LADDER[config.kind],
    )
    return problem, truth


def initial_iterate(problem: InverseProblem, p0_value=None) -> GNIterate:
    """Constant parameter start (bound midpoint by default), phi_0 = noisy data."""
    if p0_value is None:
        p0 = 0.5 * (problem.lower_p + problem.upper_p)
    else:
        p0 = np.full(problem.n_param, float(p0_value))
    phi0 = problem.y_delta.copy()
    phi0[problem.mesh.dirichlet] = 0.0
    return GNIterate(param=p0, phi=phi0)


def run_experiment(config: ExperimentConfig, mesh=None):
    """End-to-end run: truth -> data -> noise -> Gauss-Newton -> metrics."""
    t0 = time.perf_counter()
    if mesh is None:
        mesh = build_mesh(config.N)
    problem, truth = build_problem(config, mesh)
    gn_config = GNConfig(max_k=config.max_k, cost_tol=config.cost_tol,
                         start_mode=config.start_mode,
                         qp_solver=config.solver)
    p0_value = 5.5 if config.test_id == 1 else None
    iterate, report = gauss_newton_solve(
        problem, initial_iterate(problem, p0_value), gn_config)
    metrics = compute_metrics(iterate.param, f"test{config.test_id}", report,
                              mesh, wall_time=time.perf_counter() - t0)
    if config.out:
        _write_artifacts(config, mesh, iterate, report, metrics)
    return metrics, iterate, report


def _write_artifacts(config, mesh, iterate, report, metrics):
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    tag = f"{config.kind}_t{config.test_id}_N{config.N}_d{config.delta}_s{config.seed}"
    fem2d.dump_field(iterate.param, mesh, out / f"{tag}_reconstruction.txt")
    n_p = iterate.param.shape[0]
    for k, (p_k, low, up) in enumerate(
            zip(report.param_history, report.active_lower_history,
                report.active_upper_history), start=1):
        fem2d.dump_field(p_k, mesh, out / f"{tag}_iter{k:02d}_param.txt")
        mask_low = np.zeros(n_p)
        mask_low[low] = 1.0
        mask_up = np.zeros(n_p)
        mask_up[up] = 1.0
        fem2d.dump_field(mask_low, mesh, out / f"{tag}_iter{k:02d}_active_lower.txt")
        fem2d.dump_field(mask_up, mesh, out / f"{tag}_iter{k:02d}_active_upper.txt")
    with open(out / f"{tag}_metrics.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(metrics.as_dict()))
        w.writeheader()
        w.writerow(metrics.as_dict())


def _run_one(config):
    return run_experiment(config)[0]


def _max_workers():
    try:
        return max(1, int(os.environ.get("BOXINV_THREADS", "1")))
    except ValueError:
        return 1


def run_delta_sweep(base: ExperimentConfig, deltas=DELTAS, kinds=gn.KINDS,
                    out_csv=None):
    """Average metrics over `runs` seeds for each (kind, delta) cell."""
    configs = []
    for kind in kinds:
        for delta in deltas:
            for run in range(base.runs):
                configs.append(replace(base, kind=kind, delta=delta,
                                       seed=base.seed + run, alpha=None,
                                       out=None))
    workers = _max_workers()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, configs))
    else:
        results = [_run_one(c) for c in configs]

    rows = []
    i = 0
    for kind in kinds:
        for delta in deltas:
            chunk = results[i:i + base.runs]
            i += base.runs
            row = {"kind": kind, "delta": delta}
            for name in ("err_spot1", "err_spot2", "err_spot3", "err_L1",
                         "rel_residual", "k", "wall_time"):
                row[name] = float(np.mean([getattr(m, name) for m in chunk]))
            rows.append(row)
    if out_csv:
        with open(out_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return rows


def run_warmcold(config: ExperimentConfig):
    """Warm vs cold start on the same seed; per-iteration solver counters."""
    if config.kind != "potential":
        raise InvalidTest("warm/cold comparison is defined for the potential problem")
    out = {}
    for mode in ("warm", "cold"):
        metrics, _, report = run_experiment(replace(config, start_mode=mode,
                                                    out=None))
        out[mode] = {
            "metrics": metrics,
            "kkt_per_iteration": [r.kkt_solves for r in report.qp_reports],
            "avg_size_per_iteration": [
                float(np.mean(r.system_sizes)) if r.system_sizes else 0.0
                for r in report.qp_reports
            ],
            "total_kkt_solves": report.total_kkt_solves(),
        }
    return out
