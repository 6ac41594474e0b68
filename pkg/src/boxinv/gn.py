"""Inverse-problem definitions and the Gauss-Newton SQP driver.

Three coefficient-identification problems on the square are supported:

  source     -Laplace(phi) = b          (parameter b, nodal P1)
  potential  -Laplace(phi) + c*phi = f  (parameter c, cellwise P0)
  diffusion  -div(a*grad(phi)) = f      (parameter a, cellwise P0)

Each problem is posed all-at-once in (parameter, state) with the PDE
residual measured in the dual norm induced by the inverse plain stiffness
matrix, hard bounds on the parameter, and a data corridor of half-width
tau*delta around the noisy observations.  Every Gauss-Newton step is a
box-constrained QP solved by the feasible active-set method.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import fem2d, linalg, qp
from .linalg import DENSE_LIMIT, LinearOperator, SymMatrix
from .qp import ActivePair, BoxQP

KINDS = ("source", "potential", "diffusion")

MIN_CORRIDOR_HALFWIDTH = 5e-13   # keeps l < u strict when delta = 0


class InverseProblem:
    """Problem data plus the mesh-dependent matrices reused across GN steps."""

    def __init__(self, kind, mesh, y_delta, delta, tau, lower_p, upper_p,
                 g=None, alpha=0.0, eps_rel=1e-8, qp_mode="dense",
                 cold_ladder=None):
        if kind not in KINDS:
            raise ValueError(f"unknown kind {kind!r}")
        self.kind = kind
        self.mesh = mesh
        self.y_delta = np.asarray(y_delta, dtype=float)
        self.delta = float(delta)
        self.tau = float(tau)
        if self.delta > 0 and self.tau <= 1.0:
            raise ValueError("safety factor tau must exceed 1")
        self.lower_p = np.asarray(lower_p, dtype=float)
        self.upper_p = np.asarray(upper_p, dtype=float)
        self.alpha = float(alpha)
        self.eps_rel = float(eps_rel)
        self.qp_mode = qp_mode
        self.cold_ladder = cold_ladder   # None -> COLD_LADDER

        self.n_param = (mesh.n_nodes if kind == "source"
                        else mesh.n_triangles)
        if self.lower_p.shape[0] != self.n_param:
            raise ValueError("parameter bounds have wrong length")

        self.K = fem2d.assemble_stiffness(mesh)
        self.M = fem2d.assemble_mass_p1(mesh)
        self.g = (np.zeros(mesh.n_free) if g is None
                  else np.asarray(g, dtype=float))

        k_ff = fem2d.restrict_to_free(self.K, mesh)
        if qp_mode == "dense":
            if mesh.n_free > DENSE_LIMIT:
                raise ValueError("dense mode limited to n_free <= 4000")
            k_ff = SymMatrix(k_ff.to_dense(), check_symmetry=False)
        self.K_ff = k_ff
        self.kfact = linalg.factorize(k_ff)
        self.S = None
        if kind == "diffusion":
            self.S = reg_matrix(mesh)

    @property
    def n_qp(self):
        return self.n_param + self.mesh.n_free

    def corridor(self):
        h = max(self.tau * self.delta, MIN_CORRIDOR_HALFWIDTH)
        yf = self.y_delta[self.mesh.free_nodes]
        return yf - h, yf + h


@dataclass
class GNIterate:
    param: np.ndarray
    phi: np.ndarray      # full nodal field, zero on Dirichlet nodes


@dataclass
class GNReport:
    iterations: int = 0
    cost_values: list = field(default_factory=list)
    qp_reports: list = field(default_factory=list)
    stop_reason: str = ""
    param_history: list = field(default_factory=list)
    active_lower_history: list = field(default_factory=list)
    active_upper_history: list = field(default_factory=list)
    wall_time: float = 0.0

    def cost_ratio(self):
        if len(self.cost_values) < 2:
            return 1.0
        return self.cost_values[-1] / self.cost_values[0]

    def total_kkt_solves(self):
        return sum(r.kkt_solves for r in self.qp_reports)

    def avg_system_size(self):
        sizes = [s for r in self.qp_reports for s in r.system_sizes]
        return float(np.mean(sizes)) if sizes else 0.0


def reg_matrix(mesh) -> SymMatrix:
    """Discrete H1 inner product on free nodes (state-block regularizer)."""
    k = fem2d.restrict_to_free(fem2d.assemble_stiffness(mesh), mesh)
    m = fem2d.restrict_to_free(fem2d.assemble_mass_p1(mesh), mesh)
    return SymMatrix(k.raw + m.raw, check_symmetry=False)


def _residual_free(problem: InverseProblem, param, phi):
    mesh = problem.mesh
    fr = mesh.free_nodes
    if problem.kind == "source":
        return (problem.K @ phi)[fr] - (problem.M @ param)[fr] - problem.g
    if problem.kind == "potential":
        mc = fem2d.assemble_weighted_mass(mesh, param)
        return (problem.K @ phi)[fr] + (mc @ phi)[fr] - problem.g
    ka = fem2d.assemble_stiffness(mesh, param)
    return (ka @ phi)[fr] - problem.g


def cost_eval(problem: InverseProblem, iterate: GNIterate) -> float:
    """Half the squared dual-norm PDE residual at the iterate."""
    r = _residual_free(problem, iterate.param, iterate.phi)
    return 0.5 * fem2d.vstar_norm_sq(r, problem.kfact)


def regularized_cost(problem: InverseProblem, iterate: GNIterate) -> float:
    """cost_eval plus the alpha/2 state-regularization term (diffusion)."""
    j = cost_eval(problem, iterate)
    if problem.S is not None and problem.alpha > 0:
        phi_f = iterate.phi[problem.mesh.free_nodes]
        j += 0.5 * problem.alpha * phi_f @ (problem.S @ phi_f)
    return j


def _residual_blocks(problem: InverseProblem, iterate: GNIterate):
    """Sparse blocks (R_param, R_state, s) of the linearized residual map.

    The residual of the linearized model equation is
    r(p, phi) = R_param p + R_state phi_free - s   on the free nodes.
    """
    mesh = problem.mesh
    fr = mesh.free_nodes
    if problem.kind == "source":
        r_param = -problem.M.raw[fr, :]
        r_state = problem.K.raw[fr][:, fr]
        s = problem.g.copy()
    elif problem.kind == "potential":
        mck = fem2d.assemble_weighted_mass(mesh, iterate.param)
        coupling = fem2d.assemble_cell_coupling_mass(mesh, iterate.phi)[fr, :]
        r_param = coupling
        r_state = (problem.K.raw + mck.raw)[fr][:, fr]
        s = coupling @ iterate.param + problem.g
    else:
        kak = fem2d.assemble_stiffness(mesh, iterate.param)
        coupling = fem2d.assemble_cell_coupling_stiffness(mesh, iterate.phi)[fr, :]
        r_param = coupling
        r_state = kak.raw[fr][:, fr]
        s = coupling @ iterate.param + problem.g
    return sp.csr_matrix(r_param), sp.csr_matrix(r_state), s


def assemble_gn_qp(problem: InverseProblem, iterate: GNIterate):
    """Build the Gauss-Newton step QP in z = (parameter, free states).

    Q = R' K^{-1} R (+ alpha*S on the state block) + proximal shift,
    q = -R' K^{-1} s; constant objective terms are dropped.  Bounds are the
    parameter box and the data corridor.
    """
    n_p = problem.n_param
    n_f = problem.mesh.n_free
    r_param, r_state, s = _residual_blocks(problem, iterate)
    r_full = sp.hstack([r_param, r_state]).tocsr()

    lo_c, up_c = problem.corridor()
    lower = np.concatenate([problem.lower_p, lo_c])
    upper = np.concatenate([problem.upper_p, up_c])

    kinv_s = linalg.solve(problem.kfact, s)
    q_lin = -(r_full.T @ kinv_s)

    if problem.qp_mode == "dense":
        rd = r_full.toarray()
        qmat = rd.T @ _dense_kinv(problem, rd)
        if problem.S is not None and problem.alpha > 0:
            qmat[n_p:, n_p:] += problem.alpha * problem.S.to_dense()
        qmat = 0.5 * (qmat + qmat.T)
        eps = problem.eps_rel * np.trace(qmat) / qmat.shape[0]
        qmat += eps * np.eye(qmat.shape[0])
        box = BoxQP(SymMatrix(qmat, check_symmetry=False), q_lin, lower, upper)
    else:
        s_sparse = problem.S.raw if problem.S is not None else None
        alpha = problem.alpha
        kfact = problem.kfact

        def mv_raw(z):
            out = r_full.T @ linalg.solve(kfact, r_full @ z)
            if s_sparse is not None and alpha > 0:
                out[n_p:] += alpha * (s_sparse @ z[n_p:])
            return out

        raw_op = LinearOperator(n_p + n_f, mv_raw)
        rng = np.random.default_rng(0)
        tr = np.mean([(v := rng.choice([-1.0, 1.0], n_p + n_f)) @ mv_raw(v)
                      for _ in range(8)])
        eps = problem.eps_rel * tr / (n_p + n_f)

        def mv(z):
            return mv_raw(z) + eps * z

        box = BoxQP(LinearOperator(n_p + n_f, mv), q_lin, lower, upper,
                    trace_hint=tr)
    meta = {"param_slice": slice(0, n_p), "state_slice": slice(n_p, n_p + n_f),
            "eps": eps}
    return box, meta


def _dense_kinv(problem, rd):
    # solve K_ff X = R columnwise in one LAPACK call
    import scipy.linalg as sla

    return sla.cho_solve(problem.kfact._dense, rd, check_finite=False)


def _pair_from_point(box: BoxQP, point) -> ActivePair:
    up = frozenset(int(i) for i in np.flatnonzero(point.x == box.upper))
    lo = frozenset(int(i) for i in np.flatnonzero(point.x == box.lower))
    return ActivePair(up, lo - up)


#: proximal-shift continuation for cold starts: the all-at-once Hessians are
#: rank deficient, and solving directly at the target shift makes the active
#: set method thrash (hundreds of nested solves).  Solving a strongly shifted
#: problem first and warm-starting each tighter one is an order of magnitude
#: cheaper and reaches the same final solution.
COLD_LADDER = (100.0, 10.0, 1.0)


def _solve_cold(problem: InverseProblem, iterate: GNIterate):
    base_eps = problem.eps_rel
    pair = ActivePair(frozenset(), frozenset(range(problem.n_qp)))
    report = qp.SolveReport()
    ladder = problem.cold_ladder if problem.cold_ladder is not None else COLD_LADDER
    try:
        for factor in ladder:
            problem.eps_rel = base_eps * factor
            box, meta = assemble_gn_qp(problem, iterate)
            point, report = qp.feasible_active_set(box, pair, report=report)
            pair = _pair_from_point(box, point)
    finally:
        problem.eps_rel = base_eps
    return box, meta, point, report


@dataclass
class GNConfig:
    max_k: int = 20
    cost_tol: float = 1e-8
    start_mode: str = "warm"
    qp_solver: str = "feasible_as"
    keep_history: bool = True


def gauss_newton_solve(problem: InverseProblem, start: GNIterate,
                       config: GNConfig | None = None):
    """Outer Gauss-Newton SQP loop; one step per assembled QP."""
    if config is None:
        config = GNConfig()
    t0 = time.perf_counter()
    report = GNReport()
    iterate = start
    j0 = cost_eval(problem, iterate)
    report.cost_values.append(j0)
    prev_pair = None
    n_p = problem.n_param

    max_k = 1 if problem.kind == "source" else config.max_k
    for k in range(1, max_k + 1):
        if config.qp_solver == "oracle":
            box, meta = assemble_gn_qp(problem, iterate)
            point = qp.enumerate_oracle(box)
            qrep = qp.SolveReport(final_objective=box.objective(point.x))
        elif config.start_mode == "warm" and prev_pair is not None:
            box, meta = assemble_gn_qp(problem, iterate)
            point, qrep = qp.feasible_active_set(box, prev_pair)
        else:
            box, meta, point, qrep = _solve_cold(problem, iterate)
        prev_pair = _pair_from_point(box, point)
        report.qp_reports.append(qrep)
        iterate = GNIterate(
            param=point.x[meta["param_slice"]].copy(),
            phi=fem2d.prolong_free(point.x[meta["state_slice"]], problem.mesh),
        )
        j = cost_eval(problem, iterate)
        report.cost_values.append(j)
        report.iterations = k
        if config.keep_history:
            report.param_history.append(iterate.param.copy())
            report.active_upper_history.append(
                np.array([i for i in sorted(prev_pair.upper) if i < n_p]))
            report.active_lower_history.append(
                np.array([i for i in sorted(prev_pair.lower) if i < n_p]))
        if problem.kind == "source":
            report.stop_reason = "single_step"
            break
        if abs(j - report.cost_values[-2]) <= config.cost_tol * (1.0 + j0):
            report.stop_reason = "converged"
            break
    else:
        report.stop_reason = "max_iterations"
    report.wall_time = time.perf_counter() - t0
    return iterate, report
