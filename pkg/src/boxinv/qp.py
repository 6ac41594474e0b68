"""Strictly convex box-constrained QP solver (primal feasible active-set method).

Minimizes J(x) = 1/2 x'Qx + q'x subject to l <= x <= u, with Q symmetric
positive definite and per-component bounds that may be infinite.  The solver
iterates on pairs of active sets (upper set A, lower set C), solving the
equality-constrained KKT system on the inactive block and repairing primal
infeasibility by augmenting the active sets.  Convergence is enforced by
strict objective decrease; when the feasibilization step fails to decrease
the objective, the method recurses on a subproblem with some bounds fixed
(or, for a single active constraint, removed).

A brute-force oracle (exhaustive enumeration of active-set assignments) is
provided for verification on small instances.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .errors import (
    IterationLimit,
    NotPositiveDefinite,
    SingularReducedSystem,
    TooLarge,
)
from .linalg import LinearOperator, SymMatrix

CG_TOL = 1e-11
ORACLE_MAX_N = 14
SAFETY_FACTOR = 50


class BoxQP:
    """Box-constrained QP data: J(x) = 1/2 x'Qx + q'x, l <= x <= u."""

    def __init__(self, Q, q, lower, upper, trace_hint=None):
        if isinstance(Q, np.ndarray):
            Q = SymMatrix(Q)
        self.Q = Q
        self.q = np.asarray(q, dtype=float)
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        self.n = self.q.shape[0]
        if not (Q.n == self.n == self.lower.shape[0] == self.upper.shape[0]):
            raise ValueError("inconsistent dimensions")
        if np.any(self.lower >= self.upper):
            raise ValueError("bounds must satisfy l < u componentwise")
        self._trace_hint = trace_hint
        self.operator_mode = isinstance(Q, LinearOperator)

    def objective(self, x):
        return 0.5 * x @ (self.Q @ x) + self.q @ x

    def gradient(self, x):
        return self.Q @ x + self.q

    def trace_estimate(self):
        if self._trace_hint is not None:
            return self._trace_hint
        if not self.operator_mode:
            return float(np.sum(self.Q.diagonal()))
        # Hutchinson probe; only used for the proximal shift scale
        rng = np.random.default_rng(0)
        s = 0.0
        for _ in range(8):
            z = rng.choice([-1.0, 1.0], size=self.n)
            s += z @ (self.Q @ z)
        return s / 8

    def primal_tol(self):
        lo = self.lower[np.isfinite(self.lower)]
        up = self.upper[np.isfinite(self.upper)]
        scale = (np.abs(up).max() if up.size else 0.0) + (
            np.abs(lo).max() if lo.size else 0.0
        )
        return 1e-12 * (1.0 + scale)

    def dual_tol(self):
        return 1e-9 * (1.0 + np.abs(self.q).max())

    def with_proximal_shift(self, eps_rel):
        """Return a copy with Q <- Q + eps*I, eps = eps_rel * trace(Q)/n."""
        eps = eps_rel * self.trace_estimate() / self.n
        if self.operator_mode:
            base = self.Q

            def mv(v, base=base, eps=eps):
                return base @ v + eps * v

            newq = LinearOperator(self.n, mv)
        else:
            newq = SymMatrix(
                self.Q.to_dense() + eps * np.eye(self.n), check_symmetry=False
            )
        return BoxQP(newq, self.q, self.lower, self.upper,
                     trace_hint=self.trace_estimate())


@dataclass(frozen=True)
class ActivePair:
    """Disjoint index sets: upper (fixed at u) and lower (fixed at l)."""

    upper: frozenset
    lower: frozenset

    def __post_init__(self):
        if self.upper & self.lower:
            raise ValueError("active sets must be disjoint")

    @staticmethod
    def empty():
        return ActivePair(frozenset(), frozenset())

    @staticmethod
    def of(upper=(), lower=()):
        return ActivePair(frozenset(upper), frozenset(lower))


@dataclass
class KKTPoint:
    x: np.ndarray
    alpha: np.ndarray  # multipliers for the upper bounds
    gamma: np.ndarray  # multipliers for the lower bounds


@dataclass
class SolveReport:
    outer_iterations: int = 0
    kkt_solves: int = 0
    system_sizes: list = field(default_factory=list)
    case2_count: int = 0
    case3_count: int = 0
    final_objective: float = np.nan
    accepted_objectives: list = field(default_factory=list)
    pair_log: list = field(default_factory=list)

    def avg_system_size(self):
        return float(np.mean(self.system_sizes)) if self.system_sizes else 0.0


def _sanitize_pair(qp, pair):
    """Drop indices whose corresponding bound is infinite."""
    up = frozenset(i for i in pair.upper if np.isfinite(qp.upper[i]))
    lo = frozenset(i for i in pair.lower if np.isfinite(qp.lower[i]))
    return ActivePair(up, lo)


def kkt_solve(qp: BoxQP, pair: ActivePair, report: SolveReport | None = None) -> KKTPoint:
    """Solve KKT(A, C): fix x on the active sets, solve the inactive block.

    Multipliers are recovered from stationarity Qx + q + alpha - gamma = 0.
    """
    n = qp.n
    a_idx = np.fromiter(sorted(pair.upper), dtype=int, count=len(pair.upper))
    c_idx = np.fromiter(sorted(pair.lower), dtype=int, count=len(pair.lower))
    fixed_mask = np.zeros(n, dtype=bool)
    fixed_mask[a_idx] = True
    fixed_mask[c_idx] = True
    i_idx = np.flatnonzero(~fixed_mask)

    x = np.zeros(n)
    x[a_idx] = qp.upper[a_idx]
    x[c_idx] = qp.lower[c_idx]

    if report is not None:
        report.kkt_solves += 1
        report.system_sizes.append(int(i_idx.size))

    if i_idx.size:
        rhs = -(qp.q[i_idx] + (qp.Q @ x)[i_idx])
        if qp.operator_mode:
            def reduced(v, i_idx=i_idx):
                w = np.zeros(n)
                w[i_idx] = v
                return (qp.Q @ w)[i_idx]

            op = LinearOperator(i_idx.size, reduced)
            x[i_idx] = linalg.cg_solve(op, rhs, tol=CG_TOL)
        else:
            sub = linalg.extract_principal_submatrix(qp.Q, i_idx)
            try:
                fact = linalg.factorize(sub)
            except NotPositiveDefinite as exc:
                raise SingularReducedSystem(str(exc)) from exc
            x[i_idx] = linalg.solve(fact, rhs)

    grad = qp.gradient(x)
    alpha = np.zeros(n)
    gamma = np.zeros(n)
    alpha[a_idx] = -grad[a_idx]
    gamma[c_idx] = grad[c_idx]
    return KKTPoint(x, alpha, gamma)


def is_primal_feasible(qp: BoxQP, point: KKTPoint, tol=None) -> bool:
    if tol is None:
        tol = qp.primal_tol()
    x = point.x
    return bool(np.all(x >= qp.lower - tol) and np.all(x <= qp.upper + tol))


def is_optimal(qp: BoxQP, point: KKTPoint, tol=None) -> bool:
    if tol is None:
        tol = qp.dual_tol()
    return (
        is_primal_feasible(qp, point)
        and bool(np.all(point.alpha >= -tol))
        and bool(np.all(point.gamma >= -tol))
    )


def make_primal_feasible(qp: BoxQP, pair: ActivePair,
                         report: SolveReport | None = None):
    """Augment (B, D) until the KKT solution is primal feasible.

    Indices violating a bound enter the corresponding active set; the sets
    only grow, so the loop takes at most n solves.
    """
    pair = _sanitize_pair(qp, pair)
    tol = qp.primal_tol()
    nsolves = 0
    for _ in range(qp.n + 1):
        point = kkt_solve(qp, pair, report)
        nsolves += 1
        y = point.x
        up_viol = frozenset(
            int(i) for i in np.flatnonzero(y > qp.upper + tol))
        lo_viol = frozenset(
            int(i) for i in np.flatnonzero(y < qp.lower - tol))
        if not up_viol and not lo_viol:
            return pair, point, nsolves
        pair = ActivePair(pair.upper | up_viol, pair.lower | lo_viol)
    raise IterationLimit("primal feasibilization did not terminate")


def fix_subproblem(qp: BoxQP, A0, C0):
    """Condense the QP onto the variables not fixed by A0 (upper) / C0 (lower).

    Returns (reduced BoxQP, free index array); constant objective terms are
    dropped.
    """
    A0 = frozenset(A0)
    C0 = frozenset(C0)
    if A0 & C0:
        raise ValueError("A0 and C0 must be disjoint")
    n = qp.n
    fixed_mask = np.zeros(n, dtype=bool)
    xfix = np.zeros(n)
    for i in A0:
        fixed_mask[i] = True
        xfix[i] = qp.upper[i]
    for i in C0:
        fixed_mask[i] = True
        xfix[i] = qp.lower[i]
    free = np.flatnonzero(~fixed_mask)
    coupling = (qp.Q @ xfix)[free]
    q_r = qp.q[free] + coupling
    if qp.operator_mode:
        def mv(v, free=free):
            w = np.zeros(n)
            w[free] = v
            return (qp.Q @ w)[free]

        q_red = LinearOperator(free.size, mv)
    else:
        q_red = linalg.extract_principal_submatrix(qp.Q, free)
    red = BoxQP(q_red, q_r, qp.lower[free], qp.upper[free])
    return red, free


def _drop_bound(qp: BoxQP, j, upper: bool):
    lower = qp.lower.copy()
    upper_b = qp.upper.copy()
    if upper:
        upper_b[j] = np.inf
    else:
        lower[j] = -np.inf
    return BoxQP(qp.Q, qp.q, lower, upper_b, trace_hint=qp._trace_hint)


def feasible_active_set(qp: BoxQP, start: ActivePair | None = None,
                        report: SolveReport | None = None,
                        dual_tol: float | None = None):
    """Feasible active-set method; returns (KKTPoint, SolveReport).

    Any start pair is accepted: it is first repaired to a primal feasible
    pair.  On a SingularReducedSystem the solve is retried once with a
    proximal shift of 1e-8 relative to the mean diagonal.
    """
    if report is None:
        report = SolveReport()
    try:
        return _feasible_active_set(qp, start, report, dual_tol)
    except SingularReducedSystem:
        shifted = qp.with_proximal_shift(1e-8)
        return _feasible_active_set(shifted, start, report, dual_tol)


def _feasible_active_set(qp, start, report, dual_tol=None):
    # One dual tolerance governs the whole recursion: subproblems condense q,
    # which changes its norm, and recomputing the tolerance per level can make
    # a subproblem declare optimal a point the parent rejects (livelock).
    if dual_tol is None:
        dual_tol = qp.dual_tol()
    if start is None:
        start = ActivePair.empty()
    pair, point, _ = make_primal_feasible(qp, start, report)
    j_x = qp.objective(point.x)
    stalls = 0
    cap = SAFETY_FACTOR * qp.n
    for _ in range(cap):
        if is_optimal(qp, point, tol=dual_tol) or stalls >= 2:
            # either optimal within tolerance, or repeated case-2/3 steps
            # produced no representable objective decrease: the iterate is at
            # the floating-point floor of this (typically ill-conditioned)
            # problem, so further set exchanges cannot improve it
            report.final_objective = j_x
            return point, report
        report.outer_iterations += 1
        bs = frozenset(i for i in pair.upper if point.alpha[i] >= 0.0)
        ds = frozenset(i for i in pair.lower if point.gamma[i] >= 0.0)
        new_pair, new_point, _ = make_primal_feasible(
            qp, ActivePair(bs, ds), report)
        j_y = qp.objective(new_point.x)
        if j_y < j_x:
            # Case 1: accept
            pair, point, j_x = new_pair, new_point, j_y
            stalls = 0
        elif len(pair.upper) + len(pair.lower) == 1:
            # Case 2: a single active constraint blocks progress; its
            # multiplier is negative, so the optimum has it inactive.  Solve
            # the problem with that bound removed.
            report.case2_count += 1
            (j,) = pair.upper | pair.lower
            relaxed = _drop_bound(qp, j, upper=j in pair.upper)
            sub_point, _ = _solve_nested(relaxed, ActivePair.empty(), report,
                                         dual_tol)
            cand_pair = ActivePair(
                frozenset(i for i in range(qp.n)
                          if sub_point.x[i] == qp.upper[i]),
                frozenset(i for i in range(qp.n)
                          if sub_point.x[i] == qp.lower[i]),
            )
            cand_point = kkt_solve(qp, cand_pair, report)
            j_c = qp.objective(cand_point.x)
            if j_c < j_x or is_optimal(qp, cand_point, tol=dual_tol):
                pair, point, j_x = cand_pair, cand_point, j_c
                stalls = 0
            else:
                stalls += 1
        else:
            # Case 3: fix all currently active bounds except the one with the
            # most negative multiplier, solve that subproblem to optimality,
            # and merge its active sets back.
            report.case3_count += 1
            worst = None
            for i in sorted(pair.upper):
                m = point.alpha[i]
                if worst is None or m < worst[1]:
                    worst = (i, m, True)
            for i in sorted(pair.lower):
                m = point.gamma[i]
                if worst is None or m < worst[1]:
                    worst = (i, m, False)
            j_star, _, in_upper = worst
            a0 = pair.upper - {j_star} if in_upper else pair.upper
            c0 = pair.lower - {j_star} if not in_upper else pair.lower
            red, free = fix_subproblem(qp, a0, c0)
            pos = {g: k for k, g in enumerate(free)}
            start_red = ActivePair.of(
                upper=(pos[j_star],) if in_upper else (),
                lower=(pos[j_star],) if not in_upper else (),
            )
            sub_point, _ = _solve_nested(red, start_red, report, dual_tol)
            b0 = frozenset(int(free[i]) for i in range(free.size)
                           if sub_point.x[i] == red.upper[i])
            d0 = frozenset(int(free[i]) for i in range(free.size)
                           if sub_point.x[i] == red.lower[i])
            cand_pair = ActivePair(a0 | b0, c0 | d0)
            cand_point = kkt_solve(qp, cand_pair, report)
            j_c = qp.objective(cand_point.x)
            if j_c < j_x or is_optimal(qp, cand_point, tol=dual_tol):
                pair, point, j_x = cand_pair, cand_point, j_c
                stalls = 0
            else:
                stalls += 1
        # log only accepted strict improvements; stalled or tie-accepted
        # steps terminate the loop shortly and carry no descent information
        if (not report.accepted_objectives
                or j_x < report.accepted_objectives[-1]):
            report.accepted_objectives.append(j_x)
            report.pair_log.append(hash(pair))
    raise IterationLimit(f"outer iteration cap {cap} exceeded")


def _solve_nested(qp, start, report, dual_tol=None):
    sub_report = SolveReport()
    point, sub_report = _feasible_active_set(qp, start, sub_report, dual_tol)
    report.kkt_solves += sub_report.kkt_solves
    report.system_sizes.extend(sub_report.system_sizes)
    report.case2_count += sub_report.case2_count
    report.case3_count += sub_report.case3_count
    return point, sub_report


def enumerate_oracle(qp: BoxQP) -> KKTPoint:
    """Exhaustively search active-set assignments for the KKT-optimal one.

    Assignments are visited in order of Hamming distance from the clipped
    unconstrained minimizer, so the optimum is typically found early; the
    result does not depend on the visiting order because the optimal point
    of a strictly convex QP is unique.
    """
    import scipy.optimize as sopt

    n = qp.n
    if n > ORACLE_MAX_N:
        raise TooLarge(f"n={n} exceeds enumeration limit {ORACLE_MAX_N}")
    # center of the search order: a box-constrained quasi-Newton polish;
    # only the ordering depends on it, correctness comes from the KKT check
    x0 = np.clip(np.zeros(n), qp.lower, qp.upper)
    res = sopt.minimize(qp.objective, x0, jac=qp.gradient, method="L-BFGS-B",
                        bounds=list(zip(qp.lower, qp.upper)),
                        options={"maxiter": 2000, "ftol": 1e-16, "gtol": 1e-12})
    x_pol = res.x
    scale = 1.0 + np.abs(x_pol).max()
    guess = np.ones(n, dtype=int)  # 0 lower, 1 free, 2 upper
    guess[x_pol <= qp.lower + 1e-7 * scale] = 0
    guess[x_pol >= qp.upper - 1e-7 * scale] = 2
    guess[~np.isfinite(qp.lower) & (guess == 0)] = 1
    guess[~np.isfinite(qp.upper) & (guess == 2)] = 1

    def candidates(i):
        opts = [1]
        if np.isfinite(qp.lower[i]):
            opts.append(0)
        if np.isfinite(qp.upper[i]):
            opts.append(2)
        return opts

    for dist in range(n + 1):
        for positions in itertools.combinations(range(n), dist):
            alt = []
            for i in positions:
                others = [v for v in candidates(i) if v != guess[i]]
                if not others:
                    alt = None
                    break
                alt.append(others)
            if alt is None:
                continue
            for combo in itertools.product(*alt):
                assign = guess.copy()
                assign[list(positions)] = combo
                pair = ActivePair(
                    frozenset(np.flatnonzero(assign == 2).tolist()),
                    frozenset(np.flatnonzero(assign == 0).tolist()),
                )
                try:
                    point = kkt_solve(qp, pair)
                except SingularReducedSystem:
                    continue
                if is_optimal(qp, point):
                    return point
    raise RuntimeError("no optimal assignment found (Q not positive definite?)")


def save_qp(qp: BoxQP, path):
    """Plain-text interchange format: n, dense Q rows, then q, l, u."""
    qd = qp.Q.to_dense() if not qp.operator_mode else None
    if qd is None:
        raise ValueError("operator-mode QPs cannot be serialized densely")

    def fmt(v):
        if v == np.inf:
            return "inf"
        if v == -np.inf:
            return "-inf"
        return repr(float(v))

    with open(path, "w") as fh:
        fh.write(f"{qp.n}\n")
        for row in qd:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")
        for vec in (qp.q, qp.lower, qp.upper):
            fh.write(" ".join(fmt(v) for v in vec) + "\n")


def load_qp(path) -> BoxQP:
    with open(path) as fh:
        lines = fh.read().splitlines()
    n = int(lines[0])

    def parse(line):
        return np.array([float(t) for t in line.split()])

    qmat = np.vstack([parse(lines[1 + i]) for i in range(n)])
    q = parse(lines[1 + n])
    lower = parse(lines[2 + n])
    upper = parse(lines[3 + n])
    return BoxQP(qmat, q, lower, upper)
