"""Acceptance suite: one test per acceptance criterion.

Run with `pytest -v tests/test_acceptance.py` to get one pass/fail line per
criterion.  The full-size (N=32) experiment runs are shared between criteria
through a module-level cache, so the suite performs each expensive run once.
"""

import time

import numpy as np
import pytest

from boxinv import bench, fem2d, gn, linalg, qp
from boxinv.bench import ExperimentConfig, run_experiment
from boxinv.fem2d import build_mesh
from boxinv.gn import GNIterate, assemble_gn_qp, regularized_cost
from boxinv.qp import ActivePair, BoxQP, enumerate_oracle, feasible_active_set

SEEDS = range(5)

_run_cache = {}


def cached_run(kind, delta, seed, **kw):
    key = (kind, delta, seed, tuple(sorted(kw.items())))
    if key not in _run_cache:
        config = ExperimentConfig(kind=kind, N=32, delta=delta, seed=seed,
                                  max_k=15, **kw)
        t0 = time.perf_counter()
        metrics, iterate, report = run_experiment(config)
        _run_cache[key] = (metrics, iterate, report, time.perf_counter() - t0)
    return _run_cache[key]


def random_instance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 13))
    u, _, _ = np.linalg.svd(rng.standard_normal((n, n)))
    eigs = np.geomspace(1.0, 10.0 ** rng.uniform(0, 6), n)
    qmat = (u * eigs) @ u.T
    qvec = rng.standard_normal(n) * 10
    lo = rng.standard_normal(n) - 1
    hi = lo + np.abs(rng.standard_normal(n)) * 2 + 0.1
    if seed % 5 == 0:
        lo[rng.integers(0, n)] = -np.inf
        hi[rng.integers(0, n)] = np.inf
    return BoxQP(qmat, qvec, lo, hi)


@pytest.fixture(scope="module")
def solved_instances():
    """The 200 seeded instances with solver and oracle results."""
    out = []
    t0 = time.perf_counter()
    for seed in range(200):
        box = random_instance(seed)
        point, report = feasible_active_set(box)
        ref = enumerate_oracle(box)
        out.append((box, point, report, ref))
    return out, time.perf_counter() - t0


def test_criterion_01_oracle_equivalence(solved_instances):
    """200 random SPD instances: solver matches brute force within 1e-8, <60 s."""
    instances, elapsed = solved_instances
    for box, point, _, ref in instances:
        assert np.abs(point.x - ref.x).max() <= 1e-8
    assert elapsed < 60.0


def test_criterion_02_kkt_certification(solved_instances):
    """Every emitted solution carries a full KKT certificate."""
    instances, _ = solved_instances
    points = [(box, point) for box, point, _, _ in instances]
    # include the assembled inverse-problem QPs at small size
    for kind in ("source", "potential", "diffusion"):
        config = ExperimentConfig(kind=kind, N=8, delta=0.01, seed=0)
        problem, _ = bench.build_problem(config)
        box, _ = assemble_gn_qp(problem, bench.initial_iterate(problem, 5.5))
        point, _ = feasible_active_set(
            box, ActivePair(frozenset(), frozenset(range(box.n))))
        points.append((box, point))
    for box, point in points:
        q_scale = 1.0 + np.abs(box.q).max()
        stat = box.gradient(point.x) + point.alpha - point.gamma
        assert np.abs(stat).max() <= 1e-9 * q_scale
        # exact complementarity: multipliers only where the bound is attained
        assert np.all((point.alpha == 0.0) | (point.x == box.upper))
        assert np.all((point.gamma == 0.0) | (point.x == box.lower))
        assert np.min(point.x - box.lower) >= -box.primal_tol()
        assert np.min(box.upper - point.x) >= -box.primal_tol()
        assert point.alpha.min() >= -1e-9 * q_scale
        assert point.gamma.min() >= -1e-9 * q_scale


def test_criterion_03_descent_no_cycling(solved_instances):
    """Accepted objectives strictly decrease; no active pair recurs."""
    instances, _ = solved_instances
    for _, _, report, _ in instances:
        obj = report.accepted_objectives
        assert all(b < a for a, b in zip(obj, obj[1:]))
        assert len(report.pair_log) == len(set(report.pair_log))


def test_criterion_04_fem_patch_tests():
    """Constant-kernel, linear-energy, total-mass and dual-norm identities."""
    mesh = build_mesh(8)
    k = fem2d.assemble_stiffness(mesh)
    m = fem2d.assemble_mass_p1(mesh)
    ones = np.ones(mesh.n_nodes)
    x = mesh.nodes[:, 0]
    assert np.abs(k @ ones).max() <= 1e-12
    assert x @ (k @ x) == pytest.approx(4.0, abs=1e-12)
    assert ones @ (m @ ones) == pytest.approx(4.0, abs=1e-12)
    kf = fem2d.restrict_to_free(k, mesh)
    fact = linalg.factorize(kf)
    v = np.sin(np.arange(mesh.n_free, dtype=float))
    r = kf @ v
    assert fem2d.vstar_norm_sq(r, fact) == pytest.approx(v @ r, rel=1e-10)


@pytest.mark.parametrize("kind", ["source", "potential", "diffusion"])
def test_criterion_05_gradient_check(kind):
    """QP model gradient equals the nonlinear cost gradient at the iterate."""
    config = ExperimentConfig(kind=kind, N=4, delta=0.01, seed=0)
    problem, _ = bench.build_problem(config)
    it0 = bench.initial_iterate(problem, 2.0)
    box, meta = assemble_gn_qp(problem, it0)
    zk = np.concatenate([it0.param, it0.phi[problem.mesh.free_nodes]])
    grad = box.gradient(zk) - meta["eps"] * zk

    def cost_of(z):
        it = GNIterate(
            param=z[meta["param_slice"]],
            phi=fem2d.prolong_free(z[meta["state_slice"]], problem.mesh))
        return regularized_cost(problem, it)

    h = 1e-5
    rng = np.random.default_rng(0)
    for _ in range(5):
        d = rng.standard_normal(box.n)
        d /= np.linalg.norm(d)
        fd = (cost_of(zk + h * d) - cost_of(zk - h * d)) / (2 * h)
        assert fd == pytest.approx(grad @ d, rel=1e-6, abs=1e-9)


def test_criterion_06_source_reproduction_band():
    """Source, N=32, delta=1e-3, 5 seeds: one step, exact spots, error bands."""
    results = [cached_run("source", 0.001, s) for s in SEEDS]
    assert all(m.k == 1 for m, _, _, _ in results)
    exact = sum(1 for m, _, _, _ in results
                if m.err_spot1 == 0.0 and m.err_spot2 == 0.0)
    assert exact >= 4
    assert np.median([m.rel_residual for m, _, _, _ in results]) <= 1e-4
    assert np.median([m.err_L1 for m, _, _, _ in results]) <= 0.15
    assert max(t for _, _, _, t in results) < 120.0


def test_criterion_07_potential_reproduction_band():
    """Potential, N=32, delta=1e-3, 5 seeds: exact spots and error band."""
    results = [cached_run("potential", 0.001, s) for s in SEEDS]
    exact = sum(1 for m, _, _, _ in results
                if m.err_spot1 == 0.0 and m.err_spot2 == 0.0)
    assert exact >= 4
    assert all(m.k <= 15 for m, _, _, _ in results)
    assert np.median([m.err_L1 for m, _, _, _ in results]) <= 0.3


def test_criterion_08_diffusion_reproduction_band():
    """Diffusion, N=32, delta=1e-3, alpha=1e-4*delta, 5 seeds."""
    results = [cached_run("diffusion", 0.001, s) for s in SEEDS]
    exact = sum(1 for m, _, _, _ in results if m.err_spot1 == 0.0)
    assert exact >= 4
    assert np.median([m.err_L1 for m, _, _, _ in results]) <= 1.0


def test_criterion_09_delta_convergence_trend():
    """Mean L1 error shrinks from delta=0.1 to delta=1e-3 (source, potential)."""
    for kind in ("source", "potential"):
        small = np.mean([cached_run(kind, 0.001, s)[0].err_L1 for s in SEEDS])
        large = np.mean([cached_run(kind, 0.1, s)[0].err_L1 for s in SEEDS])
        assert small < large


def test_criterion_10_indefinite_coefficients():
    """Potential tests 2 and 3 recover the correct sign pattern in B1."""
    for test_id, bound in ((2, -9.0), (3, -10.0)):
        metrics, iterate, report, _ = cached_run("potential", 0.01, 0,
                                                 test_id=test_id)
        mesh = build_mesh(32)
        # spot 2 sits inside B1; the recovered mean there must track the bound
        dist = bench.spot_error(iterate.param - bound, mesh, bench.SPOTS[1])
        assert dist <= 2.0


def test_criterion_11_warm_cold_ordering():
    """Warm starting never needs more KKT solves than cold starting."""
    config = ExperimentConfig(kind="potential", N=32, delta=0.001, seed=0,
                              max_k=15)
    out = bench.run_warmcold(config)
    assert out["warm"]["total_kkt_solves"] <= out["cold"]["total_kkt_solves"]
