import math

import numpy as np
import pytest

from shapereg.admm import admm_solve
from shapereg.config import ADMMConfig, ProxALMConfig
from shapereg.errors import IterationLimitError, ShapeError
from shapereg.problem import ActiveSet, Box, Dataset, LipschitzBall, Monotone, NoShape, ProblemInstance
from shapereg.proxalm import SolverState, kkt_residual, multiplier_update, sigma_norm, solve, stopping_checks
from shapereg.shapes import project_rows

from conftest import dense_operators, random_dataset


def _dense_kkt(problem, state, full):
    A, B = dense_operators(problem)
    n = problem.n
    rows = np.arange(n * n) if state.active.is_full else state.active.rows
    u_full = np.zeros(n * n)
    u_full[rows] = state.u
    theta, xi, v, Y = state.theta, state.xi, state.v, problem.Y
    x = xi.ravel()
    nu = np.linalg.norm(state.u)
    r1 = np.linalg.norm(theta - Y - A.T @ u_full) / (1 + np.linalg.norm(Y) + np.linalg.norm(theta) + nu)
    r2 = np.linalg.norm(B.T @ u_full + v.ravel()) / (1 + nu + np.linalg.norm(v))
    r3 = np.linalg.norm(xi - project_rows(problem.shape, xi - v)) / (1 + np.linalg.norm(xi) + np.linalg.norm(v))
    keep = np.arange(n * n) if full else rows
    At, Bx = (A @ theta)[keep], (B @ x)[keep]
    z = At + Bx
    comp = np.linalg.norm(z - np.maximum(z - u_full[keep], 0.0))
    r4 = comp / (1 + np.linalg.norm(At) + np.linalg.norm(Bx) + nu)
    return r1, r2, r3, r4


def _random_state(problem, active, seed=0):
    r = np.random.default_rng(seed)
    n, d = problem.n, problem.d
    return SolverState(r.standard_normal(n), r.standard_normal((n, d)), np.abs(r.standard_normal(active.size)),
                       r.standard_normal((n, d)), 1.0, active)


def test_multiplier_update_examples():
    u, v = multiplier_update(NoShape(), 2.0, [0.5, 1.0, 0.0], np.zeros((2, 2)))
    np.testing.assert_array_equal(u, np.zeros(3))
    x = np.array([-1.0, -0.25])
    u, _ = multiplier_update(NoShape(), 2.0, x, np.zeros((2, 2)))
    np.testing.assert_allclose(u, -2 * x)
    assert (u >= 0).all()
    _, v = multiplier_update(LipschitzBall(q=2, L=1.0), 3.0, x, [[0.1, 0.2], [0.0, -0.3]])
    np.testing.assert_array_equal(v, np.zeros((2, 2)))


def test_multiplier_update_outside_the_set():
    _, v = multiplier_update(Box(L=[0.0], U=[1.0]), 2.0, [0.0], [[3.0], [-1.0]])
    np.testing.assert_allclose(v, [[-4.0], [2.0]])


def test_stopping_checks_thresholds():
    config = ProxALMConfig()
    assert stopping_checks(0.0, 1.0, 2.0, 0, config) == (True, True)
    bound_a = math.sqrt(1e-3) / 2.0 * 0.5**3
    assert stopping_checks(bound_a * 0.999, 1e9, 2.0, 3, config).absolute
    assert not stopping_checks(bound_a * 1.001, 1e9, 2.0, 3, config).absolute
    # B at k=0, step 1: delta = 0.1
    bound_b = 0.1 * math.sqrt(1e-3) / 2.0
    assert stopping_checks(bound_b * 0.999, 1.0, 2.0, 0, config).relative
    assert not stopping_checks(bound_b * 1.001, 1.0, 2.0, 0, config).relative


def test_delta_damping():
    config = ProxALMConfig()
    assert config.delta(0, 1.0) == pytest.approx(0.1)
    assert config.delta(19, 1.0) == pytest.approx(0.1)
    assert config.delta(20, 1.0) == pytest.approx(0.025)
    assert config.delta(40, 1.0) == pytest.approx(0.1 / 9)
    assert config.delta(0, 1e-6) == pytest.approx(1.0)


def test_sigma_norm_weights():
    config = ProxALMConfig(h1=1e-3, h2=1e-3)
    value = sigma_norm(config, np.ones(4), np.ones((4, 2)), np.ones(3), np.zeros((4, 2)))
    assert value == pytest.approx(math.sqrt(4e-3 + 8e-3 + 3.0))


def test_kkt_zero_at_exact_solution():
    # affine data: theta = Y with the common slope and no multipliers solves the QP
    prob = ProblemInstance(Dataset(np.array([[0.0, 1.0]]), np.array([0.0, 1.0])))
    state = SolverState(prob.Y.copy(), np.ones((2, 1)), np.zeros(4), np.zeros((2, 1)), 1.0, ActiveSet.full(2))
    report = kkt_residual(prob, state)
    assert report.kkt == 0.0
    assert report.pobj == 0.0 and report.dobj == 0.0 and report.rel_gap == 0.0


@pytest.mark.parametrize("shape", [NoShape(), Box(L=[-0.5, 0.0], U=[0.5, 1.0]), LipschitzBall(q=2, L=0.7)],
                         ids=lambda s: s.kind)
def test_kkt_matches_dense_formula(shape):
    prob = ProblemInstance(random_dataset(5, 2, seed=7), shape)
    state = _random_state(prob, ActiveSet.full(5))
    report = kkt_residual(prob, state)
    expected = _dense_kkt(prob, state, full=True)
    got = (report.primal_res, report.dual_res, report.prox_res, report.comp_res)
    np.testing.assert_allclose(got, expected, rtol=1e-10)
    assert report.kkt == pytest.approx(max(expected), rel=1e-10)
    # full and reduced forms coincide on the full row set
    assert kkt_residual(prob, state, full=False).kkt == pytest.approx(report.kkt, rel=1e-12)
    assert kkt_residual(prob, state, block_count=3, threads=2).kkt == pytest.approx(report.kkt, rel=1e-12)


def test_kkt_on_reduced_rows_matches_dense_formula():
    prob = ProblemInstance(random_dataset(5, 2, seed=8))
    active = ActiveSet(5, np.random.default_rng(1).choice(25, size=9, replace=False))
    state = _random_state(prob, active, seed=2)
    reduced = kkt_residual(prob, state, full=False)
    full = kkt_residual(prob, state, full=True)
    assert reduced.reduced and not full.reduced
    assert reduced.comp_res == pytest.approx(_dense_kkt(prob, state, full=False)[3], rel=1e-10)
    assert full.comp_res == pytest.approx(_dense_kkt(prob, state, full=True)[3], rel=1e-10)


def test_kkt_grows_with_perturbation():
    prob = ProblemInstance(Dataset(np.array([[0.0, 1.0]]), np.array([0.0, 1.0])))
    base = SolverState(prob.Y.copy(), np.ones((2, 1)), np.zeros(4), np.zeros((2, 1)), 1.0, ActiveSet.full(2))
    values = []
    for eps in (1e-4, 1e-3, 1e-2):
        values.append(kkt_residual(prob, SolverState(base.theta + eps, base.xi, base.u, base.v, 1.0, base.active)).kkt)
    assert 0 < values[0] < values[1] < values[2]


def test_single_point_is_solved_immediately():
    prob = ProblemInstance(Dataset(np.array([[0.3], [0.7]]), np.array([2.0])))
    result = solve(prob)
    assert result.report.kkt == 0.0
    assert result.report.outer <= 1
    np.testing.assert_array_equal(result.state.theta, [2.0])


def test_single_point_projects_the_slope():
    prob = ProblemInstance(Dataset(np.array([[0.3]]), np.array([2.0])), Box(L=[0.5], U=[2.0]))
    result = solve(prob, ProxALMConfig(kkt_tol=1e-9))
    assert result.report.outer == 0
    np.testing.assert_array_equal(result.state.xi, [[0.5]])
    np.testing.assert_array_equal(result.state.theta, [2.0])
    admm = admm_solve(prob)
    np.testing.assert_array_equal(admm.state.xi, [[0.5]])


def test_convex_data_is_reproduced():
    prob = ProblemInstance(Dataset(np.array([[0.0, 1.0, 2.0]]), np.array([0.0, 0.0, 1.0])))
    result = solve(prob, ProxALMConfig(kkt_tol=1e-8))
    np.testing.assert_allclose(result.state.theta, [0.0, 0.0, 1.0], atol=1e-5)
    assert result.report.pobj == pytest.approx(0.0, abs=1e-9)


@pytest.mark.parametrize("shape", [NoShape(), Monotone(K1=[0]), Box(L=[-2.0, -2.0], U=[2.0, 2.0]),
                                   LipschitzBall(q=2, L=1.0), LipschitzBall(q=1, L=1.5)], ids=lambda s: s.kind)
def test_solution_properties(shape):
    prob = ProblemInstance(random_dataset(30, 2, seed=11), shape)
    result = solve(prob)
    state, report = result.state, result.report
    assert report.kkt <= 1e-6
    assert (state.u >= 0).all()
    assert report.rel_gap <= 1e-4
    slack = state.active.values(prob, state.theta, state.xi)
    nu = np.linalg.norm(state.u)
    scale = 1 + prob.norm_A(state.theta) + prob.norm_B(state.xi) + nu
    assert abs(state.u @ slack) <= report.kkt * scale * (nu + np.linalg.norm(slack)) + 1e-12
    # fitted slopes lie in the gradient set
    dist = np.linalg.norm(project_rows(prob.shape, state.xi) - state.xi)
    assert dist <= report.kkt * (1 + np.linalg.norm(state.xi) + np.linalg.norm(state.v)) + 1e-12
    assert result.model.n == 30


def test_objective_matches_admm():
    prob = ProblemInstance(random_dataset(40, 2, seed=21))
    alm = solve(prob)
    admm = admm_solve(prob, ADMMConfig())
    assert admm.report.kkt <= 1e-6 and admm.report.outer < ADMMConfig().max_iter
    assert alm.report.pobj == pytest.approx(admm.report.pobj, rel=1e-4, abs=1e-5)


def test_outer_limit_carries_best_state():
    prob = ProblemInstance(random_dataset(15, 2, seed=4))
    with pytest.raises(IterationLimitError) as info:
        solve(prob, ProxALMConfig(max_outer=1, kkt_tol=1e-14))
    assert info.value.state is not None
    assert info.value.report.kkt > 1e-14
    assert info.value.state.outer == 1


def test_trace_records_every_outer_step():
    prob = ProblemInstance(random_dataset(15, 2, seed=4))
    records = []
    result = solve(prob, trace=records.append)
    assert len(records) == result.report.outer
    assert [r["outer"] for r in records] == list(range(1, len(records) + 1))
    assert {"sigma", "inner", "grad_norm", "kkt", "pobj", "dobj"} <= set(records[0])
    # sigma grows geometrically
    sigmas = [r["sigma"] for r in records]
    assert all(b == pytest.approx(min(1.6 * a, 1e6)) for a, b in zip(sigmas, sigmas[1:]))


def test_warm_start_from_solution_does_not_iterate():
    prob = ProblemInstance(random_dataset(15, 2, seed=5))
    first = solve(prob)
    again = solve(prob, start=first.state)
    assert again.report.outer == 0
    np.testing.assert_array_equal(again.state.theta, first.state.theta)


def test_reduced_solve_reports_reduced_residual():
    prob = ProblemInstance(random_dataset(12, 2, seed=6))
    rows = [k for k in range(144) if k // 12 != k % 12][::3]
    result = solve(prob, active=ActiveSet(12, rows))
    assert result.report.reduced
    assert result.report.kkt <= 1e-6
    assert result.state.u.size == len(rows)


def test_active_set_must_match_instance():
    prob = ProblemInstance(random_dataset(6, 2, seed=6))
    with pytest.raises(ShapeError):
        solve(prob, active=ActiveSet.full(5))
