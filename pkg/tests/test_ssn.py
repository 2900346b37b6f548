import numpy as np
import pytest

from shapereg.config import SSNConfig
from shapereg.errors import LineSearchError
from shapereg.problem import ActiveSet, Box, Dataset, LipschitzBall, Monotone, NoShape, ProblemInstance
from shapereg.shapes import jacobian_rows
from shapereg.ssn import (
    HessianOperator, SubproblemContext, active_mask, armijo_linesearch, evaluate_point, gradient,
    newton_direction, pack, phi_and_grad, phi_value, ssn_solve, unpack,
)

from conftest import dense_operators, random_dataset

SHAPES = [NoShape(), Monotone(K1=[0]), Box(L=[-0.3, 0.0], U=[0.3, 1.0]), LipschitzBall(q=2, L=0.5),
          LipschitzBall(q=1, L=0.5), LipschitzBall(q="inf", L=0.4)]


def _context(shape, n=5, seed=0, sigma=2.0, active=None):
    prob = ProblemInstance(random_dataset(n, 2, seed=seed), shape)
    r = np.random.default_rng(seed + 100)
    active = active if active is not None else ActiveSet.full(n)
    return SubproblemContext(
        prob, active, theta_c=r.standard_normal(n), xi_c=r.standard_normal((n, 2)),
        u=np.abs(r.standard_normal(active.size)), v=r.standard_normal((n, 2)), sigma=sigma, h1=0.3, h2=0.2,
    ), r


def _dense_hessian(ctx, pt):
    A, B = dense_operators(ctx.problem)
    rows = np.arange(ctx.problem.n ** 2) if ctx.active.is_full else ctx.active.rows
    M = np.hstack([A, B])[rows]
    wbar = (pt.z < 0).astype(float)
    n, d = ctx.problem.n, ctx.problem.d
    Q = jacobian_rows(ctx.problem.shape, pt.w).dense()
    D = np.zeros((n + n * d, n + n * d))
    D[:n, :n] = np.diag(1.0 + ctx.h1 / ctx.sigma)
    for i in range(n):
        lo = n + i * d
        D[lo:lo + d, lo:lo + d] = ctx.sigma * (np.eye(d) - Q[i]) + np.diag(ctx.h2[i] / ctx.sigma)
    return ctx.sigma * M.T @ (wbar[:, None] * M) + D


def test_gradient_vanishes_at_trivial_point():
    theta = np.full(4, 1.0)
    prob = ProblemInstance(Dataset(random_dataset(4, 2, seed=1).X, theta), LipschitzBall(q=2, L=10.0))
    xi = np.zeros((4, 2))
    ctx = SubproblemContext(prob, ActiveSet.full(4), theta, xi, np.zeros(16), np.zeros((4, 2)), sigma=1.0)
    _, grad = phi_and_grad(ctx, theta, xi)
    np.testing.assert_array_equal(grad, np.zeros(12))


@pytest.mark.parametrize("shape", SHAPES, ids=lambda s: s.kind + str(getattr(s, "q", "")))
def test_gradient_matches_finite_differences(shape):
    ctx, r = _context(shape)
    n, d = 5, 2
    for _ in range(20):
        x = r.standard_normal(n + n * d)
        _, g = phi_and_grad(ctx, *unpack(x, n, d))
        h = 1e-6 * (1 + np.linalg.norm(x))
        fd = np.empty_like(x)
        for k in range(x.size):
            e = np.zeros_like(x)
            e[k] = h
            fd[k] = (phi_and_grad(ctx, *unpack(x + e, n, d))[0] - phi_and_grad(ctx, *unpack(x - e, n, d))[0]) / (2 * h)
        np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-6 * (1 + np.abs(g).max()))


def test_active_mask_signs():
    ctx, _ = _context(NoShape(), n=4)
    theta = np.zeros(4)
    xi = np.zeros((4, 2))
    ctx.u[:] = 0.0
    pt = evaluate_point(ctx, theta, xi)
    assert active_mask(ctx, pt).count == 0
    ctx.u[:] = 1.0
    pt = evaluate_point(ctx, theta, xi)
    mask = active_mask(ctx, pt)
    assert mask.bar.all()
    # diagonal rows carry no coupling and are dropped from the matrix form
    assert mask.count == 4 * 3


@pytest.mark.parametrize("shape", SHAPES, ids=lambda s: s.kind + str(getattr(s, "q", "")))
def test_hessian_matches_dense_oracle(shape):
    ctx, r = _context(shape)
    theta, xi = r.standard_normal(5), r.standard_normal((5, 2))
    pt = evaluate_point(ctx, theta, xi)
    H = HessianOperator(ctx, active_mask(ctx, pt), pt.jac)
    dense = _dense_hessian(ctx, pt)
    np.testing.assert_allclose(H.dense(), dense, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(H.diagonal(), np.diag(dense), rtol=1e-12, atol=1e-12)
    for _ in range(5):
        a, b = r.standard_normal(15), r.standard_normal(15)
        np.testing.assert_allclose(H.matvec(a), dense @ a, rtol=1e-12, atol=1e-11)
        assert H.matvec(a) @ b == pytest.approx(a @ H.matvec(b), rel=1e-12, abs=1e-12)
        assert a @ H.matvec(a) >= min(0.3, 0.2) / ctx.sigma * (a @ a)


@pytest.mark.parametrize("shape", SHAPES, ids=lambda s: s.kind + str(getattr(s, "q", "")))
def test_hessian_matvec_matches_gradient_differences(shape):
    ctx, r = _context(shape, seed=4)
    n, d = 5, 2
    x = r.standard_normal(n + n * d)
    pt = evaluate_point(ctx, *unpack(x, n, d))
    H = HessianOperator(ctx, active_mask(ctx, pt), pt.jac)
    for _ in range(5):
        v = r.standard_normal(x.size)
        h = 1e-7
        fd = (phi_and_grad(ctx, *unpack(x + h * v, n, d))[1] - phi_and_grad(ctx, *unpack(x - h * v, n, d))[1]) / (2 * h)
        hv = H.matvec(v)
        np.testing.assert_allclose(hv, fd, rtol=1e-5, atol=1e-5 * (1 + np.abs(hv).max()))


def test_hessian_on_reduced_rows_matches_dense():
    rows = np.random.default_rng(5).choice(25, size=12, replace=False)
    ctx, r = _context(Box(L=[-0.3, 0.0], U=[0.3, 1.0]), active=ActiveSet(5, rows))
    pt = evaluate_point(ctx, r.standard_normal(5), r.standard_normal((5, 2)))
    H = HessianOperator(ctx, active_mask(ctx, pt), pt.jac)
    x = r.standard_normal(15)
    np.testing.assert_allclose(H.matvec(x), _dense_hessian(ctx, pt) @ x, rtol=1e-12, atol=1e-11)


def test_hessian_without_active_rows_is_diagonal():
    ctx, r = _context(NoShape())
    ctx.u[:] = 0.0
    theta = np.zeros(5)
    xi = np.zeros((5, 2))
    pt = evaluate_point(ctx, theta, xi)
    H = HessianOperator(ctx, active_mask(ctx, pt), pt.jac)
    dt, dx = r.standard_normal(5), r.standard_normal((5, 2))
    out_t, out_x = unpack(H.matvec(pack(dt, dx)), 5, 2)
    np.testing.assert_allclose(out_t, (1 + 0.3 / ctx.sigma) * dt)
    np.testing.assert_allclose(out_x, (0.2 / ctx.sigma) * dx)


def test_two_point_block_formula():
    # all rows active: A^T Diag(wbar) A = 4 I - 2 e e^T for n = 2
    ctx, _ = _context(NoShape(), n=2)
    ctx.u[:] = 10.0
    pt = evaluate_point(ctx, np.zeros(2), np.zeros((2, 2)))
    H = HessianOperator(ctx, active_mask(ctx, pt), pt.jac).dense()
    expected = ctx.sigma * (4 * np.eye(2) - 2 * np.ones((2, 2))) + np.diag(1 + ctx.h1 / ctx.sigma)
    np.testing.assert_allclose(H[:2, :2], expected)


@pytest.mark.parametrize("threshold", [2000, 0])
def test_newton_direction_solves_the_system(threshold):
    ctx, r = _context(LipschitzBall(q=2, L=0.5))
    pt = evaluate_point(ctx, r.standard_normal(5), r.standard_normal((5, 2)))
    grad = gradient(ctx, pt)
    mask = active_mask(ctx, pt)
    step = newton_direction(ctx, grad, mask, pt.jac, SSNConfig(direct_threshold=threshold))
    dense = _dense_hessian(ctx, pt)
    target = min(0.1, np.linalg.norm(grad) ** 1.2)
    assert step.method == ("direct" if threshold else "cg")
    assert np.linalg.norm(dense @ step.direction + grad) <= target * (1 + 1e-6)
    if step.method == "direct":
        np.testing.assert_allclose(step.direction, np.linalg.solve(dense, -grad), rtol=1e-8, atol=1e-10)


def test_armijo_full_and_halved_steps():
    ctx, r = _context(NoShape())
    # slacks far above zero: Phi is an exact quadratic along the steps below
    ctx.u[:] = -100.0
    theta, xi = np.zeros(5), np.zeros((5, 2))
    pt = evaluate_point(ctx, theta, xi)
    phi0 = phi_value(ctx, pt)
    grad = gradient(ctx, pt)
    step = newton_direction(ctx, grad, active_mask(ctx, pt), pt.jac)
    alpha, _, value = armijo_linesearch(ctx, pt, step.direction, grad, phi0)
    assert alpha == 1.0 and value < phi0
    alpha, _, _ = armijo_linesearch(ctx, pt, 2 * step.direction, grad, phi0)
    assert alpha == 0.5


def test_armijo_rejects_ascent_direction():
    ctx, r = _context(Box(L=[-0.3, 0.0], U=[0.3, 1.0]))
    pt = evaluate_point(ctx, r.standard_normal(5), r.standard_normal((5, 2)))
    grad = gradient(ctx, pt)
    with pytest.raises(LineSearchError):
        armijo_linesearch(ctx, pt, grad, grad, phi_value(ctx, pt), SSNConfig(max_backtracks=5))


@pytest.mark.parametrize("shape", SHAPES, ids=lambda s: s.kind + str(getattr(s, "q", "")))
def test_ssn_reaches_stationary_point(shape):
    ctx, r = _context(shape)
    res = ssn_solve(ctx, (r.standard_normal(5), r.standard_normal((5, 2))), lambda pt, g: g <= 1e-10)
    assert res.grad_norm <= 1e-10
    assert not res.degraded
    # a second run started at the solution does not move
    again = ssn_solve(ctx, (res.theta, res.xi), lambda pt, g: g <= 1e-10)
    assert again.iterations == 0
    # stationary point of a strongly convex function: nothing nearby is lower
    base = phi_value(ctx, res.point)
    for _ in range(10):
        h = 1e-3 * r.standard_normal(15)
        t, x = unpack(pack(res.theta, res.xi) + h, 5, 2)
        assert phi_and_grad(ctx, t, x)[0] >= base - 1e-12
