"""Semismooth Newton solver for the proximal augmented Lagrangian subproblem.

For fixed (theta~, xi~, u~, v~, sigma) the subproblem minimizes

    Phi(theta, xi) = 1/2||theta - Y||^2 + sigma/2 ||min(z, 0)||^2 + sigma/2 ||w - Pi_D(w)||^2
                     - ||u~||^2/(2 sigma) - ||v~||^2/(2 sigma)
                     + ||theta - theta~||^2_H1/(2 sigma) + ||xi - xi~||^2_H2/(2 sigma)

with z = A theta + B xi - u~/sigma over the active rows and w = xi - v~/sigma.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import sparse
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve
from scipy.sparse.linalg import LinearOperator, cg

from shapereg.config import SSNConfig
from shapereg.errors import IterationLimitError, LineSearchError, ShapeError
from shapereg.problem import ActiveSet, ProblemInstance, _rowdot
from shapereg.shapes import JacobianBlocks, prox_p

log = logging.getLogger("shapereg.ssn")


def pack(theta: np.ndarray, xi: np.ndarray) -> np.ndarray:
    return np.concatenate([theta, xi.ravel()])


def unpack(x: np.ndarray, n: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    return x[:n], x[n:].reshape(n, d)


@dataclass
class SubproblemContext:
    problem: ProblemInstance
    active: ActiveSet
    theta_c: np.ndarray
    xi_c: np.ndarray
    u: np.ndarray
    v: np.ndarray
    sigma: float
    h1: float | np.ndarray = 1e-3
    h2: float | np.ndarray = 1e-3

    def __post_init__(self):
        n, d = self.problem.n, self.problem.d
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if np.any(np.asarray(self.h1) <= 0) or np.any(np.asarray(self.h2) <= 0):
            raise ValueError("proximal weights must be positive")
        if self.u.shape != (self.active.size,) or self.v.shape != (n, d):
            raise ShapeError("multiplier shapes do not match the instance")
        self.h1 = np.broadcast_to(np.asarray(self.h1, dtype=float), (n,))
        self.h2 = np.broadcast_to(np.asarray(self.h2, dtype=float), (n, d))


@dataclass
class SubproblemPoint:
    """Everything Phi, its gradient and the multiplier update need at (theta, xi)."""

    theta: np.ndarray
    xi: np.ndarray
    z: np.ndarray      # A theta + B xi - u~/sigma over I
    w: np.ndarray      # xi - v~/sigma
    proj: np.ndarray   # Pi_D(w)
    jac: JacobianBlocks | None = None

    @property
    def neg(self) -> np.ndarray:
        return np.minimum(self.z, 0.0)


def evaluate_point(ctx: SubproblemContext, theta: np.ndarray, xi: np.ndarray, jacobian: bool = True) -> SubproblemPoint:
    z = ctx.active.values(ctx.problem, theta, xi) - ctx.u / ctx.sigma
    w = xi - ctx.v / ctx.sigma
    proj, jac = prox_p(ctx.problem.shape, w)
    return SubproblemPoint(theta, xi, z, w, proj, jac if jacobian else None)


def phi_value(ctx: SubproblemContext, pt: SubproblemPoint) -> float:
    s = ctx.sigma
    neg = pt.neg
    r = pt.w - pt.proj
    dt, dx = pt.theta - ctx.theta_c, pt.xi - ctx.xi_c
    return float(
        0.5 * np.sum((pt.theta - ctx.problem.Y) ** 2)
        + 0.5 * s * (neg @ neg)
        + 0.5 * s * np.sum(r * r)
        - (ctx.u @ ctx.u) / (2 * s)
        - np.sum(ctx.v * ctx.v) / (2 * s)
        + np.sum(ctx.h1 * dt * dt) / (2 * s)
        + np.sum(ctx.h2 * dx * dx) / (2 * s)
    )


def gradient(ctx: SubproblemContext, pt: SubproblemPoint) -> np.ndarray:
    s = ctx.sigma
    at, bt = ctx.active.adjoint(ctx.problem, pt.neg)
    g_theta = s * at + pt.theta - ctx.problem.Y + ctx.h1 * (pt.theta - ctx.theta_c) / s
    g_xi = s * bt + s * (pt.w - pt.proj) + ctx.h2 * (pt.xi - ctx.xi_c) / s
    return pack(g_theta, g_xi)


def phi_and_grad(ctx: SubproblemContext, theta, xi) -> tuple[float, np.ndarray]:
    n, d = ctx.problem.n, ctx.problem.d
    pt = evaluate_point(ctx, np.asarray(theta, float), np.asarray(xi, float).reshape(n, d), jacobian=False)
    return phi_value(ctx, pt), gradient(ctx, pt)


@dataclass
class ActiveMask:
    """w_bar = 1 exactly where the projection onto R_+ is inactive (z < 0)."""

    bar: np.ndarray           # bool over I
    W: sparse.csr_matrix      # the same rows as an n x n 0/1 matrix, diagonal dropped

    @property
    def count(self) -> int:
        return int(self.W.nnz)


def active_mask(ctx: SubproblemContext, pt: SubproblemPoint) -> ActiveMask:
    bar = pt.z < 0
    return ActiveMask(bar, ctx.active.select(bar))


class HessianOperator:
    """sigma [A B]^T Diag(w_bar) [A B] + Diag(I + H1/sigma, sigma(I - Q) + H2/sigma).

    Built from per-block quantities of the mask matrix W: row and column counts,
    W X, b_i = w_bar_(i)^T B_i and G_i = B_i^T Diag(w_bar_(i)) B_i.
    """

    def __init__(self, ctx: SubproblemContext, mask: ActiveMask, jac: JacobianBlocks):
        self.ctx, self.jac = ctx, jac
        problem = ctx.problem
        P = problem.points
        self.n, self.d = problem.n, problem.d
        W = mask.W
        self.W, self.WT = W, W.T.tocsr()
        self.rows = np.asarray(W.sum(axis=1)).ravel()
        self.cols = np.asarray(W.sum(axis=0)).ravel()
        WP = np.asarray(W @ P)
        self.b = self.rows[:, None] * P - WP
        n, d = self.n, self.d
        WPP = np.asarray(W @ problem.point_outer).reshape(n, d, d)
        self.G = (
            self.rows[:, None, None] * np.einsum("ni,nj->nij", P, P)
            - np.einsum("ni,nj->nij", P, WP)
            - np.einsum("ni,nj->nij", WP, P)
            + WPP
        )
        self.size = n * (d + 1)

    def matvec(self, x: np.ndarray) -> np.ndarray:
        ctx, s, P = self.ctx, self.ctx.sigma, self.ctx.problem.points
        dt, dX = unpack(np.asarray(x, dtype=float).ravel(), self.n, self.d)
        Wdt, WTdt = self.W @ dt, self.WT @ dt
        a = _rowdot(P, dX)
        WTdX = np.asarray(self.WT @ dX)
        out_t = s * (
            (self.cols + self.rows) * dt - WTdt - Wdt + self.WT @ a - _rowdot(P, WTdX) - _rowdot(self.b, dX)
        ) + (1.0 + ctx.h1 / s) * dt
        out_x = s * (
            P * Wdt[:, None] - np.asarray(self.W @ (dt[:, None] * P)) - dt[:, None] * self.b
            + np.einsum("nij,nj->ni", self.G, dX)
        ) + s * (dX - self.jac.matvec(dX)) + ctx.h2 * dX / s
        return pack(out_t, out_x)

    def diagonal(self) -> np.ndarray:
        s, ctx = self.ctx.sigma, self.ctx
        dt = s * (self.cols + self.rows) + 1.0 + ctx.h1 / s
        dX = s * np.einsum("nii->ni", self.G) + s * (1.0 - self.jac.diagonal()) + ctx.h2 / s
        return pack(dt, dX)

    def dense(self) -> np.ndarray:
        s, ctx, P = self.ctx.sigma, self.ctx, self.ctx.problem.points
        n, d = self.n, self.d
        Wd = self.W.toarray()
        H = np.zeros((self.size, self.size))
        H[:n, :n] = s * (np.diag(self.cols + self.rows) - Wd - Wd.T) + np.diag(1.0 + ctx.h1 / s)
        C = Wd.T[:, :, None] * (P[None, :, :] - P[:, None, :])
        C[np.arange(n), np.arange(n)] -= self.b
        C = s * C.reshape(n, n * d)
        H[:n, n:] = C
        H[n:, :n] = C.T
        blocks = s * self.G + s * (np.eye(d)[None] - self.jac.dense()) + np.eye(d)[None] * (ctx.h2 / s)[:, None, :]
        for i in range(n):
            lo = n + i * d
            H[lo:lo + d, lo:lo + d] = blocks[i]
        return H


@dataclass
class NewtonStep:
    direction: np.ndarray
    residual_norm: float
    degraded: bool
    method: str


def newton_direction(
    ctx: SubproblemContext, grad: np.ndarray, mask: ActiveMask, jac: JacobianBlocks, config: SSNConfig = SSNConfig()
) -> NewtonStep:
    """Solve H d = -grad to the residual target min(gamma_bar, ||grad||^(1+tau))."""
    H = HessianOperator(ctx, mask, jac)
    target = min(config.gamma_bar, float(np.linalg.norm(grad)) ** (1 + config.tau))
    degraded = False
    if H.size <= config.direct_threshold:
        M = H.dense()
        method = "direct"
        try:
            direction = cho_solve(cho_factor(M), -grad)
        except LinAlgError:
            direction = solve(M, -grad, assume_a="sym")
            degraded = True
    else:
        diag = H.diagonal()
        op = LinearOperator((H.size, H.size), matvec=H.matvec, dtype=float)
        pre = LinearOperator((H.size, H.size), matvec=lambda r: r / diag, dtype=float)
        direction, info = cg(op, -grad, rtol=0.0, atol=target, maxiter=config.cg_cap_factor * H.size, M=pre)
        degraded = info != 0
        method = "cg"
    residual = float(np.linalg.norm(H.matvec(direction) + grad))
    if residual > target and method == "cg":
        degraded = True
    return NewtonStep(direction, residual, degraded, method)


def armijo_linesearch(
    ctx: SubproblemContext, pt: SubproblemPoint, direction: np.ndarray, grad: np.ndarray, phi0: float,
    config: SSNConfig = SSNConfig(),
) -> tuple[float, SubproblemPoint, float]:
    """Largest delta^m with Phi(x + delta^m d) <= Phi(x) + mu delta^m <grad, d>."""
    n, d = ctx.problem.n, ctx.problem.d
    slope = float(grad @ direction)
    dt, dX = unpack(direction, n, d)
    # rounding floor for values that no longer change in the last digits
    slack = 8 * np.finfo(float).eps * (1.0 + abs(phi0))
    alpha = 1.0
    for m in range(config.max_backtracks + 1):
        trial = evaluate_point(ctx, pt.theta + alpha * dt, pt.xi + alpha * dX)
        value = phi_value(ctx, trial)
        if value <= phi0 + config.mu * alpha * slope + slack:
            return alpha, trial, value
        alpha *= config.delta
    raise LineSearchError(f"no sufficient decrease after {config.max_backtracks} backtracks")


@dataclass
class SSNResult:
    theta: np.ndarray
    xi: np.ndarray
    point: SubproblemPoint
    iterations: int
    grad_norm: float
    degraded: bool


StopRule = Callable[[SubproblemPoint, float], bool]


def ssn_solve(
    ctx: SubproblemContext,
    start: tuple[np.ndarray, np.ndarray],
    stop_rule: StopRule,
    config: SSNConfig = SSNConfig(),
) -> SSNResult:
    """Newton iterations from `start` until stop_rule(point, ||grad||) holds."""
    pt = evaluate_point(ctx, np.array(start[0], dtype=float), np.array(start[1], dtype=float))
    value = phi_value(ctx, pt)
    grad = gradient(ctx, pt)
    gnorm = float(np.linalg.norm(grad))
    degraded = False
    if stop_rule(pt, gnorm):
        return SSNResult(pt.theta, pt.xi, pt, 0, gnorm, degraded)
    for it in range(1, config.max_iter + 1):
        mask = active_mask(ctx, pt)
        step = newton_direction(ctx, grad, mask, pt.jac, config)
        degraded = degraded or step.degraded
        try:
            alpha, pt, value = armijo_linesearch(ctx, pt, step.direction, grad, value, config)
        except LineSearchError as exc:
            exc.state = SSNResult(pt.theta, pt.xi, pt, it, gnorm, True)
            raise
        grad = gradient(ctx, pt)
        gnorm = float(np.linalg.norm(grad))
        log.debug("ssn_step", extra={"it": it, "phi": value, "grad_norm": gnorm, "alpha": alpha,
                                     "active": mask.count, "solve": step.method, "residual": step.residual_norm})
        if stop_rule(pt, gnorm):
            return SSNResult(pt.theta, pt.xi, pt, it, gnorm, degraded)
    raise IterationLimitError(
        f"semismooth Newton did not meet its stopping rule in {config.max_iter} iterations",
        state=SSNResult(pt.theta, pt.xi, pt, config.max_iter, gnorm, True),
    )
