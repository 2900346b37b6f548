"""Symmetric Gauss-Seidel ADMM on the splitting xi = y, A theta + B xi = eta >= 0."""
from __future__ import annotations

import logging
import math
import time
import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from shapereg.config import ADMMConfig
from shapereg.errors import IterationLimitError, ShapeError
from shapereg.model import MaxAffineModel
from shapereg.problem import ActiveSet, ProblemInstance
from shapereg.proxalm import KKTReport, SolveResult, SolverState, Trace, kkt_residual
from shapereg.shapes import project_rows

log = logging.getLogger("shapereg.admm")

_SIGMA_MIN, _SIGMA_MAX = 1e-6, 1e6


def theta_solve(rhs, sigma: float, n: int | None = None) -> np.ndarray:
    """(I + sigma A^T A)^{-1} rhs over all n^2 rows, via (I + 2 sigma e e^T)/(1 + 2 sigma n)."""
    rhs = np.asarray(rhs, dtype=float)
    n = rhs.size if n is None else n
    return (rhs + 2 * sigma * rhs.sum()) / (1 + 2 * sigma * n)


class ThetaSolver:
    """theta-update operator; conjugate gradients on I + sigma A_I^T A_I for a reduced row set."""

    def __init__(self, problem: ProblemInstance, active: ActiveSet):
        self.problem, self.active = problem, active
        self._zeros = np.zeros((problem.n, problem.d))

    def __call__(self, rhs: np.ndarray, sigma: float, x0: np.ndarray | None = None) -> np.ndarray:
        if self.active.is_full:
            return theta_solve(rhs, sigma, self.problem.n)
        n = self.problem.n

        def mv(t):
            at, _ = self.active.adjoint(self.problem, self.active.values(self.problem, t, self._zeros))
            return t + sigma * at

        op = LinearOperator((n, n), matvec=mv, dtype=float)
        tol = 1e-12 * max(1.0, float(np.linalg.norm(rhs)))
        out, info = cg(op, rhs, x0=x0, rtol=0.0, atol=tol, maxiter=10 * n)
        if info != 0:
            log.debug("theta_cg_cap", extra={"info": info})
        return out


class XiSolver:
    """Blockwise (I + B_i^T B_i)^{-1} with the d x d inverses formed once from Cholesky factors."""

    def __init__(self, problem: ProblemInstance, active: ActiveSet):
        G = problem.gram_blocks(active)
        d = problem.d
        M = G + np.eye(d)[None]
        Linv = np.linalg.inv(np.linalg.cholesky(M))
        self.inverse = np.einsum("nki,nkj->nij", Linv, Linv)

    def __call__(self, rhs: np.ndarray) -> np.ndarray:
        return np.einsum("nij,nj->ni", self.inverse, rhs)


def xi_solve(problem: ProblemInstance, rhs, active: ActiveSet | None = None) -> np.ndarray:
    active = active if active is not None else ActiveSet.full(problem.n)
    return XiSolver(problem, active)(np.asarray(rhs, dtype=float).reshape(problem.n, problem.d))


def balance_sigma(sigma: float, report: KKTReport, config: ADMMConfig) -> float:
    """sigma * sqrt(feasibility / stationarity) once the two residual groups drift apart by rescale_ratio."""
    feas = max(report.comp_res, report.prox_res)
    stat = max(report.primal_res, report.dual_res)
    if feas <= 0.0 or stat <= 0.0:
        return sigma
    ratio = feas / stat
    if 1 / config.rescale_ratio <= ratio <= config.rescale_ratio:
        return sigma
    new = min(max(sigma * math.sqrt(ratio), _SIGMA_MIN), _SIGMA_MAX)
    log.debug("admm_rescale", extra={"sigma": new, "ratio": ratio})
    return new


def admm_solve(
    problem: ProblemInstance,
    config: ADMMConfig = ADMMConfig(),
    *,
    start: SolverState | None = None,
    active: ActiveSet | None = None,
    trace: Trace | None = None,
) -> SolveResult:
    """sGS-ADMM sweeps (theta-hat, xi, theta) until R_KKT over the active rows <= kkt_tol."""
    t0 = time.perf_counter()
    active = active if active is not None else (start.active if start is not None else ActiveSet.full(problem.n))
    if active.n != problem.n:
        raise ShapeError("active set does not match the instance")
    shape, Y = problem.shape, problem.Y
    init = start.on(active) if start is not None else SolverState.initial(problem, active, config.sigma0)
    theta, xi, u, v = init.theta.copy(), init.xi.copy(), init.u.copy(), init.v.copy()
    sigma = config.sigma0 if start is None else init.sigma
    sigma = min(max(sigma, _SIGMA_MIN), _SIGMA_MAX)
    tau = config.tau_step

    theta_op = ThetaSolver(problem, active)
    xi_op = XiSolver(problem, active)
    zeros_t, zeros_x = np.zeros(problem.n), np.zeros((problem.n, problem.d))

    def values(t, x):
        return active.values(problem, t, x)

    y = project_rows(shape, xi)
    eta = np.maximum(values(theta, xi), 0.0)
    kw = dict(full=False, block_count=config.block_count, threads=config.threads)

    def state_of(it: int) -> SolverState:
        return SolverState(theta, xi, u, v, sigma, active, outer=it, inner=0)

    report = kkt_residual(problem, state_of(0), **kw)
    it = 0
    while report.kkt > config.kkt_tol:
        if it >= config.max_iter:
            report = report.model_copy(update={"seconds": time.perf_counter() - t0})
            raise IterationLimitError(
                f"sGS-ADMM reached {config.max_iter} iterations (R_KKT={report.kkt:.3e})",
                state=state_of(it), report=report,
            )
        it += 1

        # y and eta blocks
        y = project_rows(shape, xi - v / sigma)
        Bxi = values(zeros_t, xi)
        eta = np.maximum(values(theta, zeros_x) + Bxi - u / sigma, 0.0)

        # backward-forward sweep over (theta, xi)
        at, _ = active.adjoint(problem, Bxi - eta - u / sigma)
        theta_hat = theta_op(Y - sigma * at, sigma, theta)
        _, bt = active.adjoint(problem, values(theta_hat, zeros_x) - eta - u / sigma)
        xi = xi_op(y + v / sigma - bt)
        Bxi = values(zeros_t, xi)
        at, _ = active.adjoint(problem, Bxi - eta - u / sigma)
        theta = theta_op(Y - sigma * at, sigma, theta_hat)

        # multipliers
        r_eta = values(theta, zeros_x) + Bxi - eta
        r_y = xi - y
        u = u - tau * sigma * r_eta
        v = v - tau * sigma * r_y

        rescale_now = config.rescale and it % config.rescale_every == 0
        if it % config.kkt_every == 0 or rescale_now:
            report = kkt_residual(problem, state_of(it), **kw)
            if rescale_now and report.kkt > config.kkt_tol:
                sigma = balance_sigma(sigma, report, config)
            log.info("admm_check", extra={"it": it, "sigma": sigma, "kkt": report.kkt, "pobj": report.pobj})
            if trace is not None:
                trace({"engine": "admm", "iteration": it, "sigma": sigma, "kkt": report.kkt,
                       "pobj": report.pobj, "dobj": report.dobj, "rows": active.size})

    report = report.model_copy(update={"seconds": time.perf_counter() - t0, "outer": it})
    state = state_of(it)
    return SolveResult(state, report, MaxAffineModel.from_state(problem, state, report, solver="admm"))
